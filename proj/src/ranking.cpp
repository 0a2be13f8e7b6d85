#include "diffex/ranking.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace diffex::ranking {

std::vector<std::string> RankingConfig::validate(int K) const {
  std::vector<std::string> errs;
  if (!(alpha_rank > 0.0)) errs.push_back("ranking.alpha_rank: must be > 0");
  if (!(tau_rank > 0.0 && tau_rank < 1.0)) errs.push_back("ranking.tau_rank: must be in (0,1)");
  if (!(per_image_delta > 0.0 && per_image_delta < 1.0))
    errs.push_back("ranking.per_image_delta: must be in (0,1)");
  if (n_max < 1) errs.push_back("ranking.n_max: must be >= 1");
  if (K > 0 && n_max > 2 * K) errs.push_back("ranking.n_max: must be <= 2*K");
  if (target_class != 0 && target_class != 1) errs.push_back("ranking.target_class: must be 0 or 1");
  if (pool_size < 1) errs.push_back("ranking.pool_size: must be >= 1");
  if (n_steps < 1) errs.push_back("ranking.n_steps: must be >= 1");
  return errs;
}

std::vector<RankedDirection> rank_directions(int n_candidates, const std::vector<std::string>& pool_ids,
                                             const DeltaOracle& delta, const RankingConfig& cfg) {
  std::vector<RankedDirection> out;
  const std::size_t n = pool_ids.size();
  // deltas never change between rounds, so each (c, i) is scored once
  std::vector<std::vector<double>> cache(static_cast<std::size_t>(n_candidates));
  std::vector<char> scored(static_cast<std::size_t>(n_candidates) * n, 0);
  auto get = [&](int c, std::size_t i) {
    auto& row = cache[static_cast<std::size_t>(c)];
    if (row.empty()) row.assign(n, 0.0);
    const std::size_t slot = static_cast<std::size_t>(c) * n + i;
    if (!scored[slot]) {
      row[i] = delta(c, i);
      scored[slot] = 1;
    }
    return row[i];
  };

  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  std::vector<char> used(static_cast<std::size_t>(n_candidates), 0);

  while (!pool.empty() && static_cast<int>(out.size()) < cfg.n_max) {
    int best = -1;
    double best_mean = 0.0;
    for (int c = 0; c < n_candidates; ++c) {
      if (used[static_cast<std::size_t>(c)]) continue;
      double sum = 0.0;
      for (std::size_t i : pool) sum += get(c, i);
      const double mean = sum / static_cast<double>(pool.size());
      if (best < 0 || mean > best_mean) best = c, best_mean = mean;
    }
    if (best < 0 || !(best_mean > cfg.tau_rank)) break;
    used[static_cast<std::size_t>(best)] = 1;

    RankedDirection r;
    const Candidate cand = candidate_at(best);
    r.k = cand.k;
    r.sign = cand.sign;
    r.alpha = cfg.alpha_rank;
    r.mean_delta = best_mean;
    r.pool_before = pool.size();
    std::vector<std::size_t> keep;
    for (std::size_t i : pool) {
      if (get(best, i) > cfg.per_image_delta)
        r.explained_ids.push_back(pool_ids[i]);
      else
        keep.push_back(i);
    }
    pool = std::move(keep);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<double> score_shift(CounterfactualEngine& engine, std::size_t pool_size, int k, int sign,
                                double alpha, int target_class) {
  if (pool_size == 0) throw InputError("score_shift: empty pool");
  std::vector<double> d(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i)
    d[i] = engine.shifted_prob(i, k, sign * alpha, target_class) - engine.base_prob(i, target_class);
  return d;
}

std::vector<RankedDirection> rank_directions(CounterfactualEngine& engine,
                                             const std::vector<std::string>& pool_ids,
                                             const RankingConfig& cfg) {
  auto oracle = [&](int c, std::size_t i) {
    const Candidate cand = candidate_at(c);
    return engine.shifted_prob(i, cand.k, cand.sign * cfg.alpha_rank, cfg.target_class) -
           engine.base_prob(i, cfg.target_class);
  };
  return rank_directions(2 * engine.num_directions(), pool_ids, oracle, cfg);
}

ModelEngine::ModelEngine(const semantic::SemanticAE& ae, const classifier::ClassifierModel& cls,
                         const directions::DirectionBank<float>& bank, std::vector<const Image*> pool,
                         int n_steps)
    : ae_(ae), cls_(cls), bank_(bank), pool_(std::move(pool)), n_steps_(n_steps), cache_(pool_.size()) {}

const ModelEngine::Inverted& ModelEngine::prepared(std::size_t image) {
  if (image >= pool_.size()) throw InputError("engine: image index out of range");
  auto& slot = cache_[image];
  if (!slot) {
    Inverted inv;
    inv.z_sem = ae_.semantic_code(*pool_[image], cls_);
    inv.x_T = ae_.invert(*pool_[image], inv.z_sem, n_steps_);
    inv.probs = cls_.predict_probs(*pool_[image]);
    slot = std::move(inv);
  }
  return *slot;
}

double ModelEngine::base_prob(std::size_t image, int target_class) {
  return prepared(image).probs(target_class, 0);
}

Image ModelEngine::shifted_image(std::size_t image, int k, double signed_alpha) {
  const Inverted& inv = prepared(image);
  const Vec<float> z = directions::apply_direction(bank_, k, inv.z_sem, signed_alpha);
  return ae_.generate(inv.x_T, z, n_steps_);
}

double ModelEngine::shifted_prob(std::size_t image, int k, double signed_alpha, int target_class) {
  return cls_.predict_probs(shifted_image(image, k, signed_alpha))(target_class, 0);
}

std::vector<const datagen::LabeledImage*> transition_pool(const datagen::DatasetSplit& split,
                                                          int source_class, int pool_size) {
  std::vector<const datagen::LabeledImage*> pool;
  for (const auto& item : split.test)
    if (item.label == source_class && static_cast<int>(pool.size()) < pool_size) pool.push_back(&item);
  return pool;
}

RankingReport rank_all(const semantic::SemanticAE& ae, const classifier::ClassifierModel& cls,
                       const directions::DirectionBank<float>& bank, const datagen::DatasetSplit& split,
                       const RankingConfig& cfg) {
  if (auto errs = cfg.validate(bank.K()); !errs.empty()) throw InputError(errs.front());
  RankingReport report;
  report.config = cfg;
  for (int target : {cfg.target_class, 1 - cfg.target_class}) {
    Transition tr;
    tr.target_class = target;
    tr.source_class = 1 - target;
    const auto items = transition_pool(split, tr.source_class, cfg.pool_size);
    std::vector<const Image*> images;
    for (const auto* it : items) {
      images.push_back(&it->image);
      tr.pool_ids.push_back(it->id);
    }
    if (!images.empty()) {
      ModelEngine engine(ae, cls, bank, images, cfg.n_steps);
      RankingConfig c = cfg;
      c.target_class = target;
      tr.selected = rank_directions(engine, tr.pool_ids, c);
    }
    report.transitions.push_back(std::move(tr));
  }
  return report;
}

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string join(const std::vector<std::string>& ids) {
  std::string s;
  for (const auto& id : ids) s += (s.empty() ? "" : " ") + id;
  return s;
}

}  // namespace

std::string format_report(const RankingReport& r) {
  std::ostringstream os;
  const auto& c = r.config;
  os << "# diffex-ranking v1\n"
     << "config_hash = " << r.config_hash << "\n"
     << "alpha_rank = " << num(c.alpha_rank) << "\n"
     << "tau_rank = " << num(c.tau_rank) << "\n"
     << "per_image_delta = " << num(c.per_image_delta) << "\n"
     << "n_max = " << c.n_max << "\n"
     << "target_class = " << c.target_class << "\n"
     << "pool_size = " << c.pool_size << "\n"
     << "n_steps = " << c.n_steps << "\n";
  for (const auto& tr : r.transitions) {
    os << "\n[transition " << tr.source_class << " -> " << tr.target_class << "]\n"
       << "pool = " << join(tr.pool_ids) << "\n"
       << "selected = " << tr.selected.size() << "\n";
    for (std::size_t i = 0; i < tr.selected.size(); ++i) {
      const auto& s = tr.selected[i];
      os << "rank " << i + 1 << ": direction=" << s.k << " sign=" << (s.sign > 0 ? '+' : '-')
         << " alpha=" << num(s.alpha) << " mean_delta=" << num(s.mean_delta)
         << " pool_before=" << s.pool_before << " explained=" << s.explained_ids.size() << "\n"
         << "explained_ids = " << join(s.explained_ids) << "\n";
    }
  }
  return os.str();
}

RankingReport parse_report(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "# diffex-ranking v1")
    throw InputError("ranking report: missing '# diffex-ranking v1' header");
  RankingReport r;
  auto split_ids = [](const std::string& s) {
    std::istringstream is(s);
    std::vector<std::string> ids;
    for (std::string id; is >> id;) ids.push_back(id);
    return ids;
  };
  auto value_of = [](const std::string& l) {
    const auto eq = l.find(" = ");
    return eq == std::string::npos ? std::string() : l.substr(eq + 3);
  };
  Transition* tr = nullptr;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("[transition ", 0) == 0) {
      r.transitions.emplace_back();
      tr = &r.transitions.back();
      if (std::sscanf(line.c_str(), "[transition %d -> %d]", &tr->source_class, &tr->target_class) != 2)
        throw InputError("ranking report: bad transition line: " + line);
      continue;
    }
    if (line.rfind("rank ", 0) == 0) {
      if (!tr) throw InputError("ranking report: rank line outside a transition");
      RankedDirection d;
      int idx = 0;
      char sign = '+';
      std::size_t before = 0, explained = 0;
      if (std::sscanf(line.c_str(), "rank %d: direction=%d sign=%c alpha=%lf mean_delta=%lf pool_before=%zu explained=%zu",
                      &idx, &d.k, &sign, &d.alpha, &d.mean_delta, &before, &explained) != 7)
        throw InputError("ranking report: bad rank line: " + line);
      d.sign = sign == '-' ? -1 : 1;
      d.pool_before = before;
      tr->selected.push_back(std::move(d));
      continue;
    }
    const std::string key = line.substr(0, line.find(" = "));
    const std::string val = value_of(line);
    if (tr) {
      if (key == "pool") tr->pool_ids = split_ids(val);
      else if (key == "explained_ids" && !tr->selected.empty()) tr->selected.back().explained_ids = split_ids(val);
      continue;
    }
    auto& c = r.config;
    if (key == "config_hash") r.config_hash = std::stoull(val);
    else if (key == "alpha_rank") c.alpha_rank = std::stod(val);
    else if (key == "tau_rank") c.tau_rank = std::stod(val);
    else if (key == "per_image_delta") c.per_image_delta = std::stod(val);
    else if (key == "n_max") c.n_max = std::stoi(val);
    else if (key == "target_class") c.target_class = std::stoi(val);
    else if (key == "pool_size") c.pool_size = std::stoi(val);
    else if (key == "n_steps") c.n_steps = std::stoi(val);
  }
  return r;
}

}  // namespace diffex::ranking
