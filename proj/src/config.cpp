#include "diffex/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "diffex/checkpoint.hpp"
#include "diffex/diffusion.hpp"

namespace diffex::config {

using Json = nlohmann::ordered_json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Rule {
  double lo = -kInf;
  double hi = kInf;
  bool lo_open = false;
  bool hi_open = false;

  bool ok(double v) const {
    return std::isfinite(v) && (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
  }
  std::string text() const {
    std::ostringstream os;
    os << (lo_open ? "(" : "[") << lo << ", " << hi << (hi_open ? ")" : "]");
    return os.str();
  }
};

Rule closed(double lo, double hi = kInf) { return {lo, hi, false, false}; }
Rule open_lo(double lo, double hi = kInf) { return {lo, hi, true, false}; }
Rule open(double lo, double hi) { return {lo, hi, true, true}; }

// Calls v(key, field, rule) for every schema field in document order.
template <typename C, typename V>
void visit(C& c, V&& v) {
  v("schema_version", c.schema_version, closed(kSchemaVersion, kSchemaVersion));
  v("seed", c.seed, closed(0));

  auto& d = c.datagen;
  v("datagen.n", d.n, closed(10, 1e6));
  v("datagen.side", d.side, closed(16, 1024));
  v("datagen.train_frac", d.train_frac, open(0, 1));
  v("datagen.val_frac", d.val_frac, closed(0, 1));
  v("datagen.test_frac", d.test_frac, open(0, 1));
  v("datagen.max_nuclei", d.max_nuclei, closed(1, 64));
  v("datagen.noise_amplitude", d.noise_amplitude, closed(0, 0.5));

  auto& k = c.classifier;
  v("classifier.width", k.width, closed(1, 256));
  v("classifier.feature_dim", k.feature_dim, closed(2, 1024));
  v("classifier.epochs", k.epochs, closed(1, 1000));
  v("classifier.batch_size", k.batch_size, closed(1, 4096));
  v("classifier.lr", k.lr, open_lo(0, 1));

  auto& s = c.sdae;
  v("sdae.T", s.T, closed(1, 100000));
  v("sdae.beta_start", s.beta_start, open(0, 1));
  v("sdae.beta_end", s.beta_end, open(0, 1));
  v("sdae.d_z", s.d_z, closed(1, 1024));
  v("sdae.lambda1", s.lambda1, closed(0, 1e3));
  v("sdae.ddim_steps", s.ddim_steps, closed(1, 100000));
  v("sdae.epochs", s.epochs, closed(1, 1000));
  v("sdae.batch_size", s.batch_size, closed(1, 4096));
  v("sdae.lr", s.lr, open_lo(0, 1));
  v("sdae.base_channels", s.base_channels, closed(1, 256));
  v("sdae.emb_dim", s.emb_dim, closed(2, 1024));
  v("sdae.ema_decay", s.ema_decay, {0, 1, false, true});
  v("sdae.x_prime", s.x_prime, Rule{});
  v("sdae.x_prime_steps", s.x_prime_steps, closed(1, 1000));
  v("sdae.invert_refine", s.invert_refine, closed(0, 100));
  v("sdae.code_noise", s.code_noise, closed(0, 100));

  auto& r = c.directions;
  v("directions.K", r.K, closed(2, 64));
  v("directions.tau", r.tau, open_lo(0, 100));
  v("directions.lambda2", r.lambda2, closed(0, 1e3));
  v("directions.alpha_min", r.alpha_min, open_lo(0, 100));
  v("directions.alpha_max", r.alpha_max, open_lo(0, 100));
  v("directions.d_f", r.d_f, closed(1, 4096));
  v("directions.hidden", r.hidden, closed(1, 4096));
  v("directions.epochs", r.epochs, closed(1, 10000));
  v("directions.batch_size", r.batch_size, closed(2, 4096));
  v("directions.lr", r.lr, open_lo(0, 1));
  v("directions.encoder_only", r.encoder_only, Rule{});

  auto& g = c.ranking;
  v("ranking.alpha_rank", g.alpha_rank, open_lo(0, 100));
  v("ranking.tau_rank", g.tau_rank, open(0, 1));
  v("ranking.per_image_delta", g.per_image_delta, open(0, 1));
  v("ranking.n_max", g.n_max, closed(1, 128));
  v("ranking.target_class", g.target_class, closed(0, 1));
  v("ranking.pool_size", g.pool_size, closed(1, 100000));
  v("ranking.n_steps", g.n_steps, closed(1, 100000));

  auto& e = c.explain;
  v("explain.alphas", e.alphas, closed(0, 100));
  v("explain.n_examples", e.n_examples, closed(1, 64));
  v("explain.metric_samples", e.metric_samples, closed(2, 100000));
  v("explain.n_steps", e.n_steps, closed(1, 100000));
}

std::pair<std::string, std::string> split_key(const std::string& key) {
  const auto dot = key.find('.');
  if (dot == std::string::npos) return {"", key};
  return {key.substr(0, dot), key.substr(dot + 1)};
}

const Json* lookup(const Json& doc, const std::string& key) {
  const auto [section, name] = split_key(key);
  const Json* node = &doc;
  if (!section.empty()) {
    auto it = doc.find(section);
    if (it == doc.end() || !it->is_object()) return nullptr;
    node = &*it;
  }
  auto it = node->find(name);
  return it == node->end() ? nullptr : &*it;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

struct Reader {
  const Json& doc;
  std::vector<std::string>& errors;

  bool present(const char* key, const Json*& j) {
    j = lookup(doc, key);
    if (j) return true;
    // schema_version and seed have no default
    if (std::string(key) == "schema_version" || std::string(key) == "seed")
      errors.push_back(std::string(key) + ": missing required field");
    return false;
  }

  void operator()(const char* key, int& field, const Rule& rule) {
    const Json* j;
    if (!present(key, j)) return;
    if (!j->is_number_integer()) {
      errors.push_back(std::string(key) + ": expected an integer");
      return;
    }
    const auto v = j->get<std::int64_t>();
    if (!rule.ok(static_cast<double>(v))) {
      errors.push_back(std::string(key) + ": value " + std::to_string(v) + " outside " + rule.text());
      return;
    }
    field = static_cast<int>(v);
  }
  void operator()(const char* key, std::uint64_t& field, const Rule&) {
    const Json* j;
    if (!present(key, j)) return;
    if (!j->is_number_unsigned() && !(j->is_number_integer() && j->get<std::int64_t>() >= 0)) {
      errors.push_back(std::string(key) + ": expected a non-negative integer");
      return;
    }
    field = j->get<std::uint64_t>();
  }
  void operator()(const char* key, double& field, const Rule& rule) {
    const Json* j;
    if (!present(key, j)) return;
    if (!j->is_number()) {
      errors.push_back(std::string(key) + ": expected a number");
      return;
    }
    const double v = j->get<double>();
    if (!rule.ok(v)) {
      errors.push_back(std::string(key) + ": value " + fmt(v) + " outside " + rule.text());
      return;
    }
    field = v;
  }
  void operator()(const char* key, bool& field, const Rule&) {
    const Json* j;
    if (!present(key, j)) return;
    if (!j->is_boolean()) {
      errors.push_back(std::string(key) + ": expected true or false");
      return;
    }
    field = j->get<bool>();
  }
  void operator()(const char* key, semantic::XPrimeMode& field, const Rule&) {
    const Json* j;
    if (!present(key, j)) return;
    const std::string v = j->is_string() ? j->get<std::string>() : "";
    if (v == "one_step") field = semantic::XPrimeMode::kOneStep;
    else if (v == "full_sampling") field = semantic::XPrimeMode::kFullSampling;
    else errors.push_back(std::string(key) + ": expected \"one_step\" or \"full_sampling\"");
  }
  void operator()(const char* key, std::vector<double>& field, const Rule& rule) {
    const Json* j;
    if (!present(key, j)) return;
    if (!j->is_array() || j->empty()) {
      errors.push_back(std::string(key) + ": expected a non-empty array of numbers");
      return;
    }
    std::vector<double> out;
    for (std::size_t i = 0; i < j->size(); ++i) {
      const Json& e = (*j)[i];
      if (!e.is_number() || !rule.ok(e.get<double>())) {
        errors.push_back(std::string(key) + "[" + std::to_string(i) + "]: expected a number in " + rule.text());
        return;
      }
      out.push_back(e.get<double>());
    }
    field = std::move(out);
  }
};

struct Writer {
  Json& doc;
  template <typename T>
  void operator()(const char* key, const T& field, const Rule&) {
    const auto [section, name] = split_key(key);
    Json& node = section.empty() ? doc : doc[section];
    if constexpr (std::is_same_v<T, semantic::XPrimeMode>)
      node[name] = field == semantic::XPrimeMode::kOneStep ? "one_step" : "full_sampling";
    else
      node[name] = field;
  }
};

}  // namespace

ConfigError::ConfigError(std::vector<std::string> errors)
    : InputError([&] {
        std::string s = "invalid configuration:";
        for (const auto& e : errors) s += "\n  " + e;
        return s;
      }()),
      errors_(std::move(errors)) {}

std::vector<std::string> schema_keys() {
  std::vector<std::string> keys;
  ExperimentConfig c;
  visit(c, [&](const char* key, auto&, const Rule&) { keys.emplace_back(key); });
  return keys;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string suggest_key(const std::string& key) {
  std::string best;
  std::size_t best_d = std::numeric_limits<std::size_t>::max();
  std::set<std::string> candidates;
  for (const auto& k : schema_keys()) {
    candidates.insert(k);
    if (auto [section, name] = split_key(k); !section.empty()) candidates.insert(section);
  }
  for (const auto& k : candidates) {
    const std::size_t d = edit_distance(key, k);
    if (d < best_d) best_d = d, best = k;
  }
  // only offer a suggestion that is plausibly a typo
  return best_d <= std::max<std::size_t>(2, key.size() / 3) ? best : "";
}

std::vector<std::string> validate(const ExperimentConfig& c) {
  std::vector<std::string> errs;
  visit(c, [&](const char* key, const auto& field, const Rule& rule) {
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, int> || std::is_same_v<T, double>) {
      if (!rule.ok(static_cast<double>(field)))
        errs.push_back(std::string(key) + ": value " + fmt(static_cast<double>(field)) + " outside " + rule.text());
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      for (double v : field)
        if (!rule.ok(v)) errs.push_back(std::string(key) + ": value " + fmt(v) + " outside " + rule.text());
    }
  });
  for (const auto& e : c.datagen.validate()) errs.push_back("datagen: " + e);
  if (c.datagen.side % 8 != 0) errs.push_back("datagen.side: must be a multiple of 8");
  if (c.sdae.beta_start > c.sdae.beta_end) {
    errs.push_back("sdae.beta_start: must be <= sdae.beta_end");
  } else if (c.sdae.T >= 1 && c.sdae.beta_start > 0 && c.sdae.beta_end < 1) {
    try {
      diffusion::make_schedule(c.sdae.T, c.sdae.beta_start, c.sdae.beta_end);
    } catch (const InputError& e) {
      errs.push_back(std::string("sdae.beta_end: ") + e.what());
    }
  }
  if (c.sdae.ddim_steps > c.sdae.T) errs.push_back("sdae.ddim_steps: must be <= sdae.T");
  if (c.ranking.n_steps > c.sdae.T) errs.push_back("ranking.n_steps: must be <= sdae.T");
  if (c.explain.n_steps > c.sdae.T) errs.push_back("explain.n_steps: must be <= sdae.T");
  if (c.sdae.emb_dim % 2 != 0) errs.push_back("sdae.emb_dim: must be even");
  if (c.directions.alpha_min > c.directions.alpha_max)
    errs.push_back("directions.alpha_min: must be <= directions.alpha_max");
  if (c.ranking.n_max > 2 * c.directions.K) errs.push_back("ranking.n_max: must be <= 2 * directions.K");
  if (std::find(c.explain.alphas.begin(), c.explain.alphas.end(), 0.0) == c.explain.alphas.end())
    errs.push_back("explain.alphas: must include 0");
  return errs;
}

ExperimentConfig parse_config_text(const std::string& text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError({std::string("syntax: ") + e.what()});
  }
  if (!doc.is_object()) throw ConfigError({"top level: expected an object"});

  std::vector<std::string> errors;
  // closed schema: anything not visited is an error
  std::set<std::string> known, sections;
  for (const auto& k : schema_keys()) {
    known.insert(k);
    if (auto [section, name] = split_key(k); !section.empty()) sections.insert(section);
  }
  auto unknown = [&](const std::string& key) {
    std::string msg = key + ": unknown key";
    if (auto s = suggest_key(key); !s.empty()) msg += " (did you mean '" + s + "'?)";
    errors.push_back(msg);
  };
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (sections.count(it.key())) {
      if (!it->is_object()) {
        errors.push_back(it.key() + ": expected an object");
        continue;
      }
      for (auto jt = it->begin(); jt != it->end(); ++jt)
        if (!known.count(it.key() + "." + jt.key())) unknown(it.key() + "." + jt.key());
    } else if (!known.count(it.key())) {
      unknown(it.key());
    }
  }

  ExperimentConfig cfg;
  Reader reader{doc, errors};
  visit(cfg, reader);
  if (errors.empty())
    for (auto& e : validate(cfg)) errors.push_back(std::move(e));
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string to_json(const ExperimentConfig& cfg) {
  Json doc = Json::object();
  visit(cfg, Writer{doc});
  return doc.dump(2) + "\n";
}

void write_config(const std::filesystem::path& path, const ExperimentConfig& cfg) {
  atomic_write(path, to_json(cfg));
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return to_json(a) == to_json(b); }

std::uint64_t stage_hash(const ExperimentConfig& cfg, const std::string& stage) {
  static const std::map<std::string, std::vector<std::string>> deps{
      {"datagen", {"datagen"}},
      {"train-classifier", {"datagen", "classifier"}},
      {"train-sdae", {"datagen", "classifier", "sdae"}},
      {"discover", {"datagen", "classifier", "sdae", "directions"}},
      {"rank", {"datagen", "classifier", "sdae", "directions", "ranking"}},
      {"explain", {"datagen", "classifier", "sdae", "directions", "ranking", "explain"}},
      {"metrics", {"datagen", "classifier", "sdae", "explain"}},
  };
  auto it = deps.find(stage);
  if (it == deps.end()) throw InputError("unknown stage '" + stage + "'");
  Json full = Json::object();
  visit(cfg, Writer{full});
  Json sub = Json::object();
  sub["seed"] = cfg.seed;
  for (const auto& s : it->second) sub[s] = full[s];
  return fnv1a(stage + "\n" + sub.dump());
}

}  // namespace diffex::config
