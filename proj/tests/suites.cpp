#include "suites.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "diffex/classifier.hpp"
#include "diffex/denoiser.hpp"
#include "diffex/diffusion.hpp"
#include "diffex/metrics.hpp"
#include "diffex/ranking.hpp"
#include "diffex/semantic_ae.hpp"

namespace diffex::suites {

namespace {

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

Mat<double> random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double sd = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = sd * rng.normal();
  return m;
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return a.dot(b) / (a.norm() * b.norm()); }

}  // namespace

double contrastive_oracle(const Mat<double>& F, int N, int K, double tau) {
  auto f = [&](int i, int k) -> Eigen::VectorXd { return F.col(k * N + i); };
  double total = 0.0;
  int anchors = 0;
  for (int k = 0; k < K; ++k)
    for (int i = 0; i < N; ++i) {
      double num = 0.0, den = 0.0;
      for (int j = 0; j < N; ++j)
        if (j != i) num += std::exp(cosine(f(i, k), f(j, k)) / tau);
      for (int j = 0; j < N; ++j)
        for (int l = 0; l < K; ++l)
          if (l != k) den += std::exp(cosine(f(i, k), f(j, l)) / tau);
      total += -std::log(num / den);
      ++anchors;
    }
  return total / anchors;
}

double covariance_oracle(const std::vector<Mat<double>>& units) {
  const auto K = units.size();
  const auto d = units.front().rows(), N = units.front().cols();
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t l = 0; l < K; ++l) {
      if (k == l) continue;
      for (Eigen::Index a = 0; a < d; ++a)
        for (Eigen::Index b = 0; b < d; ++b) {
          double mk = 0, ml = 0;
          for (Eigen::Index n = 0; n < N; ++n) mk += units[k](a, n), ml += units[l](b, n);
          mk /= N, ml /= N;
          double c = 0;
          for (Eigen::Index n = 0; n < N; ++n) c += (units[k](a, n) - mk) * (units[l](b, n) - ml);
          c /= (N - 1);
          total += c * c;
        }
    }
  return total;
}

void jitter(nn::ParamSet<double>& ps, double sd, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [_, v] : ps.items())
    for (Eigen::Index i = 0; i < v->value.size(); ++i) v->value.data()[i] += sd * rng.normal();
}

GradReport grad_check(nn::ParamSet<double>& ps, const std::function<ad::Var<double>(ad::Tape<double>&)>& loss,
                      std::size_t max_entries, std::uint64_t seed, double rel_tol, double h) {
  ps.zero_grad();
  {
    ad::Tape<double> t;
    auto l = loss(t);
    t.backward(l);
  }
  // every (param, entry) slot, then a deterministic sample
  std::vector<std::pair<std::size_t, Eigen::Index>> slots;
  const auto& items = ps.items();
  for (std::size_t p = 0; p < items.size(); ++p)
    for (Eigen::Index i = 0; i < items[p].second->value.size(); ++i) slots.emplace_back(p, i);
  Rng rng(seed);
  for (std::size_t i = slots.size(); i > 1; --i)
    std::swap(slots[i - 1], slots[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  if (slots.size() > max_entries) slots.resize(max_entries);

  auto eval = [&] {
    ad::Tape<double> t(false);
    return loss(t)->value(0, 0);
  };
  GradReport rep;
  for (const auto& [p, i] : slots) {
    auto& v = items[p].second;
    const double analytic = v->grad.size() ? v->grad.data()[i] : 0.0;
    double& x = v->value.data()[i];
    const double saved = x;
    x = saved + h;
    const double up = eval();
    x = saved - h;
    const double down = eval();
    x = saved;
    const double numeric = (up - down) / (2 * h);
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    // tiny gradients are dominated by finite-difference round-off
    const double rel = scale < 1e-7 ? 0.0 : std::abs(analytic - numeric) / scale;
    rep.worst_rel = std::max(rep.worst_rel, rel);
    rep.failed += rel > rel_tol;
    rep.nonzero += scale >= 1e-7;
    ++rep.checked;
  }
  return rep;
}

Check analytic_oracles() {
  Check c;
  Rng rng(11);
  // contrastive loss vs quadruple loop
  double worst_c = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int N = static_cast<int>(rng.uniform_int(2, 4)), K = static_cast<int>(rng.uniform_int(2, 3));
    const int d = static_cast<int>(rng.uniform_int(1, 4));
    const double tau = rng.uniform(0.1, 1.0);
    directions::FeatureDivergence<double> div{random_mat(rng, d, N * K), N, K};
    const double got = directions::contrastive_loss(div, tau);
    worst_c = std::max(worst_c, std::abs(got - contrastive_oracle(div.f, N, K, tau)));
  }
  if (worst_c > 1e-5) c.fail("contrastive loss differs from loop oracle by " + num(worst_c));

  // covariance regularizer vs loop
  double worst_r = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int N = static_cast<int>(rng.uniform_int(2, 4)), K = static_cast<int>(rng.uniform_int(2, 3));
    const int d = static_cast<int>(rng.uniform_int(1, 4));
    directions::DirectionsConfig cfg;
    cfg.K = K;
    cfg.hidden = 3;
    cfg.d_f = 3;
    directions::DirectionBank<double> bank(d, 1, cfg, mix_seed(5, static_cast<std::uint64_t>(trial)));
    const Mat<double> z = random_mat(rng, d, N);
    ad::Tape<double> t(false);
    auto zv = t.constant(z);
    std::vector<Mat<double>> units;
    for (int k = 0; k < K; ++k) units.push_back(bank.unit_direction(t, k, zv)->value);
    worst_r = std::max(worst_r, std::abs(directions::covariance_reg(bank, z) - covariance_oracle(units)));
  }
  if (worst_r > 1e-6) c.fail("covariance regularizer differs from loop oracle by " + num(worst_r));

  // KL((0.9,0.1) || (0.5,0.5))
  Mat<double> pp(2, 1), p(2, 1);
  pp << 0.9, 0.1;
  p << 0.5, 0.5;
  const double kl = semantic::kl_divergence(pp, p);
  if (std::abs(kl - 0.368) > 1e-3) c.fail("KL hand case gave " + num(kl));

  // ||D_k(z, a) - z|| = |a|
  directions::DirectionsConfig cfg;
  cfg.K = 10;
  directions::DirectionBank<double> bank(66, 2, cfg, 3);
  double worst_n = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = static_cast<int>(rng.uniform_int(0, 9));
    const Vec<double> z = random_mat(rng, 66, 1);
    const double a = rng.uniform(-5.0, 5.0);
    const Vec<double> moved = directions::apply_direction(bank, k, z, a);
    worst_n = std::max(worst_n, std::abs((moved - z).norm() - std::abs(a)));
  }
  if (worst_n > 1e-6) c.fail("shift norm deviates from |alpha| by " + num(worst_n));
  if (c.pass)
    c.detail = "contrastive " + num(worst_c) + ", covariance " + num(worst_r) + ", KL " + num(kl) +
               ", shift norm " + num(worst_n);
  return c;
}

Check diffusion_mechanics() {
  Check c;
  Rng rng(21);
  int accepted = 0;
  for (int trial = 0; trial < 400; ++trial) {
    const int T = static_cast<int>(rng.uniform_int(1, 2000));
    // half the draws in the usual range, half anywhere in (0, 1)
    const double b0 = trial % 2 ? rng.uniform(1e-6, 1e-2) : rng.uniform(1e-9, 0.999);
    const double b1 = trial % 2 ? rng.uniform(b0, 0.05) : rng.uniform(b0, 0.999);
    diffusion::NoiseSchedule s;
    try {
      s = diffusion::make_schedule(T, b0, b1);
    } catch (const InputError&) {
      continue;  // not a valid schedule
    }
    ++accepted;
    for (int t = 1; t <= T; ++t)
      if (!(s.alpha_bar(t) < s.alpha_bar(t - 1))) {
        c.fail("alpha_bar not strictly decreasing at T=" + std::to_string(T) + " t=" + std::to_string(t));
        break;
      }
  }
  if (accepted < 200) c.fail("too few valid schedules sampled: " + std::to_string(accepted));

  const auto sched = diffusion::make_schedule(1000, 1e-4, 0.02);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int t = static_cast<int>(rng.uniform_int(0, 1000));
    const Mat<double> x0 = random_mat(rng, 3, 16), eps = random_mat(rng, 3, 16);
    const Mat<double> back = diffusion::predict_x0(diffusion::q_sample(x0, t, eps, sched), t, eps, sched);
    worst = std::max(worst, (back - x0).cwiseAbs().maxCoeff());
  }
  if (worst > 1e-6) c.fail("q_sample/predict_x0 round trip error " + num(worst));

  const auto two = diffusion::make_schedule(2, 0.1, 0.2);
  if (two.alpha_bar(1) != 0.9 || std::abs(two.alpha_bar(2) - 0.72) > 1e-15)
    c.fail("T=2 schedule gave (" + num(two.alpha_bar(1)) + ", " + num(two.alpha_bar(2)) + ")");

  // bit-exact DDIM with a small random denoiser
  diffusion::DenoiserConfig dc{4, 8, 5, 16};
  diffusion::DenoiserNet<float> net(dc, 9);
  Rng wr(4);
  for (auto& [_, v] : net.params().items())
    for (Eigen::Index i = 0; i < v->value.size(); ++i) v->value.data()[i] += static_cast<float>(0.05 * wr.normal());
  const auto eps_fn = [&](const Mat<float>& x, int t, const Mat<float>& z) { return net.predict(x, t, z); };
  const Mat<float> xT = random_mat(rng, 3, 256).cast<float>();
  const Mat<float> z = random_mat(rng, 5, 1).cast<float>();
  const auto s1 = diffusion::ddim_sample<float>(xT, z, eps_fn, sched, 10);
  const auto s2 = diffusion::ddim_sample<float>(xT, z, eps_fn, sched, 10);
  const auto i1 = diffusion::ddim_invert<float>(s1, z, eps_fn, sched, 10);
  const auto i2 = diffusion::ddim_invert<float>(s1, z, eps_fn, sched, 10);
  if (s1 != s2 || i1 != i2) c.fail("DDIM sampling/inversion is not bit-exact across runs");
  if (c.pass) c.detail = std::to_string(accepted) + " schedules decreasing, round trip " + num(worst) + ", T=2 alpha_bar exact, DDIM bit-exact";
  return c;
}

Check gradient_suite() {
  Check c;
  const int side = 8;
  std::string detail;
  auto record = [&](const std::string& name, const GradReport& r) {
    detail += (detail.empty() ? "" : ", ") + name + " " + num(r.worst_rel) + " (" + std::to_string(r.nonzero) + "/" +
              std::to_string(r.checked) + ")";
    if (r.nonzero * 2 < r.checked)
      c.fail(name + ": only " + std::to_string(r.nonzero) + "/" + std::to_string(r.checked) + " gradients nonzero");
    if (r.failed) c.fail(name + ": " + std::to_string(r.failed) + "/" + std::to_string(r.checked) +
                         " entries above tolerance (worst " + num(r.worst_rel) + ")");
  };
  const auto sched = diffusion::make_schedule(100, 1e-3, 0.05);
  Rng rng(31);
  const int n = 2;
  Mat<double> images = (random_mat(rng, 3, n * side * side, 0.3).array() + 0.5).cwiseMax(0.0).cwiseMin(1.0).matrix();
  Mat<double> probs(2, n);
  probs << 0.7, 0.2, 0.3, 0.8;
  semantic::NoiseDraw<double> draw;
  draw.steps = {17, 63};
  draw.eps = random_mat(rng, 3, n * side * side);

  diffusion::DenoiserConfig dc{2, 4, 3 + 2, side};
  diffusion::DenoiserNet<double> den(dc, 1);
  semantic::EncoderNet<double> enc(3, 2);
  classifier::ClassifierConfig cc;
  cc.width = 2;
  cc.feature_dim = 3;
  classifier::ClassifierNet<double> cls(side, cc, 3);
  cls.params().freeze();
  jitter(den.params(), 0.2, 4);
  jitter(enc.params(), 0.2, 5);

  // L_diffusion w.r.t. the denoiser
  record("L_diffusion", grad_check(den.params(), [&](ad::Tape<double>& t) {
           return semantic::semantic_loss<double>(t, enc, den, nullptr, images, probs, draw, sched, 0.0).diffusion;
         }, 60, 7));
  // L_cls w.r.t. the denoiser and the encoder
  auto cls_loss = [&](ad::Tape<double>& t) {
    return semantic::semantic_loss<double>(t, enc, den, &cls, images, probs, draw, sched, 1.0).cls;
  };
  record("L_cls(denoiser)", grad_check(den.params(), cls_loss, 60, 8));
  record("L_cls(encoder)", grad_check(enc.params(), cls_loss, 60, 9));

  // direction losses
  directions::DirectionsConfig dcfg;
  dcfg.K = 3;
  dcfg.d_f = 5;
  dcfg.hidden = 4;
  dcfg.tau = 0.5;
  directions::DirectionBank<double> bank(4, 1, dcfg, 12);
  const Mat<double> z = random_mat(rng, 4, 4);
  const Mat<double> alphas = directions::sample_alphas<double>(rng, 4, 3, 0.5, 3.0);
  record("L_cont", grad_check(bank.params(), [&](ad::Tape<double>& t) {
           return directions::direction_loss<double>(t, bank, z, alphas, 0.0, false).contrastive;
         }, 200, 10));
  record("L_reg", grad_check(bank.params(), [&](ad::Tape<double>& t) {
           return directions::covariance_reg_graph<double>(t, bank, t.constant(z));
         }, 200, 11));
  if (c.pass) c.detail = "worst relative error: " + detail;
  return c;
}

namespace {

// Candidate deltas scripted per (candidate, image).
struct Scripted {
  std::vector<std::vector<double>> table;
  int calls = 0;
  double operator()(int cand, std::size_t i) {
    ++calls;
    return table[static_cast<std::size_t>(cand)][i];
  }
};

std::vector<std::string> ids(std::size_t n) {
  std::vector<std::string> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back("img" + std::to_string(i));
  return v;
}

// Probability linear in the shift: p = 0.5 + 0.05 * alpha * w[k][i].
class LinearStub : public ranking::CounterfactualEngine {
 public:
  explicit LinearStub(std::vector<std::vector<double>> w) : w_(std::move(w)) {}
  int num_directions() const override { return static_cast<int>(w_.size()); }
  double base_prob(std::size_t, int) override { return 0.5; }
  double shifted_prob(std::size_t i, int k, double a, int) override {
    return 0.5 + 0.05 * a * w_[static_cast<std::size_t>(k)][i];
  }

 private:
  std::vector<std::vector<double>> w_;
};

}  // namespace

Check ranking_suite() {
  Check c;
  ranking::RankingConfig cfg;
  cfg.tau_rank = 0.1;
  cfg.per_image_delta = 0.5;
  cfg.n_max = 6;

  // A = 0.4, B = 0.2, others 0 -> [A, B]
  {
    Scripted s{std::vector<std::vector<double>>(6, std::vector<double>(5, 0.0))};
    s.table[3].assign(5, 0.4);
    s.table[4].assign(5, 0.2);
    const auto out = ranking::rank_directions(6, ids(5), std::ref(s), cfg);
    if (out.size() != 2 || ranking::candidate_index({out[0].k, out[0].sign}) != 3 ||
        ranking::candidate_index({out[1].k, out[1].sign}) != 4)
      c.fail("scripted A/B case did not return [A, B]");
  }
  // greedy dominance and pool monotonicity on random tables
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const int nc = 2 * static_cast<int>(rng.uniform_int(1, 5));
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 12));
    Scripted s;
    for (int k = 0; k < nc; ++k) {
      s.table.emplace_back();
      for (std::size_t i = 0; i < n; ++i) s.table.back().push_back(rng.uniform(-0.3, 0.9));
    }
    ranking::RankingConfig rc = cfg;
    rc.per_image_delta = 0.4;
    const auto out = ranking::rank_directions(nc, ids(n), std::ref(s), rc);
    int best = -1;
    double best_mean = -1e9;
    for (int k = 0; k < nc; ++k) {
      double m = 0;
      for (double v : s.table[static_cast<std::size_t>(k)]) m += v;
      m /= static_cast<double>(n);
      if (m > best_mean) best_mean = m, best = k;
    }
    if (best_mean > rc.tau_rank) {
      if (out.empty() || ranking::candidate_index({out[0].k, out[0].sign}) != best)
        c.fail("first selection is not the exhaustive maximum");
    } else if (!out.empty()) {
      c.fail("selection made although every candidate is below tau_rank");
    }
    std::set<std::string> seen;
    for (std::size_t r = 0; r < out.size(); ++r) {
      if (out[r].mean_delta < rc.tau_rank) c.fail("retained entry below tau_rank");
      for (const auto& id : out[r].explained_ids)
        if (!seen.insert(id).second) c.fail("explained ids overlap between selections");
      if (r + 1 < out.size()) {
        const auto after = out[r].pool_before - out[r].explained_ids.size();
        if (out[r + 1].pool_before != after) c.fail("pool size trace inconsistent");
        if (!out[r].explained_ids.empty() && !(after < out[r].pool_before)) c.fail("pool did not shrink");
      }
    }
    if (s.calls > nc * static_cast<int>(n)) c.fail("a (candidate, image) delta was evaluated twice");
  }
  // ties: equal deltas pick the lower direction, then the positive sign
  {
    Scripted s{std::vector<std::vector<double>>(4, std::vector<double>(3, 0.3))};
    const auto out = ranking::rank_directions(4, ids(3), std::ref(s), cfg);
    if (out.empty() || out[0].k != 0 || out[0].sign != 1) c.fail("tie not broken toward (k=0, +)");
    if (out.size() < 2 || out[1].k != 0 || out[1].sign != -1) c.fail("second tie not broken toward (k=0, -)");
  }
  // empty pool and all-below-threshold
  {
    Scripted s{std::vector<std::vector<double>>(4, std::vector<double>(0))};
    if (!ranking::rank_directions(4, {}, std::ref(s), cfg).empty()) c.fail("empty pool gave a selection");
    Scripted low{std::vector<std::vector<double>>(4, std::vector<double>(3, 0.05))};
    if (!ranking::rank_directions(4, ids(3), std::ref(low), cfg).empty())
      c.fail("all-below-threshold gave a selection");
  }
  // sign flip negates deltas on a linear stub; empty pool rejected
  {
    LinearStub stub({{1.0, -2.0, 0.5}, {0.3, 0.1, -1.0}});
    const auto pos = ranking::score_shift(stub, 3, 1, +1, 2.0, 1);
    const auto neg = ranking::score_shift(stub, 3, 1, -1, 2.0, 1);
    for (std::size_t i = 0; i < 3; ++i)
      if (std::abs(pos[i] + neg[i]) > 1e-12) c.fail("sign flip did not negate deltas");
    bool threw = false;
    try {
      ranking::score_shift(stub, 0, 0, 1, 1.0, 1);
    } catch (const InputError&) {
      threw = true;
    }
    if (!threw) c.fail("score_shift accepted an empty pool");
  }
  // identical inputs give identical output
  {
    Scripted a{std::vector<std::vector<double>>(6, std::vector<double>(4, 0.25))};
    Scripted b = a;
    const auto ra = ranking::rank_directions(6, ids(4), std::ref(a), cfg);
    const auto rb = ranking::rank_directions(6, ids(4), std::ref(b), cfg);
    bool same = ra.size() == rb.size();
    for (std::size_t i = 0; same && i < ra.size(); ++i)
      same = ra[i].k == rb[i].k && ra[i].sign == rb[i].sign && ra[i].mean_delta == rb[i].mean_delta &&
             ra[i].explained_ids == rb[i].explained_ids;
    if (!same) c.fail("ranking not deterministic");
  }
  if (c.pass) c.detail = "scripted, dominance, monotonicity, ties, empty and sign cases pass";
  return c;
}

namespace {

double kid_oracle(const Mat<double>& a, const Mat<double>& b) {
  const auto d = static_cast<double>(a.cols());
  auto k = [&](const Mat<double>& x, Eigen::Index i, const Mat<double>& y, Eigen::Index j) {
    double dot = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) dot += x(i, c) * y(j, c);
    return std::pow(dot / d + 1.0, 3);
  };
  const auto m = a.rows(), n = b.rows();
  double sxx = 0, syy = 0, sxy = 0;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      if (i != j) sxx += k(a, i, a, j);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) syy += k(b, i, b, j);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) sxy += k(a, i, b, j);
  return sxx / double(m * (m - 1)) + syy / double(n * (n - 1)) - 2 * sxy / double(m * n);
}

}  // namespace

Check kid_suite() {
  Check c;
  Rng rng(51);
  const int d = 16;
  const Mat<double> a = random_mat(rng, 500, d), b = random_mat(rng, 500, d);
  const double same = metrics::kid(a, b);
  if (std::abs(same) > 0.01) c.fail("equal-distribution KID " + num(same));
  Mat<double> shifted = random_mat(rng, 500, d);
  shifted.array() += 1.0 / std::sqrt(static_cast<double>(d));
  const double moved = metrics::kid(a, shifted);
  if (!(moved > same)) c.fail("shifted KID " + num(moved) + " not above " + num(same));
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = rng.uniform_int(2, 100), n = rng.uniform_int(2, 100);
    const auto dd = rng.uniform_int(1, 8);
    const Mat<double> x = random_mat(rng, m, dd), y = random_mat(rng, n, dd);
    worst = std::max(worst, std::abs(metrics::kid(x, y) - kid_oracle(x, y)));
  }
  const double self = metrics::kid(a.topRows(50), a.topRows(50));
  if (std::abs(self - kid_oracle(a.topRows(50), a.topRows(50))) > 1e-6) c.fail("self-KID differs from oracle");
  if (worst > 1e-6) c.fail("KID differs from O(n^2) oracle by " + num(worst));
  if (c.pass) c.detail = "equal " + num(same) + ", shifted " + num(moved) + ", oracle gap " + num(worst);
  return c;
}

}  // namespace diffex::suites
