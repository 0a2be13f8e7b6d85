#include "diffex/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "diffex/checkpoint.hpp"
#include "diffex/datagen.hpp"

namespace diffex::explain {

CounterfactualResult generate_counterfactual(const Image& x, const std::string& id,
                                             const semantic::SemanticAE& ae,
                                             const classifier::ClassifierModel& cls,
                                             const directions::DirectionBank<float>& bank, int k,
                                             int sign, const std::vector<double>& alphas, int n_steps) {
  bool has_zero = false;
  for (double a : alphas) has_zero |= a == 0.0;
  if (!has_zero) throw InputError("generate_counterfactual: alphas must include 0");
  if (sign != 1 && sign != -1) throw InputError("generate_counterfactual: sign must be +1 or -1");
  CounterfactualResult r;
  r.source_id = id;
  r.k = k;
  r.sign = sign;
  r.alphas = alphas;
  const Vec<float> z = ae.semantic_code(x, cls);
  const Mat<float> x_T = ae.invert(x, z, n_steps);
  for (double a : alphas)
    r.images.push_back(ae.generate(x_T, directions::apply_direction(bank, k, z, sign * a), n_steps));
  std::vector<const Image*> ptrs;
  for (const auto& im : r.images) ptrs.push_back(&im);
  r.probs = cls.predict_probs(ptrs);
  return r;
}

std::uint16_t glyph(char c) {
  // rows top to bottom, 3 bits each
  static const std::uint16_t digits[10] = {
      0b111'101'101'101'111, 0b010'110'010'010'111, 0b111'001'111'100'111, 0b111'001'111'001'111,
      0b101'101'111'001'001, 0b111'100'111'001'111, 0b111'100'111'101'111, 0b111'001'010'010'010,
      0b111'101'111'101'111, 0b111'101'111'001'111};
  if (c >= '0' && c <= '9') return digits[c - '0'];
  if (c == '.') return 0b000'000'000'000'010;
  if (c == '-') return 0b000'000'111'000'000;
  if (c == '+') return 0b000'010'111'010'000;
  return 0;
}

std::string format_prob(double p) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", p);
  return buf;
}

std::filesystem::path sidecar_path(const std::filesystem::path& grid_path) {
  auto p = grid_path;
  p += ".txt";
  return p;
}

namespace {

constexpr int kScale = 2;     // glyph pixel size
constexpr int kBand = 7 * kScale;
constexpr int kGap = 2;

void draw_text(Rgb8& canvas, int x0, int y0, const std::string& text) {
  for (char ch : text) {
    const std::uint16_t g = glyph(ch);
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 3; ++c) {
        if (!(g >> (14 - (r * 3 + c)) & 1)) continue;
        for (int dy = 0; dy < kScale; ++dy)
          for (int dx = 0; dx < kScale; ++dx) {
            const int x = x0 + c * kScale + dx, y = y0 + r * kScale + dy;
            if (x < 0 || y < 0 || x >= canvas.width || y >= canvas.height) continue;
            auto* px = &canvas.data[(static_cast<std::size_t>(y) * canvas.width + x) * 3];
            px[0] = 255, px[1] = 40, px[2] = 40;
          }
      }
    x0 += 4 * kScale;
  }
}

}  // namespace

void emit_grid(const std::vector<CounterfactualResult>& results, int target_class,
               const std::filesystem::path& out_path) {
  if (results.empty()) throw InputError("emit_grid: no results");
  const std::size_t cols = results.front().images.size();
  const int side = results.front().images.front().side;
  for (const auto& r : results)
    if (r.images.size() != cols || r.images.front().side != side)
      throw InputError("emit_grid: results differ in layout");

  Rgb8 canvas;
  canvas.width = static_cast<int>(cols) * (side + kGap) + kGap;
  canvas.height = static_cast<int>(results.size()) * (side + kBand + kGap) + kGap;
  canvas.data.assign(static_cast<std::size_t>(canvas.width) * canvas.height * 3, 0);

  std::string side_text = "# diffex-grid v1\nrows = " + std::to_string(results.size()) +
                          "\ncols = " + std::to_string(cols) +
                          "\ntarget_class = " + std::to_string(target_class) + "\n";
  for (std::size_t r = 0; r < results.size(); ++r) {
    const auto& res = results[r];
    side_text += "row " + std::to_string(r) + ": source=" + res.source_id + " direction=" +
                 std::to_string(res.k) + " sign=" + (res.sign > 0 ? "+" : "-") + "\n";
    for (std::size_t c = 0; c < cols; ++c) {
      const int x0 = kGap + static_cast<int>(c) * (side + kGap);
      const int y0 = kGap + static_cast<int>(r) * (side + kBand + kGap);
      const Image& im = res.images[c];
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          for (int ch = 0; ch < 3; ++ch) {
            const float v = std::clamp(im.at(ch, y, x), 0.0f, 1.0f);
            canvas.data[(static_cast<std::size_t>(y0 + y) * canvas.width + x0 + x) * 3 + ch] =
                static_cast<std::uint8_t>(std::lround(v * 255.0f));
          }
      const std::string label = format_prob(res.probs(target_class, static_cast<Eigen::Index>(c)));
      draw_text(canvas, x0 + 1, y0 + side + kScale, label);
      char alpha[32];
      std::snprintf(alpha, sizeof alpha, "%g", res.sign * res.alphas[c]);
      side_text += "tile " + std::to_string(r) + " " + std::to_string(c) + ": alpha=" + alpha +
                   " prob=" + label + "\n";
    }
  }
  write_png(out_path, canvas);
  atomic_write(sidecar_path(out_path), side_text);
}

WitnessResult evaluate_witness(ranking::ModelEngine& engine, std::size_t pool_size, int k, int sign,
                               double alpha, int target_class) {
  if (pool_size == 0) throw InputError("evaluate_witness: empty pool");
  // toward class 1 the cytoplasm fades and nuclei thin out
  const double dir = target_class == 1 ? -1.0 : 1.0;
  WitnessResult w;
  std::size_t cyto = 0, blobs = 0;
  double delta = 0.0;
  for (std::size_t i = 0; i < pool_size; ++i) {
    const Image base = engine.shifted_image(i, k, 0.0);
    const Image moved = engine.shifted_image(i, k, sign * alpha);
    cyto += dir * (datagen::cytoplasm_mean(moved) - datagen::cytoplasm_mean(base)) > 0.0;
    blobs += dir * (datagen::nucleus_blob_count(moved) - datagen::nucleus_blob_count(base)) > 0;
    delta += engine.classifier().predict_probs(moved)(target_class, 0) - engine.base_prob(i, target_class);
  }
  const double n = static_cast<double>(pool_size);
  w.cytoplasm_fraction = static_cast<double>(cyto) / n;
  w.blob_fraction = static_cast<double>(blobs) / n;
  w.mean_delta = delta / n;
  return w;
}

}  // namespace diffex::explain
