#include "diffex/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "diffex/errors.hpp"
#include "diffex/rng.hpp"

namespace diffex::datagen {
namespace {

constexpr int kPunctaPerNucleus = 6;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

void check_range(std::vector<std::string>& out, const std::string& key, const Range& r) {
  if (!(r.lo >= 0.0 && r.hi <= 1.0 && r.lo <= r.hi))
    out.push_back(key + ": range must satisfy 0 <= lo <= hi <= 1");
}

const ClassProfile& profile_for(const DatagenConfig& cfg, int label) {
  return label == 0 ? cfg.class0 : cfg.class1;
}

}  // namespace

std::vector<std::string> DatagenConfig::validate() const {
  std::vector<std::string> out;
  if (n < 2) out.push_back("datagen.n: must be >= 2");
  if (side < 16) out.push_back("datagen.side: must be >= 16");
  if (train_frac <= 0 || val_frac < 0 || test_frac <= 0 ||
      std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    out.push_back("datagen: split fractions must be positive and sum to 1");
  if (max_nuclei < 1) out.push_back("datagen.max_nuclei: must be >= 1");
  if (!(noise_amplitude >= 0.0 && noise_amplitude < 0.5))
    out.push_back("datagen.noise_amplitude: must be in [0, 0.5)");
  const std::pair<const char*, const ClassProfile*> profiles[] = {{"class0", &class0},
                                                                  {"class1", &class1}};
  for (const auto& [name, p] : profiles) {
    const std::string base = std::string("datagen.") + name;
    if (p->count_lo < 0 || p->count_hi < p->count_lo || p->count_hi > max_nuclei)
      out.push_back(base + ".nucleus_count: need 0 <= lo <= hi <= max_nuclei");
    check_range(out, base + ".nucleus_spacing", p->spacing);
    check_range(out, base + ".cytoplasm_intensity", p->cytoplasm);
    check_range(out, base + ".organelle_scatter", p->scatter);
  }
  int separated = 0;
  if (class0.count_hi < class1.count_lo || class1.count_hi < class0.count_lo) ++separated;
  if (!class0.spacing.overlaps(class1.spacing)) ++separated;
  if (!class0.cytoplasm.overlaps(class1.cytoplasm)) ++separated;
  if (!class0.scatter.overlaps(class1.scatter)) ++separated;
  if (separated < 2) out.push_back("datagen: class ranges must be disjoint on at least two factors");
  if (class0.cytoplasm.overlaps(class1.cytoplasm))
    out.push_back("datagen: cytoplasm ranges of the two classes must be disjoint");
  return out;
}

SyntheticFactors sample_factors(int class_label, std::uint64_t rng_seed,
                                const DatagenConfig& config) {
  if (class_label != 0 && class_label != 1)
    throw InputError("sample_factors: class label must be 0 or 1, got " +
                     std::to_string(class_label));
  const ClassProfile& p = profile_for(config, class_label);
  Rng rng(rng_seed);
  SyntheticFactors f;
  f.nucleus_count =
      std::min(static_cast<int>(rng.uniform_int(p.count_lo, p.count_hi)), config.max_nuclei);
  f.nucleus_spacing = clamp01(rng.uniform(p.spacing.lo, p.spacing.hi));
  f.cytoplasm_intensity = clamp01(rng.uniform(p.cytoplasm.lo, p.cytoplasm.hi));
  f.organelle_scatter = clamp01(rng.uniform(p.scatter.lo, p.scatter.hi));
  f.jitter_seed = mix_seed(rng_seed, 0x5eed);
  return f;
}

Image render_image(const SyntheticFactors& factors, int side, double noise_amplitude) {
  if (side < 16) throw InputError("render_image: side must be >= 16, got " + std::to_string(side));
  if (factors.nucleus_count < 0) throw InputError("render_image: negative nucleus count");
  const double unit = side / 64.0;
  const double spacing = clamp01(factors.nucleus_spacing);
  const double cyto = clamp01(factors.cytoplasm_intensity);
  const double scatter = clamp01(factors.organelle_scatter);

  // Random draws happen in a fixed order that depends only on the count, so
  // varying one continuous factor leaves every other draw unchanged.
  Rng rng(factors.jitter_seed);
  const double cx = side / 2.0, cy = side / 2.0;
  const double spread = side * (0.10 + 0.30 * spacing);
  struct Nucleus {
    double x, y, sigma;
  };
  std::vector<Nucleus> nuclei;
  for (int i = 0; i < factors.nucleus_count; ++i) {
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double radius = spread * std::sqrt(rng.uniform());
    nuclei.push_back({cx + radius * std::cos(angle), cy + radius * std::sin(angle),
                      unit * rng.uniform(2.0, 2.6)});
  }
  std::vector<std::pair<double, double>> puncta_offsets;
  for (int i = 0; i < factors.nucleus_count * kPunctaPerNucleus; ++i)
    puncta_offsets.emplace_back(rng.normal(), rng.normal());
  const double fx = rng.uniform(0.15, 0.35) / unit, fy = rng.uniform(0.15, 0.35) / unit;
  const double phx = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double phy = rng.uniform(0.0, 2.0 * std::numbers::pi);

  const double cyto_sigma = 7.0 * unit;
  const double puncta_sigma = 1.0 * unit;
  const double puncta_std = (1.5 + 9.0 * scatter) * unit;

  Image img{Mat<float>::Zero(3, static_cast<Eigen::Index>(side) * side), side};
  std::vector<std::pair<double, double>> puncta;
  for (std::size_t n = 0; n < nuclei.size(); ++n)
    for (int j = 0; j < kPunctaPerNucleus; ++j) {
      const auto& [ox, oy] = puncta_offsets[n * kPunctaPerNucleus + j];
      puncta.emplace_back(nuclei[n].x + puncta_std * ox, nuclei[n].y + puncta_std * oy);
    }

  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      double density = 0.0, nucleus = 0.0, organelle = 0.0;
      for (const auto& nu : nuclei) {
        const double d2 = (px - nu.x) * (px - nu.x) + (py - nu.y) * (py - nu.y);
        density += std::exp(-d2 / (2.0 * cyto_sigma * cyto_sigma));
        nucleus += 0.9 * std::exp(-d2 / (2.0 * nu.sigma * nu.sigma));
      }
      for (const auto& [qx, qy] : puncta) {
        const double d2 = (px - qx) * (px - qx) + (py - qy) * (py - qy);
        organelle += 0.8 * std::exp(-d2 / (2.0 * puncta_sigma * puncta_sigma));
      }
      const double texture = 0.75 + 0.25 * std::sin(fx * px + phx) * std::sin(fy * py + phy);
      img.at(0, y, x) = static_cast<float>(cyto * (0.25 + 0.75 * std::min(density, 1.0)) * texture);
      img.at(1, y, x) = static_cast<float>(std::min(organelle, 1.0));
      img.at(2, y, x) = static_cast<float>(std::min(nucleus, 1.0));
    }
  for (Eigen::Index p = 0; p < img.pixels.cols(); ++p)
    for (int c = 0; c < 3; ++c) {
      const double v = img.pixels(c, p) + noise_amplitude * rng.uniform();
      img.pixels(c, p) = static_cast<float>(clamp01(v));
    }
  return img;
}

DatasetSplit generate_dataset(const DatagenConfig& config, std::uint64_t master_seed) {
  if (auto errs = config.validate(); !errs.empty()) throw InputError(errs.front());
  DatasetSplit split;
  split.split_seed = master_seed;
  const int n0 = config.n / 2;
  const int counts[2] = {n0, config.n - n0};

  // Stratified per-class split sizes.
  std::vector<LabeledImage>* dests[3] = {&split.train, &split.val, &split.test};
  const char* names[3] = {"train", "val", "test"};
  std::vector<std::pair<int, int>> plan[3];  // (label, class-local index)
  for (int label = 0; label < 2; ++label) {
    const int total = counts[label];
    const int n_train = static_cast<int>(std::floor(total * config.train_frac + 0.5));
    const int n_val = std::min(total - n_train, static_cast<int>(std::floor(total * config.val_frac + 0.5)));
    int idx = 0;
    for (int i = 0; i < n_train; ++i) plan[0].emplace_back(label, idx++);
    for (int i = 0; i < n_val; ++i) plan[1].emplace_back(label, idx++);
    while (idx < total) plan[2].emplace_back(label, idx++);
  }
  Rng shuffler(mix_seed(master_seed, 0xA11));
  for (int s = 0; s < 3; ++s) {
    auto& p = plan[s];
    for (std::size_t i = p.size(); i > 1; --i)
      std::swap(p[i - 1], p[static_cast<std::size_t>(shuffler.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    int k = 0;
    for (const auto& [label, local] : p) {
      const std::uint64_t seed = mix_seed(master_seed, (static_cast<std::uint64_t>(label) << 32) | local);
      LabeledImage li;
      char id[32];
      std::snprintf(id, sizeof id, "%s_%05d", names[s], k++);
      li.id = id;
      li.label = label;
      li.factors = sample_factors(label, seed, config);
      li.image = render_image(li.factors, config.side, config.noise_amplitude);
      dests[s]->push_back(std::move(li));
    }
  }
  return split;
}

namespace {

void write_manifest_rows(std::ostream& os, const std::vector<LabeledImage>& items,
                         const char* split_name) {
  char buf[512];
  for (const auto& li : items) {
    const auto& f = li.factors;
    std::snprintf(buf, sizeof buf, "%s\timages/%s.png\t%s\t%d\t%d\t%.17g\t%.17g\t%.17g\t%llu\n",
                  li.id.c_str(), li.id.c_str(), split_name, li.label, f.nucleus_count,
                  f.nucleus_spacing, f.cytoplasm_intensity, f.organelle_scatter,
                  static_cast<unsigned long long>(f.jitter_seed));
    os << buf;
  }
}

}  // namespace

void write_dataset(const DatasetSplit& split, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  for (const auto* part : {&split.train, &split.val, &split.test})
    for (const auto& li : *part) write_png(dir / "images" / (li.id + ".png"), li.image);

  const fs::path tmp = dir / (std::string(kManifestName) + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << kManifestHeader << "\n";
    os << "# split_seed=" << split.split_seed << "\n";
    os << "id\tpath\tsplit\tlabel\tnucleus_count\tnucleus_spacing\tcytoplasm_intensity\t"
          "organelle_scatter\tjitter_seed\n";
    write_manifest_rows(os, split.train, "train");
    write_manifest_rows(os, split.val, "val");
    write_manifest_rows(os, split.test, "test");
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, dir / kManifestName, ec);
  if (ec) throw IoError("rename failed for " + tmp.string() + ": " + ec.message());
}

DatasetSplit load_dataset(const std::filesystem::path& dir) {
  const auto manifest = dir / kManifestName;
  std::ifstream is(manifest);
  if (!is) throw IoError("cannot read manifest " + manifest.string());
  DatasetSplit split;
  std::string line;
  if (!std::getline(is, line) || line != kManifestHeader)
    throw IoError("bad manifest header in " + manifest.string());
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("# split_seed=", 0) == 0) {
      split.split_seed = std::stoull(line.substr(13));
      continue;
    }
    if (line[0] == '#' || line.rfind("id\t", 0) == 0) continue;
    std::istringstream ls(line);
    LabeledImage li;
    std::string path, part;
    unsigned long long jitter = 0;
    if (!std::getline(ls, li.id, '\t') || !std::getline(ls, path, '\t') ||
        !std::getline(ls, part, '\t') ||
        !(ls >> li.label >> li.factors.nucleus_count >> li.factors.nucleus_spacing >>
          li.factors.cytoplasm_intensity >> li.factors.organelle_scatter >> jitter))
      throw IoError(manifest.string() + ":" + std::to_string(lineno) + ": malformed record");
    li.factors.jitter_seed = jitter;
    li.image = read_png(dir / path);
    if (part == "train") split.train.push_back(std::move(li));
    else if (part == "val") split.val.push_back(std::move(li));
    else if (part == "test") split.test.push_back(std::move(li));
    else throw IoError(manifest.string() + ":" + std::to_string(lineno) + ": unknown split " + part);
  }
  return split;
}

double cytoplasm_mean(const Image& image) { return image.pixels.row(0).cast<double>().mean(); }

int nucleus_blob_count(const Image& image, double threshold) {
  const int s = image.side;
  std::vector<int> mark(static_cast<std::size_t>(s) * s, 0);
  std::vector<int> stack;
  int blobs = 0;
  for (int p = 0; p < s * s; ++p) {
    if (mark[p] || image.pixels(2, p) <= threshold) continue;
    ++blobs;
    mark[p] = 1;
    stack.push_back(p);
    while (!stack.empty()) {
      const int q = stack.back();
      stack.pop_back();
      const int qy = q / s, qx = q % s;
      const int nb[4][2] = {{qy - 1, qx}, {qy + 1, qx}, {qy, qx - 1}, {qy, qx + 1}};
      for (const auto& [ny, nx] : nb) {
        if (ny < 0 || ny >= s || nx < 0 || nx >= s) continue;
        const int r = ny * s + nx;
        if (!mark[r] && image.pixels(2, r) > threshold) {
          mark[r] = 1;
          stack.push_back(r);
        }
      }
    }
  }
  return blobs;
}

double puncta_spread(const Image& image, double background) {
  const int s = image.side;
  double mass = 0.0, mx = 0.0, my = 0.0;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double w = std::max(0.0, static_cast<double>(image.at(1, y, x)) - background);
      mass += w;
      mx += w * x;
      my += w * y;
    }
  if (mass <= 0.0) return 0.0;
  mx /= mass;
  my /= mass;
  double var = 0.0;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double w = std::max(0.0, static_cast<double>(image.at(1, y, x)) - background);
      var += w * ((x - mx) * (x - mx) + (y - my) * (y - my));
    }
  return std::sqrt(var / mass);
}

}  // namespace diffex::datagen
