#include "diffex/checkpoint.hpp"

#include <unistd.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "diffex/errors.hpp"

namespace diffex {
namespace {

constexpr char kMagic[8] = {'D', 'I', 'F', 'F', 'E', 'X', 'C', 'K'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void f32(float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    u32(v);
  }
  std::vector<unsigned char>& buffer() { return out_; }

 private:
  std::vector<unsigned char> out_;
};

class Reader {
 public:
  Reader(const std::vector<unsigned char>& b, std::size_t limit, std::string origin)
      : b_(b), limit_(limit), origin_(std::move(origin)) {}
  void need(std::size_t n) const {
    if (pos_ + n > limit_) throw IoError("truncated checkpoint: " + origin_);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() {
    const std::uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::size_t pos() const { return pos_; }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  const std::vector<unsigned char>& b_;
  std::size_t limit_;
  std::size_t pos_ = 0;
  std::string origin_;
};

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) h = (h ^ p[i]) * 1099511628211ULL;
  return h;
}

std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return fnv1a(buf.data(), buf.size());
}

std::vector<std::pair<std::string, Mat<float>>> Checkpoint::group(const std::string& prefix) const {
  std::vector<std::pair<std::string, Mat<float>>> out;
  for (const auto& [name, m] : tensors)
    if (name.rfind(prefix, 0) == 0) out.emplace_back(name.substr(prefix.size()), m);
  return out;
}

const std::string& Checkpoint::meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw IoError("checkpoint '" + stage + "' lacks metadata key " + key);
  return it->second;
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.str(ckpt.stage);
  w.u64(ckpt.config_hash);
  w.u32(static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, m] : ckpt.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(m.data()[i]);
  }
  const std::uint64_t sum = fnv1a(w.buffer().data(), w.buffer().size());
  w.u64(sum);
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& origin) {
  if (bytes.size() < sizeof kMagic + 12) throw IoError("truncated checkpoint: " + origin);
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw IoError("not a diffex checkpoint: " + origin);
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (fnv1a(bytes.data(), body) != stored) throw IoError("checkpoint checksum mismatch: " + origin);

  Reader r(bytes, body, origin);
  r.skip(sizeof kMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + origin);
  Checkpoint c;
  c.stage = r.str();
  c.config_hash = r.u64();
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    c.metadata[k] = r.str();
  }
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    const std::uint32_t rows = r.u32(), cols = r.u32();
    r.need(static_cast<std::size_t>(rows) * cols * 4);
    Mat<float> m(rows, cols);
    for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = r.f32();
    c.tensors.emplace_back(std::move(name), std::move(m));
  }
  if (r.pos() != body) throw IoError("trailing bytes in checkpoint: " + origin);
  return c;
}

void atomic_write(const std::filesystem::path& path, const std::string& contents) {
  const auto tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp);
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    os.flush();
    if (!os) throw IoError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename into " + path.string());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  atomic_write(path, std::string(bytes.begin(), bytes.end()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_stage,
                           std::uint64_t expected_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  Checkpoint c = decode_checkpoint(bytes, path.string());
  if (c.stage != expected_stage)
    throw IoError(path.string() + ": expected a '" + expected_stage + "' checkpoint, found '" +
                  c.stage + "'");
  if (expected_hash != 0 && c.config_hash != expected_hash)
    throw InputError(path.string() + ": config hash mismatch (checkpoint was produced with a "
                     "different configuration)");
  return c;
}

}  // namespace diffex
