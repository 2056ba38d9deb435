#include "nerftap/diff/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace nerftap::diff {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw BlobError("truncated NFTP blob");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_blob(const TensorMap& tensors) {
  std::vector<std::uint8_t> out{'N', 'F', 'T', 'P'};
  put_u32(out, kBlobVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (shape_numel(t.shape) != t.data.size()) throw BlobError("tensor '" + name + "' has inconsistent shape");
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

TensorMap decode_blob(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4) != "NFTP") throw BlobError("bad magic: not an NFTP blob");
  const std::uint32_t version = r.u32();
  if (version != kBlobVersion) throw BlobError("unsupported NFTP version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw BlobError("tensor '" + name + "' has implausible rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.u32()));
    Tensor t;
    t.shape = shape;
    std::size_t n = 0;
    try {
      n = shape_numel(shape);
    } catch (const std::invalid_argument&) {
      throw BlobError("tensor '" + name + "' has a zero dimension");
    }
    t.data.resize(n);
    for (std::size_t k = 0; k < n; ++k) t.data[k] = r.f32();
    if (!out.emplace(name, std::move(t)).second) throw BlobError("duplicate tensor name '" + name + "'");
  }
  if (!r.done()) throw BlobError("trailing bytes after NFTP payload");
  return out;
}

void save_blob(const std::filesystem::path& path, const TensorMap& tensors) {
  const auto bytes = encode_blob(tensors);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw BlobError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw BlobError("failed writing " + path.string());
}

TensorMap load_blob(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw BlobError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_blob(bytes);
  } catch (const BlobError& e) {
    throw BlobError(path.string() + ": " + e.what());
  }
}

const Tensor& blob_get(const TensorMap& tensors, const std::string& name, const Shape& expected) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw BlobError("missing tensor '" + name + "'");
  if (it->second.shape != expected) throw ShapeError("blob:" + name, expected, it->second.shape);
  return it->second;
}

}  // namespace nerftap::diff
