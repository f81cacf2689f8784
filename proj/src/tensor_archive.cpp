#include "partseg/tensor_archive.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "partseg/error.hpp"

namespace partseg {
namespace {

constexpr char kMagic[4] = {'P', 'S', 'T', 'A'};

template <typename T>
void put_raw(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)).data(), sizeof(T));
    return value;
  }

  std::string_view take(size_t n) {
    if (n > bytes_.size() - pos_) fail(ErrorCode::corrupt, "tensor archive truncated");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  size_t pos_ = 0;
};

uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kInt64: return 1;
    case torch::kUInt8: return 2;
    default: fail(ErrorCode::invalid_argument, "tensor archive: unsupported dtype");
  }
}

torch::ScalarType dtype_from_code(uint8_t c) {
  switch (c) {
    case 0: return torch::kFloat32;
    case 1: return torch::kInt64;
    case 2: return torch::kUInt8;
    default: fail(ErrorCode::corrupt, "tensor archive: unknown dtype code " + std::to_string(c));
  }
}

}  // namespace

void TensorArchive::put(std::string name, const torch::Tensor& t) {
  for (auto& [n, existing] : tensors) {
    if (n == name) {
      existing = t.detach().cpu().contiguous().clone();
      return;
    }
  }
  tensors.emplace_back(std::move(name), t.detach().cpu().contiguous().clone());
}

bool TensorArchive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

const torch::Tensor& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  fail(ErrorCode::not_found, "tensor archive: missing tensor '" + name + "'");
}

std::string TensorArchive::serialize() const {
  std::string payload;
  const std::string head = header.dump();
  put_raw<uint32_t>(payload, static_cast<uint32_t>(head.size()));
  payload += head;
  put_raw<uint32_t>(payload, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    auto c = t.contiguous();
    put_raw<uint32_t>(payload, static_cast<uint32_t>(name.size()));
    payload += name;
    put_raw<uint8_t>(payload, dtype_code(c.scalar_type()));
    put_raw<uint32_t>(payload, static_cast<uint32_t>(c.dim()));
    for (auto d : c.sizes()) put_raw<int64_t>(payload, d);
    payload.append(static_cast<const char*>(c.data_ptr()), c.nbytes());
  }

  std::string out(kMagic, 4);
  put_raw<uint32_t>(out, kArchiveFormatVersion);
  put_raw<uint64_t>(out, payload.size());
  out += payload;
  put_raw<uint32_t>(out, crc32_of(payload));
  return out;
}

TensorArchive TensorArchive::deserialize(std::string_view bytes) {
  Reader outer(bytes);
  if (outer.take(4) != std::string_view(kMagic, 4))
    fail(ErrorCode::corrupt, "tensor archive: bad magic");
  const auto version = outer.get<uint32_t>();
  if (version != kArchiveFormatVersion)
    fail(ErrorCode::version_mismatch,
         "tensor archive: format version " + std::to_string(version) + ", expected " +
             std::to_string(kArchiveFormatVersion));
  const auto size = outer.get<uint64_t>();
  if (size > bytes.size()) fail(ErrorCode::corrupt, "tensor archive truncated");
  const auto payload = outer.take(size);
  const auto crc = outer.get<uint32_t>();
  if (!outer.done()) fail(ErrorCode::corrupt, "tensor archive: trailing bytes");
  if (crc != crc32_of(payload)) fail(ErrorCode::corrupt, "tensor archive: checksum mismatch");

  TensorArchive archive;
  Reader in(payload);
  const auto head_size = in.get<uint32_t>();
  try {
    archive.header = nlohmann::json::parse(in.take(head_size));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::corrupt, std::string("tensor archive: bad header: ") + e.what());
  }
  const auto count = in.get<uint32_t>();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name(in.take(in.get<uint32_t>()));
    const auto dtype = dtype_from_code(in.get<uint8_t>());
    const auto ndim = in.get<uint32_t>();
    if (ndim > 8) fail(ErrorCode::corrupt, "tensor archive: bad rank for '" + name + "'");
    std::vector<int64_t> dims(ndim);
    for (auto& d : dims) {
      d = in.get<int64_t>();
      if (d < 0) fail(ErrorCode::corrupt, "tensor archive: negative dim for '" + name + "'");
    }
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    auto raw = in.take(t.nbytes());
    std::memcpy(t.data_ptr(), raw.data(), raw.size());
    archive.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!in.done()) fail(ErrorCode::corrupt, "tensor archive: payload size mismatch");
  return archive;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  write_file_atomic(path, serialize());
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  return deserialize(read_file(path));
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  size_t pos = 0;
  while (pos < bytes.size()) {
    const size_t n = std::min<size_t>(bytes.size() - pos, 1u << 30);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos), static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace partseg
