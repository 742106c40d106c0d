#include <harmonia/checkpoint.hpp>

#include <harmonia/error.hpp>
#include <harmonia/image_io.hpp>

#include <bit>
#include <cstring>
#include <filesystem>

namespace harmonia {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void Checkpoint::put(const std::string& name, std::vector<std::uint64_t> dims, ad::Array data) {
  for (auto& a : arrays) {
    if (a.name == name) {
      a.dims = std::move(dims);
      a.data = std::move(data);
      return;
    }
  }
  arrays.push_back({name, std::move(dims), std::move(data)});
}

void Checkpoint::put_scalars(const std::string& name, const std::vector<double>& values) {
  put(name, {values.size()}, Eigen::Map<const ad::Array>(values.data(), Eigen::Index(values.size())));
}

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

const NamedArray& Checkpoint::at(const std::string& name) const {
  const auto* a = find(name);
  if (!a) throw ParseError(name, "missing checkpoint array");
  return *a;
}

void Checkpoint::put_parameters(const ad::ParameterStore& store) {
  for (const auto& p : store) {
    std::vector<std::uint64_t> dims(p.shape.begin(), p.shape.end());
    put(p.name, std::move(dims), p.value);
  }
}

void Checkpoint::get_parameters(ad::ParameterStore& store) const {
  for (auto& p : store) {
    const auto& a = at(p.name);
    const std::vector<std::uint64_t> dims(p.shape.begin(), p.shape.end());
    if (a.dims != dims) throw ParseError(p.name, "shape mismatch " + ad::shape_string(p.shape));
    p.value = a.data;
  }
}

namespace {

template <typename T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + offset_, sizeof(T));
    offset_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(offset_, n);
    offset_ += n;
    return s;
  }

  std::size_t offset() const { return offset_; }
  bool done() const { return offset_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - offset_ < n) throw CheckpointError(std::string("truncated checkpoint reading ") + what, offset_);
  }

  std::string_view bytes_;
  std::size_t offset_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out = "HARM";
  put_raw<std::uint32_t>(out, kCheckpointVersion);
  put_raw<std::uint32_t>(out, std::uint32_t(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    put_raw<std::uint32_t>(out, std::uint32_t(a.name.size()));
    out += a.name;
    put_raw<std::uint32_t>(out, std::uint32_t(a.dims.size()));
    for (auto d : a.dims) put_raw<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(a.data.data()), std::size_t(a.data.size()) * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4, "magic") != "HARM") throw CheckpointError("bad magic", 0);
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const auto count = in.get<std::uint32_t>("array count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    const auto name_len = in.get<std::uint32_t>("name length");
    a.name = std::string(in.take(name_len, "name"));
    const auto ndim = in.get<std::uint32_t>("ndim");
    if (ndim > 8) throw CheckpointError("implausible ndim for " + a.name, in.offset());
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      a.dims.push_back(in.get<std::uint64_t>("dims"));
      n *= a.dims.back();
    }
    if (n > (bytes.size() - in.offset()) / sizeof(double)) {
      throw CheckpointError("truncated checkpoint reading data of " + a.name, in.offset());
    }
    const auto raw = in.take(n * sizeof(double), "data");
    a.data.resize(Eigen::Index(n));
    std::memcpy(a.data.data(), raw.data(), raw.size());
    ckpt.arrays.push_back(std::move(a));
  }
  if (!in.done()) throw CheckpointError("trailing bytes", in.offset());
  return ckpt;
}

void save_checkpoint_file(const Checkpoint& ckpt, const std::string& path) {
  // Write-then-rename so an interrupted save never leaves a partial file.
  const std::string tmp = path + ".tmp";
  write_file(tmp, encode_checkpoint(ckpt));
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint_file(const std::string& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace harmonia
