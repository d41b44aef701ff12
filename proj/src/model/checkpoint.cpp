#include "mmk/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>

#include "mmk/errors.hpp"
#include "mmk/io.hpp"

namespace mmk {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(std::string_view bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw SchemaError(source_ + ": truncated checkpoint while reading " + what);
  }

  std::string_view bytes_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string fingerprint_hex(std::uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["format"] = "mmk-checkpoint";
  header["model"] = ckpt.config.to_json();
  header["vocab_fingerprint"] = fingerprint_hex(ckpt.vocab_fingerprint);
  header["step"] = ckpt.step;
  header["metrics"] = ckpt.metrics;
  header["extra"] = ckpt.extra;
  const std::string h = header.dump();

  std::string out = "MMKS";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, h.size());
  out += h;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put<float>(out, static_cast<float>(v));
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes, const std::string& source) {
  Reader r(bytes, source);
  if (r.take(4, "magic") != "MMKS") throw SchemaError(source + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw SchemaError(source + ": checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto hlen = r.get<std::uint64_t>("header length");
  Checkpoint ckpt;
  try {
    auto header = nlohmann::json::parse(r.take(hlen, "header"));
    if (header.at("format") != "mmk-checkpoint") throw SchemaError(source + ": unexpected header format");
    ckpt.config = ModelConfig::from_json(header.at("model"));
    ckpt.vocab_fingerprint = std::stoull(header.at("vocab_fingerprint").get<std::string>(), nullptr, 16);
    ckpt.step = header.at("step").get<std::uint64_t>();
    ckpt.metrics = header.at("metrics");
    ckpt.extra = header.at("extra");
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(source + ": malformed checkpoint header: " + e.what());
  } catch (const std::invalid_argument&) {
    throw SchemaError(source + ": malformed vocabulary fingerprint");
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.take(r.get<std::uint32_t>("name length"), "name"));
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw SchemaError(source + ": tensor '" + name + "' has invalid rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.get<std::uint32_t>("dims"));
    Tensor t(shape);
    for (std::size_t k = 0; k < t.numel(); ++k) t[k] = r.get<float>("tensor data");
    if (!ckpt.params.emplace(name, std::move(t)).second) throw SchemaError(source + ": duplicate tensor '" + name + "'");
  }
  if (!r.done()) throw SchemaError(source + ": trailing bytes after checkpoint payload");
  try {
    check_params(ckpt.config, ckpt.params);
  } catch (const ConfigError& e) {
    throw SchemaError(source + ": " + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path), path.string()); }

}  // namespace mmk
