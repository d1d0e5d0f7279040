#include "mococxr/diffcore/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mococxr::diffcore {
namespace {

constexpr char kMagic[8] = {'M', 'C', 'X', 'R', 'C', 'K', 'P', 'T'};
const std::string kEncoderPrefix = "encoder.";

template <class U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated data at byte " + std::to_string(pos_));
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const std::string& Checkpoint::field(const std::string& key) const {
  auto it = header.find(key);
  if (it == header.end()) throw std::runtime_error("checkpoint: header has no field '" + key + "'");
  return it->second;
}

std::string Checkpoint::field_or(const std::string& key, const std::string& fallback) const {
  auto it = header.find(key);
  return it == header.end() ? fallback : it->second;
}

void Checkpoint::set_encoder(const EncoderSpec& spec) {
  for (const auto& [k, v] : spec.to_fields()) header[kEncoderPrefix + k] = v;
}

EncoderSpec Checkpoint::encoder() const {
  std::map<std::string, std::string> fields;
  for (const auto& [k, v] : header) {
    if (k.compare(0, kEncoderPrefix.size(), kEncoderPrefix) == 0) fields[k.substr(kEncoderPrefix.size())] = v;
  }
  return EncoderSpec::from_fields(fields);
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string header;
  for (const auto& [k, v] : ckpt.header) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint: header key/value may not contain '=' (key) or newlines: " + k);
    }
    header += k + "=" + v + "\n";
  }
  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, ckpt.format_version);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
    put_le<std::uint64_t>(out, t.numel());
    for (float v : t.values()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) throw std::runtime_error("checkpoint: bad magic");
  Checkpoint ckpt;
  ckpt.format_version = in.get<std::uint32_t>();
  if (ckpt.format_version != kCheckpointFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(ckpt.format_version));
  }
  std::istringstream header(in.take(in.get<std::uint32_t>()));
  for (std::string line; std::getline(header, line);) {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: malformed header line '" + line + "'");
    ckpt.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.take(in.get<std::uint32_t>());
    Shape shape(in.get<std::uint32_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>());
    const auto numel = in.get<std::uint64_t>();
    if (numel != shape_numel(shape)) throw std::runtime_error("checkpoint: element count mismatch for '" + name + "'");
    std::vector<float> values(numel);
    for (auto& v : values) v = std::bit_cast<float>(in.get<std::uint32_t>());
    ckpt.params.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!in.done()) throw std::runtime_error("checkpoint: trailing bytes after parameter blobs");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace mococxr::diffcore
