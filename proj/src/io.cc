#include "t2r/io.h"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "t2r/errors.h"

namespace t2r {

namespace {

constexpr char kMagic[4] = {'T', '2', 'R', '1'};

std::uint64_t Fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

class Writer {
 public:
  void U32(std::uint32_t v) { Le(v, 4); }
  void U64(std::uint64_t v) { Le(v, 8); }
  void F64(double v) { Le(std::bit_cast<std::uint64_t>(v), 8); }
  void Bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& out() { return out_; }

 private:
  void Le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t U32(const char* what) { return static_cast<std::uint32_t>(Le(4, what)); }
  std::uint64_t U64(const char* what) { return Le(8, what); }
  double F64() { return std::bit_cast<double>(Le(8, "tensor data")); }
  std::string Bytes(std::uint64_t n, const char* what) {
    Need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void Need(std::uint64_t n, const char* what) const {
    if (n > bytes_.size() - pos_) {
      throw CorruptionError(std::string("checkpoint truncated while reading ") + what, pos_);
    }
  }
  std::size_t pos() const { return pos_; }

 private:
  std::uint64_t Le(int n, const char* what) {
    Need(static_cast<std::uint64_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void CheckLineSafe(const std::string& s, const std::string& what) {
  if (s.find('\n') != std::string::npos || s.find('=') != std::string::npos) {
    throw ContractError(what + " '" + s + "' may not contain '=' or a newline");
  }
}

}  // namespace

std::vector<std::uint8_t> SerializeCheckpoint(const Model& model) {
  std::string header = model.config().ToText();
  for (const auto& [key, value] : model.metadata()) {
    CheckLineSafe(key, "metadata key");
    if (value.find('\n') != std::string::npos) {
      throw ContractError("metadata value of '" + key + "' contains a newline");
    }
    header += "meta." + key + "=" + value + "\n";
  }
  Writer w;
  w.Bytes(std::string_view(kMagic, 4));
  w.U32(kCheckpointVersion);
  w.U64(header.size());
  w.Bytes(header);
  w.U64(model.tensors().size());
  for (const auto& nt : model.tensors()) {
    w.U32(static_cast<std::uint32_t>(nt.name.size()));
    w.Bytes(nt.name);
    w.U32(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.shape()) w.U64(d);
    for (double v : nt.tensor.data()) w.F64(v);
  }
  w.U64(Fnv1a(w.out()));
  return std::move(w.out());
}

Model DeserializeCheckpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const std::string magic = r.Bytes(4, "magic");
  if (magic != std::string_view(kMagic, 4)) {
    throw CorruptionError("not a checkpoint: bad magic", 0);
  }
  const std::uint32_t version = r.U32("version");
  if (version != kCheckpointVersion) {
    throw CorruptionError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const std::uint64_t header_len = r.U64("config length");
  const std::string header = r.Bytes(header_len, "config block");
  const std::uint64_t count = r.U64("tensor count");
  std::vector<NamedTensor> tensors;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    const std::uint32_t name_len = r.U32("tensor name length");
    std::string name = r.Bytes(name_len, "tensor name");
    const std::uint32_t rank = r.U32("tensor rank");
    r.Need(static_cast<std::uint64_t>(rank) * 8, "tensor dims");
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = r.U64("tensor dims");
      if (d != 0 && numel > (bytes.size() / 8) / d) {
        throw CorruptionError("tensor '" + name + "' claims more data than the file holds", at);
      }
      numel *= d;
    }
    r.Need(numel * 8, "tensor data");
    std::vector<double> data(numel);
    for (double& v : data) v = r.F64();
    tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  const std::size_t body_end = r.pos();
  const std::uint64_t stored = r.U64("checksum");
  if (r.pos() != bytes.size()) {
    throw CorruptionError("trailing bytes after checkpoint", r.pos());
  }
  if (stored != Fnv1a(bytes.subspan(0, body_end))) {
    throw CorruptionError("checkpoint checksum mismatch", body_end);
  }

  std::string config_text;
  std::map<std::string, std::string> metadata;
  std::stringstream in(header);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("meta.", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ValidationError("bad metadata line: " + line);
      metadata[line.substr(5, eq - 5)] = line.substr(eq + 1);
    } else {
      config_text += line + "\n";
    }
  }
  ModelConfig config;
  try {
    config = ModelConfig::FromText(config_text);
  } catch (const ConfigError& e) {
    throw ValidationError(std::string("checkpoint config invalid: ") + e.what());
  }
  return Model::FromTensors(std::move(config), std::move(tensors), std::move(metadata));
}

std::string ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw InputError("error reading '" + path + "'");
  return buf.str();
}

void WriteFileAtomic(const std::string& path, std::string_view contents) {
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw InputError("error writing '" + path + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw InputError("cannot move checkpoint into '" + path + "': " + ec.message());
  }
}

void SaveCheckpoint(const Model& model, const std::string& path) {
  const auto bytes = SerializeCheckpoint(model);
  WriteFileAtomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

Model LoadCheckpoint(const std::string& path) {
  const std::string raw = ReadFile(path);
  return DeserializeCheckpoint(
      std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(raw.data()), raw.size()));
}

std::vector<int> Tokenize(std::string_view text) {
  std::vector<int> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) ids[i] = static_cast<unsigned char>(text[i]);
  return ids;
}

std::string Detokenize(std::span<const int> ids) {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] > 255) {
      throw InputError("token id " + std::to_string(ids[i]) + " is not a byte");
    }
    out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
  }
  return out;
}

std::vector<int> LoadCorpus(const std::string& path) {
  const std::string raw = ReadFile(path);
  if (raw.empty()) throw InputError("corpus '" + path + "' is empty");
  return Tokenize(raw);
}

}  // namespace t2r
