#include "abus/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "abus/errors.hpp"

namespace abus {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoints are written in host byte order");

namespace {

constexpr char kMagic[8] = {'U', 'N', 'E', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put(std::ofstream& out, U value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

class Reader {
 public:
  explicit Reader(const fs::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open checkpoint " + path.string());
  }

  void read(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw IoError(path_.string() + ": truncated while reading " + what + " at byte offset " +
                    std::to_string(offset_ + static_cast<std::size_t>(in_.gcount())));
    offset_ += n;
  }

  template <typename U>
  U get(const char* what) {
    U v;
    read(&v, sizeof v, what);
    return v;
  }

  std::string string(std::size_t n, const char* what) {
    std::string s(n, '\0');
    read(s.data(), n, what);
    return s;
  }

  std::size_t offset() const { return offset_; }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  fs::path path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

ModelConfig read_header(Reader& r, const fs::path& path) {
  char magic[8];
  r.read(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto len = r.get<std::uint64_t>("config length");
  if (len > (1u << 20)) throw IoError(path.string() + ": implausible config length " + std::to_string(len));
  const std::string text = r.string(len, "config");
  try {
    ModelConfig c = nlohmann::json::parse(text).get<ModelConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": invalid checkpoint config: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(path.string() + ": invalid checkpoint config: " + e.what());
  }
}

}  // namespace

void save_checkpoint(const Model& model, const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof kMagic);
  put(out, kVersion);
  const std::string config = nlohmann::json(model.config()).dump();
  put(out, static_cast<std::uint64_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  const auto state = model.state();
  put(out, static_cast<std::uint32_t>(state.size()));
  for (const auto& a : state) {
    put(out, static_cast<std::uint32_t>(a.name.size()));
    out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put(out, static_cast<std::uint32_t>(a.shape.size()));
    for (Index d : a.shape) put(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

ModelConfig read_checkpoint_config(const fs::path& path) {
  Reader r(path);
  return read_header(r, path);
}

Model load_checkpoint(const fs::path& path) {
  Reader r(path);
  const ModelConfig config = read_header(r, path);
  const auto count = r.get<std::uint32_t>("entry count");
  std::vector<NamedArray<float>> state;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray<float> a;
    const auto name_length = r.get<std::uint32_t>("name length");
    if (name_length > 4096) throw IoError(path.string() + ": implausible name length at byte offset " + std::to_string(r.offset() - 4));
    a.name = r.string(name_length, "name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw IoError(path.string() + ": entry '" + a.name + "' has implausible rank " + std::to_string(rank));
    Index n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      a.shape.push_back(static_cast<Index>(r.get<std::uint64_t>("dimension")));
      n *= a.shape.back();
    }
    if (n < 0 || n > (Index{1} << 32)) throw IoError(path.string() + ": entry '" + a.name + "' is implausibly large");
    a.values.resize(static_cast<std::size_t>(n));
    r.read(a.values.data(), a.values.size() * sizeof(float), "values");
    state.push_back(std::move(a));
  }
  if (!r.at_end()) throw IoError(path.string() + ": trailing bytes after byte offset " + std::to_string(r.offset()));
  Model m(config, 0);
  try {
    m.load_state(state);
  } catch (const ContractViolation& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace abus
