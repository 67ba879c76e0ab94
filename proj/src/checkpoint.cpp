#include "dpl/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "dpl/errors.hpp"

namespace dpl {

namespace {

constexpr char kMagic[8] = {'D', 'P', 'L', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void write_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw CheckpointError("truncated checkpoint header");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
  return value;
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, digest, &len);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string parameter_hash(const std::vector<torch::Tensor>& tensors) {
  Sha256 h;
  for (const auto& t : tensors) {
    auto c = t.detach().contiguous().cpu();
    const auto dtype = static_cast<int>(c.scalar_type());
    h.update(&dtype, sizeof(dtype));
    for (auto d : c.sizes()) h.update(&d, sizeof(d));
    h.update(c.data_ptr(), c.numel() * c.element_size());
  }
  return h.hex();
}

void Checkpoint::put(const std::string& name, std::string bytes) {
  if (!entries_.count(name)) order_.push_back(name);
  entries_[name] = std::move(bytes);
}

void Checkpoint::put_module(const std::string& name, const torch::nn::Module& module) {
  torch::serialize::OutputArchive archive;
  module.save(archive);
  std::ostringstream os;
  archive.save_to(os);
  put(name, os.str());
}

void Checkpoint::put_optimizer(const std::string& name, const torch::optim::Optimizer& optimizer) {
  torch::serialize::OutputArchive archive;
  optimizer.save(archive);
  std::ostringstream os;
  archive.save_to(os);
  put(name, os.str());
}

void Checkpoint::put_text(const std::string& name, std::string text) { put(name, std::move(text)); }

std::vector<std::string> Checkpoint::names() const { return order_; }

void Checkpoint::load_module(const std::string& name, torch::nn::Module& module) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw CheckpointError("checkpoint has no entry " + name);
  try {
    std::istringstream is(it->second);
    torch::serialize::InputArchive archive;
    archive.load_from(is);
    module.load(archive);
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot load " + name + ": " + e.what_without_backtrace());
  }
}

void Checkpoint::load_optimizer(const std::string& name, torch::optim::Optimizer& optimizer) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw CheckpointError("checkpoint has no entry " + name);
  try {
    std::istringstream is(it->second);
    torch::serialize::InputArchive archive;
    archive.load_from(is);
    optimizer.load(archive);
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot load " + name + ": " + e.what_without_backtrace());
  }
}

const std::string& Checkpoint::text(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw CheckpointError("checkpoint has no entry " + name);
  return it->second;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json manifest;
  manifest["version"] = kFormatVersion;
  manifest["meta"] = meta_;
  manifest["entries"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& name : order_) {
    const auto& bytes = entries_.at(name);
    manifest["entries"].push_back(
        {{"name", name}, {"offset", offset}, {"size", bytes.size()}, {"sha256", sha256_hex(bytes)}});
    offset += bytes.size();
  }
  const std::string header = manifest.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_le<std::uint32_t>(out, kFormatVersion);
    write_le<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& name : order_) {
      const auto& bytes = entries_.at(name);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    if (!out) throw CheckpointError("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError(path.string() + " is not a dpl checkpoint");
  const auto version = read_le<std::uint32_t>(in);
  if (version != kFormatVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto header_size = read_le<std::uint64_t>(in);
  std::string header(header_size, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_size));
  if (!in) throw CheckpointError("truncated checkpoint manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Checkpoint ckpt;
  ckpt.meta_ = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("entries")) {
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto size = e.at("size").get<std::uint64_t>();
    if (offset + size > blob.size()) throw CheckpointError("checkpoint entry out of range");
    std::string bytes = blob.substr(offset, size);
    if (sha256_hex(bytes) != e.at("sha256").get<std::string>())
      throw CheckpointError("checksum mismatch for entry " + e.at("name").get<std::string>());
    ckpt.put(e.at("name").get<std::string>(), std::move(bytes));
  }
  return ckpt;
}

}  // namespace dpl
