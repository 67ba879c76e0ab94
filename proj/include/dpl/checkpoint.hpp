#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include <torch/torch.h>

namespace dpl {

std::string sha256_hex(std::string_view bytes);

// SHA-256 over the raw bytes (plus shape and dtype) of every tensor in order.
std::string parameter_hash(const std::vector<torch::Tensor>& tensors);

// Versioned binary container:
//   8 bytes  magic "DPLCKPT\0"
//   u32 LE   format version
//   u64 LE   manifest length, then the manifest as JSON:
//            {"version":1,"meta":{...},"entries":[{"name","offset","size","sha256"}]}
//   blobs    concatenated entry payloads; offsets are relative to the first blob
// Module entries hold torch archives; text entries (quantizers, config) hold
// plain UTF-8.
class Checkpoint {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  void put_module(const std::string& name, const torch::nn::Module& module);
  void put_optimizer(const std::string& name, const torch::optim::Optimizer& optimizer);
  void put_text(const std::string& name, std::string text);

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  std::vector<std::string> names() const;

  // Throws CheckpointError when the entry is absent or does not load.
  void load_module(const std::string& name, torch::nn::Module& module) const;
  void load_optimizer(const std::string& name, torch::optim::Optimizer& optimizer) const;
  const std::string& text(const std::string& name) const;

  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::map<std::string, std::string> entries_;
  std::vector<std::string> order_;
  nlohmann::json meta_ = nlohmann::json::object();

  void put(const std::string& name, std::string bytes);
};

}  // namespace dpl
