#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/types.h>

namespace stylenerf {

/// Versioned, self-describing tensor container used for every checkpoint.
///
/// On-disk layout (all integers little-endian):
///   bytes 0..7   magic "SNRFARCH"
///   bytes 8..11  uint32 format version
///   bytes 12..19 uint64 header length N
///   next N bytes UTF-8 JSON header {"kind", "meta", "tensors": [...]}
///   remainder    raw tensor payloads, contiguous, in header order
///
/// Tensors are stored in name order and the JSON header is dumped with sorted
/// keys, so identical contents always serialize to identical bytes.
class TensorArchive {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  TensorArchive() = default;
  explicit TensorArchive(std::string kind) : kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }
  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  void put(const std::string& name, const torch::Tensor& tensor);
  bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  /// Throws std::runtime_error naming the missing tensor.
  const torch::Tensor& get(const std::string& name) const;
  std::vector<std::string> names() const;

  void save(const std::filesystem::path& path) const;
  /// Loads and checks magic, version and (optionally) kind.
  static TensorArchive load(const std::filesystem::path& path,
                            const std::string& expected_kind = {});

 private:
  std::string kind_;
  nlohmann::json meta_ = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors_;
};

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor*>>;

void write_named(TensorArchive& archive, const std::string& prefix, const NamedTensors& tensors);
/// Copies stored tensors into the given slots, preserving each slot's dtype.
void read_named(const TensorArchive& archive, const std::string& prefix, const NamedTensors& tensors);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(const std::string& bytes);

}  // namespace stylenerf
