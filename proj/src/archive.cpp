#include "stylenerf/archive.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <openssl/evp.h>
#include <torch/torch.h>

namespace stylenerf {
namespace {

constexpr std::array<char, 8> kMagic = {'S', 'N', 'R', 'F', 'A', 'R', 'C', 'H'};

std::string dtype_name(torch::ScalarType type) {
  switch (type) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    case torch::kInt32: return "i32";
    case torch::kUInt8: return "u8";
    case torch::kBool: return "bool";
    default: throw std::runtime_error("archive: unsupported tensor dtype " + std::string(c10::toString(type)));
  }
}

torch::ScalarType dtype_from_name(const std::string& name) {
  if (name == "f32") return torch::kFloat32;
  if (name == "f64") return torch::kFloat64;
  if (name == "i64") return torch::kInt64;
  if (name == "i32") return torch::kInt32;
  if (name == "u8") return torch::kUInt8;
  if (name == "bool") return torch::kBool;
  throw std::runtime_error("archive: unknown dtype tag '" + name + "'");
}

template <class T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("archive: truncated file");
  return value;
}

std::string hex(const unsigned char* data, unsigned int size) {
  std::ostringstream out;
  for (unsigned int i = 0; i < size; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(data[i]);
  return out.str();
}

}  // namespace

void TensorArchive::put(const std::string& name, const torch::Tensor& tensor) {
  tensors_[name] = tensor.detach().to(torch::kCPU).contiguous().clone();
}

const torch::Tensor& TensorArchive::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::runtime_error("archive '" + kind_ + "': missing tensor '" + name + "'");
  return it->second;
}

std::vector<std::string> TensorArchive::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["kind"] = kind_;
  header["meta"] = meta_;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : tensors_) {
    const auto nbytes = static_cast<std::uint64_t>(tensor.numel() * tensor.element_size());
    header["tensors"].push_back({{"name", name},
                                 {"dtype", dtype_name(tensor.scalar_type())},
                                 {"shape", tensor.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string header_text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("archive: cannot write " + path.string());
  out.write(kMagic.data(), kMagic.size());
  write_pod<std::uint32_t>(out, kFormatVersion);
  write_pod<std::uint64_t>(out, header_text.size());
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, tensor] : tensors_) {
    out.write(static_cast<const char*>(tensor.data_ptr()), tensor.numel() * tensor.element_size());
  }
  if (!out) throw std::runtime_error("archive: write failed for " + path.string());
}

TensorArchive TensorArchive::load(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("archive: cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw std::runtime_error("archive: bad magic in " + path.string());
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kFormatVersion) {
    throw std::runtime_error("archive: unsupported version " + std::to_string(version) + " in " + path.string());
  }
  const auto header_size = read_pod<std::uint64_t>(in);
  std::string header_text(header_size, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_size));
  if (!in) throw std::runtime_error("archive: truncated header in " + path.string());
  const auto header = nlohmann::json::parse(header_text);

  TensorArchive archive(header.at("kind").get<std::string>());
  if (!expected_kind.empty() && archive.kind_ != expected_kind) {
    throw std::runtime_error("archive " + path.string() + " holds '" + archive.kind_ + "', expected '" +
                             expected_kind + "'");
  }
  archive.meta_ = header.at("meta");
  const auto payload_start = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto dtype = dtype_from_name(entry.at("dtype").get<std::string>());
    auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(tensor.numel() * tensor.element_size())) {
      throw std::runtime_error("archive: size mismatch for tensor " + entry.at("name").get<std::string>());
    }
    in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    in.read(static_cast<char*>(tensor.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw std::runtime_error("archive: truncated payload in " + path.string());
    archive.tensors_[entry.at("name").get<std::string>()] = tensor;
  }
  return archive;
}

void write_named(TensorArchive& archive, const std::string& prefix, const NamedTensors& tensors) {
  for (const auto& [name, tensor] : tensors) archive.put(prefix + name, *tensor);
}

void read_named(const TensorArchive& archive, const std::string& prefix, const NamedTensors& tensors) {
  for (const auto& [name, tensor] : tensors) {
    const auto& stored = archive.get(prefix + name);
    if (tensor->defined() && tensor->sizes() == stored.sizes()) {
      // In place, so optimizers holding this tensor keep tracking it.
      torch::NoGradGuard no_grad;
      tensor->copy_(stored.to(tensor->scalar_type()));
    } else {
      const auto dtype = tensor->defined() ? tensor->scalar_type() : stored.scalar_type();
      *tensor = stored.to(dtype).clone();
    }
  }
}

std::string sha256_bytes(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int size = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest.data(), &size, EVP_sha256(), nullptr);
  return hex(digest.data(), size);
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("sha256: cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buffer{};
  while (in) {
    in.read(buffer.data(), buffer.size());
    EVP_DigestUpdate(ctx, buffer.data(), static_cast<size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int size = 0;
  EVP_DigestFinal_ex(ctx, digest.data(), &size);
  EVP_MD_CTX_free(ctx);
  return hex(digest.data(), size);
}

}  // namespace stylenerf
