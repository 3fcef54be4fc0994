#include "stylenerf/dataset.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <torch/torch.h>

#include "stylenerf/image_io.hpp"

namespace stylenerf {
namespace {

std::string format_double(double v) {
  std::array<char, 32> buf{};
  std::snprintf(buf.data(), buf.size(), "%.17g", v);
  return buf.data();
}

class ManifestError : public std::runtime_error {
 public:
  ManifestError(const std::filesystem::path& file, int line, const std::string& what)
      : std::runtime_error(file.string() + ":" + std::to_string(line) + ": " + what) {}
};

struct Record {
  int line = 0;
  std::vector<std::string> fields;
};

std::vector<Record> read_records(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("manifest not found: " + file.string());
  std::vector<Record> records;
  std::string text;
  int line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (auto hash = text.find('#'); hash != std::string::npos) text.resize(hash);
    std::istringstream tokens(text);
    Record record{line, {}};
    for (std::string token; tokens >> token;) record.fields.push_back(token);
    if (!record.fields.empty()) records.push_back(std::move(record));
  }
  return records;
}

double parse_double(const std::filesystem::path& file, const Record& r, size_t index, const char* what) {
  if (index >= r.fields.size()) throw ManifestError(file, r.line, std::string("missing ") + what);
  try {
    size_t used = 0;
    const double v = std::stod(r.fields[index], &used);
    if (used != r.fields[index].size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ManifestError(file, r.line, std::string("invalid ") + what + " '" + r.fields[index] + "'");
  }
}

int parse_int(const std::filesystem::path& file, const Record& r, size_t index, const char* what) {
  const double v = parse_double(file, r, index, what);
  if (v != static_cast<double>(static_cast<int>(v))) {
    throw ManifestError(file, r.line, std::string(what) + " must be an integer");
  }
  return static_cast<int>(v);
}

/// Parses "<width> <height> <focal> <cx> <cy> <m00..m23>" starting at `first`.
CameraPose parse_camera(const std::filesystem::path& file, const Record& r, size_t first) {
  Intrinsics k;
  k.width = parse_int(file, r, first, "width");
  k.height = parse_int(file, r, first + 1, "height");
  k.focal = parse_double(file, r, first + 2, "focal");
  k.cx = parse_double(file, r, first + 3, "cx");
  k.cy = parse_double(file, r, first + 4, "cy");
  Eigen::Matrix3d rotation;
  Eigen::Vector3d translation;
  for (int row = 0; row < 3; ++row) {
    for (int col = 0; col < 4; ++col) {
      const double v = parse_double(file, r, first + 5 + static_cast<size_t>(row * 4 + col), "pose entry");
      if (col < 3) rotation(row, col) = v;
      else translation(row) = v;
    }
  }
  if (!is_rotation(rotation)) throw ManifestError(file, r.line, "rotation is not orthonormal with determinant +1");
  try {
    return CameraPose(k, rotation, translation);
  } catch (const std::invalid_argument& e) {
    throw ManifestError(file, r.line, e.what());
  }
}

std::string camera_fields(const CameraPose& camera) {
  const auto& k = camera.intrinsics();
  std::string out = std::to_string(k.width) + " " + std::to_string(k.height) + " " + format_double(k.focal) + " " +
                    format_double(k.cx) + " " + format_double(k.cy);
  const auto m = camera.camera_to_world();
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 4; ++col) out += " " + format_double(m(row, col));
  return out;
}

void expect_header(const std::filesystem::path& file, const std::vector<Record>& records, const std::string& magic) {
  if (records.empty() || records.front().fields.size() != 2 || records.front().fields[0] != magic) {
    throw ManifestError(file, records.empty() ? 1 : records.front().line, "expected header '" + magic + " 1'");
  }
  if (records.front().fields[1] != "1") {
    throw ManifestError(file, records.front().line, "unsupported version " + records.front().fields[1]);
  }
}

constexpr size_t kCameraFieldCount = 5 + 12;

}  // namespace

std::vector<PosedImage> Dataset::posed(const std::string& split) const {
  std::vector<PosedImage> out;
  for (const auto& v : views)
    if (v.split == split) out.push_back(PosedImage{v.camera, v.image});
  return out;
}

std::vector<const DatasetView*> Dataset::select(const std::string& split) const {
  std::vector<const DatasetView*> out;
  for (const auto& v : views)
    if (v.split == split) out.push_back(&v);
  return out;
}

std::string Dataset::summary() const {
  std::ostringstream out;
  out << views.size() << " views (" << select("train").size() << " train, " << select("test").size() << " test)";
  if (!views.empty()) out << ", " << views.front().camera.width() << "x" << views.front().camera.height();
  out << ", near " << near << ", far " << far;
  return out.str();
}

Dataset ingest_dataset(const std::filesystem::path& dir) {
  const auto manifest = dir / kManifestName;
  const auto records = read_records(manifest);
  expect_header(manifest, records, "stylenerf-dataset");
  Dataset dataset;
  bool have_bounds = false;
  for (size_t i = 1; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto& kind = r.fields[0];
    if (kind == "bounds") {
      if (r.fields.size() != 3) throw ManifestError(manifest, r.line, "bounds needs <near> <far>");
      dataset.near = parse_double(manifest, r, 1, "near");
      dataset.far = parse_double(manifest, r, 2, "far");
      if (!(dataset.near > 0.0) || !(dataset.far > dataset.near)) {
        throw ManifestError(manifest, r.line, "bounds must satisfy 0 < near < far");
      }
      have_bounds = true;
    } else if (kind == "view") {
      if (r.fields.size() != 4 + kCameraFieldCount + 1) {
        throw ManifestError(manifest, r.line,
                            "view record needs " + std::to_string(4 + kCameraFieldCount + 1) + " fields, got " +
                                std::to_string(r.fields.size()));
      }
      DatasetView view;
      view.id = r.fields[1];
      view.image_file = r.fields[2];
      view.split = r.fields[3];
      if (view.split != "train" && view.split != "test") {
        throw ManifestError(manifest, r.line, "split must be 'train' or 'test'");
      }
      view.camera = parse_camera(manifest, r, 4);
      view.depth_file = r.fields.back() == "-" ? "" : r.fields.back();
      dataset.views.push_back(std::move(view));
    } else {
      throw ManifestError(manifest, r.line, "unknown record '" + kind + "'");
    }
  }
  if (!have_bounds) throw std::runtime_error(manifest.string() + ": missing bounds record");
  if (dataset.views.empty()) throw std::runtime_error(manifest.string() + ": no views listed");

  for (auto& view : dataset.views) {
    const auto image_path = dir / view.image_file;
    if (!std::filesystem::exists(image_path)) {
      throw std::runtime_error("dataset image missing: " + image_path.string() + " (view " + view.id + ")");
    }
    view.image = read_png(image_path);
    if (view.image.size(0) != view.camera.height() || view.image.size(1) != view.camera.width()) {
      throw std::runtime_error("dataset image " + image_path.string() + " does not match its manifest size");
    }
    if (!view.depth_file.empty()) {
      view.depth = read_pfm(dir / view.depth_file);
      if (view.depth.size(0) != view.camera.height() || view.depth.size(1) != view.camera.width()) {
        throw std::runtime_error("depth map " + view.depth_file + " does not match its manifest size");
      }
    }
  }
  return dataset;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / kManifestName);
  if (!out) throw std::runtime_error("cannot write " + (dir / kManifestName).string());
  out << "stylenerf-dataset 1\n";
  out << "bounds " << format_double(dataset.near) << " " << format_double(dataset.far) << "\n";
  out << "# view <id> <image> <split> <width> <height> <focal> <cx> <cy> <3x4 camera-to-world, row-major> <depth|->\n";
  for (const auto& view : dataset.views) {
    out << "view " << view.id << " " << view.image_file << " " << view.split << " " << camera_fields(view.camera) << " "
        << (view.depth_file.empty() ? "-" : view.depth_file) << "\n";
    write_png(dir / view.image_file, view.image);
    if (!view.depth_file.empty()) write_pfm(dir / view.depth_file, view.depth);
  }
}

std::vector<NamedCamera> read_camera_path(const std::filesystem::path& file) {
  const auto records = read_records(file);
  expect_header(file, records, "stylenerf-camera-path");
  std::vector<NamedCamera> cameras;
  for (size_t i = 1; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.fields[0] != "camera") throw ManifestError(file, r.line, "unknown record '" + r.fields[0] + "'");
    if (r.fields.size() != 2 + kCameraFieldCount) throw ManifestError(file, r.line, "camera record has wrong field count");
    cameras.push_back(NamedCamera{r.fields[1], parse_camera(file, r, 2)});
  }
  if (cameras.empty()) throw std::runtime_error(file.string() + ": camera path is empty");
  return cameras;
}

void write_camera_path(const std::filesystem::path& file, const std::vector<NamedCamera>& cameras) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "stylenerf-camera-path 1\n";
  for (const auto& c : cameras) out << "camera " << c.id << " " << camera_fields(c.camera) << "\n";
}

}  // namespace stylenerf
