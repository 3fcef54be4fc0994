#include <filesystem>
#include <iostream>

#include "stylenerf/archive.hpp"
#include "stylenerf/stylizer.hpp"

// Writes the frozen encoder weights. The seed is fixed; the library pins the
// resulting SHA-256 and refuses any other file.
int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_encoder_asset <output>\n";
    return 1;
  }
  const std::filesystem::path out = argv[1];
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  stylenerf::PerceptualEncoder::generate(stylenerf::EncoderLayout{}, 20220601).save(out);
  std::cout << out.string() << " sha256 " << stylenerf::sha256_file(out) << "\n";
  return 0;
}
