#include <iostream>
#include <string>
#include <vector>

#include "stylenerf/cli.hpp"

int main(int argc, char** argv) {
  stylenerf::tune_allocator();
  std::vector<std::string> args(argv + 1, argv + argc);
  return stylenerf::run_cli(args, std::cout, std::cerr);
}
