#include <iostream>
#include <string>
#include <vector>

#include "mmattack/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return mmattack::cli::run_cli(args, std::cout, std::cerr);
}
