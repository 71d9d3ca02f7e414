#include <iostream>
#include <string>
#include <vector>

#include "magma/cli.hpp"

int main(int argc, char** argv) {
  return magma::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
