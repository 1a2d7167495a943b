#include <iostream>

#include "gtcnn/cli.hpp"

int main(int argc, char** argv) {
  return gtcnn::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
