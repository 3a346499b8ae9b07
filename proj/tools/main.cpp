#include <string>
#include <vector>

#include "m2d/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return m2d::run_cli(args);
}
