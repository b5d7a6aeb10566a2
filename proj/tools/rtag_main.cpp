// tools/rtag_main.cpp

#include <vector>

#include "rtag/cli.hpp"

int main(int argc, char** argv) {
  return rtag::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
