#include <string>
#include <vector>

#include "spdn/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return spdn::cli_run(args);
}
