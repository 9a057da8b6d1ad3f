#include "xdiag/cli.hpp"

int main(int argc, char** argv) {
  return xdiag::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
