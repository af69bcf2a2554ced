#include <string>
#include <vector>

#include "counterfort/cli.hpp"

int main(int argc, char** argv) {
  return counterfort::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
