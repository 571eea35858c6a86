#include <vector>

#include "shardweave/cli.hpp"

int main(int argc, char** argv) {
  return shardweave::cli_main(std::vector<std::string>(argv + 1, argv + argc));
}
