#include "gmoe/cli/cli.hpp"

int main(int argc, char** argv) {
  return gmoe::cli::run({argv + 1, argv + argc});
}
