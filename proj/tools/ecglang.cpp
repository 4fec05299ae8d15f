#include <cstdio>

// Placeholder entry point; the subcommand dispatcher lands with the CLI
// module.
int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::fprintf(stderr, "ecglang: command line interface not built yet\n");
  return 2;
}
