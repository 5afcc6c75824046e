// Command line entry point; subcommands are implemented in mdt/cli.hpp.
#include "mdt/cli.hpp"

int main(int argc, char** argv) { return mdt::cli::run(argc, argv); }
