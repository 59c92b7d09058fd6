#include "cigocc/cli.hpp"

int main(int argc, char** argv) { return cigocc::cli::run(argc, argv); }
