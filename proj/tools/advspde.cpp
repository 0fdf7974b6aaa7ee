#include "advspde/cli.hpp"

int main(int argc, char** argv) { return advspde::cli::main(argc, argv); }
