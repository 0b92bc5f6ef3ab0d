#include "probebench/cli.hpp"

int main(int argc, char** argv) { return probebench::cli::run(argc, argv); }
