#include "nerftap/cli/cli.hpp"

int main(int argc, char** argv) { return nerftap::cli::run(argc, argv); }
