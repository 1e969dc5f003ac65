#include "cli.hpp"

int main(int argc, char** argv) { return cut::cli::run_cli(argc, argv); }
