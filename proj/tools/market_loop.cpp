#include "market_loop/cli.hpp"

int main(int argc, char** argv) { return market_loop::cli::run_cli(argc, argv); }
