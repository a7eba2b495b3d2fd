#include "tssan/cli.hpp"

int main(int argc, char** argv) { return tssan::cli::run_cli(argc, argv); }
