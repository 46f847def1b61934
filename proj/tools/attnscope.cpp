#include "attnscope/cli.hpp"

int main(int argc, char** argv) { return attnscope::cli::run_cli(argc, argv); }
