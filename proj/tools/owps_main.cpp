#include "owps/cli.hpp"

int main(int argc, char** argv) { return owps::cli::run_command(argc, argv); }
