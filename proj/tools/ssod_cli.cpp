#include "ssod/cli.hpp"

int main(int argc, char** argv) { return ssod::cli_main(argc, argv); }
