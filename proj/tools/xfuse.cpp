#include "xfuse/cli.hpp"

int main(int argc, char** argv) { return xfuse::cli::cli_main(argc, argv); }
