#include "pcfglab/cli.hpp"

int main(int argc, char** argv) { return pcfglab::cli_dispatch(argc, argv); }
