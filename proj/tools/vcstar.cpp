#include "vcstar/cli.hpp"

int main(int argc, char** argv) { return vcstar::cli_main(argc, argv); }
