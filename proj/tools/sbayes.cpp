#include "sbayes/cli.hpp"

int main(int argc, char** argv) { return sbayes::cli_main(argc, argv); }
