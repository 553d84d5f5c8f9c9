#include "dstgtn/cli.hpp"

int main(int argc, char** argv) { return dstgtn::run_cli(argc, argv); }
