#include "lungseg/cli.hpp"

int main(int argc, char** argv) { return lungseg::run_cli(argc, argv); }
