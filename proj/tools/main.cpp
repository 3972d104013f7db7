#include <iostream>

#include "rscope/cli.hpp"

int main(int argc, char** argv) { return rscope::run_cli(argc, argv, std::cout, std::cerr); }
