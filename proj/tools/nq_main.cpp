#include <iostream>

#include "nq/cli.hpp"

int main(int argc, char** argv) { return nq::run_cli(argc, argv, std::cout, std::cerr); }
