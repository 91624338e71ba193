#include <iostream>

#include "ldte/cli.hpp"

int main(int argc, char** argv) { return ldte::run_cli(argc, argv, std::cout, std::cerr); }
