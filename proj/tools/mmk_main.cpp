#include <iostream>

#include "mmk/cli.hpp"

int main(int argc, char** argv) { return mmk::run_cli(argc, argv, std::cin, std::cout, std::cerr); }
