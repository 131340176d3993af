#include <iostream>

#include "sal_lab/cli/cli.hpp"

int main(int argc, char** argv) { return sal_lab::cli_main(argc, argv, std::cout, std::cerr); }
