#include <iostream>

#include "remem/cli.hpp"

int main(int argc, char** argv) { return remem::cli::run(argc, argv, std::cout, std::cerr); }
