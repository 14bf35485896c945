#include <iostream>

#include "masr/cli.hpp"

int main(int argc, char** argv) { return masr::cli::run(argc, argv, std::cout, std::cerr); }
