#include <iostream>

#include "gloria/cli.hpp"

int main(int argc, char** argv) { return gloria::run(argc, argv, std::cout, std::cerr); }
