#include <iostream>

#include "bwcache/experiment.hpp"

int main(int argc, char** argv) { return bwcache::run_cli(argc, argv, std::cout, std::cerr); }
