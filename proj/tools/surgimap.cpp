#include "surgimap/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
    return surgimap::run_cli(argc, argv, std::cout, std::cerr);
}
