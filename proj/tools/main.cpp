#include <iostream>

#include "sseg/cli.hpp"

int main(int argc, char** argv) {
    return sseg::run_cli(argc, argv, std::cout, std::cerr);
}
