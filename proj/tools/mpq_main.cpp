#include <iostream>

#include "mpq/cli.hpp"

int main(int argc, char** argv) {
    return mpq::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
