#include <iostream>

#include "qallm/cli.h"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return qallm::dispatch(args, std::cout, std::cerr);
}
