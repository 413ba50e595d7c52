#include <iostream>
#include <string>
#include <vector>

#include "dknn/cli.hpp"

int main(int argc, char** argv)
{
    std::vector<std::string> args(argv + 1, argv + argc);
    return dknn::cli::run(args, std::cout, std::cerr);
}
