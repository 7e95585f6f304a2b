#include <iostream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "expredit/cli.hpp"

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    std::vector<std::string> args(argv + 1, argv + argc);
    return expredit::dispatch(args, std::cout, std::cerr);
}
