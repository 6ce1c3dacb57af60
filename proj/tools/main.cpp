#include <vector>

#include "monelab/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return monelab::dispatch(args);
}
