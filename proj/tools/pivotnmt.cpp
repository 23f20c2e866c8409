#include "pivotnmt/cli/dispatch.hpp"

int main(int argc, char** argv) {
    pivotnmt::nn::tune_allocator();
    return pivotnmt::cli::dispatch(argc, argv);
}
