#include "calrank/cli.hpp"

int main(int argc, char** argv) {
    return calrank::cli::dispatch(argc, argv);
}
