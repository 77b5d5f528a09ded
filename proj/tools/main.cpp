#include <iostream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "deeptraverse/train.hpp"

int main(int argc, char** argv) {
    dt::retain_freed_memory();
    try {
        return dt::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
