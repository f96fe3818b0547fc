// SPDX-License-Identifier: Apache-2.0
#include "matte/cli.hpp"

int main(int argc, char** argv) {
    return matte::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
