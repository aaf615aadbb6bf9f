#include "morpheus/cli.hpp"

int main(int argc, char** argv) { return morpheus::cli::run(argc, argv); }
