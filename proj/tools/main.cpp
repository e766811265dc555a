#include "tallpack/cli.hpp"

int main(int argc, char** argv) { return tallpack::cli::run(argc, argv); }
