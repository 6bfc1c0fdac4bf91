#include "gaqn/cli.hpp"

int main(int argc, char** argv) { return gaqn::cli::run(argc, argv); }
