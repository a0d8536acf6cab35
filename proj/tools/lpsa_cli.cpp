#include "cli.hpp"

int main(int argc, char** argv) { return lpsa::cli::run(argc, argv); }
