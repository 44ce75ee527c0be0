#include "xtalk/cli.hpp"

int main(int argc, char** argv) { return xtalk::cli::run(argc, argv); }
