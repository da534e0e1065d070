#include "moh/cli.hpp"

int main(int argc, char** argv) { return moh::cli::main(argc, argv); }
