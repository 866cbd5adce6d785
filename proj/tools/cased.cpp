#include "cased/cli.hpp"

int main(int argc, char** argv) { return cased::cli::run(argc, argv); }
