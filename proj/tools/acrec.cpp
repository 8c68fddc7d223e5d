#include "acrec/cli.hpp"

int main(int argc, char** argv) { return acrec::cli::run(argc, argv); }
