#include "cvflow/cli.hpp"

int main(int argc, char** argv) { return cvflow::cli::run(argc, argv); }
