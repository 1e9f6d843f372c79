#include "melodyflow/cli.hpp"

int main(int argc, char** argv) { return melodyflow::run(argc, argv); }
