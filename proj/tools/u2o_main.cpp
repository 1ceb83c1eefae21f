#include "u2o/harness.hpp"

int main(int argc, char** argv) { return u2o::harness::cli_main(argc, argv); }
