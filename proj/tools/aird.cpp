#include "aird/cli.hpp"

int main(int argc, char** argv) { return aird::cli::dispatch(argc, argv); }
