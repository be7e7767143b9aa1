#include "rhosim/cli.hpp"

int main(int argc, char** argv) { return rhosim::cli::dispatch(argc, argv); }
