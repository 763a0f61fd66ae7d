#include "mfbslq/cli.hpp"

int main(int argc, char** argv) { return mfbslq::cli::main(argc, argv); }
