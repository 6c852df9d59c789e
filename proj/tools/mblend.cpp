#include "mblend/cli.hpp"

int main(int argc, char** argv) { return mblend::cli::run(argc, argv); }
