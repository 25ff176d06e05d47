#include "shiftipw/cli.hpp"

int main(int argc, char** argv) { return shiftipw::cli::run(argc, argv); }
