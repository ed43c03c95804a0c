#include "abus/cli.hpp"

int main(int argc, char** argv) { return abus::run_cli(argc, argv); }
