#include "tokval/cli.hpp"

int main(int argc, char** argv) { return tokval::run_cli(argc, argv); }
