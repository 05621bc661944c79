#include "litediff/commands.hpp"

int main(int argc, char** argv) { return litediff::run_cli(argc, argv); }
