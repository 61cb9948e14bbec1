#include "cli.hpp"

int main(int argc, char** argv) { return evflow::cli::run({argv, argv + argc}); }
