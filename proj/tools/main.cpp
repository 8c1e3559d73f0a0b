#include "rae/commands.hpp"

int main(int argc, char** argv) { return rae::cli::run(argc, argv); }
