#include "consisaug/cli.hpp"

int main(int argc, char** argv) { return consisaug::cli::run(argc, argv); }
