#include "glance/cli.hpp"

int main(int argc, char** argv) { return glance::cli::run(argc, argv); }
