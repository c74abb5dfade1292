#include "lidarnerf/cli.hpp"

int main(int argc, char** argv) { return lnerf::cli::run(argc, argv); }
