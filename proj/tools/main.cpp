#include "denoise/cli.hpp"

int main(int argc, char** argv) { return denoise::cli_main(argc, argv); }
