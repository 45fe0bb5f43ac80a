#include "codecsep/cli.hpp"

int main(int argc, char** argv) { return codecsep::cli_main(argc, argv); }
