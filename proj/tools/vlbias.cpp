#include "vlbias/commands.hpp"

int main(int argc, char** argv) { return vlbias::cli_main(argc, argv); }
