#include "cli_app.hpp"

int main(int argc, char** argv) { return bamrl::run_cli(argc, argv); }
