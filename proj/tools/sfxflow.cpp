#include "cli_app.hpp"

int main(int argc, char** argv) { return sfx::cli::run(argc, argv); }
