#include "fdseg/experiments.hpp"

int main(int argc, char** argv) { return fdseg::run_cli(argc, argv); }
