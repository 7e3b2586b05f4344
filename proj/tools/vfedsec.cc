#include <iostream>

#include "vfedsec/cli.h"

int main(int argc, char** argv) {
  return vfedsec::RunCli(argc, argv, std::cout, std::cerr);
}
