#include "preim/version.hpp"

#include <cstdio>

int main() {
  std::printf("preim %s\n", PREIM_VERSION);
  return 0;
}
