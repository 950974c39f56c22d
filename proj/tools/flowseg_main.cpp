#include <iostream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "cli.hpp"

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Keep large per-iteration buffers on the heap instead of fresh mappings.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return flowseg::cli::run(argc, argv, std::cout, std::cerr);
}
