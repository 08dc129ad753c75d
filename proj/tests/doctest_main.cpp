#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "etad/fpenv.hpp"

int main(int argc, char** argv) {
  etad::use_fast_fp_subnormals();
  return doctest::Context(argc, argv).run();
}
