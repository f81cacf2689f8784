#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "partseg/gan_backbone.hpp"

int main(int argc, char** argv) {
  partseg::configure_deterministic_runtime();
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
