#include "funnel/harness.hpp"

int main(int argc, char** argv) {
  return funnel::harness::cli_main(argc, argv);
}
