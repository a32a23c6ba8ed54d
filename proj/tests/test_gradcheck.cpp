#include <doctest.h>

#include <random>

#include "support/gradcheck.hpp"

TEST_CASE("finite-difference gradient check, 20 random cases per op") {
  std::mt19937_64 rng(20240601);
  for (const auto& op : gradcheck::all_cases()) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto r = gradcheck::check(op, rng);
      INFO(op.name << " trial " << trial);
      CHECK(r.checked > 0);
      CHECK(r.max_relative_error < 1e-5);
    }
  }
}
