#include <doctest.h>

#include <set>
#include <vector>

#include "nrt/rng.hpp"

using namespace nrt;

TEST_CASE("streams are deterministic and path-sensitive") {
  auto a = RngStream::derive(7, RngPurpose::Trace, {1, 2, 3});
  auto b = RngStream::derive(7, RngPurpose::Trace, {1, 2, 3});
  auto c = RngStream::derive(7, RngPurpose::Trace, {1, 2, 4});
  auto d = RngStream::derive(7, RngPurpose::Eval, {1, 2, 3});
  CHECK(a.next_u64() == b.next_u64());
  CHECK(a.next_u64() == b.next_u64());
  auto a2 = RngStream::derive(7, RngPurpose::Trace, {1, 2, 3});
  CHECK(a2.next_u64() != c.next_u64());
  CHECK(RngStream::derive(7, RngPurpose::Trace, {1, 2, 3}).next_u64() != d.next_u64());
  CHECK(RngStream::derive(8, RngPurpose::Trace, {1, 2, 3}).next_u64() !=
        RngStream::derive(7, RngPurpose::Trace, {1, 2, 3}).next_u64());
}

TEST_CASE("doubles live in [0,1) and look uniform") {
  auto r = RngStream::derive(42, RngPurpose::Test);
  double sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = r.next_double();
    REQUIRE(v >= 0.0);
    REQUIRE(v < 1.0);
    sum += v;
  }
  CHECK(sum / n == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("next_below covers the range without bias spikes") {
  auto r = RngStream::derive(3, RngPurpose::Test);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) ++counts[r.next_below(5)];
  for (int c : counts) CHECK(c > 800);
}
