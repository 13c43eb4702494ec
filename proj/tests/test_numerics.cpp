// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>
#include <string>

#include "dia/diffop.hpp"
#include "dia/io.hpp"
#include "dia/rng.hpp"
#include "dia/tensor.hpp"

using namespace dia;

TEST(Tensor, RejectsEmptyAndZeroExtentShapes) {
  EXPECT_THROW(Tensor(Shape{}), std::invalid_argument);
  EXPECT_THROW(Tensor(Shape{3, 0}), std::invalid_argument);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST(Tensor, ArithmeticMatchesElementwiseLoop) {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b({2, 3}, {6, 5, 4, 3, 2, 1});
  const Tensor c = lincomb(2.0, a, -0.5, b);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(c[i], 2.0 * a[i] - 0.5 * b[i]);
  EXPECT_DOUBLE_EQ(dot(a, b), 1 * 6 + 2 * 5 + 3 * 4 + 4 * 3 + 5 * 2 + 6 * 1);
  EXPECT_DOUBLE_EQ(sum(a), 21.0);
  EXPECT_DOUBLE_EQ(max_abs(-a), 6.0);
  EXPECT_THROW(a + Tensor::zeros({3, 2}), std::invalid_argument);
}

TEST(Tensor, ReshapeKeepsDataAndChecksSize) {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor r = a.reshaped({6});
  EXPECT_EQ(r.shape(), Shape{6});
  EXPECT_EQ(r[4], 5.0);
  EXPECT_THROW(a.reshaped({4}), std::invalid_argument);
}

TEST(Tensor, MaxRelErrorIsInfNormRatio) {
  const Tensor a = Tensor::vector({1.0, 2.0}), b = Tensor::vector({1.5, 4.0});
  EXPECT_DOUBLE_EQ(max_rel_error(a, b), 2.0 / 4.0);
}

TEST(Rng, KnownHashVectors) {
  // standard FNV-1a 64 test vectors
  EXPECT_EQ(detail::fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(detail::fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(detail::fnv1a("foobar"), 0x85944171f73967e8ULL);
  // splitmix64 applied to state 0 (reference first output of the generator)
  EXPECT_EQ(detail::splitmix64(0), 0xe220a8397b1dcdafULL);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(7), b(7);
  const Tensor x = sample_gaussian(a, {4, 5}), y = sample_gaussian(b, {4, 5});
  EXPECT_TRUE(x == y);
}

TEST(Rng, SplitsAreIndependentOfParentConsumption) {
  Rng a(7);
  const Rng child_before = a.split("task");
  a.next_u64();
  Rng c1 = child_before, c2 = a.split("task");
  EXPECT_EQ(c1.next_u64(), c2.next_u64());
  EXPECT_NE(Rng(7).split(1).next_u64(), Rng(7).split(2).next_u64());
  EXPECT_NE(Rng(7).split("a").next_u64(), Rng(7).split("b").next_u64());
}

TEST(Rng, GaussianMomentsLawOfLargeNumbers) {
  Rng r(7);
  const std::size_t n = 100000;
  const Tensor x = sample_gaussian(r, {n});
  const double mean = sum(x) / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n - 1;
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(Rng, SampleGaussianRejectsZeroExtent) {
  Rng r(1);
  EXPECT_THROW(sample_gaussian(r, {0}), std::invalid_argument);
  EXPECT_THROW(sample_gaussian(r, {}), std::invalid_argument);
}

TEST(Rng, UniformAndBelowStayInRange) {
  Rng r(3);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    counts[r.below(7)]++;
  }
  // chi-squared with 6 dof; 22.46 is the 0.999 quantile
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - 10000.0) * (c - 10000.0) / 10000.0;
  EXPECT_LT(chi2, 22.46);
  EXPECT_THROW(r.below(0), std::invalid_argument);
}

TEST(Dft1, ByteLayoutIsLittleEndian) {
  std::ostringstream os;
  io::write_dft1(os, Tensor({1, 2}, {1.0, -2.0}));
  const std::string b = os.str();
  ASSERT_EQ(b.size(), 4u + 4u + 8u + 16u);
  EXPECT_EQ(b.substr(0, 4), "DFT1");
  auto u8 = [&](std::size_t i) { return static_cast<unsigned char>(b[i]); };
  EXPECT_EQ(u8(4), 2);  // rank
  EXPECT_EQ(u8(8), 1);  // extent 0
  EXPECT_EQ(u8(12), 2); // extent 1
  // 1.0 = 0x3FF0000000000000, -2.0 = 0xC000000000000000
  EXPECT_EQ(u8(16 + 7), 0x3F);
  EXPECT_EQ(u8(16 + 6), 0xF0);
  EXPECT_EQ(u8(24 + 7), 0xC0);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(u8(16 + i), 0);
}

TEST(Dft1, RoundTripIsBitExact) {
  const Tensor t({2, 2, 2}, {0.1, -0.0, 1e-310, 3.0, -7.25, 1e300, 2.0 / 3.0, -1e-5});
  std::stringstream ss;
  io::write_dft1(ss, t);
  const Tensor back = io::read_dft1(ss);
  ASSERT_EQ(back.shape(), t.shape());
  for (std::size_t i = 0; i < t.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(back[i]), std::bit_cast<std::uint64_t>(t[i]));
}

TEST(Dft1, RejectsCorruptInput) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(io::read_dft1(bad), io::FormatError);
  std::ostringstream os;
  io::write_dft1(os, Tensor({4}, 1.0));
  std::stringstream truncated(os.str().substr(0, os.str().size() - 3));
  EXPECT_THROW(io::read_dft1(truncated), io::FormatError);
}

TEST(Pgm, RoundTripOfEightBitValues) {
  Tensor img({3, 4});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i * 20) / 255.0;
  std::stringstream ss;
  io::write_pgm(ss, img);
  EXPECT_EQ(ss.str().substr(0, 11), "P5\n4 3\n255\n");
  const Tensor back = io::read_pgm(ss);
  ASSERT_EQ(back.shape(), (Shape{3, 4}));
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(back[i], img[i]);
}

TEST(Pgm, ParsesCommentsAndRejectsBadHeaders) {
  std::string bytes = "P5\n# made by hand\n2 1\n255\n";
  bytes += static_cast<char>(0);
  bytes += static_cast<char>(255);
  std::stringstream ss(bytes);
  const Tensor t = io::read_pgm(ss);
  EXPECT_EQ(t[0], 0.0);
  EXPECT_EQ(t[1], 1.0);

  std::stringstream p2("P2\n1 1\n255\n0");
  EXPECT_THROW(io::read_pgm(p2), io::FormatError);
  std::stringstream deep("P5\n1 1\n65535\nab");
  EXPECT_THROW(io::read_pgm(deep), io::FormatError);
  std::stringstream shortdata("P5\n2 2\n255\nab");
  EXPECT_THROW(io::read_pgm(shortdata), io::FormatError);
}

TEST(Pgm, WriteClampsAndRounds) {
  std::stringstream ss;
  io::write_pgm(ss, Tensor({1, 3}, {-0.5, 0.5, 1.5}));
  const Tensor t = io::read_pgm(ss);
  EXPECT_EQ(t[0], 0.0);
  EXPECT_EQ(t[1], 128.0 / 255.0);  // 127.5 rounds half away from zero
  EXPECT_EQ(t[2], 1.0);
}

TEST(FiniteDifference, SumGivesOnes) {
  Rng r(2);
  const Tensor x = sample_gaussian(r, {5});
  const Tensor g = finite_difference_grad([](const Tensor& v) { return sum(v); }, x);
  for (double v : g) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, ScalarSquare) {
  const Tensor g = finite_difference_grad([](const Tensor& v) { return v[0] * v[0]; }, Tensor::scalar(3.0));
  EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDifference, NonFiniteNamesIndex) {
  const Tensor x = Tensor::vector({1.0, 0.0, 2.0});
  try {
    finite_difference_grad([](const Tensor& v) { return v[1] > 0 ? std::log(-1.0) : 0.0; }, x);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos);
  }
  EXPECT_THROW(finite_difference_grad([](const Tensor&) { return 0.0; }, x, 0.0), std::invalid_argument);
}

TEST(VjpSelftest, IdentityAndScale) {
  Rng r(4);
  const Tensor x = sample_gaussian(r, {6});
  EXPECT_LT(vjp_selftest(identity_op(), x, r), 1e-9);
  EXPECT_LT(vjp_selftest(scale_op(0.5), x, r), 1e-8);
}

TEST(VjpSelftest, CotangentShapeMismatchThrows) {
  const Tensor x = Tensor::vector({1.0, 2.0});
  EXPECT_THROW(vjp_selftest(identity_op(), x, Tensor::vector({1.0, 2.0, 3.0})), std::invalid_argument);
  DiffOp bad{[](const Tensor& v) { return v; }, [](const Tensor&, const Tensor&) { return Tensor::scalar(0.0); }};
  Rng r(1);
  EXPECT_THROW(vjp_selftest(bad, x, r), std::invalid_argument);
}

TEST(MemStats, TracksLiveAllocations) {
  auto& s = mem_stats();
  const auto before = s.live_scalars;
  {
    Tensor t({10, 10});
    EXPECT_EQ(s.live_scalars - before, 100);
  }
  EXPECT_EQ(s.live_scalars, before);
}
