// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "legw/random.hpp"
#include "legw/schedule.hpp"

using namespace legw;

namespace {

// ImageNet-shaped multi-step schedule: 1024 per batch, 10/32 warmup epochs.
ScheduleSpec imagenet_multistep() {
  ScheduleSpec s;
  s.batch_size = 1024;
  s.dataset_size = 1280000;
  s.base_lr = LearningRate::parse("2^2.5");
  s.warmup_epochs = Rational(10, 32);
  s.total_epochs = Rational(90);
  s.decay = DecaySpec::multi_step({Rational(30), Rational(60), Rational(80)}, 0.1);
  return s;
}

ScheduleSpec gnmt_base() {
  ScheduleSpec s;
  s.batch_size = 256;
  s.dataset_size = 3500000;
  s.base_lr = LearningRate::parse("2^-0.5/1e3");
  s.warmup_epochs = Rational::parse("0.0145");
  s.total_epochs = Rational(2);
  s.decay = DecaySpec::constant();
  return s;
}

std::int64_t iteration_at_epoch(const ScheduleSpec& s, Rational epoch) {
  return (epoch * Rational(s.dataset_size, s.batch_size)).floor();
}

ScheduleSpec random_spec(Rng& rng) {
  ScheduleSpec s;
  s.batch_size = std::int64_t{1} << rng.below(9);  // 1 .. 256
  s.dataset_size = 1000 + static_cast<std::int64_t>(rng.below(200000));
  s.base_lr = LearningRate(rng.uniform(0.01, 2.0), Rational(static_cast<std::int64_t>(rng.below(9)) - 4, 2));
  s.total_epochs = Rational(1 + static_cast<std::int64_t>(rng.below(100)));
  s.warmup_epochs = Rational(1 + static_cast<std::int64_t>(rng.below(1000)), 1000);
  switch (rng.below(4)) {
    case 0: s.decay = DecaySpec::constant(); break;
    case 1: s.decay = DecaySpec::multi_step({Rational(1, 2), Rational(1)}, rng.uniform(0.05, 1.0)); break;
    case 2: s.decay = DecaySpec::poly(rng.uniform(0.5, 3.0)); break;
    default: s.decay = DecaySpec::exponential(rng.uniform(0.1, 1.0), static_cast<std::int64_t>(rng.below(3))); break;
  }
  return s;
}

}  // namespace

TEST(LrAt, MultiStepDropsAtBoundaries) {
  const ScheduleSpec s = imagenet_multistep();
  const double eta = std::exp2(2.5);
  EXPECT_DOUBLE_EQ(lr_at(s, iteration_at_epoch(s, Rational(45))), 0.1 * eta);
  EXPECT_DOUBLE_EQ(lr_at(s, iteration_at_epoch(s, Rational(85))), 0.1 * 0.1 * 0.1 * eta);
  EXPECT_DOUBLE_EQ(lr_at(s, iteration_at_epoch(s, Rational(30)) - 1), eta);
  EXPECT_DOUBLE_EQ(lr_at(s, iteration_at_epoch(s, Rational(30))), 0.1 * eta);
}

TEST(LrAt, PolyEndpointAndHalfway) {
  ScheduleSpec s = imagenet_multistep();
  s.decay = DecaySpec::poly(2.0);
  const std::int64_t total = s.total_iterations();
  ASSERT_EQ(total % 2, 0);
  const double eta = std::exp2(2.5);
  const double last = lr_at(s, total - 1);
  EXPECT_NEAR(last, eta * std::pow(1.0 / double(total), 2.0), 1e-9 * last);
  EXPECT_GT(last, 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, total / 2), eta / 4.0);
}

TEST(LrAt, ExponentialPerWholeEpoch) {
  // Constant through seven epochs, then 0.4 per epoch; the ninth epoch is
  // two decays in.
  ScheduleSpec s;
  s.batch_size = 20;
  s.dataset_size = 929000;
  s.base_lr = LearningRate(1.0);
  s.total_epochs = Rational(13);
  s.decay = DecaySpec::exponential(0.4, 7);
  const double eta = 1.0;
  EXPECT_DOUBLE_EQ(lr_at(s, iteration_at_epoch(s, Rational(8)) + 10), eta * 0.4 * 0.4);
  EXPECT_DOUBLE_EQ(lr_at(s, iteration_at_epoch(s, Rational(7)) - 1), eta);
  EXPECT_DOUBLE_EQ(lr_at(s, iteration_at_epoch(s, Rational(7))), eta * 0.4);
}

TEST(LrAt, WarmupRampEndsExactlyAtEta) {
  const ScheduleSpec s = imagenet_multistep();
  const std::int64_t w = warmup_iterations(s);
  EXPECT_EQ(w, 391);  // 10/32 * 1280000 / 1024 = 390.625
  EXPECT_EQ(lr_at(s, w - 1), s.base_lr.value());
  EXPECT_DOUBLE_EQ(lr_at(s, 0), s.base_lr.value() / double(w));
  EXPECT_DOUBLE_EQ(lr_at(s, w / 2), s.base_lr.value() * double(w / 2 + 1) / double(w));
}

TEST(LrAt, OutOfRangeIterationIsAnError) {
  const ScheduleSpec s = imagenet_multistep();
  EXPECT_THROW(lr_at(s, s.total_iterations()), InvalidArgument);
  EXPECT_THROW(lr_at(s, -1), InvalidArgument);
  EXPECT_NO_THROW(lr_at(s, s.total_iterations() - 1));
}

TEST(LegwScale, ImageNetRowsAreExact) {
  ScheduleSpec base = imagenet_multistep();
  const ScheduleSpec top = legw_scale(base, Rational(32), ScalingRule::kSqrt);
  EXPECT_EQ(top.batch_size, 32768);
  EXPECT_EQ(top.base_lr, LearningRate::parse("2^5.0"));
  EXPECT_EQ(top.base_lr.value(), std::exp2(5.0));
  EXPECT_EQ(top.warmup_epochs, Rational(10));
  EXPECT_EQ(top.decay, base.decay);
  EXPECT_EQ(top.total_epochs, base.total_epochs);
}

TEST(LegwScale, GnmtRowIsExact) {
  const ScheduleSpec top = legw_scale(gnmt_base(), Rational(16), ScalingRule::kSqrt);
  EXPECT_EQ(top.batch_size, 4096);
  EXPECT_EQ(top.base_lr, LearningRate::parse("2^1.5/1e3"));
  EXPECT_EQ(top.base_lr.value(), std::exp2(1.5) / 1e3);
  EXPECT_EQ(top.warmup_epochs, Rational::parse("0.2320"));
}

TEST(LegwScale, UnitFactorIsIdentity) {
  EXPECT_EQ(legw_scale(gnmt_base(), Rational(1), ScalingRule::kSqrt), gnmt_base());
  EXPECT_EQ(legw_scale(gnmt_base(), Rational(1), ScalingRule::kLinear), gnmt_base());
  EXPECT_EQ(legw_downscale(gnmt_base(), Rational(1), ScalingRule::kSqrt), gnmt_base());
}

TEST(LegwScale, LinearRuleMultipliesByK) {
  const ScheduleSpec top = legw_scale(gnmt_base(), Rational(3), ScalingRule::kLinear);
  EXPECT_EQ(top.batch_size, 768);
  EXPECT_DOUBLE_EQ(top.base_lr.value(), 3.0 * std::exp2(-0.5) / 1e3);
  EXPECT_EQ(top.warmup_epochs, Rational::parse("0.0435"));
}

TEST(LegwScale, NonIntegerBatchIsAnError) {
  EXPECT_THROW(legw_scale(gnmt_base(), Rational(1, 3), ScalingRule::kSqrt), InvalidArgument);
  EXPECT_THROW(legw_scale(gnmt_base(), Rational(0), ScalingRule::kSqrt), InvalidArgument);
}

TEST(LegwDownscale, RecoversBaseRows) {
  const ScheduleSpec big = legw_scale(imagenet_multistep(), Rational(32), ScalingRule::kSqrt);
  EXPECT_EQ(legw_downscale(big, Rational(32), ScalingRule::kSqrt), imagenet_multistep());
  const ScheduleSpec gnmt = legw_scale(gnmt_base(), Rational(16), ScalingRule::kSqrt);
  EXPECT_EQ(legw_downscale(gnmt, Rational(16), ScalingRule::kSqrt), gnmt_base());
}

TEST(LegwDownscale, Errors) {
  EXPECT_THROW(legw_downscale(gnmt_base(), Rational(3), ScalingRule::kSqrt), InvalidArgument);
  ScheduleSpec tiny = gnmt_base();
  tiny.dataset_size = 100;
  tiny.warmup_epochs = Rational(1);  // 1/256 epoch at B=1 is 0.39 iterations
  EXPECT_THROW(legw_downscale(tiny, Rational(256), ScalingRule::kSqrt), InvalidArgument);
}

TEST(WarmupIterations, Examples) {
  EXPECT_EQ(warmup_iterations(gnmt_base()), 198);  // 0.0145 * 3.5e6 / 256 = 198.24
  ScheduleSpec s;
  s.dataset_size = 60000;
  s.batch_size = 128;
  s.warmup_epochs = Rational::parse("0.3125");
  s.total_epochs = Rational(10);
  EXPECT_EQ(warmup_iterations(s), 146);  // 146.484375
}

TEST(WarmupIterations, Errors) {
  ScheduleSpec s = gnmt_base();
  s.warmup_epochs = Rational(0);
  EXPECT_THROW(warmup_iterations(s), InvalidArgument);
  s.warmup_epochs = Rational(1, 100000000);
  EXPECT_THROW(warmup_iterations(s), InvalidArgument);
}

TEST(Sweep, MaterializesTables) {
  const std::vector<std::pair<double, std::string>> imagenet = {
      {2.5, "10/32"}, {3.0, "10/16"}, {3.5, "10/8"}, {4.0, "10/4"}, {4.5, "10/2"}, {5.0, "10"}};
  const auto rows = sweep(imagenet_multistep(), {Rational(1), Rational(2), Rational(4), Rational(8), Rational(16), Rational(32)},
                          ScalingRule::kSqrt);
  ASSERT_EQ(rows.size(), imagenet.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].batch_size, 1024 << i);
    EXPECT_EQ(rows[i].base_lr.value(), std::exp2(imagenet[i].first)) << i;
    EXPECT_EQ(rows[i].warmup_epochs, Rational::parse(imagenet[i].second)) << i;
  }
  const std::vector<std::pair<double, std::string>> gnmt = {
      {-0.5, "0.0145"}, {0.0, "0.0290"}, {0.5, "0.0580"}, {1.0, "0.1160"}, {1.5, "0.2320"}};
  const auto grows = sweep(gnmt_base(), {Rational(1), Rational(2), Rational(4), Rational(8), Rational(16)}, ScalingRule::kSqrt);
  ASSERT_EQ(grows.size(), gnmt.size());
  for (std::size_t i = 0; i < grows.size(); ++i) {
    EXPECT_EQ(grows[i].base_lr.value(), std::exp2(gnmt[i].first) / 1e3) << i;
    EXPECT_EQ(grows[i].warmup_epochs, Rational::parse(gnmt[i].second)) << i;
  }
  EXPECT_TRUE(sweep(gnmt_base(), {}, ScalingRule::kSqrt).empty());
}

TEST(Properties, WarmupIterationInvariance) {
  Rng rng(99);
  int checked = 0;
  while (checked < 1000) {
    const ScheduleSpec s = random_spec(rng);
    if (s.warmup_iteration_count() < 1) continue;
    const Rational k(std::int64_t{1} << rng.below(8));
    const ScheduleSpec big = legw_scale(s, k, rng.below(2) ? ScalingRule::kSqrt : ScalingRule::kLinear);
    if (big.warmup_iteration_count() < 1) continue;
    EXPECT_LE(std::abs(warmup_iterations(big) - warmup_iterations(s)), 1)
        << "B=" << s.batch_size << " n=" << s.dataset_size << " w=" << s.warmup_epochs.to_string() << " k=" << k.to_string();
    ++checked;
  }
}

TEST(Properties, SqrtCompositionAndRoundTrip) {
  Rng rng(7);
  for (int t = 0; t < 500; ++t) {
    const ScheduleSpec s = random_spec(rng);
    const Rational a(1 + static_cast<std::int64_t>(rng.below(12)));
    const Rational b(1 + static_cast<std::int64_t>(rng.below(12)));
    EXPECT_EQ(legw_scale(legw_scale(s, a, ScalingRule::kSqrt), b, ScalingRule::kSqrt),
              legw_scale(s, a * b, ScalingRule::kSqrt));
    const auto rule = rng.below(2) ? ScalingRule::kSqrt : ScalingRule::kLinear;
    const ScheduleSpec big = legw_scale(s, a, rule);
    if (big.warmup_iteration_count() >= 1 && s.warmup_iteration_count() >= 1) {
      EXPECT_EQ(legw_downscale(big, a, rule), s);
    }
  }
}

TEST(Properties, ShapeOfCurve) {
  Rng rng(13);
  for (int t = 0; t < 60; ++t) {
    ScheduleSpec s = random_spec(rng);
    s.dataset_size = 2000 + static_cast<std::int64_t>(rng.below(5000));
    s.total_epochs = Rational(1 + static_cast<std::int64_t>(rng.below(6)));
    s.validate();
    const double eta = s.base_lr.value();
    const std::int64_t total = s.total_iterations();
    const std::int64_t w = s.warmup_iteration_count();
    double prev = 0.0;
    for (std::int64_t i = 0; i < total; ++i) {
      const double lr = lr_at(s, i);
      ASSERT_GT(lr, 0.0);
      ASSERT_LE(lr, eta);
      if (i > w) ASSERT_LE(lr, prev) << "iteration " << i;
      prev = lr;
    }
    if (w >= 1 && w < total) {
      EXPECT_LE(std::abs(lr_at(s, w - 1) - lr_at(s, w)), eta * (1.0 - decay_factor(s, w)) + eta / double(w) + 1e-15);
    }
  }
}

TEST(LearningRateText, RoundTrips) {
  for (const char* text : {"2^2.5", "2^-0.5/1e3", "0.05", "2^(3/2)*sqrt(3)", "(3)", "1"}) {
    const LearningRate lr = LearningRate::parse(text);
    EXPECT_EQ(LearningRate::parse(lr.to_string()), lr) << text;
  }
  EXPECT_DOUBLE_EQ(LearningRate::parse("2^(3/2)*sqrt(3)").value(), std::exp2(1.5) * std::sqrt(3.0));
  EXPECT_THROW(LearningRate::parse("-1"), InvalidArgument);
  EXPECT_THROW(LearningRate::parse(""), InvalidArgument);
}

TEST(ScheduleSpecValidate, Errors) {
  ScheduleSpec s = gnmt_base();
  s.warmup_epochs = Rational(3);
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = gnmt_base();
  s.decay = DecaySpec::multi_step({Rational(2), Rational(1)}, 0.1);
  EXPECT_THROW(s.validate(), InvalidArgument);
  s.decay = DecaySpec::multi_step({Rational(1)}, 1.5);
  EXPECT_THROW(s.validate(), InvalidArgument);
  s.decay = DecaySpec::poly(0.0);
  EXPECT_THROW(s.validate(), InvalidArgument);
}

TEST(ScheduleExport, CsvHasOneRowPerIteration) {
  ScheduleSpec s;
  s.batch_size = 10;
  s.dataset_size = 100;
  s.total_epochs = Rational(2);
  s.warmup_epochs = Rational(1, 2);
  s.base_lr = LearningRate(0.5);
  std::ostringstream os;
  write_schedule_csv(os, s);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "iteration,lr");
  int rows = 0;
  while (std::getline(is, line)) {
    const auto comma = line.find(',');
    EXPECT_EQ(std::stoll(line.substr(0, comma)), rows);
    EXPECT_EQ(parse_double(line.substr(comma + 1)), lr_at(s, rows));
    ++rows;
  }
  EXPECT_EQ(rows, 20);
}
