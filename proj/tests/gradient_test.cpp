#include <gtest/gtest.h>

#include "support.hpp"

using namespace apn;
using namespace testing_support;

namespace {

void check_gradients(Episode64& f, double lambda, bool classify) {
  for (const auto& e : gradient_errors(f, lambda, classify)) {
    EXPECT_LT(e.relative_error, 1e-4) << e.name << ": |analytic| " << e.analytic_norm << ", |numeric| "
                                      << e.numeric_norm;
  }
}

Episode64 two_way_one_shot() {
  // 1 block, 4 channels, 8x8 inputs; support rows first, two queries per class.
  return Episode64(make_architecture({8, 8}, 4, 1), 17, {0, 1, 0, 0, 1, 1}, 2, 2);
}

}  // namespace

TEST(GradientCheck, JointLossMatchesCentralDifferences) {
  auto f = two_way_one_shot();
  check_gradients(f, 1.0, true);
}

TEST(GradientCheck, ClassificationOnlyLeavesDecoderWithoutGradient) {
  auto f = two_way_one_shot();
  check_gradients(f, 0.0, true);
  f.backward(0.0, true);
  for (std::size_t i = 0; i < f.model.parameters().size(); ++i) {
    if (f.model.parameters()[i].group != ParamGroup::Decoder) continue;
    for (double g : f.model.gradients()[i]) ASSERT_EQ(g, 0.0);
  }
}

TEST(GradientCheck, AutoencoderLossMatchesCentralDifferences) {
  auto f = two_way_one_shot();
  check_gradients(f, 1.0, false);
}

TEST(GradientCheck, TwoBlocksWithOddGeometry) {
  // 10 -> 5 -> 2: odd-side pooling and decoder output padding.
  Episode64 f(make_architecture({10, 10}, 3, 2), 5, {0, 1, 2, 1, 0, 2, 2}, 3, 3);
  ASSERT_EQ(f.arch.encoder_trace.back(), (Axis2{2, 2}));
  check_gradients(f, 0.5, true);
}

TEST(GradientCheck, NarrowAndWideConvPaths) {
  // 2 channels: the 3-channel input takes the narrow path in the encoder and
  // the 3-channel output takes the wide path in the decoder.
  Episode64 f(make_architecture({8, 8}, 2, 2), 9, {0, 1, 1, 0}, 2, 2);
  check_gradients(f, 1.0, true);
}
