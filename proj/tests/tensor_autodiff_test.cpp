#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "support/gradcheck.hpp"
#include "unlearn/autodiff.hpp"
#include "unlearn/tensor.hpp"

using namespace unlearn;
using unlearn::testing::check_gradients;
using unlearn::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-3;

Tensor mat(std::size_t r, std::size_t c, std::vector<float> v) { return Tensor::matrix(r, c, std::move(v)); }

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto eye = mat(2, 2, {1, 0, 0, 1});
  auto m = mat(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, m), m);
}

TEST(Matmul, ZeroColumn) {
  EXPECT_EQ(matmul(mat(2, 2, {1, 0, 0, 0}), mat(2, 1, {0, 0})), mat(2, 1, {0, 0}));
}

TEST(Matmul, HandComputedProduct) {
  EXPECT_EQ(matmul(mat(2, 2, {1, 2, 3, 4}), mat(2, 1, {5, 6})), mat(2, 1, {17, 39}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] x [2x3]"), std::string::npos) << msg;
  }
}

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor(Shape{}), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 0}), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
}

TEST(Softmax, SymmetricRow) {
  auto y = softmax_rows(mat(1, 2, {0, 0}));
  EXPECT_FLOAT_EQ(y[0], 0.5f);
  EXPECT_FLOAT_EQ(y[1], 0.5f);
}

TEST(Softmax, ShiftInvariance) {
  for (float c : {-50.0f, 0.0f, 3.5f, 1e4f}) {
    auto y = softmax_rows(mat(1, 4, {c, c, c, c}));
    for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.25f);
  }
}

TEST(Softmax, ExactExponentials) {
  auto y = softmax_rows(mat(1, 2, {std::log(1.0f), std::log(3.0f)}));
  EXPECT_NEAR(y[0], 0.25, 1e-7);
  EXPECT_NEAR(y[1], 0.75, 1e-7);
}

TEST(Softmax, RowsSumToOneForLargeMagnitudes) {
  Rng rng(3);
  auto x = random_tensor({16, 9}, rng, 1e4);
  auto y = softmax_rows(x);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double s = 0;
    for (float v : y.row(r)) {
      EXPECT_GE(v, 0.0f);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, CausalRowsIgnoreFutureColumns) {
  auto y = causal_softmax_rows(mat(3, 3, {1, 9, 9, 0, 0, 9, 1, 2, 3}));
  EXPECT_FLOAT_EQ(y.at(0, 0), 1.0f);
  EXPECT_EQ(y.at(0, 1), 0.0f);
  EXPECT_EQ(y.at(1, 2), 0.0f);
  EXPECT_FLOAT_EQ(y.at(1, 0), 0.5f);
}

TEST(CrossEntropy, UniformLogits) {
  std::vector<std::int32_t> targets{0, 3, 1};
  EXPECT_NEAR(cross_entropy(Tensor(Shape{3, 4}), targets), std::log(4.0), 1e-6);
}

TEST(CrossEntropy, SaturatedTarget) {
  std::vector<std::int32_t> targets{2};
  EXPECT_NEAR(cross_entropy(mat(1, 4, {0, 0, 1000, 0}), targets), 0.0, 1e-6);
}

TEST(CrossEntropy, MatchesSoftmaxExample) {
  std::vector<std::int32_t> targets{1};
  EXPECT_NEAR(cross_entropy(mat(1, 2, {std::log(1.0f), std::log(3.0f)}), targets), -std::log(0.75), 1e-6);
}

TEST(CrossEntropy, RejectsOutOfRangeTarget) {
  std::vector<std::int32_t> targets{4};
  EXPECT_THROW(cross_entropy(Tensor(Shape{1, 4}), targets), DimensionError);
}

TEST(Backward, SumGivesOnes) {
  ad::Tape<float> tape;
  Rng rng(1);
  auto theta = tape.leaf(random_tensor({3, 5}, rng));
  tape.backward(ad::sum(theta));
  for (float g : tape.grad(theta).data()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, ZeroScaleGivesZeros) {
  ad::Tape<float> tape;
  Rng rng(2);
  auto theta = tape.leaf(random_tensor({4}, rng));
  tape.backward(ad::sum(ad::scale(theta, 0.0f)));
  for (float g : tape.grad(theta).data()) EXPECT_EQ(g, 0.0f);
}

TEST(Backward, RejectsNonScalarLoss) {
  ad::Tape<float> tape;
  auto theta = tape.leaf(Tensor(Shape{2, 2}));
  EXPECT_THROW(tape.backward(theta), DimensionError);
}

TEST(Backward, SecondCallRequiresReset) {
  ad::Tape<float> tape;
  auto theta = tape.leaf(Tensor(Shape{2}, 1.0f));
  auto loss = ad::sum(ad::mul(theta, theta));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), StateError);
  tape.zero_grad();
  tape.backward(loss);
  EXPECT_EQ(tape.grad(theta)[0], 2.0f);
}

TEST(Backward, NonFiniteLeafIsAnError) {
  ad::Tape<float> tape;
  EXPECT_THROW(tape.leaf(Tensor(Shape{1}, std::nanf(""))), NumericError);
}

// --- finite-difference oracle for every primitive ---

class PrimitiveGrad : public ::testing::Test {
 protected:
  Rng rng{2024};
  Tensor r(Shape s) { return random_tensor(std::move(s), rng); }
};

TEST_F(PrimitiveGrad, Matmul) {
  auto res = check_gradients({r({3, 4}), r({4, 2})}, [](auto&, const auto& v) { return ad::matmul(v[0], v[1]); });
  EXPECT_LT(res.worst(), kGradTol);
}

TEST_F(PrimitiveGrad, MatmulNT) {
  auto res = check_gradients({r({3, 4}), r({5, 4})}, [](auto&, const auto& v) { return ad::matmul_nt(v[0], v[1]); });
  EXPECT_LT(res.worst(), kGradTol);
}

TEST_F(PrimitiveGrad, Transpose) {
  auto res = check_gradients({r({3, 4})}, [](auto&, const auto& v) { return ad::transpose(v[0]); });
  EXPECT_LT(res.worst(), kGradTol);
}

TEST_F(PrimitiveGrad, AddSubMulScale) {
  EXPECT_LT(check_gradients({r({3, 4}), r({3, 4})}, [](auto&, const auto& v) { return ad::add(v[0], v[1]); }).worst(),
            kGradTol);
  EXPECT_LT(check_gradients({r({3, 4}), r({3, 4})}, [](auto&, const auto& v) { return ad::sub(v[0], v[1]); }).worst(),
            kGradTol);
  EXPECT_LT(check_gradients({r({3, 4}), r({3, 4})}, [](auto&, const auto& v) { return ad::mul(v[0], v[1]); }).worst(),
            kGradTol);
  EXPECT_LT(check_gradients({r({3, 4})},
                            [](auto&, const auto& v) {
                              using T = typename std::decay_t<decltype(v[0].value())>::value_type;
                              return ad::scale(v[0], T(-1.7));
                            })
                .worst(),
            kGradTol);
}

TEST_F(PrimitiveGrad, AddRow) {
  auto res = check_gradients({r({3, 4}), r({4})}, [](auto&, const auto& v) { return ad::add_row(v[0], v[1]); });
  EXPECT_LT(res.worst(), kGradTol);
}

TEST_F(PrimitiveGrad, Gelu) {
  auto res = check_gradients({r({3, 4})}, [](auto&, const auto& v) { return ad::gelu(v[0]); });
  EXPECT_LT(res.worst(), kGradTol);
}

TEST_F(PrimitiveGrad, LayerNorm) {
  auto res = check_gradients({r({3, 4}), r({4}), r({4})},
                             [](auto&, const auto& v) { return ad::layer_norm(v[0], v[1], v[2]); });
  EXPECT_LT(res.worst(), kGradTol);
}

TEST_F(PrimitiveGrad, Embedding) {
  const std::vector<std::int32_t> ids{2, 0, 2, 4};
  auto res = check_gradients({r({5, 4})}, [&ids](auto&, const auto& v) { return ad::embedding(v[0], ids); });
  EXPECT_LT(res.worst(), kGradTol);
}

TEST_F(PrimitiveGrad, SliceAndConcat) {
  EXPECT_LT(check_gradients({r({3, 4})}, [](auto&, const auto& v) { return ad::slice_cols(v[0], 1, 3); }).worst(),
            kGradTol);
  EXPECT_LT(check_gradients({r({3, 4})}, [](auto&, const auto& v) { return ad::slice_rows(v[0], 1, 3); }).worst(),
            kGradTol);
  auto res = check_gradients({r({3, 4}), r({3, 2})}, [](auto&, const auto& v) {
    using V = std::decay_t<decltype(v[0])>;
    std::vector<V> parts{v[0], v[1], v[0]};
    return ad::concat_cols<typename std::decay_t<decltype(v[0].value())>::value_type>(parts);
  });
  EXPECT_LT(res.worst(), kGradTol);
}

TEST_F(PrimitiveGrad, Softmaxes) {
  EXPECT_LT(check_gradients({r({3, 4})}, [](auto&, const auto& v) { return ad::softmax_rows(v[0]); }).worst(),
            kGradTol);
  EXPECT_LT(check_gradients({r({3, 3})}, [](auto&, const auto& v) { return ad::causal_softmax_rows(v[0]); }).worst(),
            kGradTol);
  EXPECT_LT(check_gradients({r({3, 4})}, [](auto&, const auto& v) { return ad::log_softmax_rows(v[0]); }).worst(),
            kGradTol);
}

TEST_F(PrimitiveGrad, CrossEntropy) {
  const std::vector<std::int32_t> targets{1, 3, 0};
  auto res = check_gradients({r({3, 4})}, [&targets](auto&, const auto& v) { return ad::cross_entropy(v[0], targets); });
  EXPECT_LT(res.worst(), kGradTol);
}

TEST_F(PrimitiveGrad, Reductions) {
  EXPECT_LT(check_gradients({r({3, 4})}, [](auto&, const auto& v) { return ad::sum(v[0]); }).worst(), kGradTol);
  EXPECT_LT(check_gradients({r({3, 4})}, [](auto&, const auto& v) { return ad::mean(v[0]); }).worst(), kGradTol);
  EXPECT_LT(check_gradients({r({3, 4})}, [](auto&, const auto& v) { return ad::element(v[0], 2, 1); }).worst(),
            kGradTol);
  EXPECT_LT(check_gradients({r({3, 4})}, [](auto&, const auto& v) { return ad::reshape(v[0], Shape{4, 3}); }).worst(),
            kGradTol);
}

TEST(Determinism, RepeatedOpsAreBitIdentical) {
  Rng rng(11);
  auto a = random_tensor({7, 5}, rng);
  auto b = random_tensor({5, 6}, rng);
  EXPECT_TRUE(bit_identical(matmul(a, b), matmul(a, b)));
  EXPECT_TRUE(bit_identical(softmax_rows(a), softmax_rows(a)));
  Tensor g(Shape{5}, 1.0f), z(Shape{5});
  EXPECT_TRUE(bit_identical(layer_norm(a, g, z), layer_norm(a, g, z)));
}
