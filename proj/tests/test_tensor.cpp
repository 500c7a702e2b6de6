#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <thread>

#include "mixmfl/tensor.hpp"
#include "support.hpp"

using namespace mixmfl;
using mixmfl::testing::gradcheck;
using mixmfl::testing::random_away_from_zero;
using mixmfl::testing::random_tensor;
using mixmfl::testing::weighted_sum;

namespace {

constexpr double kGradTol = 1e-4;
constexpr int kSeeds = 20;

std::vector<double> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(TensorForward, ElementwiseOpsMatchHandComputedValues) {
    Tensor a({2, 2}, {1, -2, 3, -4});
    Tensor b({2, 2}, {0.5, 2, -1, 4});
    EXPECT_EQ(to_vec(add(a, b)), (std::vector<double>{1.5, 0, 2, 0}));
    EXPECT_EQ(to_vec(sub(a, b)), (std::vector<double>{0.5, -4, 4, -8}));
    EXPECT_EQ(to_vec(mul(a, b)), (std::vector<double>{0.5, -4, -3, -16}));
    EXPECT_EQ(to_vec(div(a, b)), (std::vector<double>{2, -1, -3, -1}));
    EXPECT_EQ(to_vec(relu(a)), (std::vector<double>{1, 0, 3, 0}));
    EXPECT_EQ(to_vec(abs(a)), (std::vector<double>{1, 2, 3, 4}));
    EXPECT_EQ(to_vec(clamp_min(a, 0.5)), (std::vector<double>{1, 0.5, 3, 0.5}));
    EXPECT_EQ(to_vec(scale(a, 2)), (std::vector<double>{2, -4, 6, -8}));
    EXPECT_EQ(to_vec(add_scalar(a, 1)), (std::vector<double>{2, -1, 4, -3}));
    EXPECT_DOUBLE_EQ(sum(a).item(), -2.0);
    EXPECT_DOUBLE_EQ(mean(a).item(), -0.5);
}

TEST(TensorForward, ReductionsAlongLastAxis) {
    Tensor a({2, 3}, {1, 2, 3, 4, 4, 1});
    EXPECT_EQ(to_vec(sum_last(a)), (std::vector<double>{6, 9}));
    EXPECT_EQ(to_vec(mean_last(a)), (std::vector<double>{2, 3}));
    auto var = to_vec(variance_last(a));
    EXPECT_NEAR(var[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(var[1], 2.0, 1e-15);
    EXPECT_EQ(to_vec(max_last(a)), (std::vector<double>{3, 4}));
    EXPECT_EQ(to_vec(min_last(a)), (std::vector<double>{1, 1}));
}

TEST(TensorForward, MaxLastTieSendsGradientToLowestIndex) {
    Tensor a({1, 3}, {5, 5, 1}, true);
    GradTape tape;
    Tensor m = sum(max_last(a));
    tape.backward(m);
    EXPECT_EQ(to_vec(Tensor({3}, {a.grad().begin(), a.grad().end()})), (std::vector<double>{1, 0, 0}));
}

TEST(TensorForward, MatmulAndLinear) {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b({3, 2}, {1, 0, 0, 1, 1, 1});
    EXPECT_EQ(to_vec(matmul(a, b)), (std::vector<double>{4, 5, 10, 11}));
    Tensor w({2, 3}, {1, 0, 0, 0, 1, 1});
    Tensor bias({2}, {10, 20});
    EXPECT_EQ(to_vec(linear(a, w, bias)), (std::vector<double>{11, 25, 14, 31}));
}

TEST(TensorForward, SoftmaxRowsSumToOneAndLogSoftmaxAgrees) {
    std::mt19937_64 rng(3);
    Tensor a = random_tensor({2, 3, 2, 2}, rng, -5, 5);
    Tensor p = softmax(a, 1);
    Tensor lp = log_softmax(a, 1);
    for (std::size_t n = 0; n < 2; ++n) {
        for (std::size_t pix = 0; pix < 4; ++pix) {
            double s = 0;
            for (std::size_t c = 0; c < 3; ++c) {
                std::size_t i = (n * 3 + c) * 4 + pix;
                s += p[i];
                EXPECT_NEAR(std::log(p[i]), lp[i], 1e-12);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(TensorForward, Conv2dWithIdentityKernelCopiesInput) {
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({1, 1, 4, 5}, rng);
    std::vector<double> k(9, 0.0);
    k[4] = 1.0;
    Tensor y = conv2d(x, Tensor({1, 1, 3, 3}, k), Tensor({1}, {0.0}));
    EXPECT_EQ(to_vec(y), to_vec(x));
}

TEST(TensorForward, Conv2dMatchesDirectSumWithZeroPadding) {
    std::mt19937_64 rng(11);
    Tensor x = random_tensor({2, 3, 4, 5}, rng);
    Tensor w = random_tensor({2, 3, 3, 3}, rng);
    Tensor b = random_tensor({2}, rng);
    Tensor y = conv2d(x, w, b);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t co = 0; co < 2; ++co)
            for (long yy = 0; yy < 4; ++yy)
                for (long xx = 0; xx < 5; ++xx) {
                    double s = b[co];
                    for (std::size_t ci = 0; ci < 3; ++ci)
                        for (long ky = 0; ky < 3; ++ky)
                            for (long kx = 0; kx < 3; ++kx) {
                                long sy = yy + ky - 1, sx = xx + kx - 1;
                                if (sy < 0 || sy >= 4 || sx < 0 || sx >= 5) continue;
                                s += w[((co * 3 + ci) * 3 + ky) * 3 + kx] * x[((n * 3 + ci) * 4 + sy) * 5 + sx];
                            }
                    EXPECT_NEAR(y[((n * 2 + co) * 4 + yy) * 5 + xx], s, 1e-12);
                }
}

TEST(TensorForward, PoolBroadcastConcatSelect) {
    Tensor x({1, 2, 1, 2}, {1, 3, 5, 7});
    EXPECT_EQ(to_vec(global_average_pool(x)), (std::vector<double>{2, 6}));
    Tensor v({1, 2}, {1, 2});
    EXPECT_EQ(to_vec(broadcast_spatial(v, 1, 2)), (std::vector<double>{1, 1, 2, 2}));
    Tensor a({2, 1}, {1, 2}), b({2, 2}, {3, 4, 5, 6});
    EXPECT_EQ(to_vec(concat({a, b}, 1)), (std::vector<double>{1, 3, 4, 2, 5, 6}));
    EXPECT_EQ(to_vec(concat({a, a}, 0)), (std::vector<double>{1, 2, 1, 2}));
    EXPECT_EQ(to_vec(index_select(b, {1, 0, 1})), (std::vector<double>{5, 6, 3, 4, 5, 6}));
}

TEST(TensorErrors, ShapeMismatchAndBadShapes) {
    Tensor a({2}, {1, 2}), b({3}, {1, 2, 3});
    EXPECT_THROW(add(a, b), Error);
    try {
        add(a, b);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
    }
    EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), Error);
    EXPECT_THROW(reshape(a, {3}), Error);
    EXPECT_THROW(matmul(a, b), Error);
}

TEST(TensorErrors, NonFiniteOutputIsRejected) {
    Tensor a({1}, {0.0});
    try {
        log(a);
        FAIL() << "log(0) should throw";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NonFiniteValue);
    }
    try {
        div(Tensor::scalar(1.0), a);
        FAIL() << "1/0 should throw";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NonFiniteValue);
    }
}

TEST(TensorErrors, BackwardWithoutTapeOrTwice) {
    Tensor a({1}, {2.0}, true);
    Tensor untaped = mul(a, a);
    GradTape tape;
    try {
        tape.backward(untaped);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NoTape);
    }
    Tensor loss = mul(a, a);
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(a.grad()[0], 4.0);
    try {
        tape.backward(loss);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NoTape);
    }
}

TEST(TensorErrors, NonScalarLossIsRejected) {
    Tensor a({2}, {1, 2}, true);
    GradTape tape;
    Tensor y = scale(a, 2);
    try {
        tape.backward(y);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NonScalarLoss);
    }
}

TEST(TensorTape, GradientsAccumulateOverSharedUse) {
    Tensor a({1}, {3.0}, true);
    GradTape tape;
    Tensor y = add(mul(a, a), scale(a, 5));
    tape.backward(y);
    EXPECT_DOUBLE_EQ(a.grad()[0], 11.0);
}

TEST(TensorTape, TapesOnSeparateThreadsDoNotInteract) {
    auto worker = [](double x0, double* out) {
        Tensor a({1}, {x0}, true);
        GradTape tape;
        Tensor y = mul(mul(a, a), a);
        tape.backward(y);
        *out = a.grad()[0];
    };
    double g1 = 0, g2 = 0;
    std::thread t1(worker, 2.0, &g1), t2(worker, 3.0, &g2);
    t1.join();
    t2.join();
    EXPECT_DOUBLE_EQ(g1, 12.0);
    EXPECT_DOUBLE_EQ(g2, 27.0);
}

TEST(TensorTape, NoTapeMeansNoRecording) {
    Tensor a({1}, {1.0}, true);
    Tensor y = mul(a, a);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Grl, ForwardIsIdentityBackwardIsNegatedAndScaled) {
    std::mt19937_64 rng(9);
    for (double lambda : {0.0, 0.5, 1.0, 2.0}) {
        Tensor x = random_tensor({3, 4}, rng);
        Tensor w = random_tensor({3, 4}, rng);
        Tensor y = grl(x, lambda);
        EXPECT_EQ(to_vec(y), to_vec(x));
        x.set_requires_grad(true);
        GradTape tape;
        Tensor loss = sum(mul(grl(x, lambda), w));
        tape.backward(loss);
        for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.grad()[i], -lambda * w[i]);
    }
}

// Finite-difference checks for every differentiable op. The reversal layer is
// left out: its backward is not the derivative of its forward by design.

class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, ElementwiseAndReductions) {
    const auto seed = static_cast<std::uint64_t>(GetParam());
    std::mt19937_64 rng(seed);
    Shape s{3, 4};
    auto check = [&](auto f, std::vector<Tensor> in) {
        auto r = gradcheck(f, std::move(in));
        EXPECT_LT(r.max_rel_error, kGradTol);
    };
    check([&](const auto& t) { return weighted_sum(add(t[0], t[1]), seed); },
          {random_tensor(s, rng), random_tensor(s, rng)});
    check([&](const auto& t) { return weighted_sum(sub(t[0], t[1]), seed); },
          {random_tensor(s, rng), random_tensor(s, rng)});
    check([&](const auto& t) { return weighted_sum(mul(t[0], t[1]), seed); },
          {random_tensor(s, rng), random_tensor(s, rng)});
    check([&](const auto& t) { return weighted_sum(div(t[0], t[1]), seed); },
          {random_tensor(s, rng), random_tensor(s, rng, 0.5, 2.0)});
    check([&](const auto& t) { return weighted_sum(scale(t[0], -1.7), seed); }, {random_tensor(s, rng)});
    check([&](const auto& t) { return weighted_sum(add_scalar(t[0], 0.3), seed); }, {random_tensor(s, rng)});
    check([&](const auto& t) { return weighted_sum(relu(t[0]), seed); }, {random_away_from_zero(s, rng)});
    check([&](const auto& t) { return weighted_sum(abs(t[0]), seed); }, {random_away_from_zero(s, rng)});
    check([&](const auto& t) { return weighted_sum(log(t[0]), seed); }, {random_tensor(s, rng, 0.5, 2.0)});
    check([&](const auto& t) { return weighted_sum(clamp_min(t[0], 0.0), seed); }, {random_away_from_zero(s, rng)});
    check([&](const auto& t) { return mean(t[0]); }, {random_tensor(s, rng)});
    check([&](const auto& t) { return weighted_sum(sum_last(t[0]), seed); }, {random_tensor(s, rng)});
    check([&](const auto& t) { return weighted_sum(mean_last(t[0]), seed); }, {random_tensor(s, rng)});
    check([&](const auto& t) { return weighted_sum(variance_last(t[0]), seed); }, {random_tensor(s, rng)});
    check([&](const auto& t) { return weighted_sum(max_last(t[0]), seed); }, {random_tensor(s, rng)});
    check([&](const auto& t) { return weighted_sum(min_last(t[0]), seed); }, {random_tensor(s, rng)});
}

TEST_P(OpGradients, StructuralOps) {
    const auto seed = static_cast<std::uint64_t>(GetParam());
    std::mt19937_64 rng(seed + 100);
    auto check = [&](auto f, std::vector<Tensor> in) {
        auto r = gradcheck(f, std::move(in));
        EXPECT_LT(r.max_rel_error, kGradTol);
    };
    check([&](const auto& t) { return weighted_sum(reshape(t[0], {6, 2}), seed); }, {random_tensor({3, 4}, rng)});
    check([&](const auto& t) { return weighted_sum(concat({t[0], t[1]}, 1), seed); },
          {random_tensor({2, 3}, rng), random_tensor({2, 2}, rng)});
    check([&](const auto& t) { return weighted_sum(concat({t[0], t[1]}, 0), seed); },
          {random_tensor({2, 3}, rng), random_tensor({1, 3}, rng)});
    check([&](const auto& t) { return weighted_sum(index_select(t[0], {2, 0, 2, 1}), seed); },
          {random_tensor({3, 2}, rng)});
    check([&](const auto& t) { return weighted_sum(softmax(t[0], 1), seed); }, {random_tensor({2, 3, 2, 2}, rng)});
    check([&](const auto& t) { return weighted_sum(log_softmax(t[0], -1), seed); }, {random_tensor({3, 4}, rng)});
    check([&](const auto& t) { return weighted_sum(matmul(t[0], t[1]), seed); },
          {random_tensor({2, 3}, rng), random_tensor({3, 4}, rng)});
    check([&](const auto& t) { return weighted_sum(linear(t[0], t[1], t[2]), seed); },
          {random_tensor({3, 4}, rng), random_tensor({2, 4}, rng), random_tensor({2}, rng)});
    check([&](const auto& t) { return weighted_sum(conv2d(t[0], t[1], t[2]), seed); },
          {random_tensor({2, 2, 4, 3}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
    check([&](const auto& t) { return weighted_sum(global_average_pool(t[0]), seed); },
          {random_tensor({2, 3, 2, 2}, rng)});
    check([&](const auto& t) { return weighted_sum(broadcast_spatial(t[0], 2, 3), seed); },
          {random_tensor({2, 3}, rng)});
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Range(1, kSeeds + 1));
