#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "gtrans/gradcheck.hpp"
#include "gtrans/ops.hpp"
#include "gtrans/rng.hpp"
#include "gtrans/tensor.hpp"

using namespace gtrans;

namespace {

Tensor<double> rand_tensor(Shape shape, Rng& rng, double bound = 3.0) {
    Tensor<double> t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.next_symmetric(bound);
    return t;
}

// Reduces an arbitrary op output to a scalar through fixed random weights so
// every output element influences the loss differently.
Tensor<double> pick(Tensor<double> out, Tensor<double> w, Tape<double>* tape) {
    return sum(mul(std::move(out), std::move(w), tape), tape);
}

// Runs reverse mode on `forward`, then compares x's accumulated gradient with
// central differences of the same closure.
void expect_grad_matches(Tensor<double>& x,
                         const std::function<Tensor<double>(Tape<double>*)>& forward,
                         double rtol = 1e-5, double atol = 1e-8) {
    x.set_requires_grad();
    x.zero_grad();
    Tape<double> tape;
    Tensor<double> loss = forward(&tape);
    ASSERT_EQ(loss.numel(), 1);
    tape.backward(loss);
    Tensor<double> analytic = grad_of(x);
    Tensor<double> numeric =
        finite_diff_grad<double>([&] { return forward(nullptr).at(0); }, x);
    EXPECT_LE(max_scaled_err(analytic, numeric, rtol, atol), 1.0)
        << "analytic gradient disagrees with finite differences";
}

}  // namespace

TEST(Tensor, ConstructionValidates) {
    EXPECT_THROW(Tensor<double>(Shape{}), DimensionError);
    EXPECT_THROW(Tensor<double>({2, 0}), DimensionError);
    EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1.0}), DimensionError);
    Tensor<double> t({2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6);
    EXPECT_EQ(t.rank(), 2);
    EXPECT_DOUBLE_EQ(t.at(5), 1.5);
}

TEST(Tensor, ReshapeAliasesDataAndGrad) {
    Tensor<double> x({2, 3});
    for (std::int64_t i = 0; i < 6; ++i) x.at(i) = static_cast<double>(i);
    x.set_requires_grad();
    Tensor<double> y = x.reshaped({3, 2});
    EXPECT_TRUE(x.same_storage(y));
    y.at(0) = 42.0;
    EXPECT_DOUBLE_EQ(x.at(0), 42.0);
    EXPECT_THROW(x.reshaped({4, 2}), DimensionError);

    // gradient written through the view lands in the base tensor
    Tape<double> tape;
    Tensor<double> w({3, 2}, 1.0);
    Tensor<double> loss = pick(y, w, &tape);
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[5], 1.0);
}

TEST(Tape, RecordsInForwardOrderAndReplaysOnce) {
    Tensor<double> x = Tensor<double>::row({1.0, 2.0});
    Tensor<double> y = Tensor<double>::row({3.0, 4.0});
    x.set_requires_grad();
    y.set_requires_grad();
    Tape<double> tape;
    Tensor<double> a = add(x, y, &tape);
    Tensor<double> b = mul(a, a, &tape);
    Tensor<double> loss = sum(b, &tape);
    ASSERT_EQ(tape.size(), 3u);
    EXPECT_STREQ(tape.records()[0].name, "add");
    EXPECT_STREQ(tape.records()[1].name, "mul");
    EXPECT_STREQ(tape.records()[2].name, "sum");
    // inputs were assigned ids before outputs
    for (const auto& rec : tape.records())
        for (std::int64_t in : rec.inputs) EXPECT_LT(in, rec.output);

    tape.backward(loss);
    // loss = sum((x+y)^2), d/dx = 2(x+y)
    EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 12.0);
    EXPECT_DOUBLE_EQ(y.grad()[1], 12.0);
    EXPECT_EQ(tape.backward_runs(), 1);
}

TEST(Tape, LeafGradsAccumulateAcrossBackwardCalls) {
    Tensor<double> x = Tensor<double>::row({1.0, -2.0});
    x.set_requires_grad();
    Tape<double> tape;
    Tensor<double> loss = sum(mul(x, x, &tape), &tape);
    tape.backward(loss);
    const double g0 = x.grad()[0], g1 = x.grad()[1];
    tape.backward(loss);
    // op-output grads are scratch and reset per pass; leaf grads accumulate
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0 * g0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 2.0 * g1);
    EXPECT_EQ(tape.backward_runs(), 2);
}

TEST(Tape, BackwardRejectsNonScalarLoss) {
    Tensor<double> x = Tensor<double>::row({1.0, 2.0});
    x.set_requires_grad();
    Tape<double> tape;
    Tensor<double> y = add(x, x, &tape);
    EXPECT_THROW(tape.backward(y), ValueError);
}

TEST(Rng, DeterministicSplittableRestorable) {
    Rng a(7), b(7);
    for (int i = 0; i < 4; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());

    Rng base(7);
    Rng s1 = base.split(1), s2 = base.split(2);
    EXPECT_NE(s1.next_u64(), s2.next_u64());
    // splitting does not advance the parent
    Rng fresh(7);
    EXPECT_EQ(base.next_u64(), fresh.next_u64());

    Rng c(99);
    c.next_u64();
    const std::uint64_t key = c.key(), counter = c.counter();
    const std::uint64_t expect = c.next_u64();
    c.restore(key, counter);
    EXPECT_EQ(c.next_u64(), expect);

    Rng u(5);
    for (int i = 0; i < 1000; ++i) {
        const double v = u.next_uniform();
        EXPECT_GE(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(Ops, FiniteCheckTrips) {
    Tensor<double> x = Tensor<double>::row({1e308, 1e308});
    EXPECT_THROW(add(x, x), NonFiniteError);
}

TEST(Ops, AddMulScaleValuesAndGrads) {
    Rng rng(11);
    Tensor<double> a = rand_tensor({2, 3}, rng);
    Tensor<double> b = rand_tensor({2, 3}, rng);
    Tensor<double> w = rand_tensor({2, 3}, rng);
    EXPECT_THROW(add(a, rand_tensor({3, 2}, rng)), DimensionError);

    Tensor<double> s = add(a, b);
    EXPECT_DOUBLE_EQ(s.at(4), a.at(4) + b.at(4));

    expect_grad_matches(a, [&](Tape<double>* t) { return pick(add(a, b, t), w, t); });
    expect_grad_matches(b, [&](Tape<double>* t) { return pick(mul(a, b, t), w, t); });
    expect_grad_matches(a, [&](Tape<double>* t) { return pick(scale(a, -1.7, t), w, t); });
}

TEST(Ops, ScaleByRoutesGradientToWeight) {
    Rng rng(12);
    Tensor<double> x = rand_tensor({2, 4}, rng);
    Tensor<double> v = rand_tensor({3}, rng, 1.0);
    Tensor<double> w = rand_tensor({2, 4}, rng);
    EXPECT_THROW(scale_by(x, v, 3), DimensionError);

    Tensor<double> y = scale_by(x, v, 1);
    EXPECT_DOUBLE_EQ(y.at(5), x.at(5) * v.at(1));

    expect_grad_matches(x, [&](Tape<double>* t) { return pick(scale_by(x, v, 1, t), w, t); });
    expect_grad_matches(v, [&](Tape<double>* t) { return pick(scale_by(x, v, 1, t), w, t); });
}

TEST(Ops, AddBias) {
    Rng rng(13);
    Tensor<double> x = rand_tensor({3, 4}, rng);
    Tensor<double> b = rand_tensor({4}, rng);
    Tensor<double> w = rand_tensor({3, 4}, rng);
    Tensor<double> y = add_bias(x, b);
    EXPECT_DOUBLE_EQ(y.at(7), x.at(7) + b.at(3));
    expect_grad_matches(x, [&](Tape<double>* t) { return pick(add_bias(x, b, t), w, t); });
    expect_grad_matches(b, [&](Tape<double>* t) { return pick(add_bias(x, b, t), w, t); });
}

TEST(Ops, SigmoidReluGrads) {
    Rng rng(14);
    Tensor<double> x = rand_tensor({2, 5}, rng);
    // keep relu inputs away from the kink
    for (std::int64_t i = 0; i < x.numel(); ++i)
        if (std::abs(x.at(i)) < 0.1) x.at(i) = 0.5;
    Tensor<double> w = rand_tensor({2, 5}, rng);

    Tensor<double> s = sigmoid(x);
    EXPECT_NEAR(s.at(0), 1.0 / (1.0 + std::exp(-x.at(0))), 1e-12);
    Tensor<double> r = relu(x);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        EXPECT_DOUBLE_EQ(r.at(i), x.at(i) > 0 ? x.at(i) : 0.0);

    expect_grad_matches(x, [&](Tape<double>* t) { return pick(sigmoid(x, t), w, t); });
    expect_grad_matches(x, [&](Tape<double>* t) { return pick(relu(x, t), w, t); });
}

TEST(Ops, DropoutInvertedScaling) {
    Rng rng(15);
    Tensor<double> x({1, 1000}, 1.0);
    Rng mask_rng(77);
    Tensor<double> y = dropout(x, 0.5, mask_rng);
    int zeros = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        if (y.at(i) == 0.0)
            ++zeros;
        else
            EXPECT_DOUBLE_EQ(y.at(i), 2.0);
    }
    EXPECT_GT(zeros, 400);
    EXPECT_LT(zeros, 600);
    EXPECT_THROW(dropout(x, 1.0, mask_rng), ValueError);

    Tensor<double> xs = rand_tensor({2, 6}, rng);
    Tensor<double> w = rand_tensor({2, 6}, rng);
    expect_grad_matches(xs, [&](Tape<double>* t) {
        Rng r(123);
        return pick(dropout(xs, 0.3, r, t), w, t);
    });
}

TEST(Ops, MatmulFamily) {
    Rng rng(16);
    Tensor<double> a = rand_tensor({3, 4}, rng);
    Tensor<double> b = rand_tensor({4, 2}, rng);
    Tensor<double> bt = rand_tensor({2, 4}, rng);
    Tensor<double> w = rand_tensor({3, 2}, rng);
    EXPECT_THROW(matmul(a, rand_tensor({3, 2}, rng)), DimensionError);

    Tensor<double> c = matmul(a, b);
    double c00 = 0;
    for (int k = 0; k < 4; ++k) c00 += a.at(k) * b.at(k * 2);
    EXPECT_NEAR(c.at(0), c00, 1e-12);

    // a . bt^T equals matmul against the explicit transpose
    Tensor<double> btT({4, 2});
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j) btT.at(j * 2 + i) = bt.at(i * 4 + j);
    Tensor<double> via_t = matmul(a, btT);
    Tensor<double> nt = matmul_nt(a, bt);
    for (std::int64_t i = 0; i < nt.numel(); ++i) EXPECT_NEAR(nt.at(i), via_t.at(i), 1e-12);

    expect_grad_matches(a, [&](Tape<double>* t) { return pick(matmul(a, b, t), w, t); });
    expect_grad_matches(b, [&](Tape<double>* t) { return pick(matmul(a, b, t), w, t); });
    expect_grad_matches(a, [&](Tape<double>* t) { return pick(matmul_nt(a, bt, t), w, t); });
    expect_grad_matches(bt, [&](Tape<double>* t) { return pick(matmul_nt(a, bt, t), w, t); });
}

TEST(Ops, BatchedMatmul) {
    Rng rng(17);
    Tensor<double> a = rand_tensor({2, 2, 3, 4}, rng, 1.5);
    Tensor<double> b = rand_tensor({2, 2, 4, 2}, rng, 1.5);
    Tensor<double> bt = rand_tensor({2, 2, 5, 4}, rng, 1.5);
    Tensor<double> w = rand_tensor({2, 2, 3, 2}, rng);
    Tensor<double> wt = rand_tensor({2, 2, 3, 5}, rng);

    // each batch slice matches the 2-d product
    Tensor<double> c = bmm(a, b);
    for (int s = 0; s < 4; ++s) {
        Tensor<double> as({3, 4}), bs({4, 2});
        std::copy_n(a.data() + s * 12, 12, as.data());
        std::copy_n(b.data() + s * 8, 8, bs.data());
        Tensor<double> cs = matmul(as, bs);
        for (int i = 0; i < 6; ++i) EXPECT_NEAR(c.at(s * 6 + i), cs.at(i), 1e-12);
    }

    expect_grad_matches(a, [&](Tape<double>* t) { return pick(bmm(a, b, t), w, t); });
    expect_grad_matches(b, [&](Tape<double>* t) { return pick(bmm(a, b, t), w, t); });
    expect_grad_matches(a, [&](Tape<double>* t) { return pick(bmm_nt(a, bt, t), wt, t); });
    expect_grad_matches(bt, [&](Tape<double>* t) { return pick(bmm_nt(a, bt, t), wt, t); });
}

TEST(Ops, PermuteMovesAxes) {
    Rng rng(18);
    Tensor<double> x = rand_tensor({2, 3, 4}, rng);
    Tensor<double> y = permute(x, {2, 0, 1});
    ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 4; ++k)
                EXPECT_DOUBLE_EQ(y.at((k * 2 + i) * 3 + j), x.at((i * 3 + j) * 4 + k));
    EXPECT_THROW(permute(x, {0, 1}), DimensionError);
    EXPECT_THROW(permute(x, {0, 0, 1}), DimensionError);

    Tensor<double> w = rand_tensor({4, 2, 3}, rng);
    expect_grad_matches(x, [&](Tape<double>* t) { return pick(permute(x, {2, 0, 1}, t), w, t); });
}

TEST(Ops, SoftmaxHandValueAndGrads) {
    Tensor<double> x({1, 2}, std::vector<double>{0.0, std::log(3.0)});
    Tensor<double> y = softmax_t(x, 1.0);
    EXPECT_NEAR(y.at(0), 0.25, 1e-12);
    EXPECT_NEAR(y.at(1), 0.75, 1e-12);
    EXPECT_THROW(softmax_t(x, 0.0), ValueError);

    // high temperature flattens toward uniform
    Tensor<double> hot = softmax_t(x, 100.0);
    EXPECT_NEAR(hot.at(0), 0.5, 1e-2);

    Rng rng(19);
    Tensor<double> xs = rand_tensor({3, 5}, rng);
    Tensor<double> w = rand_tensor({3, 5}, rng);
    expect_grad_matches(xs, [&](Tape<double>* t) { return pick(softmax_t(xs, 1.0, t), w, t); });
    expect_grad_matches(xs, [&](Tape<double>* t) { return pick(softmax_t(xs, 2.5, t), w, t); });
}

TEST(Ops, LogSoftmaxMatchesLogOfSoftmax) {
    Rng rng(20);
    Tensor<double> x = rand_tensor({2, 6}, rng);
    Tensor<double> ls = log_softmax(x);
    Tensor<double> s = softmax_t(x, 1.0);
    for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(ls.at(i), std::log(s.at(i)), 1e-12);

    Tensor<double> w = rand_tensor({2, 6}, rng);
    expect_grad_matches(x, [&](Tape<double>* t) { return pick(log_softmax(x, t), w, t); });
}

TEST(Ops, MaskedSoftmaxZerosBlockedColumns) {
    Rng rng(21);
    Tensor<double> scores = rand_tensor({1, 2, 2, 3}, rng);
    ByteMask mask({1, 2, 3});
    mask.v = {1, 1, 0, 1, 0, 1};
    Tensor<double> y = masked_softmax(scores, mask);
    for (int h = 0; h < 2; ++h) {
        EXPECT_DOUBLE_EQ(y.at(h * 6 + 2), 0.0);  // row 0 col 2 blocked
        EXPECT_DOUBLE_EQ(y.at(h * 6 + 4), 0.0);  // row 1 col 1 blocked
        EXPECT_NEAR(y.at(h * 6 + 0) + y.at(h * 6 + 1), 1.0, 1e-12);
        EXPECT_NEAR(y.at(h * 6 + 3) + y.at(h * 6 + 5), 1.0, 1e-12);
    }

    ByteMask dead({1, 2, 3});
    dead.v = {1, 1, 1, 0, 0, 0};
    EXPECT_THROW(masked_softmax(scores, dead), ValueError);

    ByteMask wrong({1, 2, 2});
    EXPECT_THROW(masked_softmax(scores, wrong), DimensionError);

    Tensor<double> w = rand_tensor({1, 2, 2, 3}, rng);
    expect_grad_matches(scores,
                        [&](Tape<double>* t) { return pick(masked_softmax(scores, mask, t), w, t); });
}

TEST(Ops, LayerNormHandValueAndGrads) {
    Tensor<double> x({1, 2}, std::vector<double>{1.0, 3.0});
    Tensor<double> gamma({2}, 1.0);
    Tensor<double> beta({2}, 0.0);
    Tensor<double> y = layer_norm(x, gamma, beta, 1e-8);
    EXPECT_NEAR(y.at(0), -1.0, 1e-6);
    EXPECT_NEAR(y.at(1), 1.0, 1e-6);
    EXPECT_THROW(layer_norm(x, gamma, beta, 0.0), ValueError);
    EXPECT_THROW(layer_norm(x, Tensor<double>({3}, 1.0), beta, 1e-8), DimensionError);

    Rng rng(22);
    Tensor<double> xs = rand_tensor({3, 6}, rng);
    Tensor<double> g = rand_tensor({6}, rng, 1.0);
    for (std::int64_t i = 0; i < g.numel(); ++i) g.at(i) += 1.5;  // keep gamma away from zero
    Tensor<double> b = rand_tensor({6}, rng, 1.0);
    Tensor<double> w = rand_tensor({3, 6}, rng);
    auto fwd = [&](Tape<double>* t) { return pick(layer_norm(xs, g, b, 1e-5, t), w, t); };
    expect_grad_matches(xs, fwd, 1e-5, 1e-7);
    expect_grad_matches(g, fwd, 1e-5, 1e-7);
    expect_grad_matches(b, fwd, 1e-5, 1e-7);
}

TEST(Ops, EmbeddingGatherScatter) {
    Rng rng(23);
    Tensor<double> table = rand_tensor({5, 3}, rng);
    TokenMatrix ids(2, 2);
    ids.at(0, 0) = 1;
    ids.at(0, 1) = 4;
    ids.at(1, 0) = 1;  // repeat: scatter must accumulate
    ids.at(1, 1) = 0;
    Tensor<double> e = embedding(table, ids);
    ASSERT_EQ(e.shape(), (Shape{2, 2, 3}));
    for (int j = 0; j < 3; ++j) {
        EXPECT_DOUBLE_EQ(e.at(j), table.at(1 * 3 + j));
        EXPECT_DOUBLE_EQ(e.at(3 + j), table.at(4 * 3 + j));
    }

    TokenMatrix bad(1, 1);
    bad.at(0, 0) = 5;
    EXPECT_THROW(embedding(table, bad), VocabError);
    bad.at(0, 0) = -1;
    EXPECT_THROW(embedding(table, bad), VocabError);

    Tensor<double> w = rand_tensor({2, 2, 3}, rng);
    expect_grad_matches(table, [&](Tape<double>* t) { return pick(embedding(table, ids, t), w, t); });
}

TEST(Ops, AddPositionalIsConstantShift) {
    Rng rng(24);
    Tensor<double> x = rand_tensor({2, 3, 4}, rng);
    Tensor<double> pe = rand_tensor({5, 4}, rng);
    Tensor<double> y = add_positional(x, pe);
    EXPECT_DOUBLE_EQ(y.at((1 * 3 + 2) * 4 + 1), x.at((1 * 3 + 2) * 4 + 1) + pe.at(2 * 4 + 1));
    EXPECT_THROW(add_positional(rand_tensor({2, 6, 4}, rng), pe), DimensionError);

    Tensor<double> w = rand_tensor({2, 3, 4}, rng);
    expect_grad_matches(x, [&](Tape<double>* t) { return pick(add_positional(x, pe, t), w, t); });
}

TEST(Ops, NllHandValue) {
    // rows predict 0.5 and 0.25 for their targets: mean nll = -(ln .5 + ln .25)/2
    Tensor<double> lp({2, 2}, std::vector<double>{std::log(0.5), std::log(0.5), std::log(0.25),
                                                  std::log(0.75)});
    Tensor<double> loss = nll_loss(lp, std::vector<TokenId>{0, 0}, TokenId(-1));
    EXPECT_NEAR(loss.at(0), -(std::log(0.5) + std::log(0.25)) / 2.0, 1e-12);
}

TEST(Ops, SmoothedNllPadAwareAndGrads) {
    Rng rng(25);
    Tensor<double> logits = rand_tensor({4, 5}, rng);
    std::vector<TokenId> targets{2, 0, 4, 0};  // rows 1 and 3 are padding below

    // oracle computed straight from the smoothed cross entropy definition
    Tensor<double> lp = log_softmax(logits);
    const double eps = 0.1;
    double want = 0;
    for (int r : {0, 2}) {
        double s = 0;
        for (int j = 0; j < 5; ++j) s += lp.at(r * 5 + j);
        want += -(1.0 - eps) * lp.at(r * 5 + targets[static_cast<std::size_t>(r)]) - eps / 5.0 * s;
    }
    want /= 2.0;
    Tensor<double> got = smoothed_nll(lp, targets, TokenId(0), eps);
    EXPECT_NEAR(got.at(0), want, 1e-12);

    EXPECT_THROW(smoothed_nll(lp, std::vector<TokenId>{0, 0, 0, 0}, TokenId(0), eps), ValueError);
    EXPECT_THROW(smoothed_nll(lp, std::vector<TokenId>{2, 0, 9, 0}, TokenId(0), eps), VocabError);
    EXPECT_THROW(smoothed_nll(lp, targets, TokenId(0), 1.0), ValueError);

    expect_grad_matches(logits, [&](Tape<double>* t) {
        return smoothed_nll(log_softmax(logits, t), targets, TokenId(0), eps, t);
    });
    expect_grad_matches(logits, [&](Tape<double>* t) {
        return nll_loss(log_softmax(logits, t), targets, TokenId(0), t);
    });
}

TEST(Ops, SumAndConcatScalars) {
    Rng rng(26);
    Tensor<double> x = rand_tensor({3, 3}, rng);
    Tensor<double> s = sum(x);
    double want = 0;
    for (std::int64_t i = 0; i < 9; ++i) want += x.at(i);
    EXPECT_NEAR(s.at(0), want, 1e-12);
    expect_grad_matches(x, [&](Tape<double>* t) { return sum(x, t); });

    Tensor<double> a = rand_tensor({2, 2}, rng);
    Tensor<double> w = rand_tensor({3}, rng);
    expect_grad_matches(a, [&](Tape<double>* t) {
        std::vector<Tensor<double>> parts{sum(a, t), sum(mul(a, a, t), t),
                                          Tensor<double>::scalar(2.0)};
        return pick(concat_scalars(parts, t), w, t);
    });
    EXPECT_THROW(concat_scalars(std::vector<Tensor<double>>{}), DimensionError);
    EXPECT_THROW(concat_scalars(std::vector<Tensor<double>>{x}), DimensionError);
}

TEST(Ops, MatmulHandValues) {
    Tensor<double> eye({2, 2}, std::vector<double>{1, 0, 0, 1});
    Tensor<double> m({2, 2}, std::vector<double>{1, 2, 3, 4});
    Tensor<double> p = matmul(eye, m);
    for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p.at(i), m.at(i));

    Tensor<double> r({1, 2}, std::vector<double>{1, 2});
    Tensor<double> c({2, 1}, std::vector<double>{3, 4});
    EXPECT_DOUBLE_EQ(matmul(r, c).at(0), 11.0);
}

TEST(Ops, SigmoidIdentities) {
    Tensor<double> x = Tensor<double>::row({0.0, std::log(3.0)});
    Tensor<double> s = sigmoid(x);
    EXPECT_DOUBLE_EQ(s.at(0), 0.5);
    EXPECT_NEAR(s.at(1), 0.75, 1e-12);

    Rng rng(30);
    for (int i = 0; i < 20; ++i) {
        const double v = rng.next_symmetric(3.0);
        Tensor<double> pair = Tensor<double>::row({v, -v});
        Tensor<double> sp = sigmoid(pair);
        EXPECT_NEAR(sp.at(0) + sp.at(1), 1.0, 1e-12);
    }
}

TEST(Ops, SoftmaxTemperatureAndEquivariance) {
    // equal logits give uniform mass at any temperature
    Tensor<double> eq({1, 4}, 1.3);
    Tensor<double> u = softmax_t(eq, 7.0);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(u.at(i), 0.25, 1e-12);

    // tau = sqrt(512) flattens [0, ln 3] to near-uniform
    Tensor<double> x({1, 2}, std::vector<double>{0.0, std::log(3.0)});
    Tensor<double> warm = softmax_t(x, std::sqrt(512.0));
    EXPECT_NEAR(warm.at(0), 0.5, 0.02);
    EXPECT_NEAR(warm.at(1), 0.5, 0.02);

    Rng rng(31);
    Tensor<double> a({1, 5});
    for (int i = 0; i < 5; ++i) a.at(i) = rng.next_symmetric(3.0);
    Tensor<double> rev({1, 5});
    for (int i = 0; i < 5; ++i) rev.at(i) = a.at(4 - i);
    Tensor<double> sa = softmax_t(a, 1.0), sr = softmax_t(rev, 1.0);
    double sum = 0;
    for (int i = 0; i < 5; ++i) {
        EXPECT_NEAR(sr.at(i), sa.at(4 - i), 1e-12);
        sum += sa.at(i);
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(Ops, LayerNormCenteringProperties) {
    // zero-variance row collapses to beta through eps
    Tensor<double> flat({1, 4}, 5.0);
    Tensor<double> gamma({4}, 1.0);
    Tensor<double> beta({4}, 0.0);
    Tensor<double> y = layer_norm(flat, gamma, beta, 1e-5);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(y.at(i), 0.0, 1e-9);

    Rng rng(32);
    Tensor<double> x({4, 8});
    for (std::int64_t i = 0; i < x.numel(); ++i) x.at(i) = rng.next_symmetric(3.0);
    Tensor<double> g2({8}, 1.0), b2({8}, 0.0);
    Tensor<double> z = layer_norm(x, g2, b2, 1e-5);
    for (int r = 0; r < 4; ++r) {
        double mean = 0;
        for (int j = 0; j < 8; ++j) mean += z.at(r * 8 + j);
        EXPECT_LE(std::abs(mean / 8.0), 1e-6);
    }
}

TEST(Ops, NllUniformAndPerfect) {
    const int v = 7;
    Tensor<double> uni({3, v}, std::log(1.0 / v));
    Tensor<double> loss = nll_loss(uni, std::vector<TokenId>{1, 2, 3}, TokenId(0));
    EXPECT_NEAR(loss.at(0), std::log(static_cast<double>(v)), 1e-12);

    // probability 1 on every target: loss exactly 0
    Tensor<double> sharp({2, 2}, -745.0);  // ~= log(smallest normal), still finite
    sharp.at(0) = 0.0;
    sharp.at(3) = 0.0;
    Tensor<double> zero = nll_loss(sharp, std::vector<TokenId>{0, 1}, TokenId(-1));
    EXPECT_DOUBLE_EQ(zero.at(0), 0.0);
}

TEST(GradCheck, OracleSanity) {
    Tensor<double> x = Tensor<double>::row({3.0});
    Tensor<double> g =
        finite_diff_grad<double>([&] { return x.at(0) * x.at(0); }, x, 1e-4);
    EXPECT_NEAR(g.at(0), 6.0, 1e-6);

    Tensor<double> z({2, 2}, 0.0);
    Tensor<double> gs = finite_diff_grad<double>([&] { return sum(sigmoid(z)).at(0); }, z);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(gs.at(i), 0.25, 1e-8);
}

TEST(Ops, DiamondGraphAccumulates) {
    Rng rng(27);
    Tensor<double> x = rand_tensor({2, 3}, rng);
    Tensor<double> w = rand_tensor({2, 3}, rng);
    // b feeds two consumers; its gradient must sum both paths
    expect_grad_matches(x, [&](Tape<double>* t) {
        Tensor<double> b = add(x, x, t);
        Tensor<double> c = mul(b, b, t);
        Tensor<double> d = add(b, c, t);
        return pick(d, w, t);
    });
}
