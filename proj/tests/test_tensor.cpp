#include <doctest.h>

#include <cmath>
#include <set>

#include "sre/tensor.hpp"

using namespace sre;
using T = Tensor<double>;

namespace {

T random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    T t = T::zeros(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("matmul identity and zero cases") {
    T eye = T::from({2, 2}, {1, 0, 0, 1});
    T b = T::from({2, 3}, {1, 2, 3, 4, 5, 6});
    T prod = matmul(eye, b);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) CHECK(prod.at(i, j) == b.at(i, j));

    T z = T::zeros({2, 3});
    T c = T::from({3, 4}, std::vector<double>(12, 1.5));
    T zc = matmul(z, c);
    CHECK(zc.shape() == Shape{2, 4});
    for (double v : zc.values()) CHECK(v == 0.0);
}

TEST_CASE("matmul matches a triple-loop oracle") {
    Rng rng(42);
    for (int rep = 0; rep < 20; ++rep) {
        T a = random_tensor({3, 3}, rng);
        T b = random_tensor({3, 3}, rng);
        T c = matmul(a, b);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double acc = 0.0;
                for (int k = 0; k < 3; ++k) acc += a.at(i, k) * b.at(k, j);
                CHECK(std::abs(c.at(i, j) - acc) < 1e-12);
            }
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    T a = T::zeros({2, 3});
    T b = T::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("softmax symmetry and overflow safety") {
    T sym = softmax(T::from({3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i) CHECK(std::abs(sym.at(i) - 1.0 / 3.0) < 1e-12);

    T big = softmax(T::from({2}, {1000, 0}));
    CHECK(std::abs(big.at(0) - 1.0) < 1e-9);
    CHECK(std::abs(big.at(1)) < 1e-9);
}

TEST_CASE("softmax matches a direct exp/sum oracle") {
    T y = softmax(T::from({3}, {1, 2, 3}));
    double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(y.at(i) - std::exp(1.0 + i) / denom) < 1e-12);
}

TEST_CASE("softmax rejects NaN input") {
    T bad = T::from({2}, {std::nan(""), 0.0});
    CHECK_THROWS_AS(softmax(bad), NumericError);
}

TEST_CASE("softmax rows sum to 1 for magnitudes up to 1e4") {
    Rng rng(7);
    for (int rep = 0; rep < 50; ++rep) {
        T x = random_tensor({4, 6}, rng, -1e4, 1e4);
        T y = softmax(x);
        for (int r = 0; r < 4; ++r) {
            double s = 0.0;
            for (int j = 0; j < 6; ++j) {
                CHECK(y.at(r, j) >= 0.0);
                s += y.at(r, j);
            }
            CHECK(std::abs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("cosine similarity identities") {
    Rng rng(3);
    T v = random_tensor({5}, rng);
    CHECK(std::abs(cosine_similarity(v, v).item() - 1.0) < 1e-12);

    T e1 = T::from({2}, {1, 0});
    T e2 = T::from({2}, {0, 1});
    CHECK(cosine_similarity(e1, e2).item() == 0.0);
}

TEST_CASE("cosine similarity matches a dot/norm oracle") {
    Rng rng(11);
    for (int rep = 0; rep < 30; ++rep) {
        T a = random_tensor({8}, rng);
        T b = random_tensor({8}, rng);
        double dot = 0, na = 0, nb = 0;
        for (int i = 0; i < 8; ++i) {
            dot += a.at(i) * b.at(i);
            na += a.at(i) * a.at(i);
            nb += b.at(i) * b.at(i);
        }
        double expect = dot / (std::sqrt(na) * std::sqrt(nb));
        CHECK(std::abs(cosine_similarity(a, b).item() - expect) < 1e-12);
    }
}

TEST_CASE("cosine similarity flags zero-norm inputs as degenerate zeros") {
    T z = T::zeros({4});
    T v = T::from({4}, {1, 2, 3, 4});
    T c = cosine_similarity(z, v);
    CHECK(c.item() == 0.0);
    CHECK(c.degenerate());
    CHECK_FALSE(cosine_similarity(v, v).degenerate());
}

TEST_CASE("grad_check: quadratic, constant, and shared subexpressions") {
    T x = T::from({}, {3.0}).set_requires_grad(true);
    double err = grad_check([&]() { return mul(x, x); }, {&x}, 1e-5);
    CHECK(err < 1e-8);
    x.zero_grad();
    T root = mul(x, x);
    backward(root);
    CHECK(std::abs(x.grad()[0] - 6.0) < 1e-12);

    // constant function: both gradients zero
    T c = T::from({}, {2.0}).set_requires_grad(true);
    double cerr = grad_check([&]() { return T::scalar(5.0).set_requires_grad(true); }, {&c}, 1e-5);
    CHECK(cerr == 0.0);

    // f(x) = x*x + x accumulates: df/dx = 2x + 1
    T w = T::from({}, {1.5}).set_requires_grad(true);
    w.zero_grad();
    T f = add(mul(w, w), w);
    backward(f);
    CHECK(std::abs(w.grad()[0] - 4.0) < 1e-12);
}

TEST_CASE("backward visits each node exactly once in reverse topological order") {
    T x = T::from({}, {2.0}).set_requires_grad(true);
    T a = mul(x, x);
    T b = add(a, x);
    T root = mul(b, a);  // shared subexpression `a`
    ComputeGraph<double> g = build_graph(root);

    std::set<const Node<double>*> seen;
    for (const auto& n : g.order) CHECK(seen.insert(n.get()).second);  // unique visit
    // parents appear before dependents
    for (size_t i = 0; i < g.order.size(); ++i)
        for (const auto& p : g.order[i]->parents) {
            if (!p->requires_grad) continue;
            bool before = false;
            for (size_t j = 0; j < i; ++j)
                if (g.order[j].get() == p.get()) before = true;
            CHECK(before);
        }
    CHECK(g.order.back().get() == root.node().get());
}

TEST_CASE("every differentiable op passes grad_check below 1e-6") {
    Rng rng(99);
    auto check = [](const std::function<Tensor<double>()>& f, std::vector<T*> params) {
        double err = grad_check(f, params, 1e-5);
        CHECK(err < 1e-6);
    };

    T a = random_tensor({3, 4}, rng).set_requires_grad(true);
    T b = random_tensor({3, 4}, rng).set_requires_grad(true);
    check([&]() { return sum(mul(add(a, b), sub(a, b))); }, {&a, &b});

    T m1 = random_tensor({2, 3}, rng).set_requires_grad(true);
    T m2 = random_tensor({3, 2}, rng).set_requires_grad(true);
    check([&]() { return sum(matmul(m1, m2)); }, {&m1, &m2});
    check([&]() { return sum(matmul_nt(m1, transpose(m2))); }, {&m1, &m2});

    T sm = random_tensor({2, 5}, rng).set_requires_grad(true);
    T w = random_tensor({2, 5}, rng);
    check([&]() { return sum(mul(softmax(sm), w)); }, {&sm});

    T g = random_tensor({4}, rng, 0.5, 1.5).set_requires_grad(true);
    T be = random_tensor({4}, rng, -0.1, 0.1).set_requires_grad(true);
    T ln_in = random_tensor({3, 4}, rng).set_requires_grad(true);
    T ln_w = random_tensor({3, 4}, rng);
    check([&]() { return sum(mul(layer_norm(ln_in, g, be), ln_w)); }, {&ln_in, &g, &be});

    T gx = random_tensor({2, 3}, rng).set_requires_grad(true);
    check([&]() { return sum(gelu(gx)); }, {&gx});

    T z = random_tensor({3, 4}, rng).set_requires_grad(true);
    T sg = random_tensor({4}, rng).set_requires_grad(true);
    check([&]() { return sum(cosine_rows(z, sg)); }, {&z, &sg});
    check([&]() { return sum(scale_rows(z, cosine_rows(z, sg))); }, {&z, &sg});

    T ca = random_tensor({6}, rng).set_requires_grad(true);
    T cb = random_tensor({6}, rng).set_requires_grad(true);
    check([&]() { return cosine_similarity(ca, cb); }, {&ca, &cb});

    T nrm = random_tensor({2, 4}, rng).set_requires_grad(true);
    T nrm_w = random_tensor({2, 4}, rng);
    check([&]() { return sum(mul(l2_normalize_rows(nrm), nrm_w)); }, {&nrm});

    T lg = random_tensor({5}, rng).set_requires_grad(true);
    check([&]() { return nll_loss(lg, 2); }, {&lg});

    T sl = random_tensor({4, 3}, rng).set_requires_grad(true);
    check([&]() { return sum(slice_rows(sl, 1, 3)); }, {&sl});
    check([&]() { return sum(slice_cols(sl, 0, 2)); }, {&sl});
    check([&]() { return sum(row(sl, 2)); }, {&sl});
    check([&]() { return element(sl, 5); }, {&sl});
    check([&]() { return mean(concat_rows(sl, sl)); }, {&sl});
    check([&]() { return sum(concat_cols(std::vector<T>{sl, sl})); }, {&sl});
    check([&]() { return sum(add_bias_row(sl, row(sl, 0))); }, {&sl});
    check([&]() { return sum(sub_broadcast(sl, mean(sl))); }, {&sl});
    check([&]() { return mean(stack(std::vector<T>{element(sl, 0), element(sl, 3), mean(sl)})); },
          {&sl});
}

TEST_CASE("nll_loss clamps underflowing probabilities and reports them") {
    T logits = T::from({2}, {100.0, -100.0});
    NllInfo info;
    T loss = nll_loss(logits, 1, 1e-12, &info);
    CHECK(info.clamped);
    CHECK(std::abs(loss.item() + std::log(1e-12)) < 1e-9);

    T fine = nll_loss(T::from({2}, {0.0, 0.0}), 0, 1e-12, &info);
    CHECK_FALSE(info.clamped);
    CHECK(std::abs(fine.item() - std::log(2.0)) < 1e-12);
}

TEST_CASE("leaf gradients accumulate across backward calls until cleared") {
    T x = T::from({}, {2.0}).set_requires_grad(true);
    backward(mul(x, x));
    backward(mul(x, x));
    CHECK(std::abs(x.grad()[0] - 8.0) < 1e-12);  // 4 + 4
    x.zero_grad();
    backward(mul(x, x));
    CHECK(std::abs(x.grad()[0] - 4.0) < 1e-12);
}
