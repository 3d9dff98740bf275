#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "avlm/num/adam.hpp"
#include "avlm/num/gradcheck.hpp"
#include "avlm/num/tensor.hpp"

using namespace avlm;
using namespace avlm::num;

namespace {

// Independent triple-loop product, the matmul oracle.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 size_t m, size_t k, size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j)
            for (size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

Tensor rand_tensor(size_t m, size_t n, Rng& rng, bool rg = false) {
    return Tensor::randn(m, n, rng, 1.0, rg);
}

// Scalar proxy: fixed-random-weighted sum of an op output, so grad_check can
// probe ops whose outputs are not scalar.
Tensor weighted_sum(const Tensor& x, uint64_t seed) {
    Rng r(seed);
    Tensor w = Tensor::randn(x.rows(), x.cols(), r);
    return sum_all(mul(x, w));
}

}  // namespace

TEST_CASE("matmul identity and selector") {
    Tensor i2 = Tensor::from_vector(2, 2, {1, 0, 0, 1});
    Tensor a = Tensor::from_vector(2, 2, {1, 2, 3, 4});
    Tensor prod = matmul(i2, a);
    REQUIRE(prod.data_vec() == std::vector<double>{1, 2, 3, 4});

    Tensor sel = Tensor::from_vector(1, 2, {1, 0});
    Tensor col = Tensor::from_vector(2, 1, {2, 5});
    REQUIRE(matmul(sel, col).item() == 2.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(42);
    Tensor a = rand_tensor(3, 4, rng);
    Tensor b = rand_tensor(4, 2, rng);
    auto expect = naive_matmul(a.data_vec(), b.data_vec(), 3, 4, 2);
    Tensor c = matmul(a, b);
    for (size_t i = 0; i < c.numel(); ++i)
        REQUIRE(std::abs(c.data()[i] - expect[i]) < 1e-12);
}

TEST_CASE("matmul shape mismatch throws") {
    Tensor a = Tensor::zeros(2, 3);
    Tensor b = Tensor::zeros(2, 3);
    REQUIRE_THROWS(matmul(a, b));
}

TEST_CASE("softmax uniform and shift invariance") {
    Tensor x = Tensor::from_vector(1, 3, {0, 0, 0});
    Tensor y = softmax_rows(x);
    for (size_t j = 0; j < 3; ++j) REQUIRE(y.data()[j] == Catch::Approx(1.0 / 3.0).epsilon(1e-14));

    for (double c : {-7.5, 0.0, 3.25, 100.0}) {
        Tensor two = Tensor::from_vector(1, 2, {c, c});
        Tensor s = softmax_rows(two);
        REQUIRE(s.data()[0] == 0.5);
        REQUIRE(s.data()[1] == 0.5);
    }

    Rng rng(7);
    Tensor a = rand_tensor(4, 6, rng);
    std::vector<double> shifted = a.data_vec();
    for (size_t i = 0; i < 4; ++i)
        for (size_t j = 0; j < 6; ++j) shifted[i * 6 + j] += 13.75;
    Tensor b = Tensor::from_vector(4, 6, shifted);
    Tensor sa = softmax_rows(a), sb = softmax_rows(b);
    for (size_t i = 0; i < sa.numel(); ++i)
        REQUIRE(std::abs(sa.data()[i] - sb.data()[i]) < 1e-14);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = rand_tensor(5, 9, rng);
        Tensor y = softmax_rows(x);
        for (size_t i = 0; i < 5; ++i) {
            double s = 0.0;
            for (size_t j = 0; j < 9; ++j) {
                double v = y.at(i, j);
                REQUIRE(v >= 0.0);
                s += v;
            }
            REQUIRE(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("softmax 1-2-3 against high-precision oracle") {
    Tensor x = Tensor::from_vector(1, 3, {1, 2, 3});
    Tensor y = softmax_rows(x);
    long double e1 = expl(1.0L - 3.0L), e2 = expl(2.0L - 3.0L), e3 = 1.0L;
    long double z = e1 + e2 + e3;
    REQUIRE(y.data()[0] == Catch::Approx(static_cast<double>(e1 / z)).epsilon(1e-14));
    REQUIRE(y.data()[1] == Catch::Approx(static_cast<double>(e2 / z)).epsilon(1e-14));
    REQUIRE(y.data()[2] == Catch::Approx(static_cast<double>(e3 / z)).epsilon(1e-14));
}

TEST_CASE("softmax rejects non-finite input") {
    Tensor x = Tensor::from_vector(1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()});
    REQUIRE_THROWS(softmax_rows(x));
}

TEST_CASE("cross_entropy confident and uniform cases") {
    // Huge margin at the target drives the loss to ~0.
    Tensor conf = Tensor::from_vector(1, 4, {0, 0, 1000, 0});
    std::vector<int> t{2};
    REQUIRE(cross_entropy(conf, t).item() < 1e-10);

    // Uniform logits over V classes: loss = ln V.
    size_t v = 7;
    Tensor unif = Tensor::zeros(3, v);
    std::vector<int> t3{1, 4, 6};
    REQUIRE(cross_entropy(unif, t3).item() == Catch::Approx(std::log(double(v))).epsilon(1e-12));
}

TEST_CASE("cross_entropy 2x3 against scalar oracle") {
    Tensor logits = Tensor::from_vector(2, 3, {0.5, -1.0, 2.0, 1.5, 0.0, -0.5});
    std::vector<int> targets{2, 0};
    // Per-element log-softmax oracle in long double.
    long double total = 0.0L;
    std::vector<long double> rows = {0.5L, -1.0L, 2.0L, 1.5L, 0.0L, -0.5L};
    for (size_t r = 0; r < 2; ++r) {
        long double z = 0.0L;
        for (size_t j = 0; j < 3; ++j) z += expl(rows[r * 3 + j]);
        total += -(rows[r * 3 + static_cast<size_t>(targets[r])] - logl(z));
    }
    double expect = static_cast<double>(total / 2.0L);
    REQUIRE(cross_entropy(logits, targets).item() == Catch::Approx(expect).epsilon(1e-13));
}

TEST_CASE("cross_entropy mask semantics") {
    Tensor logits = Tensor::from_vector(2, 3, {0.5, -1.0, 2.0, 1.5, 0.0, -0.5}, true);
    std::vector<int> targets{2, 0};
    std::vector<uint8_t> mask{1, 0};
    Tensor loss = cross_entropy(logits, targets, mask);
    loss.backward();
    // Gradient only on the unmasked row.
    for (size_t j = 0; j < 3; ++j) {
        REQUIRE(logits.grad()[j] != 0.0);
        REQUIRE(logits.grad()[3 + j] == 0.0);
    }
    std::vector<uint8_t> all_masked{0, 0};
    REQUIRE_THROWS(cross_entropy(logits, targets, all_masked));
    std::vector<int> bad{2, 9};
    REQUIRE_THROWS(cross_entropy(logits, bad));
}

TEST_CASE("adam zero gradient leaves params unchanged") {
    Tensor p = Tensor::from_vector(1, 3, {1.0, -2.0, 3.0}, true);
    Adam opt({p}, AdamConfig{.lr = 0.1});
    opt.zero_grad();
    opt.step();
    REQUIRE(p.data_vec() == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adam single step matches closed form") {
    // With g = 1 everywhere, bias correction gives mhat = vhat = 1 exactly,
    // so the first update is lr / (1 + eps).
    AdamConfig cfg{.lr = 0.05, .beta1 = 0.99, .beta2 = 0.999, .eps = 1e-8};
    Tensor p = Tensor::zeros(1, 2, true);
    Adam opt({p}, cfg);
    p.grad_vec().assign(p.numel(), 1.0);
    opt.step();
    double expect = -cfg.lr / (1.0 + cfg.eps);
    REQUIRE(p.data()[0] == Catch::Approx(expect).epsilon(1e-14));
    REQUIRE(p.data()[1] == Catch::Approx(expect).epsilon(1e-14));
}

TEST_CASE("adam non-finite gradient rejected") {
    Tensor p = Tensor::zeros(1, 1, true);
    Adam opt({p}, AdamConfig{});
    p.grad_vec()[0] = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS(opt.step());
}

TEST_CASE("adam warmup scales updates linearly") {
    // Constant unit gradient keeps mhat = vhat = 1, so each step's update is
    // exactly lr * step/warmup while step <= warmup.
    AdamConfig cfg{.lr = 1.0, .beta1 = 0.99, .beta2 = 0.999, .eps = 0.0, .warmup_steps = 4};
    Tensor p = Tensor::zeros(1, 1, true);
    Adam opt({p}, cfg);
    double prev = 0.0;
    std::vector<double> deltas;
    for (int s = 1; s <= 4; ++s) {
        p.grad_vec().assign(1, 1.0);
        opt.step();
        deltas.push_back(prev - p.data()[0]);
        prev = p.data()[0];
    }
    for (int s = 0; s < 4; ++s)
        REQUIRE(deltas[static_cast<size_t>(s)] ==
                Catch::Approx(0.25 * (s + 1)).epsilon(1e-12));
}

TEST_CASE("grad_check quadratic") {
    Tensor x = Tensor::from_vector(1, 1, {3.0}, true);
    auto f = [&] { return mul(x, x); };
    std::vector<Tensor> params{x};
    auto rep = grad_check(f, params, 1e-5, 1e-6);
    REQUIRE(rep.pass);
    x.zero_grad();
    Tensor y = f();
    y.backward();
    REQUIRE(x.grad()[0] == Catch::Approx(6.0).epsilon(1e-9));
}

TEST_CASE("grad_check cross_entropy on random logits") {
    Rng rng(123);
    Tensor logits = Tensor::randn(4, 8, rng, 1.0, true);
    std::vector<int> targets{1, 7, 0, 3};
    auto f = [&] { return cross_entropy(logits, targets); };
    std::vector<Tensor> params{logits};
    auto rep = grad_check(f, params, 1e-5, 1e-4);
    INFO(rep.worst);
    REQUIRE(rep.pass);
}

TEST_CASE("grad_check detects non-deterministic function") {
    Tensor x = Tensor::from_vector(1, 1, {1.0}, true);
    int calls = 0;
    auto f = [&] {
        ++calls;
        return scale(x, 1.0 + 0.001 * calls);
    };
    std::vector<Tensor> params{x};
    REQUIRE_THROWS(grad_check(f, params));
}

TEST_CASE("per-primitive gradients match finite differences over 100 seeds") {
    // Property sweep: every primitive op, random small inputs, >=100 seeds each.
    const double tol = 1e-4;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(splitmix64(seed + 1));
        Tensor a = Tensor::randn(3, 4, rng, 1.0, true);
        Tensor b = Tensor::randn(3, 4, rng, 1.0, true);
        Tensor w = Tensor::randn(4, 2, rng, 1.0, true);
        Tensor bias = Tensor::randn(1, 4, rng, 1.0, true);
        Tensor coeff = Tensor::randn(3, 1, rng, 1.0, true);
        Tensor gamma = Tensor::randn(1, 4, rng, 0.2, true);
        Tensor beta = Tensor::randn(1, 4, rng, 0.2, true);
        // keep gamma away from zero so layer_norm output depends on x
        for (size_t i = 0; i < 4; ++i) gamma.data()[i] += (gamma.data()[i] >= 0 ? 1.0 : -1.0);

        struct Case {
            const char* name;
            std::function<Tensor()> f;
            std::vector<Tensor> params;
        };
        std::vector<int> gidx{2, 0, 1};
        std::vector<int> targets{3, 0, 1};
        std::vector<Case> cases;
        cases.push_back({"add", [&] { return weighted_sum(add(a, b), seed); }, {a, b}});
        cases.push_back({"sub", [&] { return weighted_sum(sub(a, b), seed); }, {a, b}});
        cases.push_back({"mul", [&] { return weighted_sum(mul(a, b), seed); }, {a, b}});
        cases.push_back({"scale", [&] { return weighted_sum(scale(a, -1.7), seed); }, {a}});
        cases.push_back({"matmul", [&] { return weighted_sum(matmul(a, w), seed); }, {a, w}});
        cases.push_back(
            {"transpose", [&] { return weighted_sum(transpose(a), seed); }, {a}});
        cases.push_back({"gelu", [&] { return weighted_sum(gelu(a), seed); }, {a}});
        cases.push_back(
            {"softmax", [&] { return weighted_sum(softmax_rows(a), seed); }, {a}});
        cases.push_back({"add_rowvec",
                         [&] { return weighted_sum(add_rowvec(a, bias), seed); },
                         {a, bias}});
        cases.push_back({"mul_colvec",
                         [&] { return weighted_sum(mul_colvec(a, coeff), seed); },
                         {a, coeff}});
        cases.push_back({"layer_norm",
                         [&] { return weighted_sum(layer_norm(a, gamma, beta), seed); },
                         {a, gamma, beta}});
        cases.push_back({"gather_rows",
                         [&] { return weighted_sum(gather_rows(a, gidx), seed); },
                         {a}});
        cases.push_back({"concat_cols",
                         [&] { return weighted_sum(concat_cols(a, b), seed); },
                         {a, b}});
        cases.push_back({"concat_rows",
                         [&] { return weighted_sum(concat_rows({a, b}), seed); },
                         {a, b}});
        cases.push_back(
            {"slice_rows", [&] { return weighted_sum(slice_rows(a, 1, 3), seed); }, {a}});
        cases.push_back(
            {"slice_cols", [&] { return weighted_sum(slice_cols(a, 1, 3), seed); }, {a}});
        cases.push_back({"mean_rows", [&] { return weighted_sum(mean_rows(a), seed); }, {a}});
        cases.push_back({"mean_all", [&] { return mean_all(mul(a, a)); }, {a}});
        cases.push_back(
            {"cross_entropy", [&] { return cross_entropy(a, targets); }, {a}});

        for (auto& c : cases) {
            auto rep = grad_check(c.f, c.params, 1e-5, tol);
            INFO("op=" << c.name << " seed=" << seed << " worst: " << rep.worst);
            REQUIRE(rep.pass);
        }
    }
}

TEST_CASE("shared subexpression accumulates like a duplicated subgraph") {
    Rng rng(5);
    Tensor x = Tensor::randn(2, 3, rng, 1.0, true);
    Tensor w = Tensor::randn(2, 3, rng, 1.0, true);

    // Shared: s appears twice in the product.
    Tensor s = add(x, w);
    Tensor shared_loss = sum_all(mul(s, s));
    shared_loss.backward();
    std::vector<double> shared_grad = x.grad_vec();

    // Duplicated-subgraph oracle: two independent copies of the leaves, the
    // total grad wrt x is the sum over copies.
    Tensor x1 = Tensor::from_vector(2, 3, x.data_vec(), true);
    Tensor x2 = Tensor::from_vector(2, 3, x.data_vec(), true);
    Tensor w1 = Tensor::from_vector(2, 3, w.data_vec(), true);
    Tensor w2 = Tensor::from_vector(2, 3, w.data_vec(), true);
    Tensor dup_loss = sum_all(mul(add(x1, w1), add(x2, w2)));
    dup_loss.backward();
    for (size_t i = 0; i < x.numel(); ++i) {
        double oracle = x1.grad()[i] + x2.grad()[i];
        REQUIRE(shared_grad[i] == Catch::Approx(oracle).epsilon(1e-12));
    }
}

TEST_CASE("detach cuts the tape") {
    Tensor x = Tensor::from_vector(1, 1, {2.0}, true);
    Tensor d = mul(x, x).detach();
    Tensor y = mul(d, d);
    y.backward();
    REQUIRE_FALSE(x.has_grad());
    REQUIRE(y.item() == 16.0);
}

TEST_CASE("dropout eval identity and train scaling") {
    Rng rng(9);
    Tensor x = Tensor::full(10, 10, 1.0, true);
    Tensor eval_out = dropout(x, 0.5, rng, false);
    REQUIRE(eval_out.data_vec() == x.data_vec());

    Tensor train_out = dropout(x, 0.5, rng, true);
    for (double v : train_out.data_vec()) REQUIRE((v == 0.0 || v == 2.0));
}

TEST_CASE("finite check rejects NaN propagation") {
    REQUIRE(flags().check_finite);
    Tensor x = Tensor::from_vector(1, 2, {1e308, 1e308});
    REQUIRE_THROWS(add(x, x));  // overflow to inf is caught
}

TEST_CASE("deterministic replay produces bit-identical results") {
    auto run = [] {
        Rng rng(77);
        Tensor a = Tensor::randn(4, 4, rng, 1.0, true);
        Tensor b = Tensor::randn(4, 4, rng);
        Tensor loss = mean_all(mul(matmul(a, b), matmul(a, b)));
        loss.backward();
        std::vector<double> out = a.grad_vec();
        out.push_back(loss.item());
        return out;
    };
    REQUIRE(run() == run());
}
