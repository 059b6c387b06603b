#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "fastfit/autodiff.hpp"

using namespace fastfit;

namespace {

Tensor<double> random_tensor(Rng& rng, Shape shape) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values())
        v = rng.uniform(-1, 1);
    return t;
}

using Builder = std::function<NodeId(Tape<double>&, std::span<const NodeId>)>;

// Records leaves and the graph, reduces to mse against a random target, and
// compares every leaf gradient with central differences driven through replay().
double max_fd_error(const std::vector<Tensor<double>>& inputs, const Builder& build, std::uint64_t seed) {
    Tape<double> tape;
    std::vector<NodeId> leaves;
    for (const auto& in : inputs)
        leaves.push_back(tape.leaf(in));
    const NodeId out = build(tape, leaves);
    Rng rng(seed);
    const NodeId target = tape.leaf(random_tensor(rng, tape.value(out).shape()), false);
    const NodeId loss = tape.mse(out, target);
    const auto grads = tape.backward(loss);

    double worst = 0;
    const double h = 1e-6;
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        const Tensor<double>* g = grads.find(leaves[i]);
        REQUIRE(g != nullptr);
        Tensor<double> base = inputs[i];
        for (std::size_t c = 0; c < base.size(); ++c) {
            Tensor<double> p = base;
            p[c] += h;
            tape.set_leaf_value(leaves[i], p);
            tape.replay();
            const double up = tape.value(loss)[0];
            p[c] -= 2 * h;
            tape.set_leaf_value(leaves[i], p);
            tape.replay();
            const double down = tape.value(loss)[0];
            worst = std::max(worst, relative_error((*g)[c], (up - down) / (2 * h)));
        }
        tape.set_leaf_value(leaves[i], base);
        tape.replay();
    }
    return worst;
}

} // namespace

TEST_CASE("mse gradient has the closed form 2(a-b)/n") {
    Rng rng(1);
    auto a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4});
    Tape<double> tape;
    const NodeId na = tape.leaf(a), nb = tape.leaf(b);
    const auto grads = tape.backward(tape.mse(na, nb));
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(grads.at(na)[i] == doctest::Approx(2 * (a[i] - b[i]) / 12.0).epsilon(1e-14));
        CHECK(grads.at(nb)[i] == doctest::Approx(-2 * (a[i] - b[i]) / 12.0).epsilon(1e-14));
    }
}

TEST_CASE("sum of a product gives column sums") {
    Rng rng(2);
    auto x = random_tensor(rng, {5, 3}), w = random_tensor(rng, {3, 2});
    Tape<double> tape;
    const NodeId nx = tape.leaf(x), nw = tape.leaf(w);
    const auto grads = tape.backward(tape.sum(tape.matmul(nx, nw)));
    for (std::size_t k = 0; k < 3; ++k) {
        double colsum = 0;
        for (std::size_t i = 0; i < 5; ++i)
            colsum += x(i, k);
        for (std::size_t j = 0; j < 2; ++j)
            CHECK(grads.at(nw)(k, j) == doctest::Approx(colsum).epsilon(1e-14));
    }
}

TEST_CASE("silu derivative") {
    Tensor<double> x({3}, {-2.0, 0.0, 1.5});
    Tape<double> tape;
    const NodeId nx = tape.leaf(x);
    const auto grads = tape.backward(tape.sum(tape.silu(nx)));
    for (std::size_t i = 0; i < 3; ++i) {
        const double s = 1 / (1 + std::exp(-x[i]));
        CHECK(grads.at(nx)[i] == doctest::Approx(s * (1 + x[i] * (1 - s))).epsilon(1e-13));
    }
}

TEST_CASE("softmax row sums carry no gradient") {
    Rng rng(3);
    Tape<double> tape;
    const NodeId nx = tape.leaf(random_tensor(rng, {2, 5}));
    const auto grads = tape.backward(tape.sum(tape.softmax_rows(nx)));
    CHECK(max_abs(grads.at(nx)) <= 1e-15);
}

TEST_CASE("primitives match central differences") {
    Rng rng(4);
    auto a = random_tensor(rng, {4, 6}), b = random_tensor(rng, {6, 3}), c = random_tensor(rng, {4, 6});
    auto row = random_tensor(rng, {6}), s = random_tensor(rng, {6}), sh = random_tensor(rng, {6});

    SUBCASE("matmul") {
        CHECK(max_fd_error({a, b}, [](Tape<double>& t, auto l) { return t.matmul(l[0], l[1]); }, 10) <= 1e-6);
    }
    SUBCASE("add and add_row") {
        CHECK(max_fd_error({a, c, row}, [](Tape<double>& t, auto l) { return t.add_row(t.add(l[0], l[1]), l[2]); },
                           11) <= 1e-6);
    }
    SUBCASE("scale_shift") {
        CHECK(max_fd_error({a, s, sh}, [](Tape<double>& t, auto l) { return t.scale_shift(l[0], l[1], l[2]); }, 12) <=
              1e-6);
    }
    SUBCASE("softmax") {
        CHECK(max_fd_error({a}, [](Tape<double>& t, auto l) { return t.softmax_rows(l[0]); }, 13) <= 1e-6);
    }
    SUBCASE("layer_norm") {
        CHECK(max_fd_error({a, s, sh}, [](Tape<double>& t, auto l) { return t.layer_norm(l[0], l[1], l[2]); }, 14) <=
              1e-6);
    }
    SUBCASE("silu and scale") {
        CHECK(max_fd_error({a}, [](Tape<double>& t, auto l) { return t.scale(t.silu(l[0]), -1.7); }, 15) <= 1e-6);
    }
    SUBCASE("concat and slice") {
        CHECK(max_fd_error({a, c},
                           [](Tape<double>& t, auto l) {
                               const NodeId parts[] = {l[0], l[1]};
                               return t.slice_rows(t.concat_rows(parts), 2, 7);
                           },
                           16) <= 1e-6);
    }
    SUBCASE("attention with a block layout") {
        auto q = random_tensor(rng, {5, 4}), k = random_tensor(rng, {5, 4}), v = random_tensor(rng, {5, 4});
        AttentionLayout layout{{0, 3, 0, 5}, {3, 5, 3, 5}};
        CHECK(max_fd_error({q, k, v},
                           [&](Tape<double>& t, auto l) { return t.attention(l[0], l[1], l[2], layout, 2); }, 17) <=
              1e-6);
    }
}

TEST_CASE("replay recomputes dependents and backward leaves the tape unchanged") {
    Rng rng(5);
    auto x = random_tensor(rng, {3, 3}), w = random_tensor(rng, {3, 3});
    Tape<double> tape;
    const NodeId nx = tape.leaf(x), nw = tape.leaf(w);
    const NodeId y = tape.silu(tape.matmul(nx, nw));
    const NodeId loss = tape.sum(y);
    const auto before = tape.value(y);
    (void)tape.backward(loss);
    CHECK(tape.value(y) == before);

    auto x2 = random_tensor(rng, {3, 3});
    tape.set_leaf_value(nx, x2);
    tape.replay();
    CHECK(tape.value(y) == silu(matmul(x2, w)));
    CHECK(tape.value(loss)[0] == sum(silu(matmul(x2, w))));
}

TEST_CASE("unused and frozen leaves") {
    Rng rng(6);
    Tape<double> tape;
    const NodeId used = tape.leaf(random_tensor(rng, {2, 2}));
    const NodeId unused = tape.leaf(random_tensor(rng, {2, 2}));
    const NodeId frozen = tape.leaf(random_tensor(rng, {2, 2}), false);
    const auto grads = tape.backward(tape.mse(used, frozen));
    CHECK(grads.find(used) != nullptr);
    CHECK(grads.find(unused) == nullptr);
    CHECK(grads.find(frozen) == nullptr);
}

TEST_CASE("malformed records are rejected") {
    Tape<double> tape;
    const NodeId a = tape.leaf(Tensor<double>({2, 3}));
    const NodeId b = tape.leaf(Tensor<double>({2, 3}));
    CHECK_THROWS_AS(tape.matmul(a, b), DimensionError);
    CHECK_THROWS(tape.record(Primitive::Add, {a}));
    CHECK_THROWS(tape.backward(a));
}

TEST_CASE("finite_diff_check flags a wrong gradient") {
    Tensor<double> w({4}, {0.5, -1.0, 2.0, 0.25});
    Tensor<double> right({4}), wrong({4});
    for (std::size_t i = 0; i < 4; ++i) {
        right[i] = 2 * w[i];
        wrong[i] = 2 * w[i] + (i == 2 ? 0.1 : 0.0);
    }
    auto f = [&]() {
        double s = 0;
        for (double v : w.values())
            s += v * v;
        return s;
    };
    Rng rng(7);
    std::vector<CheckedParam> good{{"w", &w, &right}}, bad{{"w", &w, &wrong}};
    const auto ok = finite_diff_check(f, good, 1e-5, rng);
    CHECK(ok.max_rel_error() <= 1e-8);
    CHECK(ok.params[0].coords_checked == 4);
    CHECK(finite_diff_check(f, bad, 1e-5, rng).max_rel_error() > 1e-3);
    CHECK(w == Tensor<double>({4}, {0.5, -1.0, 2.0, 0.25}));
}
