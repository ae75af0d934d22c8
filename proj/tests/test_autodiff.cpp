#include <catch_amalgamated.hpp>

#include "a2fpn/gradcheck.hpp"
#include "a2fpn/optim.hpp"
#include "a2fpn/tensor.hpp"
#include "test_util.hpp"

using namespace a2fpn;
using Catch::Approx;

TEST_CASE("backward of sum gives ones, disconnected parameters stay zero") {
    Tensor x = Tensor::uniform({2, 3}, *[] { static Rng r(1); return &r; }(), -1, 1, true);
    Tensor unused = Tensor::zeros({4}, true);
    Tape tape;
    {
        Tape::Scope scope(tape);
        Tensor loss = sum_all(x);
        tape.backward(loss);
    }
    for (double g : x.grad()) CHECK(g == 1.0);
    for (double g : unused.grad()) CHECK(g == 0.0);
}

TEST_CASE("tape misuse is rejected") {
    Tensor x = Tensor::full({2}, 1.5, true);
    Tape tape;
    Tensor loss;
    {
        Tape::Scope scope(tape);
        loss = sum_all(x);
    }
    SECTION("non-scalar loss") {
        Tape t2;
        Tensor vec;
        {
            Tape::Scope scope(t2);
            vec = scale(x, 2.0);
        }
        CHECK_THROWS_AS(t2.backward(vec), UsageError);
    }
    SECTION("backward twice without reset") {
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), UsageError);
    }
    SECTION("recording onto a consumed tape") {
        tape.backward(loss);
        Tape::Scope scope(tape);
        CHECK_THROWS_AS(sum_all(x), UsageError);
    }
    SECTION("reset makes the tape reusable") {
        tape.backward(loss);
        tape.reset();
        x.zero_grad();
        {
            Tape::Scope scope(tape);
            Tensor loss2 = sum_all(scale(x, 3.0));
            tape.backward(loss2);
        }
        for (double g : x.grad()) CHECK(g == 3.0);
    }
    SECTION("loss from another tape") {
        Tape other;
        CHECK_THROWS_AS(other.backward(loss), UsageError);
    }
}

TEST_CASE("gradients accumulate until zero_grad") {
    Tensor x = Tensor::full({3}, 2.0, true);
    for (int round = 0; round < 2; ++round) {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(sum_all(x));
    }
    for (double g : x.grad()) CHECK(g == 2.0);
    x.zero_grad();
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("finite_difference_check reference cases") {
    SECTION("sum of squares at [1,2]") {
        Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
        auto loss = [&] { return sum_all(mul(x, x)); };
        CHECK(finite_difference_check(loss, x, 1e-5) < 1e-8);
        // analytic gradient is [2, 4]
        x.zero_grad();
        Tape tape;
        {
            Tape::Scope scope(tape);
            tape.backward(loss());
        }
        CHECK(x.grad()[0] == Approx(2.0).margin(1e-12));
        CHECK(x.grad()[1] == Approx(4.0).margin(1e-12));
    }
    SECTION("linear function is exact to machine precision") {
        Tensor x = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
        auto loss = [&] { return sum_all(scale(x, 3.0)); };
        CHECK(finite_difference_check(loss, x, 1e-5) < 1e-9);
    }
}

// Every differentiable op, checked against central differences at 5 random
// points (seed 42), as weighted sums so gradients are non-trivial.
TEST_CASE("finite differences across the op set") {
    struct OpCase {
        const char* name;
        Shape in_shape;
        std::function<Tensor(const Tensor&, Rng&)> apply;
        bool avoid_zero = false;  // keep inputs away from relu-style kinks
    };
    const std::vector<OpCase> cases = {
        {"matmul_left", {3, 4}, [](const Tensor& x, Rng& r) {
             return matmul(x, Tensor::uniform({4, 2}, r, -1, 1));
         }, false},
        {"matmul_right", {4, 3}, [](const Tensor& x, Rng& r) {
             return matmul(Tensor::uniform({2, 4}, r, -1, 1), x);
         }, false},
        {"transpose", {3, 5}, [](const Tensor& x, Rng&) { return transpose(x); }, false},
        {"add", {2, 3}, [](const Tensor& x, Rng& r) {
             return add(x, Tensor::uniform({2, 3}, r, -1, 1));
         }, false},
        {"mul", {2, 3}, [](const Tensor& x, Rng& r) {
             return mul(x, Tensor::uniform({2, 3}, r, -1, 1));
         }, false},
        {"scale", {2, 3}, [](const Tensor& x, Rng&) { return scale(x, -1.7); }, false},
        {"add_scalar", {2, 3}, [](const Tensor& x, Rng&) { return add_scalar(x, 0.3); }, false},
        {"relu", {3, 3}, [](const Tensor& x, Rng&) { return relu(x); }, true},
        {"reshape", {2, 6}, [](const Tensor& x, Rng&) { return reshape(x, {3, 4}); }, false},
        {"permute4", {2, 3, 2, 2}, [](const Tensor& x, Rng&) {
             return reshape(permute4(x, {0, 2, 3, 1}), {8, 3});
         }, false},
        {"concat_channels", {1, 2, 2, 2}, [](const Tensor& x, Rng& r) {
             return reshape(concat_channels({x, Tensor::uniform({1, 3, 2, 2}, r, -1, 1)}),
                            {5, 4});
         }, false},
        {"select_batch", {3, 2, 2, 2}, [](const Tensor& x, Rng&) {
             return reshape(select_batch(x, 1), {2, 4});
         }, false},
        {"stack_batch", {1, 2, 2, 2}, [](const Tensor& x, Rng&) {
             return reshape(stack_batch({x, x}), {4, 4});
         }, false},
        {"column_sums", {4, 3}, [](const Tensor& x, Rng&) { return column_sums(x); }, false},
        {"add_rowvec_left", {4, 3}, [](const Tensor& x, Rng& r) {
             return add_rowvec(x, Tensor::uniform({1, 3}, r, -1, 1));
         }, false},
        {"add_rowvec_right", {1, 3}, [](const Tensor& x, Rng& r) {
             return add_rowvec(Tensor::uniform({4, 3}, r, -1, 1), x);
         }, false},
        {"div_colvec_left", {4, 3}, [](const Tensor& x, Rng& r) {
             return div_colvec(x, Tensor::uniform({4, 1}, r, 1.0, 2.0));
         }, false},
        {"div_colvec_right", {4, 1}, [](const Tensor& x, Rng& r) {
             Tensor m = Tensor::uniform({4, 3}, r, -1, 1);
             return div_colvec(m, add_scalar(mul(x, x), 0.5));
         }, false},
        {"softmax_rows", {3, 4}, [](const Tensor& x, Rng&) { return softmax_rows(x); }, false},
        {"l2_normalize_rows", {3, 4}, [](const Tensor& x, Rng&) {
             return l2_normalize_rows(x, 1e-12);
         }, true},
        {"upsample_nearest2x", {1, 2, 2, 2}, [](const Tensor& x, Rng&) {
             return reshape(upsample_nearest2x(x), {8, 4});
         }, false},
        {"avgpool2x2", {1, 2, 4, 4}, [](const Tensor& x, Rng&) {
             return reshape(avgpool2x2(x), {4, 2});
         }, false},
        {"sum_all", {3, 3}, [](const Tensor& x, Rng&) {
             return reshape(sum_all(x), {1, 1});
         }, false},
    };

    for (const OpCase& c : cases) {
        INFO(c.name);
        double worst = 0.0;
        for (std::uint64_t point = 0; point < 5; ++point) {
            Rng rng(42 + point);
            Tensor x = Tensor::uniform(c.in_shape, rng, -1, 1, true);
            if (c.avoid_zero) {
                for (auto& v : x.mutable_data()) v += (v >= 0 ? 0.2 : -0.2);
            }
            Tensor weights;
            auto loss = [&]() -> Tensor {
                Rng op_rng(1000 + point);  // identical aux inputs on every call
                Tensor y = c.apply(x, op_rng);
                if (!weights.defined())
                    weights = Tensor::uniform(y.shape(), op_rng, -1, 1);
                return sum_all(mul(y, weights));
            };
            worst = std::max(worst, finite_difference_check(loss, x, 1e-5, 20, 42 + point));
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("upsample gradient sums the replicated block") {
    Tensor x = Tensor::uniform({1, 1, 2, 2}, *[] { static Rng r(4); return &r; }(), -1, 1, true);
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(sum_all(reshape(upsample_nearest2x(x), {4, 4})));
    }
    for (double g : x.grad()) CHECK(g == Approx(4.0).margin(1e-14));
}

TEST_CASE("adam_step") {
    SECTION("zero gradient is the identity for all steps") {
        std::vector<double> param = {1.0, -2.0, 0.5};
        std::vector<double> grad(3, 0.0);
        AdamState state(3);
        for (int step = 1; step <= 5; ++step) {
            adam_step(param, grad, state, 0.1);
            CHECK(state.step == step);
        }
        CHECK(param[0] == 1.0);
        CHECK(param[1] == -2.0);
        CHECK(param[2] == 0.5);
    }
    SECTION("first step moves by ~lr against the gradient sign") {
        std::vector<double> param = {1.0, 1.0};
        std::vector<double> grad = {0.37, -2.1};
        AdamState state(2);
        const double lr = 3e-4;
        adam_step(param, grad, state, lr);
        CHECK(param[0] == Approx(1.0 - lr).epsilon(1e-4));
        CHECK(param[1] == Approx(1.0 + lr).epsilon(1e-4));
    }
    SECTION("three-step scalar trajectory matches the closed-form recurrence") {
        const double lr = 0.01, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
        const std::vector<double> grads = {0.3, -0.2, 0.5};
        // independent scalar recurrence
        double expect = 1.0, m = 0.0, v = 0.0;
        for (std::size_t t = 1; t <= grads.size(); ++t) {
            const double g = grads[t - 1];
            m = beta1 * m + (1 - beta1) * g;
            v = beta2 * v + (1 - beta2) * g * g;
            const double mhat = m / (1 - std::pow(beta1, static_cast<double>(t)));
            const double vhat = v / (1 - std::pow(beta2, static_cast<double>(t)));
            expect -= lr * mhat / (std::sqrt(vhat) + eps);
        }
        std::vector<double> param = {1.0};
        AdamState state(1);
        for (double g : grads) {
            std::vector<double> grad = {g};
            adam_step(param, grad, state, lr);
        }
        CHECK(param[0] == Approx(expect).margin(1e-15));
    }
    SECTION("shape disagreement is an error") {
        std::vector<double> param = {1.0};
        std::vector<double> grad = {1.0, 2.0};
        AdamState state(1);
        CHECK_THROWS_AS(adam_step(param, grad, state, 0.1), ShapeError);
    }
}
