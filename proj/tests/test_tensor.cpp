#include <catch_amalgamated.hpp>

#include "a2fpn/tensor.hpp"
#include "test_util.hpp"

using namespace a2fpn;
using Catch::Approx;

TEST_CASE("matmul identity and zero cases") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    CHECK(testutil::max_abs_diff(matmul(eye, b), {5, 6, 7, 8}) == 0.0);

    Tensor zeros = Tensor::zeros({3, 2});
    Tensor any = Tensor::from({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor out = matmul(zeros, any);
    CHECK(out.shape() == Shape{3, 4});
    for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul matches the triple-loop oracle") {
    // frozen 2x2 case
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    CHECK(testutil::max_abs_diff(matmul(a, b), {19, 22, 43, 50}) == 0.0);

    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = static_cast<std::size_t>(rng.uniform_int(1, 9));
        const std::size_t k = static_cast<std::size_t>(rng.uniform_int(1, 9));
        const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 9));
        Tensor x = Tensor::uniform({m, k}, rng, -2, 2);
        Tensor y = Tensor::uniform({k, n}, rng, -2, 2);
        const auto expect = testutil::matmul_oracle(
            {x.data().begin(), x.data().end()}, {y.data().begin(), y.data().end()}, m, k, n);
        CHECK(testutil::max_abs_diff(matmul(x, y), expect) < 1e-12);
    }
}

TEST_CASE("matmul rejects mismatched inner extents naming both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
        CHECK(msg.find("4x2") != std::string::npos);
    }
}

TEST_CASE("softmax_rows basics") {
    SECTION("single-column input gives all ones") {
        Tensor x = Tensor::from({3, 1}, {5.0, -2.0, 0.25});
        for (double v : softmax_rows(x).data()) CHECK(v == Approx(1.0).margin(1e-15));
    }
    SECTION("constant rows give 1/M") {
        Tensor x = Tensor::full({2, 5}, 3.7);
        for (double v : softmax_rows(x).data()) CHECK(v == Approx(0.2).margin(1e-15));
    }
    SECTION("[0, ln 2] maps to [1/3, 2/3]") {
        Tensor x = Tensor::from({1, 2}, {0.0, std::log(2.0)});
        Tensor y = softmax_rows(x);
        CHECK(y.data()[0] == Approx(1.0 / 3.0).margin(1e-14));
        CHECK(y.data()[1] == Approx(2.0 / 3.0).margin(1e-14));
    }
}

TEST_CASE("softmax rows sum to one with entries in [0,1]") {
    Rng rng(42);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 8));
        const std::size_t m = static_cast<std::size_t>(rng.uniform_int(1, 8));
        Tensor y = softmax_rows(Tensor::uniform({n, m}, rng, -50, 50));
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                const double v = y.data()[i * m + j];
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
        CHECK(all_finite(y));
    }
}

TEST_CASE("l2_normalize_rows") {
    SECTION("3-4-5 triple") {
        Tensor x = Tensor::from({1, 2}, {3.0, 4.0});
        Tensor y = l2_normalize_rows(x, 1e-300);
        CHECK(y.data()[0] == Approx(0.6).margin(1e-12));
        CHECK(y.data()[1] == Approx(0.8).margin(1e-12));
    }
    SECTION("zero rows map to zero rows") {
        Tensor y = l2_normalize_rows(Tensor::zeros({2, 3}), 1e-12);
        for (double v : y.data()) CHECK(v == 0.0);
    }
    SECTION("output norm equals n/(n+eps) of the input norm") {
        Rng rng(7);
        const double eps = 1e-3;
        for (int trial = 0; trial < 20; ++trial) {
            Tensor x = Tensor::uniform({1, 6}, rng, -3, 3);
            double n2 = 0.0;
            for (double v : x.data()) n2 += v * v;
            const double n = std::sqrt(n2);
            Tensor y = l2_normalize_rows(x, eps);
            double yn2 = 0.0;
            for (double v : y.data()) yn2 += v * v;
            CHECK(std::sqrt(yn2) == Approx(n / (n + eps)).margin(1e-12));
            CHECK(std::sqrt(yn2) <= 1.0);
        }
    }
}

TEST_CASE("upsample_nearest2x") {
    SECTION("constant 1x1 becomes constant 2x2") {
        Tensor x = Tensor::full({1, 1, 1, 1}, 4.25);
        Tensor y = upsample_nearest2x(x);
        CHECK(y.shape() == Shape{1, 1, 2, 2});
        for (double v : y.data()) CHECK(v == 4.25);
    }
    SECTION("block replication") {
        Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
        const std::vector<double> expect = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
        CHECK(testutil::max_abs_diff(upsample_nearest2x(x), expect) == 0.0);
    }
}

TEST_CASE("avgpool2x2 mirrors the upsample block structure") {
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = avgpool2x2(x);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.data()[0] == Approx(2.5));
    CHECK_THROWS_AS(avgpool2x2(Tensor::zeros({1, 1, 3, 3})), ConfigError);

    // pool of a nearest-upsampled map is the identity
    Rng rng(11);
    Tensor m = Tensor::uniform({2, 3, 4, 4}, rng, -1, 1);
    CHECK(testutil::max_abs_diff(avgpool2x2(upsample_nearest2x(m)), m) < 1e-15);
}

TEST_CASE("elementwise and structural ops") {
    SECTION("relu sign case") {
        Tensor x = Tensor::from({3}, {-1, 0, 2});
        CHECK(testutil::max_abs_diff(relu(x), {0, 0, 2}) == 0.0);
    }
    SECTION("add requires equal shapes") {
        CHECK_THROWS_AS(add(Tensor::zeros({2, 2}), Tensor::zeros({2, 3})), ShapeError);
    }
    SECTION("concat_channels preserves ordering") {
        Tensor a = Tensor::from({1, 2, 1, 2}, {1, 2, 3, 4});
        Tensor b = Tensor::from({1, 3, 1, 2}, {5, 6, 7, 8, 9, 10});
        Tensor c = concat_channels({a, b});
        CHECK(c.shape() == Shape{1, 5, 1, 2});
        CHECK(testutil::max_abs_diff(c, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}) == 0.0);
        CHECK_THROWS_AS(concat_channels({a, Tensor::zeros({1, 1, 2, 2})}), ShapeError);
    }
    SECTION("reshape round trip is the identity on data") {
        Rng rng(5);
        Tensor x = Tensor::uniform({2, 3, 2, 2}, rng, -1, 1);
        Tensor y = reshape(reshape(x, {6, 4}), {2, 3, 2, 2});
        CHECK(testutil::max_abs_diff(x, y) == 0.0);
        CHECK_THROWS_AS(reshape(x, Shape{5, 5}), ShapeError);
    }
    SECTION("permute4 round trip") {
        Rng rng(6);
        Tensor x = Tensor::uniform({2, 3, 4, 5}, rng, -1, 1);
        Tensor y = permute4(permute4(x, {0, 2, 3, 1}), {0, 3, 1, 2});
        CHECK(x.shape() == y.shape());
        CHECK(testutil::max_abs_diff(x, y) == 0.0);
    }
    SECTION("select_batch / stack_batch round trip") {
        Rng rng(9);
        Tensor x = Tensor::uniform({3, 2, 2, 2}, rng, -1, 1);
        Tensor y = stack_batch({select_batch(x, 0), select_batch(x, 1), select_batch(x, 2)});
        CHECK(testutil::max_abs_diff(x, y) == 0.0);
    }
}

TEST_CASE("row and column helpers") {
    Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    SECTION("column_sums") {
        CHECK(testutil::max_abs_diff(column_sums(m), {5, 7, 9}) == 0.0);
    }
    SECTION("add_rowvec broadcasts") {
        Tensor v = Tensor::from({1, 3}, {10, 20, 30});
        CHECK(testutil::max_abs_diff(add_rowvec(m, v), {11, 22, 33, 14, 25, 36}) == 0.0);
    }
    SECTION("div_colvec divides per row") {
        Tensor c = Tensor::from({2, 1}, {2, 4});
        CHECK(testutil::max_abs_diff(div_colvec(m, c), {0.5, 1.0, 1.5, 1.0, 1.25, 1.5}) == 0.0);
    }
}

TEST_CASE("allocation meter tracks live tensor elements") {
    AllocationMeter::Scope scope;
    {
        Tensor a = Tensor::zeros({100});
        Tensor b = Tensor::zeros({50});
        CHECK(scope.peak_elements() >= 150);
    }
    const std::int64_t after = scope.peak_elements();
    Tensor c = Tensor::zeros({10});
    CHECK(scope.peak_elements() == after);  // peak does not decrease
}
