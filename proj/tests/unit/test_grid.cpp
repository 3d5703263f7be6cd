#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "morphkit/grid.hpp"
#include "morphkit/rng.hpp"

using namespace morphkit;

TEST_CASE("window_at covers the identity case") {
    Image img(3, 3);
    WindowView v = window_at(img, 1, 1, {3, 3});
    CHECK(v.taps.size() == 9);
    CHECK(v.in_bounds_count() == 9);
    for (const Tap& t : v.taps) CHECK(t.value == 0.0);
}

TEST_CASE("window_at at a corner flags out-of-bounds taps") {
    Image img(3, 3);
    WindowView v = window_at(img, 0, 0, {3, 3});
    CHECK(v.taps.size() == 9);
    CHECK(v.in_bounds_count() == 4);
}

TEST_CASE("window_at full-coverage 1x5") {
    Image img(1, 5);
    for (int c = 0; c < 5; ++c) img.at(0, c) = c;
    WindowView v = window_at(img, 0, 2, {1, 5});
    CHECK(v.in_bounds_count() == 5);
    for (int i = 0; i < 5; ++i) {
        CHECK(v.taps[i].in_bounds);
        CHECK(v.taps[i].value == doctest::Approx(i));
    }
}

TEST_CASE("window_at rejects centers outside the image") {
    Image img(3, 3);
    CHECK_THROWS_AS(window_at(img, 3, 0, {3, 3}), std::domain_error);
    CHECK_THROWS_AS(window_at(img, 0, -1, {3, 3}), std::domain_error);
}

TEST_CASE("window tap count equals window/image intersection area") {
    Image img(5, 7);
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int r = static_cast<int>(rng.next_below(5));
        const int c = static_cast<int>(rng.next_below(7));
        WindowShape shape{3, 5};
        WindowView v = window_at(img, r, c, shape);
        int expected = 0;
        for (int i = -1; i <= 1; ++i)
            for (int j = -2; j <= 2; ++j)
                if (img.in_bounds(r + i, c + j)) ++expected;
        CHECK(v.in_bounds_count() == expected);
        CHECK(static_cast<int>(v.taps.size()) == shape.taps());
    }
}

TEST_CASE("mse basics") {
    Image a(1, 1), b(1, 1);
    a.at(0, 0) = 1;
    b.at(0, 0) = 3;
    CHECK(mse(a, a) == 0.0);
    CHECK(mse(a, b) == doctest::Approx(4.0));

    Image z(2, 2, 0.0), o(2, 2, 1.0);
    CHECK(mse(z, o) == doctest::Approx(1.0));

    Image wrong(1, 2);
    CHECK_THROWS_AS(mse(a, wrong), std::domain_error);
}

TEST_CASE("taxicab basics and symmetry") {
    Image a(2, 2), b(2, 2);
    a.pix = {1, 2, 3, 4};
    b.pix = {0, 1, 1, 0};
    CHECK(taxicab(a, a) == 0.0);
    CHECK(taxicab(a, b) == doctest::Approx(8.0));
    CHECK(taxicab(a, b) == taxicab(b, a));

    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Image x(3, 3), y(3, 3);
        for (auto& v : x.pix) v = rng.uniform(-5, 5);
        for (auto& v : y.pix) v = rng.uniform(-5, 5);
        CHECK(taxicab(x, y) == doctest::Approx(taxicab(y, x)));
        CHECK((taxicab(x, y) == 0.0) == (x.pix == y.pix));
    }
}

TEST_CASE("stable_lse frozen values") {
    const double c = -3.75;
    CHECK(stable_lse(std::vector<double>{c}) == doctest::Approx(c).epsilon(1e-12));
    // ln(1 + e + e^2), high-precision evaluation
    CHECK(stable_lse(std::vector<double>{0, 1, 2}) ==
          doctest::Approx(2.4076059644443803).epsilon(1e-9));
    // analytic shift identity, no overflow
    CHECK(stable_lse(std::vector<double>{1000, 1000}) ==
          doctest::Approx(1000.0 + 0.6931471805599453).epsilon(1e-12));
    CHECK_THROWS_AS(stable_lse(std::span<const double>{}), std::domain_error);
}

TEST_CASE("stable_lse is sandwiched by max and max + ln(n)") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.next_below(12);
        std::vector<double> v(n);
        double m = -1e300;
        for (auto& x : v) {
            x = rng.uniform(-50, 50);
            m = std::max(m, x);
        }
        const double l = stable_lse(v);
        CHECK(l >= m);
        CHECK(l <= m + std::log(static_cast<double>(n)) + 1e-12);
    }
}
