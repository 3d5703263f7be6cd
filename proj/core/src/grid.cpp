#include "morphkit/grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace morphkit {

WindowView window_at(const Image& img, int center_row, int center_col,
                     const WindowShape& shape) {
    if (!img.in_bounds(center_row, center_col))
        throw std::domain_error("window_at: center outside image");

    WindowView view;
    view.center_row = center_row;
    view.center_col = center_col;
    view.taps.reserve(static_cast<std::size_t>(shape.taps()));

    const int ar = shape.anchor_row();
    const int ac = shape.anchor_col();
    for (int i = 0; i < shape.height; ++i) {
        for (int j = 0; j < shape.width; ++j) {
            Tap t;
            t.dr = i - ar;
            t.dc = j - ac;
            const int r = center_row + t.dr;
            const int c = center_col + t.dc;
            if (img.in_bounds(r, c)) {
                t.in_bounds = true;
                t.value = img.at(r, c);
            }
            view.taps.push_back(t);
        }
    }
    return view;
}

double mse(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::domain_error("mse: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.pix.size(); ++i) {
        const double d = a.pix[i] - b.pix[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.pix.size());
}

double taxicab(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::domain_error("taxicab: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
    return acc;
}

double taxicab(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::domain_error("taxicab: shape mismatch");
    return taxicab(std::span<const double>(a.pix), std::span<const double>(b.pix));
}

double stable_lse(std::span<const double> values) {
    if (values.empty()) throw std::domain_error("stable_lse: empty list");
    const double m = *std::max_element(values.begin(), values.end());
    double acc = 0.0;
    for (double v : values) acc += std::exp(v - m);
    return m + std::log(acc);
}

}  // namespace morphkit
