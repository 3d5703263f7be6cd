#ifndef MORPHKIT_GRID_HPP
#define MORPHKIT_GRID_HPP

#include <cstddef>
#include <span>
#include <vector>

namespace morphkit {

/// Dense 2-D grid of real pixel values, row-major. The universal carrier
/// for inputs, feature maps, bias grids, and targets.
struct Image {
    int rows = 0;
    int cols = 0;
    std::vector<double> pix;

    Image() = default;
    Image(int r, int c, double fill = 0.0)
        : rows(r), cols(c), pix(static_cast<std::size_t>(r) * c, fill) {}

    double& at(int r, int c) { return pix[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return pix[static_cast<std::size_t>(r) * cols + c]; }

    std::size_t size() const { return pix.size(); }
    bool same_shape(const Image& o) const { return rows == o.rows && cols == o.cols; }
    bool in_bounds(int r, int c) const { return r >= 0 && r < rows && c >= 0 && c < cols; }
};

/// Window geometry of a structuring element: a×b taps anchored at the
/// geometric center (floor(dim/2) for even dims).
struct WindowShape {
    int height = 0;
    int width = 0;

    int taps() const { return height * width; }
    int anchor_row() const { return height / 2; }
    int anchor_col() const { return width / 2; }
};

struct Tap {
    int dr = 0;        // offset from center
    int dc = 0;
    double value = 0;  // pixel value, meaningful only when in_bounds
    bool in_bounds = false;
};

/// The masked window around one pixel: exactly shape.taps() entries,
/// out-of-bounds taps flagged and carrying no value.
struct WindowView {
    int center_row = 0;
    int center_col = 0;
    std::vector<Tap> taps;

    int in_bounds_count() const {
        int n = 0;
        for (const Tap& t : taps)
            if (t.in_bounds) ++n;
        return n;
    }
};

/// Gathers the window around `center` (stride 1, size-preserving).
/// Throws std::domain_error if the center lies outside the image.
WindowView window_at(const Image& img, int center_row, int center_col,
                     const WindowShape& shape);

/// Mean squared difference. Throws std::domain_error on shape mismatch.
double mse(const Image& a, const Image& b);

/// Sum of absolute elementwise differences (L1 over the grid).
double taxicab(const Image& a, const Image& b);
double taxicab(std::span<const double> a, std::span<const double> b);

/// ln Σ e^{v_i}, max-shifted so no intermediate overflows.
/// Throws std::domain_error on an empty list.
double stable_lse(std::span<const double> values);

}  // namespace morphkit

#endif
