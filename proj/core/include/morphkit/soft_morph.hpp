#ifndef MORPHKIT_SOFT_MORPH_HPP
#define MORPHKIT_SOFT_MORPH_HPP

#include <string>
#include <vector>

#include "morphkit/grid.hpp"

namespace morphkit {

enum class MorphMode { Dilate, Erode };

/// Product form pairs W_i with X_i multiplicatively (binary morphology);
/// Additive form pairs them additively (grayscale morphology).
enum class SeForm { Product, Additive };

/// Flat SEs are intended binary {0,1}; NonFlat SEs are free reals.
enum class SeKind { Flat, NonFlat };

enum class SmoothSignKind { SoftSign, Tanh };

/// Additive erosion comes in two variants: Corrected smooth-approximates
/// min_i(X_i - W_i), the classical grayscale erosion; VerbatimEq14 keeps
/// the swapped-operand formula -ln Σ e^{-(W_i - X_i)}.
enum class ErodeConvention { Corrected, VerbatimEq14 };

struct StructuringElement {
    WindowShape shape;
    std::vector<double> weights;  // row-major, shape.taps() entries
    SeForm form = SeForm::Product;
    SeKind kind = SeKind::Flat;

    double& at(int r, int c) { return weights[static_cast<std::size_t>(r) * shape.width + c]; }
    double at(int r, int c) const { return weights[static_cast<std::size_t>(r) * shape.width + c]; }
};

/// Per-tap partials of one kernel output, in-bounds taps only, in tap order.
struct TapGradients {
    std::vector<double> dW;
    std::vector<double> dX;
};

/// One smooth dilation/erosion output for a single window. Sums run over
/// in-bounds taps only. Throws std::domain_error if no tap is in bounds.
double soft_morph(const WindowView& win, const StructuringElement& se, MorphMode mode,
                  ErodeConvention conv = ErodeConvention::Corrected);

/// Closed-form partials of soft_morph with respect to each in-bounds
/// W_i and X_i (softmax-weighted per the respective form).
TapGradients soft_morph_grad(const WindowView& win, const StructuringElement& se,
                             MorphMode mode,
                             ErodeConvention conv = ErodeConvention::Corrected);

/// Classical hard morphology, used to synthesize training targets and to
/// bound the soft operators in tests. Flat SEs probe the support W_i != 0
/// and read out-of-bounds pixels as background 0; NonFlat SEs use every
/// in-bounds tap (max of X+W / min of X-W).
Image hard_morph(const Image& img, const StructuringElement& se, MorphMode mode);

/// Smooth sign in [-1, 1]: x/(1+|x|) or tanh(x).
double smooth_sign(double a, SmoothSignKind kind);
double smooth_sign_deriv(double a, SmoothSignKind kind);

/// Built-in structuring elements: "diamond3", "cross5", "hline5" (flat),
/// "nonflat3" and "nonflat3b" (non-flat 3x3). Throws std::invalid_argument
/// for an unknown name.
StructuringElement builtin_se(const std::string& name);
const std::vector<std::string>& builtin_se_names();

}  // namespace morphkit

#endif
