#include "morphkit/soft_morph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace morphkit {

namespace {

// Collect per-tap exponent arguments over in-bounds taps; the soft output
// is sgn * lse(args) with sgn = -1 for the erosion variants.
struct KernelArgs {
    std::vector<double> args;
    std::vector<std::size_t> tap_index;  // position in the full tap list
    double sign = 1.0;
};

KernelArgs gather(const WindowView& win, const StructuringElement& se, MorphMode mode,
                  ErodeConvention conv) {
    if (win.taps.size() != static_cast<std::size_t>(se.shape.taps()))
        throw std::domain_error("soft_morph: window/SE tap count mismatch");

    KernelArgs out;
    out.args.reserve(win.taps.size());
    for (std::size_t i = 0; i < win.taps.size(); ++i) {
        const Tap& t = win.taps[i];
        if (!t.in_bounds) continue;
        const double w = se.weights[i];
        const double x = t.value;
        double a = 0.0;
        if (se.form == SeForm::Product) {
            a = (mode == MorphMode::Dilate) ? w * x : -w * x;
        } else {
            if (mode == MorphMode::Dilate)
                a = w + x;
            else
                a = (conv == ErodeConvention::Corrected) ? w - x : x - w;
        }
        out.args.push_back(a);
        out.tap_index.push_back(i);
    }
    if (out.args.empty()) throw std::domain_error("soft_morph: no in-bounds taps");
    out.sign = (mode == MorphMode::Erode) ? -1.0 : 1.0;
    return out;
}

void softmax_inplace(std::vector<double>& v) {
    const double m = *std::max_element(v.begin(), v.end());
    double acc = 0.0;
    for (double& x : v) {
        x = std::exp(x - m);
        acc += x;
    }
    for (double& x : v) x /= acc;
}

}  // namespace

double soft_morph(const WindowView& win, const StructuringElement& se, MorphMode mode,
                  ErodeConvention conv) {
    KernelArgs k = gather(win, se, mode, conv);
    return k.sign * stable_lse(k.args);
}

TapGradients soft_morph_grad(const WindowView& win, const StructuringElement& se,
                             MorphMode mode, ErodeConvention conv) {
    KernelArgs k = gather(win, se, mode, conv);
    softmax_inplace(k.args);  // now the per-tap softmax weights

    TapGradients g;
    g.dW.reserve(k.args.size());
    g.dX.reserve(k.args.size());
    for (std::size_t j = 0; j < k.args.size(); ++j) {
        const double p = k.args[j];
        const std::size_t i = k.tap_index[j];
        const double w = se.weights[i];
        const double x = win.taps[i].value;
        if (se.form == SeForm::Product) {
            // Y = sgn * lse(sgn * w x): dY/dw = x p, dY/dx = w p for both modes.
            g.dW.push_back(x * p);
            g.dX.push_back(w * p);
        } else if (mode == MorphMode::Dilate) {
            g.dW.push_back(p);
            g.dX.push_back(p);
        } else if (conv == ErodeConvention::Corrected) {
            g.dW.push_back(-p);
            g.dX.push_back(p);
        } else {
            g.dW.push_back(p);
            g.dX.push_back(-p);
        }
    }
    return g;
}

Image hard_morph(const Image& img, const StructuringElement& se, MorphMode mode) {
    const WindowShape& shape = se.shape;
    const int ar = shape.anchor_row();
    const int ac = shape.anchor_col();
    const bool dilate = (mode == MorphMode::Dilate);
    Image out(img.rows, img.cols);

    for (int r = 0; r < img.rows; ++r) {
        for (int c = 0; c < img.cols; ++c) {
            double best = 0.0;
            bool seen = false;
            for (int i = 0; i < shape.height; ++i) {
                for (int j = 0; j < shape.width; ++j) {
                    const double w = se.weights[static_cast<std::size_t>(i) * shape.width + j];
                    const int rr = r + i - ar;
                    const int cc = c + j - ac;
                    const bool inb = img.in_bounds(rr, cc);
                    double v;
                    if (se.kind == SeKind::Flat) {
                        if (w == 0.0) continue;  // outside the support
                        v = inb ? img.at(rr, cc) : 0.0;  // background fill
                    } else {
                        if (!inb) continue;
                        v = dilate ? img.at(rr, cc) + w : img.at(rr, cc) - w;
                    }
                    if (!seen) {
                        best = v;
                        seen = true;
                    } else {
                        best = dilate ? std::max(best, v) : std::min(best, v);
                    }
                }
            }
            out.at(r, c) = seen ? best : 0.0;  // neutral fill for empty support
        }
    }
    return out;
}

double smooth_sign(double a, SmoothSignKind kind) {
    return kind == SmoothSignKind::SoftSign ? a / (1.0 + std::abs(a)) : std::tanh(a);
}

double smooth_sign_deriv(double a, SmoothSignKind kind) {
    if (kind == SmoothSignKind::SoftSign) {
        const double d = 1.0 + std::abs(a);
        return 1.0 / (d * d);
    }
    const double t = std::tanh(a);
    return 1.0 - t * t;
}

namespace {

StructuringElement make_se(int h, int w, std::vector<double> vals, SeForm form, SeKind kind) {
    StructuringElement se;
    se.shape = {h, w};
    se.weights = std::move(vals);
    se.form = form;
    se.kind = kind;
    return se;
}

}  // namespace

StructuringElement builtin_se(const std::string& name) {
    if (name == "diamond3")
        return make_se(3, 3, {0, 1, 0, 1, 1, 1, 0, 1, 0}, SeForm::Product, SeKind::Flat);
    if (name == "cross5")
        return make_se(5, 5,
                       {0, 0, 1, 0, 0,  //
                        0, 0, 1, 0, 0,  //
                        1, 1, 1, 1, 1,  //
                        0, 0, 1, 0, 0,  //
                        0, 0, 1, 0, 0},
                       SeForm::Product, SeKind::Flat);
    if (name == "hline5")
        return make_se(1, 5, {1, 1, 1, 1, 1}, SeForm::Product, SeKind::Flat);
    if (name == "nonflat3")
        return make_se(3, 3,
                       {0.2060, 0.3234, 0.6542,  //
                        0.3551, 0.5692, 0.3950,  //
                        0.6405, 0.5834, 0.5104},
                       SeForm::Additive, SeKind::NonFlat);
    if (name == "nonflat3b")
        return make_se(3, 3,
                       {0.8329, 0.4865, 0.9737,  //
                        0.0440, 0.8055, 0.1752,  //
                        0.6563, 0.5816, 0.0463},
                       SeForm::Additive, SeKind::NonFlat);
    throw std::invalid_argument("builtin_se: unknown name '" + name + "'");
}

const std::vector<std::string>& builtin_se_names() {
    static const std::vector<std::string> names = {"diamond3", "cross5", "hline5",
                                                   "nonflat3", "nonflat3b"};
    return names;
}

}  // namespace morphkit
