#include "morphkit/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace morphkit {

namespace {

struct ShapeInfo {
    bool is_vec = false;
    int channels = 1;
    int rows = 0;
    int cols = 0;
    std::size_t flat = 0;

    std::size_t total() const {
        return is_vec ? flat : static_cast<std::size_t>(channels) * rows * cols;
    }
};

bool is_morph_kind(LayerKind k) {
    return k == LayerKind::Dilation || k == LayerKind::Erosion || k == LayerKind::Adaptive;
}

// Walks the layer list, producing the input shape of every layer plus the
// final output shape. Throws on any incompatibility.
std::vector<ShapeInfo> propagate_shapes(const NetworkSpec& spec) {
    if (spec.input_rows <= 0 || spec.input_cols <= 0)
        throw std::invalid_argument("network: input shape must be positive");

    std::vector<ShapeInfo> shapes;
    ShapeInfo cur{false, 1, spec.input_rows, spec.input_cols, 0};
    shapes.push_back(cur);

    for (const LayerSpec& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::Dilation:
            case LayerKind::Erosion:
            case LayerKind::Adaptive:
                if (cur.is_vec)
                    throw std::invalid_argument("morphological layer needs map input");
                if (l.se_rows <= 0 || l.se_cols <= 0 || l.filters <= 0)
                    throw std::invalid_argument("morphological layer: bad SE shape or filters");
                if (cur.channels != 1 && cur.channels != l.filters)
                    throw std::invalid_argument(
                        "morphological layer: channel count must be 1 or equal to filters");
                cur.channels = l.filters;
                break;
            case LayerKind::Subtraction:
                if (cur.is_vec) throw std::invalid_argument("subtraction needs map input");
                if (cur.rows != spec.input_rows || cur.cols != spec.input_cols)
                    throw std::invalid_argument(
                        "subtraction: skip source shape differs from layer input");
                break;
            case LayerKind::Flatten:
                if (cur.is_vec) throw std::invalid_argument("flatten needs map input");
                cur.flat = cur.total();
                cur.is_vec = true;
                break;
            case LayerKind::Dense:
                if (!cur.is_vec) throw std::invalid_argument("dense needs vector input (flatten first)");
                if (l.fc_width <= 0) throw std::invalid_argument("dense: fc_width must be positive");
                cur.flat = static_cast<std::size_t>(l.fc_width);
                break;
            case LayerKind::Softmax:
                if (!cur.is_vec) throw std::invalid_argument("softmax needs vector input");
                break;
            case LayerKind::Dropout:
                if (!cur.is_vec) throw std::invalid_argument("dropout needs vector input");
                if (l.dropout_rate < 0.0 || l.dropout_rate >= 1.0)
                    throw std::invalid_argument("dropout: rate must lie in [0,1)");
                break;
        }
        shapes.push_back(cur);
    }
    return shapes;
}

// ---- per-map kernels --------------------------------------------------

struct TapGeom {
    int dr, dc;
};

std::vector<TapGeom> tap_geometry(const WindowShape& s) {
    std::vector<TapGeom> g;
    g.reserve(static_cast<std::size_t>(s.taps()));
    for (int i = 0; i < s.height; ++i)
        for (int j = 0; j < s.width; ++j)
            g.push_back({i - s.anchor_row(), j - s.anchor_col()});
    return g;
}

// Soft morphology over a whole map, fused per pixel. `probs` (optional)
// receives the tap softmax weights, pixel-major, zero at OOB taps.
void morph_map_forward(const Image& x, const StructuringElement& se, MorphMode mode,
                       ErodeConvention conv, const Image* bias, Image& out,
                       std::vector<double>* probs) {
    const auto geom = tap_geometry(se.shape);
    const int n = se.shape.taps();
    const double sign = (mode == MorphMode::Erode) ? -1.0 : 1.0;
    out = Image(x.rows, x.cols);
    if (probs) probs->assign(x.size() * static_cast<std::size_t>(n), 0.0);

    std::vector<double> args(static_cast<std::size_t>(n));
    std::vector<int> idx(static_cast<std::size_t>(n));

    for (int r = 0; r < x.rows; ++r) {
        for (int c = 0; c < x.cols; ++c) {
            int k = 0;
            for (int i = 0; i < n; ++i) {
                const int rr = r + geom[i].dr;
                const int cc = c + geom[i].dc;
                if (!x.in_bounds(rr, cc)) continue;
                const double w = se.weights[i];
                const double xv = x.at(rr, cc);
                double a;
                if (se.form == SeForm::Product) {
                    a = (mode == MorphMode::Dilate) ? w * xv : -w * xv;
                } else if (mode == MorphMode::Dilate) {
                    a = w + xv;
                } else {
                    a = (conv == ErodeConvention::Corrected) ? w - xv : xv - w;
                }
                args[k] = a;
                idx[k] = i;
                ++k;
            }
            double m = args[0];
            for (int i = 1; i < k; ++i) m = std::max(m, args[i]);
            double acc = 0.0;
            for (int i = 0; i < k; ++i) {
                args[i] = std::exp(args[i] - m);
                acc += args[i];
            }
            const std::size_t j = static_cast<std::size_t>(r) * x.cols + c;
            out.pix[j] = sign * (m + std::log(acc));
            if (bias) out.pix[j] += bias->pix[j];
            if (probs) {
                double* p = probs->data() + j * static_cast<std::size_t>(n);
                for (int i = 0; i < k; ++i) p[idx[i]] = args[i] / acc;
            }
        }
    }
}

void morph_map_backward(const Image& x, const StructuringElement& se, MorphMode mode,
                        ErodeConvention conv, const Image& upstream,
                        const std::vector<double>& probs, std::span<double> dW, Image& dx) {
    const auto geom = tap_geometry(se.shape);
    const int n = se.shape.taps();

    for (int r = 0; r < x.rows; ++r) {
        for (int c = 0; c < x.cols; ++c) {
            const std::size_t j = static_cast<std::size_t>(r) * x.cols + c;
            const double u = upstream.pix[j];
            if (u == 0.0) continue;
            const double* p = probs.data() + j * static_cast<std::size_t>(n);
            for (int i = 0; i < n; ++i) {
                const double pi = p[i];
                if (pi == 0.0) continue;
                const int rr = r + geom[i].dr;
                const int cc = c + geom[i].dc;
                if (se.form == SeForm::Product) {
                    dW[i] += u * x.at(rr, cc) * pi;
                    dx.at(rr, cc) += u * se.weights[i] * pi;
                } else if (mode == MorphMode::Dilate) {
                    dW[i] += u * pi;
                    dx.at(rr, cc) += u * pi;
                } else if (conv == ErodeConvention::Corrected) {
                    dW[i] -= u * pi;
                    dx.at(rr, cc) += u * pi;
                } else {
                    dW[i] += u * pi;
                    dx.at(rr, cc) -= u * pi;
                }
            }
        }
    }
}

void adaptive_map_forward(const Image& x, const StructuringElement& se, double gate,
                          SmoothSignKind smooth, const Image* bias, Image& out,
                          std::vector<double>* probs, std::vector<double>* lse_vals) {
    const auto geom = tap_geometry(se.shape);
    const int n = se.shape.taps();
    const double g = smooth_sign(gate, smooth);
    out = Image(x.rows, x.cols);
    if (probs) probs->assign(x.size() * static_cast<std::size_t>(n), 0.0);
    if (lse_vals) lse_vals->assign(x.size(), 0.0);

    std::vector<double> args(static_cast<std::size_t>(n));
    std::vector<int> idx(static_cast<std::size_t>(n));

    for (int r = 0; r < x.rows; ++r) {
        for (int c = 0; c < x.cols; ++c) {
            int k = 0;
            for (int i = 0; i < n; ++i) {
                const int rr = r + geom[i].dr;
                const int cc = c + geom[i].dc;
                if (!x.in_bounds(rr, cc)) continue;
                const double s = (se.form == SeForm::Product)
                                     ? se.weights[i] * x.at(rr, cc)
                                     : se.weights[i] + x.at(rr, cc);
                args[k] = g * s;
                idx[k] = i;
                ++k;
            }
            double m = args[0];
            for (int i = 1; i < k; ++i) m = std::max(m, args[i]);
            double acc = 0.0;
            for (int i = 0; i < k; ++i) {
                args[i] = std::exp(args[i] - m);
                acc += args[i];
            }
            const std::size_t j = static_cast<std::size_t>(r) * x.cols + c;
            const double L = m + std::log(acc);
            out.pix[j] = g * L;
            if (bias) out.pix[j] += bias->pix[j];
            if (lse_vals) (*lse_vals)[j] = L;
            if (probs) {
                double* p = probs->data() + j * static_cast<std::size_t>(n);
                for (int i = 0; i < k; ++i) p[idx[i]] = args[i] / acc;
            }
        }
    }
}

// Returns the accumulated gate gradient; dW/dx accumulated in place.
double adaptive_map_backward(const Image& x, const StructuringElement& se, double gate,
                             SmoothSignKind smooth, const Image& upstream,
                             const std::vector<double>& probs,
                             const std::vector<double>& lse_vals, std::span<double> dW,
                             Image& dx) {
    const auto geom = tap_geometry(se.shape);
    const int n = se.shape.taps();
    const double g = smooth_sign(gate, smooth);
    const double gprime = smooth_sign_deriv(gate, smooth);
    const double g2 = g * g;
    double da = 0.0;

    for (int r = 0; r < x.rows; ++r) {
        for (int c = 0; c < x.cols; ++c) {
            const std::size_t j = static_cast<std::size_t>(r) * x.cols + c;
            const double u = upstream.pix[j];
            if (u == 0.0) continue;
            const double* p = probs.data() + j * static_cast<std::size_t>(n);
            double weighted = 0.0;  // Σ p_i s_i
            for (int i = 0; i < n; ++i) {
                const double pi = p[i];
                if (pi == 0.0) continue;
                const int rr = r + geom[i].dr;
                const int cc = c + geom[i].dc;
                const double xv = x.at(rr, cc);
                const double w = se.weights[i];
                if (se.form == SeForm::Product) {
                    weighted += pi * w * xv;
                    dW[i] += u * g2 * pi * xv;
                    dx.at(rr, cc) += u * g2 * pi * w;
                } else {
                    weighted += pi * (w + xv);
                    dW[i] += u * g2 * pi;
                    dx.at(rr, cc) += u * g2 * pi;
                }
            }
            // z = g·L + b with L itself a function of g through the exponent
            da += u * gprime * (lse_vals[j] + g * weighted);
        }
    }
    return da;
}

void check_morph_input(const Image& x, const std::vector<Image>& bias) {
    if (bias.empty()) throw std::domain_error("morph layer: no filters");
    if (!x.same_shape(bias.front()))
        throw std::domain_error("morph layer: input shape differs from bias grid shape");
}

}  // namespace

void validate(const NetworkSpec& spec) { propagate_shapes(spec); }

std::size_t Activation::flat_size() const {
    if (is_vec) return vec.size();
    std::size_t n = 0;
    for (const Image& m : maps) n += m.size();
    return n;
}

// ---- state ------------------------------------------------------------

namespace {

// rng == nullptr builds a zero-filled skeleton with the right tensor sizes.
NetworkState build_state(const NetworkSpec& spec, Rng* rng) {
    const auto shapes = propagate_shapes(spec);
    NetworkState state;
    state.reserve(spec.layers.size());

    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& l = spec.layers[li];
        const ShapeInfo& in = shapes[li];
        if (l.kind == LayerKind::Dilation || l.kind == LayerKind::Erosion) {
            MorphLayerState s;
            s.mode = (l.kind == LayerKind::Dilation) ? MorphMode::Dilate : MorphMode::Erode;
            s.conv = l.conv;
            for (int f = 0; f < l.filters; ++f) {
                StructuringElement se;
                se.shape = {l.se_rows, l.se_cols};
                se.form = l.form;
                se.kind = (l.form == SeForm::Product) ? SeKind::Flat : SeKind::NonFlat;
                se.weights.resize(static_cast<std::size_t>(se.shape.taps()));
                for (double& w : se.weights) w = rng ? rng->next_double() : 0.0;
                s.filters.push_back(std::move(se));
                s.bias.emplace_back(in.rows, in.cols);
            }
            state.emplace_back(std::move(s));
        } else if (l.kind == LayerKind::Adaptive) {
            AdaptiveLayerState s;
            s.smooth = l.smooth;
            for (int f = 0; f < l.filters; ++f) {
                StructuringElement se;
                se.shape = {l.se_rows, l.se_cols};
                se.form = l.form;
                se.kind = (l.form == SeForm::Product) ? SeKind::Flat : SeKind::NonFlat;
                se.weights.resize(static_cast<std::size_t>(se.shape.taps()));
                for (double& w : se.weights) w = rng ? rng->next_double() : 0.0;
                s.filters.push_back(std::move(se));
                s.bias.emplace_back(in.rows, in.cols);
                double a = 0.0;
                if (rng) {
                    do {
                        a = rng->uniform(-1.0, 1.0);
                    } while (std::abs(a) < 0.05);  // a near 0 stalls the gate gradient
                }
                s.gate.push_back(a);
            }
            state.emplace_back(std::move(s));
        } else if (l.kind == LayerKind::Dense) {
            DenseLayerState s;
            s.in_dim = static_cast<int>(in.flat);
            s.out_dim = l.fc_width;
            s.w.resize(static_cast<std::size_t>(s.out_dim) * s.in_dim);
            s.b.assign(static_cast<std::size_t>(s.out_dim), 0.0);
            if (rng) {
                const double bound = std::sqrt(6.0 / (s.in_dim + s.out_dim));
                for (double& w : s.w) w = rng->uniform(-bound, bound);
            }
            state.emplace_back(std::move(s));
        } else {
            state.emplace_back(EmptyState{});
        }
    }
    return state;
}

}  // namespace

NetworkState init_state(const NetworkSpec& spec, Rng& rng) { return build_state(spec, &rng); }

NetworkState zero_like(const NetworkState& like) {
    NetworkState out = like;
    for_each_param(out, [](std::span<double> p) { std::fill(p.begin(), p.end(), 0.0); });
    return out;
}

void for_each_param(NetworkState& state, const std::function<void(std::span<double>)>& fn) {
    for (LayerState& ls : state) {
        if (auto* m = std::get_if<MorphLayerState>(&ls)) {
            for (auto& se : m->filters) fn(se.weights);
            for (auto& b : m->bias) fn(b.pix);
        } else if (auto* a = std::get_if<AdaptiveLayerState>(&ls)) {
            for (auto& se : a->filters) fn(se.weights);
            for (auto& b : a->bias) fn(b.pix);
            fn(a->gate);
        } else if (auto* d = std::get_if<DenseLayerState>(&ls)) {
            fn(d->w);
            fn(d->b);
        }
    }
}

void for_each_param(const NetworkState& state,
                    const std::function<void(std::span<const double>)>& fn) {
    for_each_param(const_cast<NetworkState&>(state),
                   [&fn](std::span<double> p) { fn(std::span<const double>(p)); });
}

std::size_t param_count(const NetworkState& state) {
    std::size_t n = 0;
    for_each_param(state, [&n](std::span<const double> p) { n += p.size(); });
    return n;
}

// ---- single-layer entry points ----------------------------------------

std::vector<Image> morph_layer_forward(const Image& x, const MorphLayerState& state) {
    check_morph_input(x, state.bias);
    std::vector<Image> out(state.filters.size());
    for (std::size_t f = 0; f < state.filters.size(); ++f)
        morph_map_forward(x, state.filters[f], state.mode, state.conv, &state.bias[f], out[f],
                          nullptr);
    return out;
}

std::vector<Image> adaptive_layer_forward(const Image& x, const AdaptiveLayerState& state) {
    check_morph_input(x, state.bias);
    std::vector<Image> out(state.filters.size());
    for (std::size_t f = 0; f < state.filters.size(); ++f)
        adaptive_map_forward(x, state.filters[f], state.gate[f], state.smooth, &state.bias[f],
                             out[f], nullptr, nullptr);
    return out;
}

std::vector<Image> subtraction_forward(const std::vector<Image>& original,
                                       const std::vector<Image>& processed) {
    if (original.size() != processed.size() && original.size() != 1)
        throw std::domain_error("subtraction: filter count mismatch");
    std::vector<Image> out(processed.size());
    for (std::size_t f = 0; f < processed.size(); ++f) {
        const Image& o = original.size() == 1 ? original[0] : original[f];
        if (!o.same_shape(processed[f])) throw std::domain_error("subtraction: shape mismatch");
        out[f] = o;
        for (std::size_t i = 0; i < out[f].pix.size(); ++i) out[f].pix[i] -= processed[f].pix[i];
    }
    return out;
}

// ---- forward ----------------------------------------------------------

Activation network_forward(const NetworkSpec& spec, const NetworkState& state, const Image& x,
                           bool training, Rng& rng, ForwardTrace* trace) {
    if (state.size() != spec.layers.size())
        throw std::invalid_argument("network_forward: state/spec layer count mismatch");
    if (x.rows != spec.input_rows || x.cols != spec.input_cols)
        throw std::domain_error("network_forward: input shape mismatch");

    if (trace) {
        trace->network_input = x;
        trace->layers.assign(spec.layers.size(), LayerTrace{});
        trace->skip_gradient = Image();
    }

    Activation cur;
    cur.maps = {x};

    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& l = spec.layers[li];
        LayerTrace* lt = trace ? &trace->layers[li] : nullptr;
        if (lt) lt->input = cur;

        Activation next;
        switch (l.kind) {
            case LayerKind::Dilation:
            case LayerKind::Erosion: {
                const auto& s = std::get<MorphLayerState>(state[li]);
                check_morph_input(cur.maps[0], s.bias);
                next.maps.resize(s.filters.size());
                if (lt) lt->tap_probs.resize(s.filters.size());
                for (std::size_t f = 0; f < s.filters.size(); ++f) {
                    const Image& in = cur.maps.size() == 1 ? cur.maps[0] : cur.maps[f];
                    morph_map_forward(in, s.filters[f], s.mode, s.conv, &s.bias[f], next.maps[f],
                                      lt ? &lt->tap_probs[f] : nullptr);
                }
                break;
            }
            case LayerKind::Adaptive: {
                const auto& s = std::get<AdaptiveLayerState>(state[li]);
                check_morph_input(cur.maps[0], s.bias);
                next.maps.resize(s.filters.size());
                if (lt) {
                    lt->tap_probs.resize(s.filters.size());
                    lt->lse_vals.resize(s.filters.size());
                }
                for (std::size_t f = 0; f < s.filters.size(); ++f) {
                    const Image& in = cur.maps.size() == 1 ? cur.maps[0] : cur.maps[f];
                    adaptive_map_forward(in, s.filters[f], s.gate[f], s.smooth, &s.bias[f],
                                         next.maps[f], lt ? &lt->tap_probs[f] : nullptr,
                                         lt ? &lt->lse_vals[f] : nullptr);
                }
                break;
            }
            case LayerKind::Subtraction:
                next.maps = subtraction_forward({x}, cur.maps);
                break;
            case LayerKind::Flatten: {
                next.is_vec = true;
                next.vec.reserve(cur.flat_size());
                for (const Image& m : cur.maps)
                    next.vec.insert(next.vec.end(), m.pix.begin(), m.pix.end());
                break;
            }
            case LayerKind::Dense: {
                const auto& s = std::get<DenseLayerState>(state[li]);
                if (cur.vec.size() != static_cast<std::size_t>(s.in_dim))
                    throw std::domain_error("dense: input dim mismatch");
                next.is_vec = true;
                next.vec.resize(static_cast<std::size_t>(s.out_dim));
                for (int o = 0; o < s.out_dim; ++o) {
                    const double* wr = s.w.data() + static_cast<std::size_t>(o) * s.in_dim;
                    double acc = s.b[static_cast<std::size_t>(o)];
                    for (int i = 0; i < s.in_dim; ++i) acc += wr[i] * cur.vec[i];
                    next.vec[static_cast<std::size_t>(o)] = acc;
                }
                break;
            }
            case LayerKind::Softmax: {
                next.is_vec = true;
                next.vec = cur.vec;
                const double m = *std::max_element(next.vec.begin(), next.vec.end());
                double acc = 0.0;
                for (double& v : next.vec) {
                    v = std::exp(v - m);
                    acc += v;
                }
                for (double& v : next.vec) v /= acc;
                if (lt) lt->softmax_out = next.vec;
                break;
            }
            case LayerKind::Dropout: {
                next.is_vec = true;
                next.vec = cur.vec;
                if (training) {
                    const double keep = 1.0 - l.dropout_rate;
                    if (lt) lt->dropout_mask.resize(next.vec.size());
                    for (std::size_t i = 0; i < next.vec.size(); ++i) {
                        const bool alive = rng.next_double() >= l.dropout_rate;
                        if (lt) lt->dropout_mask[i] = alive ? 1 : 0;
                        next.vec[i] = alive ? next.vec[i] / keep : 0.0;
                    }
                }
                break;
            }
        }
        cur = std::move(next);
    }
    return cur;
}

// ---- backward ---------------------------------------------------------

void network_backward(const NetworkSpec& spec, const NetworkState& state, ForwardTrace& trace,
                      const Activation& out_grad, bool grad_wrt_logits,
                      NetworkState& grad_accum) {
    if (trace.layers.size() != spec.layers.size())
        throw std::invalid_argument("network_backward: trace/spec mismatch");
    if (grad_accum.size() != spec.layers.size())
        throw std::invalid_argument("network_backward: grad accumulator mismatch");

    Activation up = out_grad;

    for (std::size_t ri = spec.layers.size(); ri-- > 0;) {
        const LayerSpec& l = spec.layers[ri];
        LayerTrace& lt = trace.layers[ri];
        Activation down;

        switch (l.kind) {
            case LayerKind::Dilation:
            case LayerKind::Erosion: {
                const auto& s = std::get<MorphLayerState>(state[ri]);
                auto& g = std::get<MorphLayerState>(grad_accum[ri]);
                const bool broadcast = lt.input.maps.size() == 1;
                down.maps.resize(lt.input.maps.size());
                for (std::size_t f = 0; f < down.maps.size(); ++f)
                    down.maps[f] = Image(lt.input.maps[f].rows, lt.input.maps[f].cols);
                for (std::size_t f = 0; f < s.filters.size(); ++f) {
                    const Image& in = broadcast ? lt.input.maps[0] : lt.input.maps[f];
                    Image& dx = broadcast ? down.maps[0] : down.maps[f];
                    // db = upstream exactly
                    for (std::size_t i = 0; i < up.maps[f].pix.size(); ++i)
                        g.bias[f].pix[i] += up.maps[f].pix[i];
                    morph_map_backward(in, s.filters[f], s.mode, s.conv, up.maps[f],
                                       lt.tap_probs[f], g.filters[f].weights, dx);
                }
                break;
            }
            case LayerKind::Adaptive: {
                const auto& s = std::get<AdaptiveLayerState>(state[ri]);
                auto& g = std::get<AdaptiveLayerState>(grad_accum[ri]);
                const bool broadcast = lt.input.maps.size() == 1;
                down.maps.resize(lt.input.maps.size());
                for (std::size_t f = 0; f < down.maps.size(); ++f)
                    down.maps[f] = Image(lt.input.maps[f].rows, lt.input.maps[f].cols);
                for (std::size_t f = 0; f < s.filters.size(); ++f) {
                    const Image& in = broadcast ? lt.input.maps[0] : lt.input.maps[f];
                    Image& dx = broadcast ? down.maps[0] : down.maps[f];
                    for (std::size_t i = 0; i < up.maps[f].pix.size(); ++i)
                        g.bias[f].pix[i] += up.maps[f].pix[i];
                    g.gate[f] += adaptive_map_backward(in, s.filters[f], s.gate[f], s.smooth,
                                                       up.maps[f], lt.tap_probs[f],
                                                       lt.lse_vals[f], g.filters[f].weights, dx);
                }
                break;
            }
            case LayerKind::Subtraction: {
                // processed branch: (-1) x upstream; skip path: upstream, recorded
                down.maps.resize(up.maps.size());
                if (trace.skip_gradient.size() == 0)
                    trace.skip_gradient = Image(up.maps[0].rows, up.maps[0].cols);
                for (std::size_t f = 0; f < up.maps.size(); ++f) {
                    down.maps[f] = up.maps[f];
                    for (double& v : down.maps[f].pix) v = -v;
                    for (std::size_t i = 0; i < up.maps[f].pix.size(); ++i)
                        trace.skip_gradient.pix[i] += up.maps[f].pix[i];
                }
                break;
            }
            case LayerKind::Flatten: {
                down.maps.resize(lt.input.maps.size());
                std::size_t off = 0;
                for (std::size_t f = 0; f < lt.input.maps.size(); ++f) {
                    const Image& src = lt.input.maps[f];
                    down.maps[f] = Image(src.rows, src.cols);
                    std::copy(up.vec.begin() + off, up.vec.begin() + off + src.size(),
                              down.maps[f].pix.begin());
                    off += src.size();
                }
                break;
            }
            case LayerKind::Dense: {
                const auto& s = std::get<DenseLayerState>(state[ri]);
                auto& g = std::get<DenseLayerState>(grad_accum[ri]);
                down.is_vec = true;
                down.vec.assign(static_cast<std::size_t>(s.in_dim), 0.0);
                for (int o = 0; o < s.out_dim; ++o) {
                    const double u = up.vec[static_cast<std::size_t>(o)];
                    g.b[static_cast<std::size_t>(o)] += u;
                    if (u == 0.0) continue;
                    const double* wr = s.w.data() + static_cast<std::size_t>(o) * s.in_dim;
                    double* gr = g.w.data() + static_cast<std::size_t>(o) * s.in_dim;
                    const double* x = lt.input.vec.data();
                    for (int i = 0; i < s.in_dim; ++i) {
                        gr[i] += u * x[i];
                        down.vec[static_cast<std::size_t>(i)] += wr[i] * u;
                    }
                }
                break;
            }
            case LayerKind::Softmax: {
                down.is_vec = true;
                if (grad_wrt_logits) {
                    down.vec = up.vec;  // loss already folded the Jacobian in
                } else {
                    const auto& p = lt.softmax_out;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * up.vec[i];
                    down.vec.resize(p.size());
                    for (std::size_t i = 0; i < p.size(); ++i)
                        down.vec[i] = p[i] * (up.vec[i] - dot);
                }
                break;
            }
            case LayerKind::Dropout: {
                down.is_vec = true;
                down.vec = up.vec;
                if (!lt.dropout_mask.empty()) {
                    const double keep = 1.0 - l.dropout_rate;
                    for (std::size_t i = 0; i < down.vec.size(); ++i)
                        down.vec[i] = lt.dropout_mask[i] ? down.vec[i] / keep : 0.0;
                }
                break;
            }
        }
        up = std::move(down);
        grad_wrt_logits = false;  // only the final softmax can be skipped
    }
}

// ---- builders ---------------------------------------------------------

DatasetProfile mnist_profile() { return {"mnist", 28, 28, 10, {120, 84}}; }
DatasetProfile scgs_profile() { return {"scgs", 64, 64, 5, {1024, 512}}; }
DatasetProfile brain_tumor_profile() { return {"brain-tumor", 64, 64, 3, {512}}; }

DatasetProfile profile_by_name(const std::string& name) {
    if (name == "mnist" || name == "digits") {
        auto p = mnist_profile();
        p.name = name;
        return p;
    }
    if (name == "scgs") return scgs_profile();
    if (name == "brain-tumor") return brain_tumor_profile();
    throw std::invalid_argument("unknown dataset profile '" + name + "'");
}

NetworkSpec build_residual_mnn(const DatasetProfile& profile, int filters, double dropout_rate,
                               SeForm form) {
    if (filters < 1) throw std::invalid_argument("build_residual_mnn: filters must be >= 1");
    NetworkSpec spec;
    spec.input_rows = profile.rows;
    spec.input_cols = profile.cols;

    LayerSpec morph;
    morph.se_rows = morph.se_cols = 3;
    morph.filters = filters;
    morph.form = form;

    morph.kind = LayerKind::Erosion;
    spec.layers.push_back(morph);
    morph.kind = LayerKind::Dilation;
    spec.layers.push_back(morph);
    spec.layers.push_back({.kind = LayerKind::Subtraction});
    spec.layers.push_back({.kind = LayerKind::Flatten});
    for (int w : profile.fc_widths)
        spec.layers.push_back({.kind = LayerKind::Dense, .fc_width = w});
    if (dropout_rate > 0.0)
        spec.layers.push_back({.kind = LayerKind::Dropout, .dropout_rate = dropout_rate});
    spec.layers.push_back({.kind = LayerKind::Dense, .fc_width = profile.classes});
    spec.layers.push_back({.kind = LayerKind::Softmax});

    validate(spec);
    return spec;
}

NetworkSpec build_stacked(const std::vector<MorphMode>& ops, WindowShape se_shape, SeForm form,
                          int rows, int cols, ErodeConvention conv) {
    if (ops.empty()) throw std::invalid_argument("build_stacked: empty operation sequence");
    NetworkSpec spec;
    spec.input_rows = rows;
    spec.input_cols = cols;
    for (MorphMode m : ops) {
        LayerSpec l;
        l.kind = (m == MorphMode::Dilate) ? LayerKind::Dilation : LayerKind::Erosion;
        l.se_rows = se_shape.height;
        l.se_cols = se_shape.width;
        l.filters = 1;
        l.form = form;
        l.conv = conv;
        spec.layers.push_back(l);
    }
    validate(spec);
    return spec;
}

NetworkSpec build_adaptive_single(WindowShape se_shape, SeForm form, SmoothSignKind smooth,
                                  int rows, int cols) {
    NetworkSpec spec;
    spec.input_rows = rows;
    spec.input_cols = cols;
    LayerSpec l;
    l.kind = LayerKind::Adaptive;
    l.se_rows = se_shape.height;
    l.se_cols = se_shape.width;
    l.filters = 1;
    l.form = form;
    l.smooth = smooth;
    spec.layers.push_back(l);
    validate(spec);
    return spec;
}

// ---- parameter accounting ---------------------------------------------

ParamReport param_report(const NetworkSpec& spec, const NetworkState& state) {
    ParamReport rep;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const LayerSpec& l = spec.layers[li];
        const std::string tag = "layer " + std::to_string(li + 1);
        if (auto* m = std::get_if<MorphLayerState>(&state[li])) {
            std::size_t wn = 0, bn = 0;
            for (const auto& se : m->filters) wn += se.weights.size();
            for (const auto& b : m->bias) bn += b.size();
            const char* name = (l.kind == LayerKind::Erosion) ? "erosion" : "dilation";
            rep.items.push_back({tag + " " + name + " SE weights", wn});
            rep.items.push_back({tag + " " + name + " bias grid", bn});
            rep.total += wn + bn;
            rep.feature_extraction_grid_bias += wn + bn;
            rep.feature_extraction_scalar_bias += wn + m->filters.size();
        } else if (auto* a = std::get_if<AdaptiveLayerState>(&state[li])) {
            std::size_t wn = 0, bn = 0;
            for (const auto& se : a->filters) wn += se.weights.size();
            for (const auto& b : a->bias) bn += b.size();
            rep.items.push_back({tag + " adaptive SE weights", wn});
            rep.items.push_back({tag + " adaptive bias grid", bn});
            rep.items.push_back({tag + " adaptive gates", a->gate.size()});
            rep.total += wn + bn + a->gate.size();
            rep.feature_extraction_grid_bias += wn + bn + a->gate.size();
            rep.feature_extraction_scalar_bias += wn + 2 * a->gate.size();
        } else if (auto* d = std::get_if<DenseLayerState>(&state[li])) {
            rep.items.push_back({tag + " dense weights", d->w.size()});
            rep.items.push_back({tag + " dense bias", d->b.size()});
            rep.total += d->w.size() + d->b.size();
        }
    }
    return rep;
}

// ---- serialization ----------------------------------------------------

namespace {

using nlohmann::json;

const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Dilation: return "dilation";
        case LayerKind::Erosion: return "erosion";
        case LayerKind::Adaptive: return "adaptive";
        case LayerKind::Subtraction: return "subtraction";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::Dense: return "dense";
        case LayerKind::Softmax: return "softmax";
        case LayerKind::Dropout: return "dropout";
    }
    return "?";
}

LayerKind kind_from_name(const std::string& s) {
    if (s == "dilation") return LayerKind::Dilation;
    if (s == "erosion") return LayerKind::Erosion;
    if (s == "adaptive") return LayerKind::Adaptive;
    if (s == "subtraction") return LayerKind::Subtraction;
    if (s == "flatten") return LayerKind::Flatten;
    if (s == "dense") return LayerKind::Dense;
    if (s == "softmax") return LayerKind::Softmax;
    if (s == "dropout") return LayerKind::Dropout;
    throw std::invalid_argument("unknown layer kind '" + s + "'");
}

}  // namespace

std::string network_spec_to_json(const NetworkSpec& spec) {
    json doc;
    doc["input"] = {spec.input_rows, spec.input_cols};
    doc["layers"] = json::array();
    for (const LayerSpec& l : spec.layers) {
        json jl;
        jl["kind"] = kind_name(l.kind);
        jl["shape"] = {l.se_rows, l.se_cols};
        jl["filters"] = l.filters;
        jl["form"] = l.form == SeForm::Product ? "product" : "additive";
        jl["smooth"] = l.smooth == SmoothSignKind::SoftSign ? "softsign" : "tanh";
        jl["conv"] = l.conv == ErodeConvention::Corrected ? "corrected" : "verbatim-eq14";
        jl["fc_width"] = l.fc_width;
        jl["dropout_rate"] = l.dropout_rate;
        doc["layers"].push_back(jl);
    }
    return doc.dump();
}

NetworkSpec network_spec_from_json(const std::string& text) {
    json doc = json::parse(text);
    NetworkSpec spec;
    spec.input_rows = doc.at("input").at(0).get<int>();
    spec.input_cols = doc.at("input").at(1).get<int>();
    for (const json& jl : doc.at("layers")) {
        LayerSpec l;
        l.kind = kind_from_name(jl.at("kind").get<std::string>());
        l.se_rows = jl.at("shape").at(0).get<int>();
        l.se_cols = jl.at("shape").at(1).get<int>();
        l.filters = jl.at("filters").get<int>();
        l.form = jl.at("form").get<std::string>() == "additive" ? SeForm::Additive
                                                                : SeForm::Product;
        l.smooth = jl.at("smooth").get<std::string>() == "tanh" ? SmoothSignKind::Tanh
                                                                : SmoothSignKind::SoftSign;
        l.conv = jl.at("conv").get<std::string>() == "verbatim-eq14"
                     ? ErodeConvention::VerbatimEq14
                     : ErodeConvention::Corrected;
        l.fc_width = jl.at("fc_width").get<int>();
        l.dropout_rate = jl.at("dropout_rate").get<double>();
        spec.layers.push_back(l);
    }
    validate(spec);
    return spec;
}

void save_model(const std::string& path, const NetworkSpec& spec, const NetworkState& state) {
    const std::string js = network_spec_to_json(spec);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_model: cannot open " + path);

    const std::uint32_t len = static_cast<std::uint32_t>(js.size());
    unsigned char hdr[4] = {static_cast<unsigned char>(len & 0xff),
                            static_cast<unsigned char>((len >> 8) & 0xff),
                            static_cast<unsigned char>((len >> 16) & 0xff),
                            static_cast<unsigned char>((len >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(hdr), 4);
    out.write(js.data(), static_cast<std::streamsize>(js.size()));

    for_each_param(state, [&out](std::span<const double> p) {
        for (double v : p) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            unsigned char buf[8];
            for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
            out.write(reinterpret_cast<const char*>(buf), 8);
        }
    });
    if (!out) throw std::runtime_error("save_model: write failed for " + path);
}

std::pair<NetworkSpec, NetworkState> load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_model: cannot open " + path);

    unsigned char hdr[4];
    in.read(reinterpret_cast<char*>(hdr), 4);
    if (!in) throw std::runtime_error("load_model: truncated header");
    const std::uint32_t len = static_cast<std::uint32_t>(hdr[0]) |
                              (static_cast<std::uint32_t>(hdr[1]) << 8) |
                              (static_cast<std::uint32_t>(hdr[2]) << 16) |
                              (static_cast<std::uint32_t>(hdr[3]) << 24);
    std::string js(len, '\0');
    in.read(js.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error("load_model: truncated spec JSON");

    NetworkSpec spec = network_spec_from_json(js);
    NetworkState state = build_state(spec, nullptr);

    bool short_read = false;
    for_each_param(state, [&in, &short_read](std::span<double> p) {
        for (double& v : p) {
            unsigned char buf[8];
            in.read(reinterpret_cast<char*>(buf), 8);
            if (!in) {
                short_read = true;
                return;
            }
            std::uint64_t bits = 0;
            for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
            std::memcpy(&v, &bits, 8);
        }
    });
    if (short_read) throw std::runtime_error("load_model: truncated parameter blob");
    return {std::move(spec), std::move(state)};
}

}  // namespace morphkit
