#ifndef MORPHKIT_LAYERS_HPP
#define MORPHKIT_LAYERS_HPP

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "morphkit/grid.hpp"
#include "morphkit/rng.hpp"
#include "morphkit/soft_morph.hpp"

namespace morphkit {

enum class LayerKind { Dilation, Erosion, Adaptive, Subtraction, Flatten, Dense, Softmax, Dropout };

struct LayerSpec {
    LayerKind kind = LayerKind::Dilation;
    // morphological / adaptive layers
    int se_rows = 0;
    int se_cols = 0;
    int filters = 1;
    SeForm form = SeForm::Product;
    SmoothSignKind smooth = SmoothSignKind::SoftSign;
    ErodeConvention conv = ErodeConvention::Corrected;
    // dense layers
    int fc_width = 0;
    // dropout layers
    double dropout_rate = 0.5;
};

/// Ordered layer list with shape bookkeeping. The Subtraction layer's skip
/// source is the network input, which must be a single channel map of
/// identical shape.
struct NetworkSpec {
    int input_rows = 0;
    int input_cols = 0;
    std::vector<LayerSpec> layers;
};

/// Throws std::invalid_argument if consecutive shapes are incompatible.
void validate(const NetworkSpec& spec);

// ---- trainable state --------------------------------------------------

struct MorphLayerState {
    std::vector<StructuringElement> filters;
    std::vector<Image> bias;  // one grid per filter, input-image shape
    MorphMode mode = MorphMode::Dilate;
    ErodeConvention conv = ErodeConvention::Corrected;
};

struct AdaptiveLayerState {
    std::vector<StructuringElement> filters;
    std::vector<Image> bias;
    std::vector<double> gate;  // trainable a, one per filter
    SmoothSignKind smooth = SmoothSignKind::SoftSign;
};

struct DenseLayerState {
    int out_dim = 0;
    int in_dim = 0;
    std::vector<double> w;  // row-major out_dim x in_dim
    std::vector<double> b;
};

struct EmptyState {};

using LayerState = std::variant<EmptyState, MorphLayerState, AdaptiveLayerState, DenseLayerState>;
using NetworkState = std::vector<LayerState>;

/// Fresh trainable state: SE weights uniform [0,1), bias grids zero, gates
/// uniform [-1,1] resampled while |a| < 0.05, dense Xavier-uniform.
NetworkState init_state(const NetworkSpec& spec, Rng& rng);

/// Same tensor layout as `like`, all values zero (gradient accumulator).
NetworkState zero_like(const NetworkState& like);

/// Visits every trainable tensor in canonical order.
void for_each_param(NetworkState& state, const std::function<void(std::span<double>)>& fn);
void for_each_param(const NetworkState& state,
                    const std::function<void(std::span<const double>)>& fn);
std::size_t param_count(const NetworkState& state);

// ---- forward / backward ----------------------------------------------

/// Either a stack of channel maps or a flat vector; exactly one is active.
struct Activation {
    std::vector<Image> maps;
    std::vector<double> vec;
    bool is_vec = false;

    std::size_t flat_size() const;
};

struct LayerTrace {
    Activation input;
    // morph/adaptive: per filter, pixel-major tap softmax weights
    // [pixel * n_taps + tap], zero at out-of-bounds taps
    std::vector<std::vector<double>> tap_probs;
    // adaptive: per filter, per-pixel log-sum-exp values
    std::vector<std::vector<double>> lse_vals;
    std::vector<std::uint8_t> dropout_mask;
    std::vector<double> softmax_out;
};

struct ForwardTrace {
    Image network_input;  // recorded for the Subtraction skip path
    std::vector<LayerTrace> layers;
    // gradient that would flow along the skip path to the network input,
    // filled in by backward (exposed for tests; nothing trains below it)
    Image skip_gradient;
};

/// Composes the layers in order. `trace` may be null for inference-only
/// passes. Dropout draws from `rng` and is active only when `training`.
Activation network_forward(const NetworkSpec& spec, const NetworkState& state, const Image& x,
                           bool training, Rng& rng, ForwardTrace* trace);

/// Visits layers in reverse, accumulating into `grad_accum` (layout from
/// zero_like). When `grad_wrt_logits` is set the final Softmax layer is
/// treated as pass-through (the loss already folded its Jacobian in).
void network_backward(const NetworkSpec& spec, const NetworkState& state, ForwardTrace& trace,
                      const Activation& out_grad, bool grad_wrt_logits,
                      NetworkState& grad_accum);

// ---- single-layer entry points (unit-test surface) --------------------

std::vector<Image> morph_layer_forward(const Image& x, const MorphLayerState& state);
std::vector<Image> adaptive_layer_forward(const Image& x, const AdaptiveLayerState& state);
std::vector<Image> subtraction_forward(const std::vector<Image>& original,
                                       const std::vector<Image>& processed);

// ---- network builders -------------------------------------------------

struct DatasetProfile {
    std::string name;
    int rows = 0;
    int cols = 0;
    int classes = 0;
    std::vector<int> fc_widths;  // hidden fully-connected widths
};

DatasetProfile mnist_profile();       // 28x28, 10 classes, FC 120/84
DatasetProfile scgs_profile();        // 64x64, 5 classes, FC 1024/512
DatasetProfile brain_tumor_profile(); // 64x64, 3 classes, FC 512
DatasetProfile profile_by_name(const std::string& name);

/// Erosion -> Dilation -> Subtraction -> Flatten -> FC... -> Softmax.
/// dropout_rate > 0 inserts a Dropout layer after the last hidden FC.
NetworkSpec build_residual_mnn(const DatasetProfile& profile, int filters,
                               double dropout_rate = 0.0, SeForm form = SeForm::Product);

/// One single-filter morphological layer per entry (image-to-image net).
NetworkSpec build_stacked(const std::vector<MorphMode>& ops, WindowShape se_shape, SeForm form,
                          int rows, int cols,
                          ErodeConvention conv = ErodeConvention::Corrected);

/// Single adaptive layer (operation-detection net).
NetworkSpec build_adaptive_single(WindowShape se_shape, SeForm form, SmoothSignKind smooth,
                                  int rows, int cols);

// ---- parameter accounting --------------------------------------------

struct ParamReportItem {
    std::string label;
    std::size_t count = 0;
};

struct ParamReport {
    std::vector<ParamReportItem> items;
    std::size_t total = 0;
    // feature-extraction count under the full bias-grid convention and
    // under the per-filter scalar-bias convention
    std::size_t feature_extraction_grid_bias = 0;
    std::size_t feature_extraction_scalar_bias = 0;
};

ParamReport param_report(const NetworkSpec& spec, const NetworkState& state);

// ---- serialization ----------------------------------------------------

std::string network_spec_to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const std::string& text);

/// Flat blob: u32 little-endian spec-JSON length, the JSON bytes, then all
/// parameters as little-endian 8-byte floats in canonical order.
void save_model(const std::string& path, const NetworkSpec& spec, const NetworkState& state);
std::pair<NetworkSpec, NetworkState> load_model(const std::string& path);

}  // namespace morphkit

#endif
