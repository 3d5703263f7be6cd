#ifndef MORPHKIT_TRAINING_HPP
#define MORPHKIT_TRAINING_HPP

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "morphkit/layers.hpp"

namespace morphkit {

enum class LossKind { MSE, CrossEntropy };

enum class Decision { Dilation, Erosion, Undecided };

struct TrainConfig {
    double learning_rate = 1.0;
    int batch_size = 64;
    int epochs = 20;
    LossKind loss = LossKind::MSE;
    std::uint64_t seed = 0;
    SmoothSignKind smooth = SmoothSignKind::SoftSign;
    bool shuffle = true;
    int workers = 0;  // 0: resolve from MORPHKIT_WORKERS / hardware
    double divergence_limit = 1e6;

    // optional early stopping, both off by default
    double stop_loss = -1.0;  // stop once epoch mean loss drops below
    double stop_accuracy = -1.0;  // stop once held-out accuracy reaches
    const std::vector<Image>* eval_inputs = nullptr;
    const std::vector<int>* eval_labels = nullptr;
};

struct TrainReport {
    std::vector<double> epoch_loss;  // mean loss per epoch
    double final_loss = 0.0;
    int epochs_run = 0;
    double wall_seconds = 0.0;  // timing only; excluded from bitwise checks
    std::vector<double> eval_accuracy;  // one entry per evaluated epoch
    double best_accuracy = -1.0;
    int best_epoch = -1;
};

/// Raised when the loss goes non-finite or beyond the divergence limit.
struct TrainDivergence : std::runtime_error {
    TrainDivergence(const std::string& what, int epoch_, int step_, int layer_)
        : std::runtime_error(what), epoch(epoch_), step(step_), layer(layer_) {}
    int epoch;
    int step;
    int layer;  // first layer with a non-finite value, -1 if none found
};

// ---- losses -----------------------------------------------------------

/// Mean over batch and pixels of squared difference; grad = 2(pred-target)/N
/// with N the total element count.
std::pair<double, std::vector<Image>> mse_loss(const std::vector<Image>& pred,
                                               const std::vector<Image>& target);

/// Mean negative log-probability of the true class; grads are with respect
/// to the pre-softmax logits: (probs - onehot) / batch.
std::pair<double, std::vector<std::vector<double>>> cross_entropy_loss(
    const std::vector<std::vector<double>>& probs, const std::vector<int>& labels);

/// param -= lr * grad, elementwise over every trainable tensor.
void sgd_update(NetworkState& params, const NetworkState& grads, double learning_rate);

// ---- training loop ----------------------------------------------------

/// Either `targets` (MSE, image-to-image) or `labels` (cross-entropy) is
/// set, matching cfg.loss.
struct TrainData {
    const std::vector<Image>* inputs = nullptr;
    const std::vector<Image>* targets = nullptr;
    const std::vector<int>* labels = nullptr;
};

/// Mini-batch SGD; deterministic given (seed, dataset order, config).
TrainReport train(const NetworkSpec& spec, NetworkState& state, const TrainData& data,
                  const TrainConfig& cfg);

/// Fraction of samples whose argmax class matches the label.
double evaluate_accuracy(const NetworkSpec& spec, const NetworkState& state,
                         const std::vector<Image>& inputs, const std::vector<int>& labels);

/// Mean loss over a paired set without updating parameters.
double evaluate_mse(const NetworkSpec& spec, const NetworkState& state,
                    const std::vector<Image>& inputs, const std::vector<Image>& targets);

// ---- gradient checker -------------------------------------------------

struct GradCheckSample {
    Image input;
    std::optional<Image> target;  // MSE
    int label = -1;               // cross-entropy
};

/// Central finite differences over every scalar parameter (a seeded random
/// subset above 10k parameters) against the analytic gradients. Returns the
/// worst relative error |a-b| / max(|a|,|b|,1e-8).
double finite_diff_check(const NetworkSpec& spec, const NetworkState& state,
                         const GradCheckSample& sample, LossKind loss, double step = 1e-5,
                         std::uint64_t subset_seed = 0);

// ---- SE evaluation ----------------------------------------------------

/// Elementwise threshold to a flat {0,1} SE.
StructuringElement binarize_se(const StructuringElement& se, double threshold = 0.5);

bool se_exact_match(const StructuringElement& learned, const StructuringElement& truth);

/// Dilation if smooth_sign(a) > 0.5, Erosion if < -0.5, else Undecided.
Decision decide_operation(double a, SmoothSignKind kind);
const char* decision_name(Decision d);

}  // namespace morphkit

#endif
