#include "morphkit/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <thread>

namespace morphkit {

namespace {

std::vector<std::span<double>> param_spans(NetworkState& state) {
    std::vector<std::span<double>> spans;
    for_each_param(state, [&spans](std::span<double> p) { spans.push_back(p); });
    return spans;
}

int resolve_workers(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("MORPHKIT_WORKERS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Fisher-Yates with the counter-based generator; std::shuffle is not
// bitwise portable across standard libraries.
void shuffle_order(std::vector<std::size_t>& order, Rng& rng) {
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = rng.next_below(i);
        std::swap(order[i - 1], order[j]);
    }
}

struct SampleLoss {
    double loss = 0.0;
    Activation grad;  // d loss / d network output (or logits for CE)
};

SampleLoss sample_loss_grad(const Activation& out, const TrainData& data, std::size_t sample,
                            LossKind loss, double inv_batch) {
    SampleLoss r;
    if (loss == LossKind::MSE) {
        const Image& target = (*data.targets)[sample];
        if (out.maps.size() != 1 || !out.maps[0].same_shape(target))
            throw std::domain_error("mse loss: prediction/target shape mismatch");
        const Image& pred = out.maps[0];
        const double inv_n = inv_batch / static_cast<double>(pred.size());
        r.grad.maps.resize(1);
        r.grad.maps[0] = Image(pred.rows, pred.cols);
        double acc = 0.0;
        for (std::size_t i = 0; i < pred.pix.size(); ++i) {
            const double d = pred.pix[i] - target.pix[i];
            acc += d * d;
            r.grad.maps[0].pix[i] = 2.0 * d * inv_n;
        }
        r.loss = acc / static_cast<double>(pred.size()) * inv_batch;
    } else {
        const int label = (*data.labels)[sample];
        if (!out.is_vec || label < 0 || label >= static_cast<int>(out.vec.size()))
            throw std::domain_error("cross-entropy loss: label out of range");
        r.grad.is_vec = true;
        r.grad.vec = out.vec;
        for (double& v : r.grad.vec) v *= inv_batch;
        r.grad.vec[static_cast<std::size_t>(label)] -= inv_batch;
        const double p = std::max(out.vec[static_cast<std::size_t>(label)], 1e-300);
        r.loss = -std::log(p) * inv_batch;
    }
    return r;
}

int first_nonfinite_layer(const NetworkState& state) {
    for (std::size_t li = 0; li < state.size(); ++li) {
        bool bad = false;
        NetworkState one = {state[li]};
        for_each_param(one, [&bad](std::span<const double> p) {
            for (double v : p)
                if (!std::isfinite(v)) bad = true;
        });
        if (bad) return static_cast<int>(li);
    }
    return -1;
}

}  // namespace

// ---- losses -----------------------------------------------------------

std::pair<double, std::vector<Image>> mse_loss(const std::vector<Image>& pred,
                                               const std::vector<Image>& target) {
    if (pred.size() != target.size() || pred.empty())
        throw std::domain_error("mse_loss: batch size mismatch");
    std::vector<Image> grads(pred.size());
    std::size_t n_total = 0;
    for (std::size_t s = 0; s < pred.size(); ++s) {
        if (!pred[s].same_shape(target[s])) throw std::domain_error("mse_loss: shape mismatch");
        n_total += pred[s].size();
    }
    double acc = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n_total);
    for (std::size_t s = 0; s < pred.size(); ++s) {
        grads[s] = Image(pred[s].rows, pred[s].cols);
        for (std::size_t i = 0; i < pred[s].pix.size(); ++i) {
            const double d = pred[s].pix[i] - target[s].pix[i];
            acc += d * d;
            grads[s].pix[i] = 2.0 * d * inv_n;
        }
    }
    return {acc * inv_n, std::move(grads)};
}

std::pair<double, std::vector<std::vector<double>>> cross_entropy_loss(
    const std::vector<std::vector<double>>& probs, const std::vector<int>& labels) {
    if (probs.size() != labels.size() || probs.empty())
        throw std::domain_error("cross_entropy_loss: batch size mismatch");
    const double inv_b = 1.0 / static_cast<double>(probs.size());
    std::vector<std::vector<double>> grads(probs.size());
    double acc = 0.0;
    for (std::size_t s = 0; s < probs.size(); ++s) {
        const int label = labels[s];
        if (label < 0 || label >= static_cast<int>(probs[s].size()))
            throw std::domain_error("cross_entropy_loss: label out of range");
        grads[s] = probs[s];
        for (double& v : grads[s]) v *= inv_b;
        grads[s][static_cast<std::size_t>(label)] -= inv_b;
        acc -= std::log(std::max(probs[s][static_cast<std::size_t>(label)], 1e-300));
    }
    return {acc * inv_b, std::move(grads)};
}

void sgd_update(NetworkState& params, const NetworkState& grads, double learning_rate) {
    auto ps = param_spans(params);
    auto gs = param_spans(const_cast<NetworkState&>(grads));
    if (ps.size() != gs.size()) throw std::domain_error("sgd_update: tensor layout mismatch");
    for (std::size_t t = 0; t < ps.size(); ++t) {
        if (ps[t].size() != gs[t].size()) throw std::domain_error("sgd_update: shape mismatch");
        for (std::size_t i = 0; i < ps[t].size(); ++i) ps[t][i] -= learning_rate * gs[t][i];
    }
}

// ---- training loop ----------------------------------------------------

TrainReport train(const NetworkSpec& spec, NetworkState& state, const TrainData& data,
                  const TrainConfig& cfg) {
    if (!data.inputs || data.inputs->empty()) throw std::invalid_argument("train: empty dataset");
    if (cfg.loss == LossKind::MSE && !data.targets)
        throw std::invalid_argument("train: MSE loss needs targets");
    if (cfg.loss == LossKind::CrossEntropy && !data.labels)
        throw std::invalid_argument("train: cross-entropy loss needs labels");
    if (cfg.learning_rate <= 0 || cfg.batch_size < 1 || cfg.epochs < 1)
        throw std::invalid_argument("train: bad config");

    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n = data.inputs->size();
    const int workers = resolve_workers(cfg.workers);

    // Fixed chunking keeps the floating-point reduction order independent
    // of the worker count.
    constexpr std::size_t kChunk = 8;
    const std::size_t max_chunks = (static_cast<std::size_t>(cfg.batch_size) + kChunk - 1) / kChunk;

    std::vector<NetworkState> chunk_grads;
    chunk_grads.reserve(max_chunks);
    for (std::size_t i = 0; i < max_chunks; ++i) chunk_grads.push_back(zero_like(state));
    NetworkState total_grad = zero_like(state);

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    TrainReport report;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.shuffle) {
            Rng rng(cfg.seed + static_cast<std::uint64_t>(epoch));
            shuffle_order(order, rng);
        }

        double epoch_loss_sum = 0.0;
        int step = 0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size), ++step) {
            const std::size_t bs = std::min(static_cast<std::size_t>(cfg.batch_size), n - start);
            const std::size_t n_chunks = (bs + kChunk - 1) / kChunk;
            const double inv_batch = 1.0 / static_cast<double>(bs);

            std::vector<double> chunk_loss(n_chunks, 0.0);
            auto run_chunk = [&](std::size_t ci) {
                NetworkState& grad = chunk_grads[ci];
                for_each_param(grad,
                               [](std::span<double> p) { std::fill(p.begin(), p.end(), 0.0); });
                ForwardTrace trace;
                const std::size_t lo = start + ci * kChunk;
                const std::size_t hi = std::min(lo + kChunk, start + bs);
                for (std::size_t k = lo; k < hi; ++k) {
                    const std::size_t sample = order[k];
                    // per-sample dropout stream, independent of batching
                    Rng sample_rng = Rng::derive(
                        cfg.seed + 0x9e3779b9ULL * static_cast<std::uint64_t>(epoch), k);
                    Activation out = network_forward(spec, state, (*data.inputs)[sample], true,
                                                     sample_rng, &trace);
                    SampleLoss sl = sample_loss_grad(out, data, sample, cfg.loss, inv_batch);
                    chunk_loss[ci] += sl.loss;
                    network_backward(spec, state, trace, sl.grad,
                                     cfg.loss == LossKind::CrossEntropy, grad);
                }
            };

            if (workers <= 1 || n_chunks == 1) {
                for (std::size_t ci = 0; ci < n_chunks; ++ci) run_chunk(ci);
            } else {
                std::vector<std::thread> pool;
                std::atomic<std::size_t> next{0};
                const int t_count = std::min<std::size_t>(static_cast<std::size_t>(workers), n_chunks);
                for (int t = 0; t < t_count; ++t)
                    pool.emplace_back([&] {
                        for (;;) {
                            const std::size_t ci = next.fetch_add(1);
                            if (ci >= n_chunks) return;
                            run_chunk(ci);
                        }
                    });
                for (auto& th : pool) th.join();
            }

            // deterministic reduction in chunk order
            double batch_loss = 0.0;
            for (std::size_t ci = 0; ci < n_chunks; ++ci) batch_loss += chunk_loss[ci];
            auto ts = param_spans(total_grad);
            for_each_param(total_grad,
                           [](std::span<double> p) { std::fill(p.begin(), p.end(), 0.0); });
            for (std::size_t ci = 0; ci < n_chunks; ++ci) {
                auto cs = param_spans(chunk_grads[ci]);
                for (std::size_t t = 0; t < ts.size(); ++t)
                    for (std::size_t i = 0; i < ts[t].size(); ++i) ts[t][i] += cs[t][i];
            }

            if (!std::isfinite(batch_loss) || batch_loss > cfg.divergence_limit) {
                throw TrainDivergence(
                    "training diverged (loss " + std::to_string(batch_loss) + ") at epoch " +
                        std::to_string(epoch + 1) + ", step " + std::to_string(step + 1),
                    epoch + 1, step + 1, first_nonfinite_layer(state));
            }

            sgd_update(state, total_grad, cfg.learning_rate);
            epoch_loss_sum += batch_loss * static_cast<double>(bs);
        }

        const double epoch_loss = epoch_loss_sum / static_cast<double>(n);
        report.epoch_loss.push_back(epoch_loss);
        report.epochs_run = epoch + 1;

        bool stop = false;
        if (cfg.eval_inputs && cfg.eval_labels) {
            const double acc =
                evaluate_accuracy(spec, state, *cfg.eval_inputs, *cfg.eval_labels);
            report.eval_accuracy.push_back(acc);
            if (acc > report.best_accuracy) {
                report.best_accuracy = acc;
                report.best_epoch = epoch + 1;
            }
            if (cfg.stop_accuracy > 0 && acc >= cfg.stop_accuracy) stop = true;
        }
        if (cfg.stop_loss > 0 && epoch_loss < cfg.stop_loss) stop = true;
        if (stop) break;
    }

    report.final_loss = report.epoch_loss.empty() ? 0.0 : report.epoch_loss.back();
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

double evaluate_accuracy(const NetworkSpec& spec, const NetworkState& state,
                         const std::vector<Image>& inputs, const std::vector<int>& labels) {
    if (inputs.size() != labels.size() || inputs.empty())
        throw std::invalid_argument("evaluate_accuracy: bad dataset");
    Rng rng(0);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Activation out = network_forward(spec, state, inputs[i], false, rng, nullptr);
        const auto it = std::max_element(out.vec.begin(), out.vec.end());
        if (static_cast<int>(it - out.vec.begin()) == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(inputs.size());
}

double evaluate_mse(const NetworkSpec& spec, const NetworkState& state,
                    const std::vector<Image>& inputs, const std::vector<Image>& targets) {
    if (inputs.size() != targets.size() || inputs.empty())
        throw std::invalid_argument("evaluate_mse: bad dataset");
    Rng rng(0);
    double acc = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Activation out = network_forward(spec, state, inputs[i], false, rng, nullptr);
        acc += mse(out.maps.at(0), targets[i]);
    }
    return acc / static_cast<double>(inputs.size());
}

// ---- gradient checker -------------------------------------------------

namespace {

double loss_only(const NetworkSpec& spec, const NetworkState& state,
                 const GradCheckSample& sample, LossKind loss) {
    Rng rng(0);
    Activation out = network_forward(spec, state, sample.input, false, rng, nullptr);
    if (loss == LossKind::MSE) {
        return mse(out.maps.at(0), *sample.target);
    }
    const double p = std::max(out.vec.at(static_cast<std::size_t>(sample.label)), 1e-300);
    return -std::log(p);
}

}  // namespace

double finite_diff_check(const NetworkSpec& spec, const NetworkState& state,
                         const GradCheckSample& sample, LossKind loss, double step,
                         std::uint64_t subset_seed) {
    NetworkState work = state;

    // analytic gradient of the per-sample loss
    NetworkState grad = zero_like(work);
    {
        Rng rng(0);
        ForwardTrace trace;
        Activation out = network_forward(spec, work, sample.input, false, rng, &trace);
        Activation g;
        if (loss == LossKind::MSE) {
            const Image& target = *sample.target;
            const Image& pred = out.maps.at(0);
            g.maps.resize(1);
            g.maps[0] = Image(pred.rows, pred.cols);
            const double inv_n = 1.0 / static_cast<double>(pred.size());
            for (std::size_t i = 0; i < pred.pix.size(); ++i)
                g.maps[0].pix[i] = 2.0 * (pred.pix[i] - target.pix[i]) * inv_n;
        } else {
            g.is_vec = true;
            g.vec = out.vec;
            g.vec[static_cast<std::size_t>(sample.label)] -= 1.0;
        }
        network_backward(spec, work, trace, g, loss == LossKind::CrossEntropy, grad);
    }

    auto ws = param_spans(work);
    auto gs = param_spans(grad);

    std::size_t total = 0;
    for (const auto& s : ws) total += s.size();

    // flat index -> (tensor, offset)
    auto locate = [&ws](std::size_t flat) {
        std::size_t t = 0;
        while (flat >= ws[t].size()) {
            flat -= ws[t].size();
            ++t;
        }
        return std::pair<std::size_t, std::size_t>(t, flat);
    };

    std::vector<std::size_t> indices;
    constexpr std::size_t kExhaustiveLimit = 10000;
    constexpr std::size_t kSubset = 2000;
    if (total <= kExhaustiveLimit) {
        indices.resize(total);
        for (std::size_t i = 0; i < total; ++i) indices[i] = i;
    } else {
        Rng rng(subset_seed + 0x5eedULL);
        indices.reserve(kSubset);
        for (std::size_t i = 0; i < kSubset; ++i) indices.push_back(rng.next_below(total));
    }

    double worst = 0.0;
    for (std::size_t flat : indices) {
        const auto [t, off] = locate(flat);
        const double saved = ws[t][off];
        ws[t][off] = saved + step;
        const double up = loss_only(spec, work, sample, loss);
        ws[t][off] = saved - step;
        const double down = loss_only(spec, work, sample, loss);
        ws[t][off] = saved;

        const double fd = (up - down) / (2.0 * step);
        const double an = gs[t][off];
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        worst = std::max(worst, std::abs(fd - an) / denom);
    }
    return worst;
}

// ---- SE evaluation ----------------------------------------------------

StructuringElement binarize_se(const StructuringElement& se, double threshold) {
    StructuringElement out = se;
    out.kind = SeKind::Flat;
    for (double& w : out.weights) w = (w >= threshold) ? 1.0 : 0.0;
    return out;
}

bool se_exact_match(const StructuringElement& learned, const StructuringElement& truth) {
    if (learned.shape.height != truth.shape.height || learned.shape.width != truth.shape.width)
        throw std::domain_error("se_exact_match: shape mismatch");
    return learned.weights == truth.weights;
}

Decision decide_operation(double a, SmoothSignKind kind) {
    const double s = smooth_sign(a, kind);
    if (s > 0.5) return Decision::Dilation;
    if (s < -0.5) return Decision::Erosion;
    return Decision::Undecided;
}

const char* decision_name(Decision d) {
    switch (d) {
        case Decision::Dilation: return "dilation";
        case Decision::Erosion: return "erosion";
        case Decision::Undecided: return "undecided";
    }
    return "?";
}

}  // namespace morphkit
