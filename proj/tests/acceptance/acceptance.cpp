// Acceptance gate: one criterion per invocation (`acceptance <1..9>`), or
// all in sequence with no argument. Each criterion prints exactly one
// PASS/FAIL line; the exit code is the number of failed criteria.
//
// Fast numerical criteria (1, 2, 8, 9) run in-process; the training
// experiments (3-7) shell out to the CLI so the gate exercises the same
// entry points, manifests, and exit-code contracts users see.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include <morphkit/datasets.hpp>
#include <morphkit/layers.hpp>
#include <morphkit/rng.hpp>
#include <morphkit/soft_morph.hpp>
#include <morphkit/training.hpp>

namespace fs = std::filesystem;
using namespace morphkit;

#ifndef MORPHKIT_CLI_PATH
#define MORPHKIT_CLI_PATH "morphkit"
#endif

namespace {

std::string cli_path() {
    if (const char* env = std::getenv("MORPHKIT_CLI")) return env;
    return MORPHKIT_CLI_PATH;
}

fs::path scratch_dir() {
    auto dir = fs::temp_directory_path() / "morphkit_acceptance";
    fs::create_directories(dir);
    return dir;
}

/// Runs one CLI command, echoing its output; returns the exit code.
int run_cli(const std::string& args) {
    const std::string cmd = cli_path() + " " + args + " 2>&1";
    std::fprintf(stderr, "    $ %s\n", cmd.c_str());
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return -1;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, pipe)) std::fputs(buf, stderr);
    const int status = pclose(pipe);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Image random_image(int rows, int cols, Rng& rng) {
    Image img(rows, cols);
    for (auto& v : img.pix) v = rng.uniform(0.0, 1.0);
    return img;
}

// ---- criterion 1: gradient correctness --------------------------------

bool criterion_gradients() {
    Rng rng(1);
    const double tol = 1e-4;
    double worst = 0.0;
    auto check_mse = [&](const NetworkSpec& spec, std::uint64_t seed) {
        Rng init(seed);
        auto state = init_state(spec, init);
        GradCheckSample s;
        s.input = random_image(8, 8, init);
        s.target = random_image(8, 8, init);
        worst = std::max(worst, finite_diff_check(spec, state, s, LossKind::MSE));
    };

    // single morphological layers, every form x mode
    for (SeForm form : {SeForm::Product, SeForm::Additive})
        for (MorphMode mode : {MorphMode::Dilate, MorphMode::Erode})
            check_mse(build_stacked({mode}, {3, 3}, form, 8, 8), 11);

    // verbatim erosion convention
    check_mse(build_stacked({MorphMode::Erode}, {3, 3}, SeForm::Additive, 8, 8,
                            ErodeConvention::VerbatimEq14),
              12);

    // adaptive layer, both smooth signs
    for (SmoothSignKind k : {SmoothSignKind::SoftSign, SmoothSignKind::Tanh})
        check_mse(build_adaptive_single({3, 3}, SeForm::Product, k, 8, 8), 13);

    // composed: erosion -> dilation -> subtraction (the residual block)
    {
        NetworkSpec spec;
        spec.input_rows = spec.input_cols = 8;
        spec.layers = {
            {.kind = LayerKind::Erosion, .se_rows = 3, .se_cols = 3, .form = SeForm::Additive},
            {.kind = LayerKind::Dilation, .se_rows = 3, .se_cols = 3, .form = SeForm::Additive},
            {.kind = LayerKind::Subtraction},
        };
        check_mse(spec, 14);
    }

    // composed: adaptive -> erosion
    {
        NetworkSpec spec;
        spec.input_rows = spec.input_cols = 8;
        spec.layers = {
            {.kind = LayerKind::Adaptive, .se_rows = 3, .se_cols = 3,
             .form = SeForm::Product, .smooth = SmoothSignKind::Tanh},
            {.kind = LayerKind::Erosion, .se_rows = 3, .se_cols = 3, .form = SeForm::Additive},
        };
        check_mse(spec, 15);
    }

    // dense + softmax classifier head (cross-entropy), and a full small
    // residual stack ending in the classifier head
    {
        NetworkSpec spec;
        spec.input_rows = spec.input_cols = 8;
        spec.layers = {
            {.kind = LayerKind::Flatten},
            {.kind = LayerKind::Dense, .fc_width = 5},
            {.kind = LayerKind::Softmax},
        };
        Rng init(16);
        auto state = init_state(spec, init);
        GradCheckSample s;
        s.input = random_image(8, 8, init);
        s.label = 2;
        worst = std::max(worst,
                         finite_diff_check(spec, state, s, LossKind::CrossEntropy));
    }
    {
        NetworkSpec spec;
        spec.input_rows = spec.input_cols = 8;
        spec.layers = {
            {.kind = LayerKind::Erosion, .se_rows = 3, .se_cols = 3, .form = SeForm::Product},
            {.kind = LayerKind::Flatten},
            {.kind = LayerKind::Dense, .fc_width = 4},
            {.kind = LayerKind::Softmax},
        };
        Rng init(17);
        auto state = init_state(spec, init);
        GradCheckSample s;
        s.input = random_image(8, 8, init);
        s.label = 1;
        worst = std::max(worst,
                         finite_diff_check(spec, state, s, LossKind::CrossEntropy));
    }

    std::fprintf(stderr, "    worst relative error %.3e (tolerance %.1e)\n", worst, tol);
    return worst < tol;
}

// ---- criterion 2: soft/hard sandwich ----------------------------------

bool criterion_sandwich() {
    Rng rng(2);
    int windows_pr = 0, windows_ad = 0, bad = 0;

    auto exponent_value = [](const StructuringElement& se, const Tap& t, int idx,
                             MorphMode mode) {
        const double w = se.weights[static_cast<std::size_t>(idx)];
        if (se.form == SeForm::Product) return mode == MorphMode::Dilate ? w * t.value : w * t.value;
        return mode == MorphMode::Dilate ? w + t.value : t.value - w;
    };

    auto check_form = [&](const StructuringElement& se, int& counter) {
        while (counter < 1000) {
            Image img = random_image(7, 7, rng);
            Image hard_d = hard_morph(img, se, MorphMode::Dilate);
            for (int r = 0; r < img.rows; ++r)
                for (int c = 0; c < img.cols; ++c) {
                    auto win = window_at(img, r, c, se.shape);
                    const double n = win.in_bounds_count();
                    // the extremum of the exact quantities the smooth
                    // operator pools, over the in-bounds taps
                    double hmax = -1e300, hmin = 1e300;
                    for (int i = 0; i < static_cast<int>(win.taps.size()); ++i) {
                        if (!win.taps[static_cast<std::size_t>(i)].in_bounds) continue;
                        hmax = std::max(hmax, exponent_value(se, win.taps[static_cast<std::size_t>(i)], i, MorphMode::Dilate));
                        hmin = std::min(hmin, exponent_value(se, win.taps[static_cast<std::size_t>(i)], i, MorphMode::Erode));
                    }
                    const double sd = soft_morph(win, se, MorphMode::Dilate);
                    const double sE = soft_morph(win, se, MorphMode::Erode);
                    const bool ok = sd >= hmax - 1e-12 && sd <= hmax + std::log(n) + 1e-12 &&
                                    sE <= hmin + 1e-12 && sE >= hmin - std::log(n) - 1e-12 &&
                                    // whole-image hard dilation bounds hold too
                                    sd >= hard_d.at(r, c) - 1e-12;
                    if (!ok) ++bad;
                    ++counter;
                }
        }
    };

    check_form(builtin_se("diamond3"), windows_pr);            // product / flat
    auto nf = builtin_se("nonflat3");
    check_form(nf, windows_ad);                                // additive / non-flat
    std::fprintf(stderr, "    %d product + %d additive windows, %d violations\n",
                 windows_pr, windows_ad, bad);
    return bad == 0;
}

// ---- criteria 3-7: CLI experiments ------------------------------------

bool criterion_binary_recovery(const fs::path& out) {
    bool ok = true;
    ok &= run_cli("learn-se --se diamond3 --op dilate --form product --targets hard"
                  " --pairs 2000 --epochs 20 --lr 7.5 --batch 64 --restarts 10 --need 9"
                  " --seed 1 -o " + (out / "c3_diamond3").string()) == 0;
    ok &= run_cli("learn-se --se hline5 --op dilate --form product --targets hard"
                  " --pairs 2000 --epochs 20 --lr 7.5 --batch 64 --restarts 10 --need 9"
                  " --seed 1 -o " + (out / "c3_hline5").string()) == 0;
    ok &= run_cli("learn-se --se cross5 --op dilate --form product --targets hard"
                  " --pairs 2000 --epochs 20 --lr 7.5 --batch 64 --restarts 10 --need 7"
                  " --seed 1 -o " + (out / "c3_cross5_e20").string()) == 0;
    ok &= run_cli("learn-se --se cross5 --op dilate --form product --targets hard"
                  " --pairs 2000 --epochs 100 --lr 7.5 --batch 64 --restarts 10 --need 9"
                  " --seed 1 -o " + (out / "c3_cross5_e100").string()) == 0;
    return ok;
}

bool criterion_nonflat_recovery(const fs::path& out) {
    bool ok = true;
    ok &= run_cli("learn-se --se nonflat3 --op dilate --form additive --targets soft"
                  " --pairs 2000 --epochs 20 --lr 1.0 --batch 8 --restarts 10"
                  " --seed 1 -o " + (out / "c4_dilate").string()) == 0;
    ok &= run_cli("learn-se --se nonflat3 --op erode --form additive --targets soft"
                  " --pairs 2000 --epochs 20 --lr 0.5 --batch 2 --restarts 10"
                  " --seed 1 -o " + (out / "c4_erode").string()) == 0;
    return ok;
}

bool criterion_detect_op(const fs::path& out) {
    int correct = 0;
    for (const char* op : {"dilate", "erode"})
        for (const char* smooth : {"softsign", "tanh"})
            for (int restart = 0; restart < 10; ++restart) {
                const std::string tag = std::string("c5_") + op + "_" + smooth + "_" +
                                        std::to_string(restart);
                if (run_cli(std::string("detect-op --op ") + op + " --smooth " + smooth +
                            " --se diamond3 --targets soft --pairs 2000 --epochs 20"
                            " --lr 10 --batch 64 --seed " + std::to_string(restart + 1) +
                            " -o " + (out / tag).string()) == 0)
                    ++correct;
            }
    std::fprintf(stderr, "    %d/40 correct decisions with final MSE <= 1e-3\n", correct);
    return correct == 40;
}

bool criterion_compound(const fs::path& out) {
    bool ok = true;
    ok &= run_cli("learn-compound --ops erode:diamond3,dilate:diamond3 --se diamond3"
                  " --form product --targets soft --pairs 2000 --epochs 20 --lr 10"
                  " --batch 64 --target-mse 1e-3 --seed 1 -o " + (out / "c6_opening").string()) == 0;
    ok &= run_cli("learn-compound --ops dilate:diamond3,erode:diamond3 --se diamond3"
                  " --form product --targets soft --pairs 2000 --epochs 20 --lr 10"
                  " --batch 64 --target-mse 1e-3 --seed 1 -o " + (out / "c6_closing").string()) == 0;
    return ok;
}

bool criterion_classifier(const fs::path& out) {
    bool ok = true;
    ok &= run_cli("train-classifier --dataset scgs --train 10000 --test 2500 --filters 1"
                  " --lr 1e-4 --epochs 100 --batch 64 --target-accuracy 0.95"
                  " --seed 11 -o " + (out / "c7_scgs").string()) == 0;
    ok &= run_cli("train-classifier --dataset digits --train 10000 --test 2000 --filters 1"
                  " --lr 1e-4 --epochs 100 --batch 64 --target-accuracy 0.93"
                  " --seed 11 -o " + (out / "c7_digits").string()) == 0;
    return ok;
}

// ---- criterion 8: determinism -----------------------------------------

nlohmann::json manifest_without_timing(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    auto j = nlohmann::json::parse(in);
    j.erase("wall_seconds");
    return j;
}

bool criterion_determinism(const fs::path& out) {
    const std::string base = "detect-op --op erode --smooth tanh --se diamond3"
                             " --targets soft --pairs 200 --epochs 5 --lr 10 --batch 64"
                             " --seed 9 -o ";
    if (run_cli(base + (out / "c8_a").string()) != 0) return false;
    if (run_cli(base + (out / "c8_b").string()) != 0) return false;
    if (run_cli(base + (out / "c8_c").string() + " --workers 3") != 0) return false;
    auto a = manifest_without_timing(out / "c8_a");
    auto b = manifest_without_timing(out / "c8_b");
    auto c = manifest_without_timing(out / "c8_c");
    c["config"].erase("workers");
    a["config"].erase("workers");
    const bool rerun_same = a.dump() == b.dump();
    b["config"].erase("workers");
    const bool workers_same = b.dump() == c.dump();
    std::fprintf(stderr, "    rerun identical: %s, worker-count independent: %s\n",
                 rerun_same ? "yes" : "no", workers_same ? "yes" : "no");
    return rerun_same && workers_same;
}

// ---- criterion 9: format round-trips ----------------------------------

bool criterion_formats(const fs::path& out) {
    const fs::path dir = out / "c9";
    fs::create_directories(dir);
    bool ok = true;
    auto expect = [&](bool cond, const char* what) {
        if (!cond) {
            std::fprintf(stderr, "    round-trip failure: %s\n", what);
            ok = false;
        }
    };

    // IDX: half-quantization-step accuracy, then byte-stable re-write
    auto set = gen_digits(40, 77);
    const auto ip = (dir / "img.idx").string(), lp = (dir / "lab.idx").string();
    write_idx(ip, lp, set);
    auto back = load_idx(ip, lp);
    expect(back.images.size() == set.images.size() && back.labels == set.labels,
           "IDX counts/labels");
    double worst = 0.0, out_of_range = 0.0;
    for (std::size_t i = 0; i < set.images.size(); ++i)
        for (std::size_t p = 0; p < set.images[i].pix.size(); ++p) {
            worst = std::max(worst, std::abs(set.images[i].pix[p] - back.images[i].pix[p]));
            const double v = back.images[i].pix[p];
            out_of_range = std::max({out_of_range, -v, v - 1.0});
        }
    expect(worst <= 0.5 / 255.0 + 1e-12, "IDX pixel quantization bound");
    expect(out_of_range <= 0.0, "IDX loader [0,1] range");
    const auto ip2 = (dir / "img2.idx").string(), lp2 = (dir / "lab2.idx").string();
    write_idx(ip2, lp2, back);
    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        std::ostringstream s;
        s << f.rdbuf();
        return s.str();
    };
    expect(slurp(ip) == slurp(ip2) && slurp(lp) == slurp(lp2), "IDX byte-stable re-write");

    // corrupted IDX header must be rejected
    {
        std::string bytes = slurp(ip);
        bytes[2] ^= 0x40;  // clobber the magic
        std::ofstream(dir / "bad.idx", std::ios::binary) << bytes;
        bool threw = false;
        try {
            load_idx((dir / "bad.idx").string(), lp);
        } catch (const std::exception&) {
            threw = true;
        }
        expect(threw, "corrupted IDX magic rejected");
        bool threw_trunc = false;
        std::ofstream(dir / "trunc.idx", std::ios::binary) << bytes.substr(0, 40);
        try {
            load_idx((dir / "trunc.idx").string(), lp);
        } catch (const std::exception&) {
            threw_trunc = true;
        }
        expect(threw_trunc, "truncated IDX rejected");
    }

    // PGM
    {
        Rng rng(9);
        Image img = random_image(17, 23, rng);
        write_pgm(img, (dir / "img.pgm").string());
        Image back_img = read_pgm((dir / "img.pgm").string());
        expect(back_img.rows == img.rows && back_img.cols == img.cols, "PGM shape");
        double w = 0.0;
        for (std::size_t p = 0; p < img.pix.size(); ++p)
            w = std::max(w, std::abs(img.pix[p] - back_img.pix[p]));
        expect(w <= 0.5 / 255.0 + 1e-12, "PGM quantization bound");
    }

    // SE JSON: lossless double round-trip
    {
        auto se = builtin_se("nonflat3");
        se.weights[4] = 0.1234567890123456789;
        export_se_json(se, (dir / "se.json").string());
        auto back_se = import_se_json((dir / "se.json").string());
        expect(back_se.shape.height == se.shape.height &&
                   back_se.shape.width == se.shape.width &&
                   back_se.weights == se.weights && back_se.form == se.form &&
                   back_se.kind == se.kind,
               "SE JSON lossless round-trip");
    }

    // model blob: bitwise parameter round-trip
    {
        auto spec = build_adaptive_single({3, 3}, SeForm::Product, SmoothSignKind::Tanh, 8, 8);
        Rng rng(10);
        auto state = init_state(spec, rng);
        save_model((dir / "model.bin").string(), spec, state);
        auto [spec2, state2] = load_model((dir / "model.bin").string());
        std::vector<double> flat_a, flat_b;
        for_each_param(static_cast<const NetworkState&>(state),
                       [&](std::span<const double> s) { flat_a.insert(flat_a.end(), s.begin(), s.end()); });
        for_each_param(static_cast<const NetworkState&>(state2),
                       [&](std::span<const double> s) { flat_b.insert(flat_b.end(), s.begin(), s.end()); });
        expect(flat_a == flat_b && network_spec_to_json(spec) == network_spec_to_json(spec2),
               "model blob bitwise round-trip");
        // corrupted blob must be rejected
        std::string bytes = slurp((dir / "model.bin").string());
        std::ofstream(dir / "model_bad.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
        bool threw = false;
        try {
            load_model((dir / "model_bad.bin").string());
        } catch (const std::exception&) {
            threw = true;
        }
        expect(threw, "corrupted model blob rejected");
    }
    return ok;
}

struct Criterion {
    int id;
    const char* label;
    bool (*fn)(const fs::path&);
};

bool c1(const fs::path&) { return criterion_gradients(); }
bool c2(const fs::path&) { return criterion_sandwich(); }

const Criterion kCriteria[] = {
    {1, "gradient correctness (analytic vs central differences, every layer kind)", c1},
    {2, "soft/hard sandwich over 1000 random windows per form", c2},
    {3, "binary SE recovery (diamond3/hline5 >=9/10, cross5 >=7/10 then >=9/10)", criterion_binary_recovery},
    {4, "non-flat SE recovery (mean taxicab <= 0.2, MSE <= 1e-3)", criterion_nonflat_recovery},
    {5, "operation detection 40/40 with final MSE <= 1e-3", criterion_detect_op},
    {6, "compound opening/closing to MSE <= 1e-3 within 20 epochs", criterion_compound},
    {7, "residual classifier: shapes >= 95%, digits >= 93%", criterion_classifier},
    {8, "determinism: identical reports across reruns and worker counts", criterion_determinism},
    {9, "format round-trips (IDX, PGM, SE JSON, model blob) + corruption rejection", criterion_formats},
};

}  // namespace

int main(int argc, char** argv) {
    const fs::path out = scratch_dir();
    int requested = 0;
    if (argc > 1) requested = std::atoi(argv[1]);
    int failures = 0;
    for (const Criterion& c : kCriteria) {
        if (requested != 0 && c.id != requested) continue;
        const bool pass = c.fn(out);
        std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", c.id, c.label);
        std::fflush(stdout);
        if (!pass) ++failures;
    }
    return failures;
}
