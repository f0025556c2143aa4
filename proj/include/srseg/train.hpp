#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "srseg/data.hpp"
#include "srseg/losses.hpp"
#include "srseg/model.hpp"

namespace srseg {

// ============================================================================
// Learning-rate schedule
// ============================================================================

// Polynomial decay lr0 * (1 - iter/iter_max)^power. Exact at both ends:
// iter 0 gives lr0, iter_max gives 0.
inline double poly_lr(std::int64_t iter, std::int64_t iter_max, double lr0, double power) {
    if (iter_max < 1)
        throw std::invalid_argument("poly_lr: iter_max must be >= 1, got " + std::to_string(iter_max));
    if (iter < 0) throw std::invalid_argument("poly_lr: iter must be >= 0, got " + std::to_string(iter));
    if (iter > iter_max)
        throw std::invalid_argument("poly_lr: iter " + std::to_string(iter) + " exceeds iter_max " +
                                    std::to_string(iter_max));
    return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(iter_max), power);
}

// ============================================================================
// SGD with momentum
// ============================================================================

// One optimizer slot: a view of a model tensor plus its momentum state.
// Copying the tensor shares storage with the model, so stepping the
// parameter updates the model in place.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    std::vector<T> velocity;
};

// v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v.
// Gradients are cleared after the step so the next backward starts fresh.
// With weight decay a zero-gradient parameter still decays geometrically,
// which is why only parameters the objective can reach belong in the list.
template <typename T>
void sgd_momentum_step(std::vector<Parameter<T>>& params, double lr, double momentum, double weight_decay) {
    for (auto& p : params) {
        if (!p.tensor.requires_grad() || p.tensor.grad().size() != p.tensor.data().size())
            throw std::runtime_error("sgd_momentum_step: parameter '" + p.name + "' has no gradient");
        auto& data = p.tensor.data();
        auto& grad = p.tensor.grad();
        if (p.velocity.size() != data.size()) p.velocity.assign(data.size(), T(0));
        const T m = static_cast<T>(momentum);
        const T wd = static_cast<T>(weight_decay);
        const T step = static_cast<T>(lr);
        for (std::size_t i = 0; i < data.size(); ++i) {
            p.velocity[i] = m * p.velocity[i] + (grad[i] + wd * data[i]);
            data[i] -= step * p.velocity[i];
        }
        std::fill(grad.begin(), grad.end(), T(0));
    }
}

// ============================================================================
// Toggle-driven computation and optimizer sets
// ============================================================================

// Which forward branches the selected objective reads. Early heads consume
// adapted features, so any early supervision or distillation implies the
// early feature branches; in the u-shaped arch the encoder taps exist only
// for feature distillation.
inline ExitNeeds needs_for(const LossToggles& t, ArchKind arch) {
    ExitNeeds n;
    n.early_seg = t.mea_on;
    n.early_cls = t.mea_on || t.sr_l_on;
    n.final_cls = t.mea_on || t.sr_l_on;
    n.early_features =
        arch == ArchKind::kConv ? (t.mea_on || t.sr_l_on || t.sr_f_on) : t.sr_f_on;
    return n;
}

namespace detail {

// True when the named parameter lies on a gradient path of the objective
// selected by the toggles. Backbone parameters always do. Exit branches:
// the final exit's prediction path always trains; early heads train under
// their supervision terms; an adapter trains when its own heads do or when
// it is a distillation student (exit 2 onward; the first exit's features
// are the detached teacher).
template <typename T>
bool param_in_objective(const Model<T>& model, const LossToggles& t, const std::string& name) {
    if (name.rfind("exit", 0) != 0) return true;
    const std::size_t dot = name.find('.');
    const int k = std::stoi(name.substr(4, dot - 4));
    const int n = static_cast<int>(model.exits.size());
    const bool is_final = k == n;
    const std::string branch = name.substr(dot + 1, name.find('.', dot + 1) - dot - 1);

    const bool seg_active = is_final || t.mea_on;
    const bool cls_active = is_final ? t.mea_on : (t.mea_on || t.sr_l_on);
    if (branch == "seg") return seg_active;
    if (branch == "cls") return cls_active;
    if (branch == "adapter") {
        const bool has_heads = model.exits[static_cast<std::size_t>(k - 1)].seg.has_value();
        const bool head_path = has_heads && (seg_active || cls_active);
        const bool student_path = t.sr_f_on && k >= 2;
        return head_path || student_path;
    }
    throw std::logic_error("param_in_objective: unrecognized parameter '" + name + "'");
}

}  // namespace detail

// Optimizer slots for every parameter the objective can reach; everything
// else keeps its initial value for the whole run.
template <typename T>
std::vector<Parameter<T>> active_params(Model<T>& model, const LossToggles& toggles) {
    std::vector<Parameter<T>> out;
    model.visit_params([&](const std::string& name, Tensor<T>& t) {
        if (detail::param_in_objective(model, toggles, name))
            out.push_back(Parameter<T>{name, t, std::vector<T>(t.data().size(), T(0))});
    });
    return out;
}

template <typename T>
std::vector<Parameter<T>> all_params(Model<T>& model) {
    std::vector<Parameter<T>> out;
    model.visit_params(
        [&](const std::string& name, Tensor<T>& t) { out.push_back(Parameter<T>{name, t, {}}); });
    return out;
}

// ============================================================================
// Training configuration
// ============================================================================

struct TrainConfig {
    double lr0 = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 8;
    int epochs = 40;
    double poly_power = 0.9;
    LossWeights weights;
    Temperature temperature;
    std::uint64_t seed = 0;
    LossToggles toggles;
    int eval_every = 0;  // epochs between held-out evals; 0 = final eval only

    void validate() const {
        if (!(lr0 > 0)) throw std::invalid_argument("train: lr0 must be > 0");
        if (!(poly_power > 0)) throw std::invalid_argument("train: poly_power must be > 0");
        if (batch_size < 2)
            throw std::invalid_argument("train: batch_size must be >= 2 (batch statistics), got " +
                                        std::to_string(batch_size));
        if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1, got " + std::to_string(epochs));
        if (!(momentum >= 0 && momentum < 1))
            throw std::invalid_argument("train: momentum must lie in [0, 1)");
        if (!(weight_decay >= 0)) throw std::invalid_argument("train: weight_decay must be >= 0");
        if (eval_every < 0) throw std::invalid_argument("train: eval_every must be >= 0");
        weights.validate();
        temperature.validate();
    }
};

// ============================================================================
// Evaluation
// ============================================================================

// Pixel-count confusion: entry (a, b) counts pixels of true class a
// predicted as class b. The grand total is the number of pixels evaluated.
struct ConfusionMatrix {
    std::int64_t classes = 0;
    std::vector<std::int64_t> counts;

    explicit ConfusionMatrix(std::int64_t c = 0)
        : classes(c), counts(static_cast<std::size_t>(c * c), 0) {}

    std::int64_t& at(std::int64_t true_c, std::int64_t pred_c) {
        return counts[static_cast<std::size_t>(true_c * classes + pred_c)];
    }
    std::int64_t at(std::int64_t true_c, std::int64_t pred_c) const {
        return counts[static_cast<std::size_t>(true_c * classes + pred_c)];
    }
    std::int64_t total() const {
        std::int64_t s = 0;
        for (const std::int64_t v : counts) s += v;
        return s;
    }
};

struct EvalResult {
    ConfusionMatrix confusion;
    // indexed by class id (background included); NaN marks a class absent
    // from both prediction and truth, which the mean skips
    std::vector<double> iou;
    double miou = 0.0;
};

// IoU per class from a confusion matrix: TP / (TP + FP + FN). Classes with
// an empty union are excluded from the mean.
inline EvalResult eval_from_confusion(ConfusionMatrix confusion) {
    EvalResult r{std::move(confusion), {}, 0.0};
    const std::int64_t C = r.confusion.classes;
    double sum = 0.0;
    std::int64_t counted = 0;
    for (std::int64_t c = 0; c < C; ++c) {
        const std::int64_t tp = r.confusion.at(c, c);
        std::int64_t fp = 0, fn = 0;
        for (std::int64_t o = 0; o < C; ++o) {
            if (o == c) continue;
            fp += r.confusion.at(o, c);
            fn += r.confusion.at(c, o);
        }
        if (tp + fp + fn == 0) {
            r.iou.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        const double iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        r.iou.push_back(iou);
        sum += iou;
        ++counted;
    }
    r.miou = counted > 0 ? sum / static_cast<double>(counted) : 0.0;
    return r;
}

template <typename T>
Tensor<T> sample_to_tensor(const Sample& s) {
    Tensor<T> x = Tensor<T>::zeros({1, 3, s.h, s.w});
    for (std::size_t i = 0; i < s.image.size(); ++i) x.data()[i] = static_cast<T>(s.image[i]);
    return x;
}

// Argmax segmentation against the ground-truth masks, final exit only, in
// eval mode (running batch statistics). Ties in the argmax resolve to the
// lowest class id.
template <typename T>
EvalResult evaluate(Model<T>& model, const std::vector<Sample>& samples) {
    if (samples.empty()) throw std::invalid_argument("evaluate: dataset is empty");
    NoGradGuard<T> guard;
    ExitNeeds needs;
    needs.early_features = needs.early_seg = needs.early_cls = needs.final_cls = false;

    const std::int64_t C = model.config.seg_classes;
    ConfusionMatrix confusion(C);
    for (const Sample& s : samples) {
        Tensor<T> x = sample_to_tensor<T>(s);
        auto bundles = model.forward(x, Mode::kEval, needs);
        const Tensor<T>& logits = *bundles.back().seg_logits;  // 1 x C x H x W
        const std::int64_t plane = s.h * s.w;
        const T* d = logits.data().data();
        for (std::int64_t p = 0; p < plane; ++p) {
            std::int64_t best = 0;
            T best_v = d[p];
            for (std::int64_t c = 1; c < C; ++c) {
                const T v = d[c * plane + p];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            const std::int32_t truth = s.mask[static_cast<std::size_t>(p)];
            if (truth < 0 || truth >= C)
                throw std::invalid_argument("evaluate: mask value " + std::to_string(truth) +
                                            " outside the model's " + std::to_string(C) + " classes");
            ++confusion.at(truth, best);
        }
    }
    return eval_from_confusion(std::move(confusion));
}

// ============================================================================
// Batch assembly
// ============================================================================

// The exact sample pipeline one training step consumes, exposed so tests
// can rebuild any step's batch bit-for-bit: epoch shuffling is drawn from
// (seed, epoch), each sample's augmentation from (seed, epoch, dataset
// index), so neither depends on traversal order.
inline std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::int64_t epoch) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
    for (std::int64_t i = n - 1; i > 0; --i) {
        const std::int64_t j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    return order;
}

template <typename T>
struct Batch {
    Tensor<T> x;                      // B x 3 x H x W
    std::vector<std::int32_t> mask;   // B*H*W
    std::vector<T> labels;            // B*K
    std::vector<std::int64_t> indices;
};

template <typename T>
Batch<T> make_batch(const std::vector<Sample>& samples, const std::vector<std::int64_t>& order,
                    std::size_t batch_start, int batch_size, std::uint64_t seed, std::int64_t epoch) {
    Batch<T> b;
    const Sample& first = samples[static_cast<std::size_t>(order[batch_start])];
    const std::int64_t h = first.h, w = first.w;
    const std::int64_t k = static_cast<std::int64_t>(first.labels.size());
    b.x = Tensor<T>::zeros({batch_size, 3, h, w});
    b.mask.resize(static_cast<std::size_t>(batch_size) * static_cast<std::size_t>(h * w));
    b.labels.resize(static_cast<std::size_t>(batch_size) * static_cast<std::size_t>(k));
    for (int i = 0; i < batch_size; ++i) {
        const std::int64_t idx = order[batch_start + static_cast<std::size_t>(i)];
        b.indices.push_back(idx);
        const Sample s = augment(samples[static_cast<std::size_t>(idx)],
                                 mix_seed(seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(idx)));
        T* xb = b.x.data().data() + static_cast<std::size_t>(i) * s.image.size();
        for (std::size_t j = 0; j < s.image.size(); ++j) xb[j] = static_cast<T>(s.image[j]);
        std::copy(s.mask.begin(), s.mask.end(),
                  b.mask.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * s.mask.size()));
        for (std::int64_t j = 0; j < k; ++j)
            b.labels[static_cast<std::size_t>(i * k + j)] = static_cast<T>(s.labels[static_cast<std::size_t>(j)]);
    }
    return b;
}

// ============================================================================
// Training loop
// ============================================================================

struct StepRecord {
    std::int64_t step = 0;
    double lr = 0.0;
    double tau = 0.0;  // temperature the step's loss used
    double sr_cls = 0.0, sr_seg = 0.0, sr_f = 0.0, sr_l = 0.0, total = 0.0;
};

struct EpochEval {
    std::int64_t epoch = 0;  // 1-based, recorded after that epoch finished
    double miou = 0.0;
};

struct RunLog {
    std::vector<StepRecord> steps;
    std::vector<EpochEval> epoch_evals;
    EvalResult final_eval;
    double wall_seconds = 0.0;
};

// Raised when the loss leaves the reals; carries the failing step and the
// most recent finite breakdown so the caller can report where things stood.
struct TrainAbort : std::runtime_error {
    std::int64_t step;
    StepRecord last_finite;

    TrainAbort(std::int64_t step_, const StepRecord& last, const std::string& msg)
        : std::runtime_error(msg), step(step_), last_finite(last) {}
};

// Deterministic single-run training. The optimizer touches only parameters
// the toggled objective can reach; disabled branches are not even computed.
// `zero_scaled` is a test seam: toggles listed there have their loss terms
// built and added with coefficient zero, which must leave every parameter
// trajectory bit-identical because the terms compose additively.
template <typename T>
RunLog train(Model<T>& model, const std::vector<Sample>& train_set, const std::vector<Sample>& eval_set,
             const TrainConfig& config, const LossToggles& zero_scaled = LossToggles{false, false, false}) {
    config.validate();
    if (train_set.empty()) throw std::invalid_argument("train: dataset is empty");
    const std::int64_t n = static_cast<std::int64_t>(train_set.size());
    const std::int64_t steps_per_epoch = n / config.batch_size;  // trailing partial batch dropped
    if (steps_per_epoch < 1)
        throw std::invalid_argument("train: batch_size " + std::to_string(config.batch_size) +
                                    " exceeds the dataset of " + std::to_string(n) + " samples");
    const std::int64_t total_steps = steps_per_epoch * config.epochs;
    const std::int64_t iter_max = std::max<std::int64_t>(total_steps - 1, 1);

    LossToggles computed = config.toggles;
    computed.mea_on = computed.mea_on || zero_scaled.mea_on;
    computed.sr_f_on = computed.sr_f_on || zero_scaled.sr_f_on;
    computed.sr_l_on = computed.sr_l_on || zero_scaled.sr_l_on;
    const ExitNeeds needs = needs_for(computed, model.config.arch);

    std::vector<Parameter<T>> params = active_params(model, config.toggles);
    Temperature temp = config.temperature;

    RunLog log;
    StepRecord last_finite;
    const auto t0 = std::chrono::steady_clock::now();
    std::int64_t step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const std::vector<std::int64_t> order = epoch_order(n, config.seed, epoch);
        for (std::int64_t bi = 0; bi < steps_per_epoch; ++bi) {
            Tape<T>::active().clear();
            Batch<T> batch = make_batch<T>(train_set, order, static_cast<std::size_t>(bi) * config.batch_size,
                                           config.batch_size, config.seed, epoch);
            auto bundles = model.forward(batch.x, Mode::kTrain, needs);
            LossBreakdown<T> breakdown =
                training_loss(bundles, batch.mask, batch.labels, config.weights, config.toggles, temp.tau);

            Tensor<T> total = breakdown.total;
            if (zero_scaled.mea_on && !config.toggles.mea_on) {
                LossToggles only_mea{true, false, false};
                total = add(total, scale(training_loss(bundles, batch.mask, batch.labels, config.weights, only_mea,
                                                       temp.tau)
                                             .total,
                                         T(0)));
            }
            if (zero_scaled.sr_f_on && !config.toggles.sr_f_on)
                total = add(total, scale(sr_f_loss(bundles, temp.tau), T(0)));
            if (zero_scaled.sr_l_on && !config.toggles.sr_l_on)
                total = add(total, scale(sr_l_loss(bundles, temp.tau), T(0)));

            if (!std::isfinite(breakdown.total_value))
                throw TrainAbort(step, last_finite,
                                 "train: loss became non-finite at step " + std::to_string(step) +
                                     " (last finite total " + std::to_string(last_finite.total) + " at step " +
                                     std::to_string(last_finite.step) + ")");

            backward(total);
            const double lr = poly_lr(step, iter_max, config.lr0, config.poly_power);
            sgd_momentum_step(params, lr, config.momentum, config.weight_decay);

            StepRecord rec{step,           lr,           temp.tau,        breakdown.sr_cls,
                           breakdown.sr_seg, breakdown.sr_f, breakdown.sr_l, breakdown.total_value};
            log.steps.push_back(rec);
            last_finite = rec;
            temp = update_temperature(temp, bundles);
            ++step;
        }
        if (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 && !eval_set.empty())
            log.epoch_evals.push_back(EpochEval{epoch + 1, evaluate(model, eval_set).miou});
    }
    Tape<T>::active().clear();
    if (!eval_set.empty()) log.final_eval = evaluate(model, eval_set);
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
}

// ============================================================================
// Run log output
// ============================================================================

namespace detail {

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// Fixed-header CSV of the per-step trace. %.17g round-trips doubles, so
// the logged lr can be compared exactly against the schedule.
inline std::string runlog_csv(const RunLog& log) {
    std::string out = "step,lr,tau,sr_cls,sr_seg,sr_f,sr_l,total\n";
    for (const StepRecord& r : log.steps) {
        out += std::to_string(r.step);
        for (const double v : {r.lr, r.tau, r.sr_cls, r.sr_seg, r.sr_f, r.sr_l, r.total}) {
            out += ',';
            out += detail::fmt_g17(v);
        }
        out += '\n';
    }
    return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error(path + ": cannot open for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error(path + ": write failed");
}

// ============================================================================
// Ablation grid
// ============================================================================

struct AblationRowSpec {
    std::string name;
    LossToggles toggles;
};

// The five-row grid: no mechanism, exit supervision alone, then each
// distillation direction, then everything.
inline std::vector<AblationRowSpec> default_ablation_grid() {
    return {
        {"(none)", LossToggles{false, false, false}},
        {"MEA", LossToggles{true, false, false}},
        {"MEA+SR-L", LossToggles{true, false, true}},
        {"MEA+SR-F", LossToggles{true, true, false}},
        {"MEA+SR-F+SR-L", LossToggles{true, true, true}},
    };
}

struct AblationCell {
    std::uint64_t seed = 0;
    double miou_percent = 0.0;
};

struct AblationRow {
    std::string name;
    LossToggles toggles;
    std::vector<AblationCell> cells;
    double mean = 0.0;   // percent
    double stdev = 0.0;  // sample standard deviation, percent
};

struct AblationResult {
    std::vector<AblationRow> rows;
    int seeds = 0;
    double wall_seconds = 0.0;
};

inline int thread_cap_from_env(int requested) {
    if (requested < 1) requested = 1;
    if (const char* env = std::getenv("SR_NUM_THREADS")) {
        try {
            const int cap = std::stoi(env);
            if (cap >= 1) requested = std::min(requested, cap);
        } catch (const std::exception&) {
            throw std::invalid_argument("SR_NUM_THREADS is set to '" + std::string(env) +
                                        "', expected a positive integer");
        }
    }
    return requested;
}

// Runs the grid: every row trains on the same seed list (base seed + 0..S-1)
// and the same datasets, so row differences isolate the toggles. Runs are
// independent; `jobs` of them execute concurrently on worker threads, each
// with private model, tape, and RNG state. Results are seed-deterministic
// regardless of jobs.
template <typename T>
AblationResult ablate(const ModelConfig& model_config, const TrainConfig& base, const std::vector<Sample>& train_set,
                      const std::vector<Sample>& eval_set, const std::vector<AblationRowSpec>& grid, int num_seeds,
                      int jobs = 1) {
    if (num_seeds < 1) throw std::invalid_argument("ablate: need at least 1 seed");
    if (grid.empty()) throw std::invalid_argument("ablate: grid is empty");
    if (eval_set.empty()) throw std::invalid_argument("ablate: eval set is empty");
    const auto t0 = std::chrono::steady_clock::now();

    AblationResult result;
    result.seeds = num_seeds;
    for (const auto& spec : grid) {
        AblationRow row;
        row.name = spec.name;
        row.toggles = spec.toggles;
        row.cells.resize(static_cast<std::size_t>(num_seeds));
        result.rows.push_back(std::move(row));
    }

    struct Job {
        std::size_t row;
        int seed_index;
    };
    std::vector<Job> queue;
    for (std::size_t r = 0; r < grid.size(); ++r)
        for (int s = 0; s < num_seeds; ++s) queue.push_back(Job{r, s});

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string first_error;
    std::mutex error_mu;

    auto worker = [&] {
        while (!failed.load()) {
            const std::size_t j = next.fetch_add(1);
            if (j >= queue.size()) return;
            const Job job = queue[j];
            const std::uint64_t seed = base.seed + static_cast<std::uint64_t>(job.seed_index);
            try {
                TrainConfig cfg = base;
                cfg.seed = seed;
                cfg.toggles = grid[job.row].toggles;
                cfg.eval_every = 0;
                Model<T> model = build_model<T>(model_config, seed);
                RunLog log = train(model, train_set, eval_set, cfg);
                result.rows[job.row].cells[static_cast<std::size_t>(job.seed_index)] =
                    AblationCell{seed, log.final_eval.miou * 100.0};
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!failed.exchange(true))
                    first_error = grid[job.row].name + " seed " + std::to_string(seed) + ": " + e.what();
            }
        }
    };

    const int workers = thread_cap_from_env(jobs);
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (failed.load()) throw std::runtime_error("ablate: " + first_error);

    for (AblationRow& row : result.rows) {
        double sum = 0.0;
        for (const AblationCell& c : row.cells) sum += c.miou_percent;
        row.mean = sum / static_cast<double>(num_seeds);
        double ss = 0.0;
        for (const AblationCell& c : row.cells) ss += (c.miou_percent - row.mean) * (c.miou_percent - row.mean);
        row.stdev = num_seeds > 1 ? std::sqrt(ss / static_cast<double>(num_seeds - 1)) : 0.0;
    }
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

// Aggregated table, one row per grid entry. Byte-deterministic.
inline std::string ablation_csv(const AblationResult& r) {
    std::string out = "row,mea,sr_f,sr_l,seeds,mean_miou,stdev_miou\n";
    for (const AblationRow& row : r.rows) {
        out += row.name;
        out += row.toggles.mea_on ? ",1" : ",0";
        out += row.toggles.sr_f_on ? ",1" : ",0";
        out += row.toggles.sr_l_on ? ",1" : ",0";
        out += ',' + std::to_string(r.seeds);
        out += ',' + detail::fmt_g17(row.mean);
        out += ',' + detail::fmt_g17(row.stdev);
        out += '\n';
    }
    return out;
}

// Per-run detail, one row per (grid row, seed). Byte-deterministic.
inline std::string ablation_runs_csv(const AblationResult& r) {
    std::string out = "row,seed,miou\n";
    for (const AblationRow& row : r.rows)
        for (const AblationCell& c : row.cells) {
            out += row.name + ',' + std::to_string(c.seed) + ',' + detail::fmt_g17(c.miou_percent) + '\n';
        }
    return out;
}

}  // namespace srseg
