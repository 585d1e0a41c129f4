#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kervolve/data.hpp"
#include "kervolve/model.hpp"

namespace kervolve {

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision precision_from_string(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw config_error("unknown precision '" + s + "' (expected f32|f64)");
}

/// The learning-rate search ladder: starting at 0.2 and halving, stopping
/// before any value at or below 0.0002. Exactly 10 rates.
std::vector<double> lr_ladder();

/// Checkpoint-style selection: the reported test accuracy is replaced each
/// time a new highest training accuracy is observed.
struct BestTracker {
    double best_train = -1.0;
    double selected_test = 0.0;
    bool seen = false;

    void update(double train_acc, double test_acc) {
        if (!seen || train_acc > best_train) {
            best_train = train_acc;
            selected_test = test_acc;
            seen = true;
        }
    }
};

struct Convergence {
    bool reached = false;
    int epoch = 0;       // 1-based index of the first epoch at/above target
    double seconds = 0;  // cumulative wall seconds through that epoch
};

/// First epoch whose test accuracy reaches `target`, with cumulative wall
/// time; not reached when the whole trace stays below target.
Convergence convergence_time(const std::vector<double>& test_acc,
                             const std::vector<double>& epoch_seconds, double target);

struct Interval {
    double mean = 0.0;
    double half_width = 0.0;
};

/// Student's t interval: mean +/- t_{(1+level)/2, n-1} * s / sqrt(n) with the
/// sample standard deviation s. Requires n >= 2.
Interval confidence_interval(std::span<const double> values, double level = 0.95);

/// One (model, lr, fold) training run and its derived metrics.
struct RunRecord {
    int schema_version = 1;
    std::string model;
    std::string dataset;
    size_t dataset_size = 0;
    double lr = 0.0;
    int lr_index = -1;
    int fold = 0;
    size_t k_folds = 5;
    uint64_t fold_seed = 0;
    uint64_t seed = 0;  // derived per-cell seed
    std::string precision = "f64";
    double target_acc = 0.0;
    ModelConfig config;

    std::vector<double> train_acc;      // per epoch, running accuracy over training batches
    std::vector<double> test_acc;       // per epoch, held-out fold accuracy
    std::vector<double> epoch_seconds;  // per epoch wall time (train + eval)
    std::vector<std::vector<double>> mix_weight;  // per epoch, sigmoid(mix_logit) per kerv layer
    double mix_logit_grad_max = 0.0;    // largest |d loss / d mix_logit| seen on any batch

    double best_train_acc = 0.0;
    double selected_test_acc = 0.0;
    bool conv_reached = false;
    int conv_epoch = 0;
    double conv_seconds = 0.0;
    bool stuck = false;   // finished at <= 0.15 test accuracy
    bool failed = false;  // numeric failure during training
    std::string fail_reason;
};

void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

/// `<model>_<lr>_<fold>.json`, lr in shortest round-trip decimal form.
std::string record_filename(const std::string& model, double lr, int fold);

void write_record(const std::filesystem::path& path, const RunRecord& record);
RunRecord load_record(const std::filesystem::path& path);

/// All *.json records in a directory, sorted by (model, -lr, fold).
std::vector<RunRecord> load_records(const std::filesystem::path& dir);

/// Aggregated statistics for one (model, lr) pair. Convergence statistics
/// are absent whenever any fold failed to reach the target (the omission
/// rule); a robust summary additionally drops stuck runs from the accuracy
/// statistics.
struct SummaryRow {
    std::string model;
    double lr = 0.0;
    int n_folds = 0;
    int n_acc = 0;  // folds contributing to the accuracy statistics
    std::optional<Interval> best_acc;
    bool omitted = false;
    std::optional<Interval> conv_epochs;
    std::optional<Interval> conv_seconds;
};

std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records, bool robust = false);

void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);

/// Shortest round-trip decimal representation of a double.
std::string format_double(double v);

struct SweepOptions {
    std::vector<ModelConfig> models;
    double target_acc = 0.98;
    int jobs = 1;
    bool resume = false;
    std::filesystem::path results_dir;
    uint64_t base_seed = 1;
    Precision precision = Precision::f64;
    size_t k_folds = 5;
    bool quiet = false;
};

struct SweepStats {
    size_t executed = 0;
    size_t resumed = 0;
};

/// Runs every model x learning rate x fold cell, persisting one record file
/// per cell. Cells are share-nothing jobs seeded from (base seed, model, lr
/// index, fold), so results are identical at any parallelism level; with
/// `resume`, cells whose record file already parses are skipped.
SweepStats run_sweep(const SweepOptions& options, const Dataset& dataset,
                     std::vector<RunRecord>* records_out = nullptr);

/// Derived seed for one sweep cell.
uint64_t cell_seed(uint64_t base_seed, const std::string& model_id, int lr_index, int fold);

// ---------------------------------------------------------------------------
// Training engine
// ---------------------------------------------------------------------------

/// Held-out accuracy of the current parameters over the given indices.
template <class T>
double evaluate_accuracy(LayerStack<T>& net, const Dataset& ds,
                         std::span<const uint32_t> indices, size_t eval_batch = 256) {
    size_t correct = 0;
    for (size_t start = 0; start < indices.size(); start += eval_batch) {
        const size_t len = std::min(eval_batch, indices.size() - start);
        const auto chunk = indices.subspan(start, len);
        const TensorT<T> x = gather_images<T>(ds, chunk);
        const TensorT<T> logits = net.forward(x, /*training=*/false);
        const std::vector<size_t> pred = argmax_rows(logits);
        for (size_t i = 0; i < len; ++i) {
            if (pred[i] == ds.labels[chunk[i]]) ++correct;
        }
    }
    return indices.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(indices.size());
}

/// Trains one cell: LeNet-5 built from `config` with the cell seed, SGD with
/// momentum under the milestone schedule, per-epoch metric capture, the
/// best-test-at-best-train rule, convergence against `target_acc`, and the
/// stuck flag. A numeric failure ends the run and marks the record failed.
template <class T>
RunRecord run_training_cell(const ModelConfig& config, const Dataset& dataset,
                            const std::vector<uint32_t>& train_idx,
                            const std::vector<uint32_t>& test_idx, double lr, uint64_t seed,
                            double target_acc) {
    using clock = std::chrono::steady_clock;

    ModelConfig cfg = config;
    cfg.seed = seed;
    cfg.validate();

    RunRecord rec;
    rec.model = cfg.id;
    rec.dataset = dataset.name;
    rec.dataset_size = dataset.size();
    rec.lr = lr;
    rec.seed = seed;
    rec.precision = std::is_same_v<T, float> ? "f32" : "f64";
    rec.target_acc = target_acc;
    rec.config = cfg;

    LayerStack<T> net = build_lenet5<T>(cfg);
    OptimizerState<T> opt = init_optimizer(net, cfg.momentum);
    const std::vector<KervLayer<T>*> kervs = net.kerv_layers();
    const bool track_mix = [&] {
        for (auto* k : kervs) {
            if (k->mix_weight()) return true;
        }
        return false;
    }();

    BestTracker best;
    try {
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            const auto t0 = clock::now();
            const double epoch_lr = lr_at_epoch(lr, epoch, cfg.milestones, cfg.lr_decay);
            const auto batches = make_batches(
                train_idx, cfg.batch_size,
                hash_combine(seed, static_cast<uint64_t>(epoch) + 1));

            size_t correct = 0;
            for (const auto& batch : batches) {
                const TensorT<T> x = gather_images<T>(dataset, batch);
                const std::vector<uint8_t> y = gather_labels(dataset, batch);
                net.zero_grad();
                const TensorT<T> logits = net.forward(x, /*training=*/true);
                auto [loss, grad] = softmax_cross_entropy(logits, y);
                net.backward(std::move(grad));
                if (track_mix) {
                    for (auto* k : kervs) {
                        for (Parameter<T>* p : k->parameters()) {
                            if (p->name.ends_with(".mix_logit")) {
                                rec.mix_logit_grad_max = std::max(
                                    rec.mix_logit_grad_max, std::abs(static_cast<double>(p->grad[0])));
                            }
                        }
                    }
                }
                sgd_step(net, opt, epoch_lr);
                const std::vector<size_t> pred = argmax_rows(logits);
                for (size_t i = 0; i < y.size(); ++i) {
                    if (pred[i] == y[i]) ++correct;
                }
            }
            const double train_acc =
                train_idx.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(train_idx.size());
            const double test_acc = evaluate_accuracy(net, dataset, test_idx);
            const double seconds = std::chrono::duration<double>(clock::now() - t0).count();

            rec.train_acc.push_back(train_acc);
            rec.test_acc.push_back(test_acc);
            rec.epoch_seconds.push_back(seconds);
            if (track_mix) {
                std::vector<double> weights;
                for (auto* k : kervs) {
                    if (auto w = k->mix_weight()) weights.push_back(*w);
                }
                rec.mix_weight.push_back(std::move(weights));
            }
            best.update(train_acc, test_acc);
        }
    } catch (const numeric_error& e) {
        rec.failed = true;
        rec.fail_reason = e.what();
    }

    if (best.seen) {
        rec.best_train_acc = best.best_train;
        rec.selected_test_acc = best.selected_test;
    }
    const Convergence conv = convergence_time(rec.test_acc, rec.epoch_seconds, target_acc);
    rec.conv_reached = conv.reached;
    rec.conv_epoch = conv.epoch;
    rec.conv_seconds = conv.seconds;
    rec.stuck = !rec.failed && !rec.test_acc.empty() && rec.test_acc.back() <= 0.15;
    return rec;
}

}  // namespace kervolve
