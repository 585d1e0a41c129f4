#include "kervolve/experiment.hpp"

#include <atomic>
#include <charconv>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

namespace kervolve {

std::vector<double> lr_ladder() {
    std::vector<double> out;
    for (double lr = 0.2; lr > 0.0002; lr /= 2.0) {
        out.push_back(lr);
    }
    return out;
}

Convergence convergence_time(const std::vector<double>& test_acc,
                             const std::vector<double>& epoch_seconds, double target) {
    Convergence c;
    double elapsed = 0.0;
    for (size_t e = 0; e < test_acc.size(); ++e) {
        elapsed += e < epoch_seconds.size() ? epoch_seconds[e] : 0.0;
        if (test_acc[e] >= target) {
            c.reached = true;
            c.epoch = static_cast<int>(e) + 1;
            c.seconds = elapsed;
            return c;
        }
    }
    return c;
}

Interval confidence_interval(std::span<const double> values, double level) {
    const size_t n = values.size();
    if (n < 2) {
        throw config_error("confidence_interval: undefined for n=" + std::to_string(n) +
                           " (need at least 2 values)");
    }
    if (!(level > 0.0 && level < 1.0)) {
        throw config_error("confidence_interval: level must be in (0,1)");
    }
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    const boost::math::students_t dist(static_cast<double>(n - 1));
    const double t = boost::math::quantile(dist, 0.5 + level / 2.0);
    return Interval{mean, t * sd / std::sqrt(static_cast<double>(n))};
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// Record persistence
// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const RunRecord& r) {
    j = nlohmann::json{{"schema_version", r.schema_version},
                       {"model", r.model},
                       {"dataset", r.dataset},
                       {"dataset_size", r.dataset_size},
                       {"lr", r.lr},
                       {"lr_index", r.lr_index},
                       {"fold", r.fold},
                       {"k_folds", r.k_folds},
                       {"fold_seed", r.fold_seed},
                       {"seed", r.seed},
                       {"precision", r.precision},
                       {"target_acc", r.target_acc},
                       {"config", r.config},
                       {"normalization", {{"mean", kPixelMean}, {"std", kPixelStd}}},
                       {"kfold_stratified", false},
                       {"ci_method", "student-t"},
                       {"train_acc", r.train_acc},
                       {"test_acc", r.test_acc},
                       {"epoch_seconds", r.epoch_seconds},
                       {"best_train_acc", r.best_train_acc},
                       {"selected_test_acc", r.selected_test_acc},
                       {"conv_reached", r.conv_reached},
                       {"stuck", r.stuck},
                       {"failed", r.failed}};
    if (!r.mix_weight.empty()) {
        j["mix_weight"] = r.mix_weight;
        j["mix_logit_grad_max"] = r.mix_logit_grad_max;
    }
    if (r.conv_reached) {
        j["conv_epoch"] = r.conv_epoch;
        j["conv_seconds"] = r.conv_seconds;
    }
    if (r.failed) j["fail_reason"] = r.fail_reason;
}

void from_json(const nlohmann::json& j, RunRecord& r) {
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != 1) {
        throw format_error("record: unsupported schema_version " +
                           std::to_string(r.schema_version));
    }
    r.model = j.at("model").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.dataset_size = j.at("dataset_size").get<size_t>();
    r.lr = j.at("lr").get<double>();
    r.lr_index = j.at("lr_index").get<int>();
    r.fold = j.at("fold").get<int>();
    r.k_folds = j.at("k_folds").get<size_t>();
    r.fold_seed = j.at("fold_seed").get<uint64_t>();
    r.seed = j.at("seed").get<uint64_t>();
    r.precision = j.at("precision").get<std::string>();
    r.target_acc = j.at("target_acc").get<double>();
    r.config = j.at("config").get<ModelConfig>();
    r.train_acc = j.at("train_acc").get<std::vector<double>>();
    r.test_acc = j.at("test_acc").get<std::vector<double>>();
    r.epoch_seconds = j.at("epoch_seconds").get<std::vector<double>>();
    if (j.contains("mix_weight")) {
        r.mix_weight = j.at("mix_weight").get<std::vector<std::vector<double>>>();
        r.mix_logit_grad_max = j.value("mix_logit_grad_max", 0.0);
    }
    r.best_train_acc = j.at("best_train_acc").get<double>();
    r.selected_test_acc = j.at("selected_test_acc").get<double>();
    r.conv_reached = j.at("conv_reached").get<bool>();
    r.conv_epoch = j.value("conv_epoch", 0);
    r.conv_seconds = j.value("conv_seconds", 0.0);
    r.stuck = j.at("stuck").get<bool>();
    r.failed = j.at("failed").get<bool>();
    r.fail_reason = j.value("fail_reason", "");
}

std::string record_filename(const std::string& model, double lr, int fold) {
    return model + "_" + format_double(lr) + "_" + std::to_string(fold) + ".json";
}

void write_record(const std::filesystem::path& path, const RunRecord& record) {
    const nlohmann::json j = record;
    // tmp-then-rename keeps interrupted sweeps resumable
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw format_error("record: cannot write " + tmp.string());
        out << j.dump(2) << '\n';
    }
    std::filesystem::rename(tmp, path);
}

RunRecord load_record(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw format_error("record: cannot read " + path.string());
    nlohmann::json j;
    try {
        in >> j;
        return j.get<RunRecord>();
    } catch (const nlohmann::json::exception& e) {
        throw format_error("record: invalid JSON in " + path.string() + ": " + e.what());
    }
}

std::vector<RunRecord> load_records(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw format_error("records: not a directory: " + dir.string());
    }
    std::vector<RunRecord> records;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() != ".json") continue;
        records.push_back(load_record(entry.path()));
    }
    std::sort(records.begin(), records.end(), [](const RunRecord& a, const RunRecord& b) {
        if (a.model != b.model) return a.model < b.model;
        if (a.lr != b.lr) return a.lr > b.lr;
        return a.fold < b.fold;
    });
    return records;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records, bool robust) {
    std::map<std::pair<std::string, double>, std::vector<const RunRecord*>> groups;
    for (const RunRecord& r : records) {
        groups[{r.model, -r.lr}].push_back(&r);  // -lr: ladder order within model
    }
    std::vector<SummaryRow> rows;
    for (const auto& [key, cells] : groups) {
        SummaryRow row;
        row.model = key.first;
        row.lr = -key.second;
        row.n_folds = static_cast<int>(cells.size());

        std::vector<double> acc;
        std::vector<double> conv_epochs, conv_seconds;
        bool all_reached = true;
        for (const RunRecord* r : cells) {
            if (!r->failed && !(robust && r->stuck)) acc.push_back(r->selected_test_acc);
            if (r->failed || !r->conv_reached) {
                all_reached = false;
            } else {
                conv_epochs.push_back(static_cast<double>(r->conv_epoch));
                conv_seconds.push_back(r->conv_seconds);
            }
        }
        row.n_acc = static_cast<int>(acc.size());
        if (acc.size() >= 2) {
            row.best_acc = confidence_interval(acc);
        } else if (acc.size() == 1) {
            row.best_acc = Interval{acc[0], 0.0};
        }
        row.omitted = !all_reached;
        if (!row.omitted && conv_epochs.size() >= 2) {
            row.conv_epochs = confidence_interval(conv_epochs);
            row.conv_seconds = confidence_interval(conv_seconds);
        } else if (!row.omitted && conv_epochs.size() == 1) {
            row.conv_epochs = Interval{conv_epochs[0], 0.0};
            row.conv_seconds = Interval{conv_seconds[0], 0.0};
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
    std::ofstream out(path);
    if (!out) throw format_error("summary: cannot write " + path.string());
    out << "model,lr,mean_best_acc,ci_best_acc,mean_conv_epochs,mean_conv_seconds,"
           "ci_conv_seconds,omitted,n_folds\n";
    for (const SummaryRow& row : rows) {
        out << row.model << ',' << format_double(row.lr) << ',';
        if (row.best_acc) {
            out << format_double(row.best_acc->mean) << ',' << format_double(row.best_acc->half_width);
        } else {
            out << ',';
        }
        out << ',';
        if (!row.omitted && row.conv_epochs) {
            out << format_double(row.conv_epochs->mean) << ','
                << format_double(row.conv_seconds->mean) << ','
                << format_double(row.conv_seconds->half_width);
        } else {
            out << ",,";
        }
        out << ',' << (row.omitted ? "true" : "false") << ',' << row.n_folds << '\n';
    }
}

// ---------------------------------------------------------------------------
// Sweep orchestration
// ---------------------------------------------------------------------------

uint64_t cell_seed(uint64_t base_seed, const std::string& model_id, int lr_index, int fold) {
    uint64_t h = hash_combine(base_seed, hash_string(model_id.c_str()));
    h = hash_combine(h, static_cast<uint64_t>(lr_index) + 1);
    return hash_combine(h, static_cast<uint64_t>(fold) + 1);
}

namespace {

struct Cell {
    const ModelConfig* config;
    double lr;
    int lr_index;
    int fold;
};

}  // namespace

SweepStats run_sweep(const SweepOptions& options, const Dataset& dataset,
                     std::vector<RunRecord>* records_out) {
    if (options.models.empty()) throw config_error("sweep: no models given");
    for (const ModelConfig& m : options.models) m.validate();
    std::filesystem::create_directories(options.results_dir);

    const std::vector<double> ladder = lr_ladder();
    const uint64_t fold_seed = hash_combine(options.base_seed, hash_string("folds"));
    const FoldPlan folds = kfold_split(dataset.size(), options.k_folds, fold_seed);

    std::vector<Cell> cells;
    for (const ModelConfig& m : options.models) {
        for (size_t li = 0; li < ladder.size(); ++li) {
            for (size_t f = 0; f < options.k_folds; ++f) {
                cells.push_back(Cell{&m, ladder[li], static_cast<int>(li), static_cast<int>(f)});
            }
        }
    }

    std::atomic<size_t> next{0};
    std::atomic<size_t> executed{0}, resumed{0};
    std::mutex mu;
    std::vector<RunRecord> collected(cells.size());
    std::exception_ptr first_error;

    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            const Cell& cell = cells[i];
            const std::filesystem::path path =
                options.results_dir / record_filename(cell.config->id, cell.lr, cell.fold);
            try {
                if (options.resume && std::filesystem::exists(path)) {
                    try {
                        RunRecord prior = load_record(path);
                        if (prior.model == cell.config->id && prior.lr == cell.lr &&
                            prior.fold == cell.fold) {
                            collected[i] = std::move(prior);
                            resumed.fetch_add(1);
                            continue;
                        }
                    } catch (const format_error&) {
                        // unreadable record: retrain the cell
                    }
                }
                const uint64_t seed =
                    cell_seed(options.base_seed, cell.config->id, cell.lr_index, cell.fold);
                RunRecord rec = [&] {
                    const auto train = folds.train_indices(cell.fold);
                    const auto& test = folds.test_indices(cell.fold);
                    if (options.precision == Precision::f32) {
                        return run_training_cell<float>(*cell.config, dataset, train, test,
                                                        cell.lr, seed, options.target_acc);
                    }
                    return run_training_cell<double>(*cell.config, dataset, train, test, cell.lr,
                                                     seed, options.target_acc);
                }();
                rec.lr_index = cell.lr_index;
                rec.fold = cell.fold;
                rec.k_folds = options.k_folds;
                rec.fold_seed = fold_seed;
                write_record(path, rec);
                executed.fetch_add(1);
                if (!options.quiet) {
                    std::lock_guard lock(mu);
                    std::cout << "[sweep] " << cell.config->id << " lr=" << format_double(cell.lr)
                              << " fold=" << cell.fold << (rec.failed ? " FAILED" : "")
                              << " best=" << format_double(rec.selected_test_acc) << "\n";
                }
                collected[i] = std::move(rec);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };

    const int jobs = std::max(1, options.jobs);
    std::vector<std::thread> pool;
    for (int t = 1; t < jobs; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);

    if (records_out) *records_out = std::move(collected);
    return SweepStats{executed.load(), resumed.load()};
}

}  // namespace kervolve
