/*
 * Copyright 2026 The msda Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Experiment grid runner: every (mode, target, seed) cell goes through
// run_protocol; results are cached per cell so reruns only fill gaps.
//
// Output files in output_dir:
//   report.csv    mode,target_subject_id,seed,status,accuracy,pl_accuracy_final
//   summary.csv   mode,target_subject_id,mean_accuracy,num_runs
//                 (one row per mode and target, plus target "ALL" per mode)
//   timings.csv   mode,target_subject_id,seed,wall_time_seconds
//   cells/        one JSON file per finished cell (failed cells are retried)
//
// Wall times live in timings.csv so that report.csv is reproducible byte
// for byte.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "msda/trainer.hpp"

namespace msda {

struct DataSpec {
    BenchmarkSpec benchmark;
    bool vary_with_seed = true;  // draw a fresh benchmark for every run seed
    std::string data_dir;        // when set, load gen-data output instead of generating
};

struct ExperimentConfig {
    DataSpec data;
    std::vector<Mode> modes{std::begin(kAllModes), std::end(kAllModes)};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    TrainConfig train;
    std::string output_dir = "results";
    std::vector<std::size_t> scaling_counts{2, 4, 8, 12};

    void validate() const {
        if (seeds.empty()) throw ValidationError("experiment needs at least one seed");
        if (modes.empty()) throw ValidationError("experiment needs at least one mode");
        if (output_dir.empty()) throw ValidationError("output_dir must be set");
        train.validate();
    }
};

inline const std::vector<std::string>& report_columns() {
    static const std::vector<std::string> cols{"mode",   "target_subject_id", "seed",
                                               "status", "accuracy",          "pl_accuracy_final"};
    return cols;
}

inline const std::vector<std::string>& summary_columns() {
    static const std::vector<std::string> cols{"mode", "target_subject_id", "mean_accuracy", "num_runs"};
    return cols;
}

struct ReportRow {
    Mode mode = Mode::msda;
    std::string target_subject_id;
    std::uint64_t seed = 0;
    bool ok = true;
    std::string error;
    double accuracy = 0.0;
    std::optional<double> pl_accuracy_final;
    double wall_time_seconds = 0.0;
};

struct SummaryRow {
    Mode mode = Mode::msda;
    std::string target_subject_id;  // "ALL" for the per-mode grand mean
    double mean_accuracy = 0.0;
    std::size_t num_runs = 0;
};

struct ExperimentOutcome {
    std::filesystem::path report_path;
    std::vector<ReportRow> rows;
    std::vector<SummaryRow> summary;
    bool all_ok = true;
    std::size_t cells_computed = 0;  // cells trained in this invocation

    std::optional<double> grand_mean(Mode m) const {
        for (const auto& s : summary) {
            if (s.mode == m && s.target_subject_id == "ALL") return s.mean_accuracy;
        }
        return std::nullopt;
    }
};

// ---------------------------------------------------------------------------
// Config (de)serialization

namespace detail {

inline nlohmann::json range_to_json(const NuisanceRange& r) {
    return {{"brightness", {r.brightness_lo, r.brightness_hi}},
            {"contrast", {r.contrast_lo, r.contrast_hi}},
            {"max_shift", r.max_shift},
            {"noise", {r.noise_lo, r.noise_hi}},
            {"random_brightness_sign", r.random_brightness_sign}};
}

inline NuisanceRange range_from_json(const nlohmann::json& j, NuisanceRange r, const std::string& where) {
    reject_unknown_keys(j, {"brightness", "contrast", "max_shift", "noise", "random_brightness_sign"}, where);
    auto pair = [&](const char* key, double& lo, double& hi) {
        if (!j.contains(key)) return;
        const auto& v = j.at(key);
        if (!v.is_array() || v.size() != 2) {
            throw ValidationError(where + "." + key + " must be [lo, hi]");
        }
        lo = v[0].get<double>();
        hi = v[1].get<double>();
        if (lo > hi) throw ValidationError(where + "." + key + ": lo > hi");
    };
    pair("brightness", r.brightness_lo, r.brightness_hi);
    pair("contrast", r.contrast_lo, r.contrast_hi);
    pair("noise", r.noise_lo, r.noise_hi);
    read_if(j, "max_shift", r.max_shift);
    read_if(j, "random_brightness_sign", r.random_brightness_sign);
    return r;
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
    const auto& b = c.data.benchmark;
    nlohmann::json modes = nlohmann::json::array();
    for (Mode m : c.modes) modes.push_back(to_string(m));
    return {{"data",
             {{"num_sources", b.num_sources},
              {"num_targets", b.num_targets},
              {"num_irrelevant", b.num_irrelevant},
              {"num_classes", b.num_classes},
              {"samples_per_class", b.samples_per_class},
              {"eval_samples_per_class", b.eval_samples_per_class},
              {"image_height", b.image.height},
              {"image_width", b.image.width},
              {"source_range", detail::range_to_json(b.source_range)},
              {"target_range", detail::range_to_json(b.target_range)},
              {"irrelevant_contrast", b.irrelevant_contrast},
              {"irrelevant_noise", b.irrelevant_noise},
              {"seed", b.seed},
              {"vary_with_seed", c.data.vary_with_seed},
              {"data_dir", c.data.data_dir}}},
            {"modes", modes},
            {"seeds", c.seeds},
            {"train", to_json(c.train)},
            {"output_dir", c.output_dir},
            {"scaling_counts", c.scaling_counts}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, {"data", "modes", "seeds", "train", "output_dir", "scaling_counts"},
                                "experiment config");
    ExperimentConfig c;
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::reject_unknown_keys(
            d,
            {"num_sources", "num_targets", "num_irrelevant", "num_classes", "samples_per_class",
             "eval_samples_per_class", "image_height", "image_width", "source_range", "target_range",
             "irrelevant_contrast", "irrelevant_noise", "seed", "vary_with_seed", "data_dir"},
            "data");
        auto& b = c.data.benchmark;
        detail::read_if(d, "num_sources", b.num_sources);
        detail::read_if(d, "num_targets", b.num_targets);
        detail::read_if(d, "num_irrelevant", b.num_irrelevant);
        detail::read_if(d, "num_classes", b.num_classes);
        detail::read_if(d, "samples_per_class", b.samples_per_class);
        detail::read_if(d, "eval_samples_per_class", b.eval_samples_per_class);
        detail::read_if(d, "image_height", b.image.height);
        detail::read_if(d, "image_width", b.image.width);
        detail::read_if(d, "irrelevant_contrast", b.irrelevant_contrast);
        detail::read_if(d, "irrelevant_noise", b.irrelevant_noise);
        detail::read_if(d, "seed", b.seed);
        detail::read_if(d, "vary_with_seed", c.data.vary_with_seed);
        detail::read_if(d, "data_dir", c.data.data_dir);
        if (d.contains("source_range")) {
            b.source_range = detail::range_from_json(d.at("source_range"), b.source_range, "source_range");
        }
        if (d.contains("target_range")) {
            b.target_range = detail::range_from_json(d.at("target_range"), b.target_range, "target_range");
        }
    }
    if (j.contains("modes")) {
        c.modes.clear();
        for (const auto& m : j.at("modes")) c.modes.push_back(parse_mode(m.get<std::string>()));
    }
    detail::read_if(j, "seeds", c.seeds);
    detail::read_if(j, "output_dir", c.output_dir);
    detail::read_if(j, "scaling_counts", c.scaling_counts);
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config not found: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed config " + path + ": " + e.what());
    }
    return experiment_config_from_json(j);
}

/// Hash of everything that affects results (output_dir excluded).
inline std::string experiment_hash(const ExperimentConfig& c) {
    auto j = to_json(c);
    j.erase("output_dir");
    return hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// Data for one run seed

inline std::uint64_t benchmark_seed_for(const DataSpec& d, std::uint64_t run_seed) {
    return d.vary_with_seed ? d.benchmark.seed + 1000003ULL * (run_seed + 1) : d.benchmark.seed;
}

/// Writes a benchmark in the directory layout read by load_benchmark_dir.
inline void write_benchmark_dir(const Benchmark& b, const std::filesystem::path& root) {
    for (const auto& s : b.sources) write_subject_dir(s, root / "sources" / s.subject_id);
    for (const auto& t : b.targets) {
        write_subject_dir(t.unlabeled, root / "targets" / t.unlabeled.subject_id);
        SubjectDomain truth = t.unlabeled;
        truth.labels = t.truth;
        truth.role = Role::evaluation;
        write_subject_dir(truth, root / "targets_truth" / t.unlabeled.subject_id);
        write_subject_dir(t.eval, root / "targets_eval" / t.eval.subject_id);
    }
}

/// Reads sources/, targets/, targets_eval/ and (optional) targets_truth/.
inline Benchmark load_benchmark_dir(const std::filesystem::path& root) {
    Benchmark b;
    b.sources = load_subject_tree(root / "sources");
    auto targets = load_subject_tree(root / "targets");
    for (auto& t : targets) {
        if (t.labeled()) throw ValidationError("target " + t.subject_id + " must be unlabeled");
        TargetSubject ts;
        ts.eval = load_subject_dir(root / "targets_eval" / t.subject_id);
        ts.eval.role = Role::evaluation;
        const auto truth_dir = root / "targets_truth" / t.subject_id;
        if (std::filesystem::exists(truth_dir)) {
            auto truth = load_subject_dir(truth_dir);
            if (!truth.labels || truth.size() != t.size()) {
                throw ValidationError("targets_truth/" + t.subject_id + " does not match targets/");
            }
            ts.truth = *truth.labels;
        }
        ts.unlabeled = std::move(t);
        b.targets.push_back(std::move(ts));
    }
    return b;
}

inline Benchmark benchmark_for_seed(const DataSpec& d, std::uint64_t run_seed) {
    if (!d.data_dir.empty()) return load_benchmark_dir(d.data_dir);
    BenchmarkSpec spec = d.benchmark;
    spec.seed = benchmark_seed_for(d, run_seed);
    return generate_benchmark(spec);
}

// ---------------------------------------------------------------------------
// Stage-1 memoisation: several modes share the same source training run.

class Stage1Cache {
public:
    StageResult get(const TrainConfig& cfg, std::span<const SubjectDomain> sources) {
        const std::string key = make_key(cfg, sources);
        {
            std::lock_guard lock(mu_);
            if (auto it = cache_.find(key); it != cache_.end()) return it->second;
        }
        StageResult r = train_source_alignment(cfg, sources);
        std::lock_guard lock(mu_);
        return cache_.emplace(key, std::move(r)).first->second;
    }

    Stage1Provider provider() {
        return [this](const TrainConfig& c, std::span<const SubjectDomain> s) { return get(c, s); };
    }

private:
    static std::string make_key(const TrainConfig& cfg, std::span<const SubjectDomain> sources) {
        nlohmann::json j = {{"lr", cfg.lr},
                            {"batch_size", cfg.batch_size},
                            {"lambda_mmd", cfg.lambda_mmd},
                            {"epochs", cfg.epochs_stage1},
                            {"seed", cfg.seed},
                            {"pair", to_string(cfg.source_pair_mode)},
                            {"bw", cfg.kernel_bandwidth},
                            {"hidden", cfg.hidden_dims},
                            {"feat", cfg.feature_dim},
                            {"flip", cfg.flip_augment}};
        std::string key = j.dump();
        for (const auto& s : sources) {
            const auto& d = s.samples.data();
            std::string_view bytes(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
            key += "|" + s.subject_id + ":" + hex64(fnv1a64(bytes));
            if (s.labels) {
                std::string_view lb(reinterpret_cast<const char*>(s.labels->data()), s.labels->size() * sizeof(int));
                key += ":" + hex64(fnv1a64(lb));
            }
        }
        return key;
    }

    std::mutex mu_;
    std::map<std::string, StageResult> cache_;
};

// ---------------------------------------------------------------------------

namespace detail {

inline void ensure_writable_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    const auto probe = dir / ".write_probe";
    {
        std::ofstream p(probe);
        if (!p) throw IoError("output directory is not writable: " + dir.string());
    }
    std::filesystem::remove(probe, ec);
}

inline std::string opt_double(const std::optional<double>& v) {
    return v && std::isfinite(*v) ? format_double(*v) : "";
}

inline nlohmann::json row_to_json(const ReportRow& r) {
    nlohmann::json j = {{"mode", to_string(r.mode)},
                        {"target", r.target_subject_id},
                        {"seed", r.seed},
                        {"ok", r.ok},
                        {"error", r.error},
                        {"accuracy", format_double(r.accuracy)},
                        {"wall_time_seconds", r.wall_time_seconds}};
    if (r.pl_accuracy_final) j["pl_accuracy_final"] = format_double(*r.pl_accuracy_final);
    return j;
}

inline ReportRow row_from_json(const nlohmann::json& j) {
    ReportRow r;
    r.mode = parse_mode(j.at("mode").get<std::string>());
    r.target_subject_id = j.at("target").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.ok = j.at("ok").get<bool>();
    r.error = j.at("error").get<std::string>();
    r.accuracy = parse_double(j.at("accuracy").get<std::string>());
    r.wall_time_seconds = j.at("wall_time_seconds").get<double>();
    if (j.contains("pl_accuracy_final")) {
        r.pl_accuracy_final = parse_double(j.at("pl_accuracy_final").get<std::string>());
    }
    return r;
}

inline std::string cell_key(const std::string& exp_hash, Mode m, const std::string& target,
                            std::uint64_t seed) {
    return hex64(fnv1a64(concat(exp_hash, "|", to_string(m), "|", target, "|", seed)));
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::exception_ptr first_error;
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
        workers.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

inline std::vector<SummaryRow> summarize(const std::vector<ReportRow>& rows, std::span<const Mode> modes) {
    std::vector<SummaryRow> out;
    for (Mode m : modes) {
        std::map<std::string, std::pair<double, std::size_t>> per_target;
        double total = 0.0;
        std::size_t n = 0;
        for (const auto& r : rows) {
            if (r.mode != m || !r.ok) continue;
            auto& [sum, count] = per_target[r.target_subject_id];
            sum += r.accuracy;
            ++count;
            total += r.accuracy;
            ++n;
        }
        for (const auto& [target, acc] : per_target) {
            out.push_back({m, target, acc.first / static_cast<double>(acc.second), acc.second});
        }
        if (n > 0) out.push_back({m, "ALL", total / static_cast<double>(n), n});
    }
    return out;
}

inline void write_report_files(const std::filesystem::path& dir, const std::vector<ReportRow>& rows,
                               const std::vector<SummaryRow>& summary) {
    auto open = [&](const char* name) {
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw IoError("cannot write " + (dir / name).string());
        return out;
    };
    auto join = [](const std::vector<std::string>& cols) {
        std::string s;
        for (std::size_t i = 0; i < cols.size(); ++i) s += (i ? "," : "") + cols[i];
        return s;
    };
    {
        auto out = open("report.csv");
        out << join(report_columns()) << '\n';
        for (const auto& r : rows) {
            out << to_string(r.mode) << ',' << r.target_subject_id << ',' << r.seed << ','
                << (r.ok ? "ok" : "failed") << ',' << (r.ok ? format_double(r.accuracy) : "") << ','
                << detail::opt_double(r.pl_accuracy_final) << '\n';
        }
    }
    {
        auto out = open("summary.csv");
        out << join(summary_columns()) << '\n';
        for (const auto& s : summary) {
            out << to_string(s.mode) << ',' << s.target_subject_id << ',' << format_double(s.mean_accuracy)
                << ',' << s.num_runs << '\n';
        }
    }
    {
        auto out = open("timings.csv");
        out << "mode,target_subject_id,seed,wall_time_seconds\n";
        for (const auto& r : rows) {
            out << to_string(r.mode) << ',' << r.target_subject_id << ',' << r.seed << ','
                << format_double(r.wall_time_seconds) << '\n';
        }
    }
}

struct RunOptions {
    std::size_t jobs = 1;
    WarningSink warn = {};  // training warnings are dropped unless a sink is given
};

/// Runs every (mode x target x seed) cell, reusing cached cells from earlier runs.
inline ExperimentOutcome run_experiment(const ExperimentConfig& config, const RunOptions& opts = {}) {
    config.validate();
    const std::filesystem::path out_dir(config.output_dir);
    detail::ensure_writable_dir(out_dir);
    detail::ensure_writable_dir(out_dir / "cells");
    {
        std::ofstream cfg_out(out_dir / "config.json", std::ios::binary);
        cfg_out << to_json(config).dump(2) << '\n';
    }
    const std::string exp_hash = experiment_hash(config);

    struct SeedWork {
        std::uint64_t seed;
        std::vector<ReportRow> rows;
        std::size_t computed = 0;
    };
    std::vector<SeedWork> work;
    for (auto s : config.seeds) work.push_back({s, {}, 0});

    detail::parallel_for(work.size(), opts.jobs, [&](std::size_t wi) {
        SeedWork& w = work[wi];
        std::optional<Benchmark> bench;
        Stage1Cache cache;
        TrainConfig cfg = config.train;
        cfg.seed = w.seed;
        auto load_bench = [&]() -> const Benchmark& {
            if (!bench) bench = benchmark_for_seed(config.data, w.seed);
            return *bench;
        };
        std::vector<std::string> target_ids;
        if (config.data.data_dir.empty()) {
            for (std::size_t i = 0; i < config.data.benchmark.num_targets; ++i) {
                target_ids.push_back(subject_name('T', i));
            }
        } else {
            for (const auto& t : load_bench().targets) target_ids.push_back(t.unlabeled.subject_id);
        }
        for (Mode mode : config.modes) {
            for (std::size_t ti = 0; ti < target_ids.size(); ++ti) {
                const auto key = detail::cell_key(exp_hash, mode, target_ids[ti], w.seed);
                const auto cell_path = out_dir / "cells" / (key + ".json");
                if (std::filesystem::exists(cell_path)) {
                    std::ifstream in(cell_path);
                    nlohmann::json j;
                    try {
                        in >> j;
                        ReportRow cached = detail::row_from_json(j);
                        if (cached.ok) {
                            w.rows.push_back(std::move(cached));
                            continue;
                        }
                    } catch (const std::exception&) {
                        // unreadable cache entry: recompute it
                    }
                }
                ReportRow row;
                row.mode = mode;
                row.target_subject_id = target_ids[ti];
                row.seed = w.seed;
                const auto t0 = std::chrono::steady_clock::now();
                try {
                    const Benchmark& b = load_bench();
                    const TargetSubject& t = b.targets.at(ti);
                    cfg.mode = mode;
                    const std::vector<int>* truth = t.truth.empty() ? nullptr : &t.truth;
                    auto res = run_protocol(cfg, b.sources, t.unlabeled, t.eval, truth,
                                            cache.provider(), opts.warn);
                    row.accuracy = res.metrics.accuracy;
                    if (!res.metrics.pl_accuracy_trace.empty()) {
                        row.pl_accuracy_final = res.metrics.pl_accuracy_trace.back();
                    }
                } catch (const std::exception& e) {
                    row.ok = false;
                    row.error = e.what();
                }
                row.wall_time_seconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                ++w.computed;
                std::ofstream cell(cell_path, std::ios::binary);
                cell << detail::row_to_json(row).dump() << '\n';
                w.rows.push_back(std::move(row));
            }
        }
    });

    ExperimentOutcome outcome;
    for (auto& w : work) {
        outcome.cells_computed += w.computed;
        for (auto& r : w.rows) outcome.rows.push_back(std::move(r));
    }
    auto mode_rank = [&](Mode m) {
        return std::find(config.modes.begin(), config.modes.end(), m) - config.modes.begin();
    };
    std::stable_sort(outcome.rows.begin(), outcome.rows.end(), [&](const ReportRow& a, const ReportRow& b) {
        if (a.mode != b.mode) return mode_rank(a.mode) < mode_rank(b.mode);
        if (a.target_subject_id != b.target_subject_id) return a.target_subject_id < b.target_subject_id;
        return a.seed < b.seed;
    });
    for (const auto& r : outcome.rows) outcome.all_ok = outcome.all_ok && r.ok;
    outcome.summary = summarize(outcome.rows, config.modes);
    write_report_files(out_dir, outcome.rows, outcome.summary);
    outcome.report_path = out_dir / "report.csv";
    return outcome;
}

// ---------------------------------------------------------------------------
// Ablations

struct PlAblationRow {
    std::string target_subject_id;
    std::uint64_t seed = 0;
    std::size_t num_samples = 0;
    double plain_accuracy = 0.0;
    std::size_t acpl_selected = 0;
    std::optional<double> acpl_accuracy;  // undefined when nothing was selected
};

struct PlAblationOutcome {
    std::filesystem::path csv_path;
    std::vector<PlAblationRow> rows;
    double mean_plain = 0.0;
    std::optional<double> mean_acpl;  // over rows where ACPL selected something
};

/// Plain argmax labels vs ACPL at tau_init, both scored against ground truth,
/// for a stage-1 model trained once per seed.
inline PlAblationOutcome ablation_pl(const ExperimentConfig& config, const RunOptions& opts = {}) {
    config.validate();
    const std::filesystem::path out_dir(config.output_dir);
    detail::ensure_writable_dir(out_dir);
    std::vector<std::vector<PlAblationRow>> per_seed(config.seeds.size());
    detail::parallel_for(config.seeds.size(), opts.jobs, [&](std::size_t si) {
        const auto seed = config.seeds[si];
        const Benchmark b = benchmark_for_seed(config.data, seed);
        TrainConfig cfg = config.train;
        cfg.seed = seed;
        const StageResult s1 = train_source_alignment(cfg, b.sources);
        for (const auto& t : b.targets) {
            if (t.truth.empty()) throw ValidationError("PL ablation needs ground truth for " + t.unlabeled.subject_id);
            PlAblationRow row;
            row.target_subject_id = t.unlabeled.subject_id;
            row.seed = seed;
            row.num_samples = t.unlabeled.size();
            const auto pair = predict_pair(s1.model, t.unlabeled.samples, t.unlabeled.geometry);
            std::size_t hits = 0;
            for (std::size_t i = 0; i < pair.original.rows(); ++i) {
                hits += static_cast<int>(argmax(pair.original.row(i))) == t.truth[i];
            }
            row.plain_accuracy = static_cast<double>(hits) / static_cast<double>(pair.original.rows());
            const auto pl = select_confident(pair.original, pair.augmented, cfg.tau_schedule.tau_init);
            row.acpl_selected = pl.size();
            row.acpl_accuracy = pseudo_label_accuracy(pl, t.truth);
            per_seed[si].push_back(row);
        }
    });
    PlAblationOutcome out;
    double acpl_sum = 0.0;
    std::size_t acpl_n = 0;
    for (auto& rows : per_seed) {
        for (auto& r : rows) {
            out.mean_plain += r.plain_accuracy;
            if (r.acpl_accuracy) {
                acpl_sum += *r.acpl_accuracy;
                ++acpl_n;
            }
            out.rows.push_back(std::move(r));
        }
    }
    if (!out.rows.empty()) out.mean_plain /= static_cast<double>(out.rows.size());
    if (acpl_n) out.mean_acpl = acpl_sum / static_cast<double>(acpl_n);

    out.csv_path = out_dir / "pl_ablation.csv";
    std::ofstream csv(out.csv_path, std::ios::binary);
    if (!csv) throw IoError("cannot write " + out.csv_path.string());
    csv << "target_subject_id,seed,num_samples,plain_accuracy,acpl_selected,acpl_accuracy\n";
    for (const auto& r : out.rows) {
        csv << r.target_subject_id << ',' << r.seed << ',' << r.num_samples << ','
            << format_double(r.plain_accuracy) << ',' << r.acpl_selected << ','
            << detail::opt_double(r.acpl_accuracy) << '\n';
    }
    return out;
}

struct ScalingRow {
    std::size_t num_sources = 0;
    std::string target_subject_id;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    double wall_time_seconds = 0.0;
};

struct ScalingOutcome {
    std::filesystem::path csv_path;
    std::vector<ScalingRow> rows;
    std::map<std::size_t, double> mean_accuracy;  // by source count
    std::map<std::size_t, double> total_wall_time;
};

/// msda accuracy as the number of sources grows; subsets are nested prefixes
/// of a seeded permutation of the available sources.
inline ScalingOutcome ablation_scaling(const ExperimentConfig& config, const RunOptions& opts = {}) {
    config.validate();
    if (config.scaling_counts.empty()) throw ValidationError("scaling_counts is empty");
    const std::filesystem::path out_dir(config.output_dir);
    detail::ensure_writable_dir(out_dir);
    const std::size_t needed = *std::max_element(config.scaling_counts.begin(), config.scaling_counts.end());
    std::vector<std::vector<ScalingRow>> per_seed(config.seeds.size());
    std::vector<std::string> errors(config.seeds.size());
    detail::parallel_for(config.seeds.size(), opts.jobs, [&](std::size_t si) {
        try {
            const auto seed = config.seeds[si];
            const Benchmark b = benchmark_for_seed(config.data, seed);
            if (b.sources.size() < needed) {
                throw ValidationError(detail::concat("scaling ablation needs ", needed, " sources, data has ",
                                                     b.sources.size()));
            }
            std::vector<std::size_t> order(b.sources.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            Rng rng = make_rng(seed, 0x7363616c65);
            std::shuffle(order.begin(), order.end(), rng);
            TrainConfig cfg = config.train;
            cfg.seed = seed;
            cfg.mode = Mode::msda;
            for (std::size_t count : config.scaling_counts) {
                std::vector<std::size_t> pick(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
                std::sort(pick.begin(), pick.end());
                std::vector<SubjectDomain> subset;
                for (auto i : pick) subset.push_back(b.sources[i]);
                Stage1Cache cache;
                for (const auto& t : b.targets) {
                    const auto t0 = std::chrono::steady_clock::now();
                    auto res = run_protocol(cfg, subset, t.unlabeled, t.eval,
                                            t.truth.empty() ? nullptr : &t.truth, cache.provider(), opts.warn);
                    const double secs =
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                    per_seed[si].push_back({count, t.unlabeled.subject_id, seed, res.metrics.accuracy, secs});
                }
            }
        } catch (const std::exception& e) {
            errors[si] = e.what();
        }
    });
    for (const auto& e : errors) {
        if (!e.empty()) throw ValidationError("scaling ablation failed: " + e);
    }
    ScalingOutcome out;
    std::map<std::size_t, std::size_t> counts;
    for (auto& rows : per_seed) {
        for (auto& r : rows) {
            out.mean_accuracy[r.num_sources] += r.accuracy;
            out.total_wall_time[r.num_sources] += r.wall_time_seconds;
            ++counts[r.num_sources];
            out.rows.push_back(std::move(r));
        }
    }
    for (auto& [k, v] : out.mean_accuracy) v /= static_cast<double>(counts[k]);
    std::sort(out.rows.begin(), out.rows.end(), [](const ScalingRow& a, const ScalingRow& b) {
        return std::tie(a.num_sources, a.target_subject_id, a.seed) <
               std::tie(b.num_sources, b.target_subject_id, b.seed);
    });
    out.csv_path = out_dir / "scaling.csv";
    std::ofstream csv(out.csv_path, std::ios::binary);
    if (!csv) throw IoError("cannot write " + out.csv_path.string());
    csv << "num_sources,target_subject_id,seed,accuracy,wall_time_seconds\n";
    for (const auto& r : out.rows) {
        csv << r.num_sources << ',' << r.target_subject_id << ',' << r.seed << ','
            << format_double(r.accuracy) << ',' << format_double(r.wall_time_seconds) << '\n';
    }
    std::ofstream sum(out_dir / "scaling_summary.csv", std::ios::binary);
    sum << "num_sources,mean_accuracy,total_wall_time_seconds\n";
    for (const auto& [k, v] : out.mean_accuracy) {
        sum << k << ',' << format_double(v) << ',' << format_double(out.total_wall_time[k]) << '\n';
    }
    return out;
}

}  // namespace msda
