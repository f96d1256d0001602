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
// msda: command line front end for the multi-source adaptation library.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "msda/msda.hpp"

namespace fs = std::filesystem;
using namespace msda;

namespace {

TrainConfig config_or_default(const std::string& path) {
    return path.empty() ? TrainConfig{} : load_train_config(path);
}

void print_metrics(const Metrics& m, const std::string& subject, Head head) {
    std::printf("subject %s head %s accuracy %.6f\n", subject.c_str(),
                head == Head::source ? "source" : "target", m.accuracy);
    for (std::size_t c = 0; c < m.per_class_accuracy.size(); ++c) {
        std::printf("  class %zu accuracy %.6f\n", c, m.per_class_accuracy[c]);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Subject-based multi-source domain adaptation"};
    app.require_subcommand(1);

    // gen-data
    std::string gen_config, gen_out;
    std::uint64_t gen_seed = 0;
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic benchmark to disk");
    gen->add_option("--config", gen_config, "Experiment config (JSON); its data section is used");
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--seed", gen_seed, "Run seed the benchmark is drawn for");
    std::optional<std::size_t> gen_subjects, gen_targets, gen_classes, gen_irrelevant;
    gen->add_option("--subjects", gen_subjects, "Number of source subjects");
    gen->add_option("--targets", gen_targets, "Number of target subjects");
    gen->add_option("--classes", gen_classes, "Number of classes");
    gen->add_option("--irrelevant", gen_irrelevant, "Sources drawn from the irrelevant preset");

    // train
    std::string tr_config, tr_sources, tr_out, tr_log;
    auto* train = app.add_subcommand("train", "Stage 1: supervised training with source alignment");
    train->add_option("--config", tr_config, "Train config (JSON)");
    train->add_option("--sources", tr_sources, "Directory of labeled subject directories")->required();
    train->add_option("--out", tr_out, "Checkpoint to write")->required();
    train->add_option("--log", tr_log, "Per-epoch CSV log");

    // adapt
    std::string ad_config, ad_ckpt, ad_sources, ad_target, ad_truth, ad_out, ad_log;
    auto* adapt = app.add_subcommand("adapt", "Stage 2: adapt a trained model to an unlabeled target");
    adapt->add_option("--config", ad_config, "Train config (JSON)");
    adapt->add_option("--checkpoint", ad_ckpt, "Stage-1 checkpoint")->required();
    adapt->add_option("--sources", ad_sources, "Directory of labeled subject directories")->required();
    adapt->add_option("--target", ad_target, "Unlabeled target subject directory")->required();
    adapt->add_option("--truth", ad_truth, "Labeled copy of the target, for pseudo-label diagnostics");
    adapt->add_option("--out", ad_out, "Checkpoint to write")->required();
    adapt->add_option("--log", ad_log, "Per-epoch CSV log");

    // eval
    std::string ev_ckpt, ev_data, ev_head = "source";
    auto* eval = app.add_subcommand("eval", "Accuracy of a checkpoint on a labeled subject");
    eval->add_option("--checkpoint", ev_ckpt, "Checkpoint")->required();
    eval->add_option("--data", ev_data, "Labeled subject directory")->required();
    eval->add_option("--head", ev_head, "Classifier head")->check(CLI::IsMember({"source", "target"}));

    // pseudo-label
    std::string pl_ckpt, pl_target, pl_out;
    double pl_tau = 0.9;
    auto* pseudo = app.add_subcommand("pseudo-label", "Confident pseudo-labels for a target subject");
    pseudo->add_option("--checkpoint", pl_ckpt, "Checkpoint")->required();
    pseudo->add_option("--target", pl_target, "Target subject directory")->required();
    pseudo->add_option("--tau", pl_tau, "Confidence threshold")->check(CLI::Range(0.0, 1.0));
    pseudo->add_option("--out", pl_out, "CSV to write")->required();

    // select-sources
    std::string ss_ckpt, ss_sources, ss_target;
    std::size_t ss_k = 4;
    double ss_bandwidth = 0.0;
    auto* select = app.add_subcommand("select-sources", "Rank sources by feature MMD to the target");
    select->add_option("--checkpoint", ss_ckpt, "Checkpoint")->required();
    select->add_option("--sources", ss_sources, "Directory of subject directories")->required();
    select->add_option("--target", ss_target, "Target subject directory")->required();
    select->add_option("--k", ss_k, "Number of sources to keep");
    select->add_option("--bandwidth", ss_bandwidth, "Kernel bandwidth (0 = median heuristic)");

    // run-experiment
    std::string ex_config, ex_out;
    std::size_t ex_jobs = 1;
    bool ex_verbose = false;
    auto* run = app.add_subcommand("run-experiment", "Run the mode x target x seed grid");
    run->add_option("--config", ex_config, "Experiment config (JSON)")->required();
    run->add_option("--jobs", ex_jobs, "Worker threads")->check(CLI::PositiveNumber);
    run->add_option("--output-dir", ex_out, "Override output_dir");
    run->add_flag("--verbose", ex_verbose, "Print training warnings");

    // ablation
    std::string ab_kind, ab_config, ab_out;
    std::size_t ab_jobs = 1;
    auto* ablation = app.add_subcommand("ablation", "Pseudo-label or source-count ablation");
    ablation->add_option("kind", ab_kind, "pl or scaling")->required()->check(CLI::IsMember({"pl", "scaling"}));
    ablation->add_option("--config", ab_config, "Experiment config (JSON)")->required();
    ablation->add_option("--jobs", ab_jobs, "Worker threads")->check(CLI::PositiveNumber);
    ablation->add_option("--output-dir", ab_out, "Override output_dir");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            ExperimentConfig cfg = gen_config.empty() ? ExperimentConfig{} : load_experiment_config(gen_config);
            cfg.data.data_dir.clear();
            auto& bs = cfg.data.benchmark;
            if (gen_subjects) bs.num_sources = *gen_subjects;
            if (gen_targets) bs.num_targets = *gen_targets;
            if (gen_classes) bs.num_classes = *gen_classes;
            if (gen_irrelevant) bs.num_irrelevant = *gen_irrelevant;
            const Benchmark b = benchmark_for_seed(cfg.data, gen_seed);
            write_benchmark_dir(b, gen_out);
            std::printf("wrote %zu sources and %zu targets to %s\n", b.sources.size(), b.targets.size(),
                        gen_out.c_str());
            return 0;
        }
        if (*train) {
            TrainConfig cfg = config_or_default(tr_config);
            auto sources = load_subject_tree(tr_sources);
            if (cfg.mode == Mode::source_combined_uda) sources = {merge_domains(sources, "combined")};
            auto res = train_source_alignment(cfg, sources);
            save_checkpoint(tr_out, res.model, config_hash(cfg));
            if (!tr_log.empty()) write_epoch_log(res.log, tr_log);
            std::printf("trained on %zu source domains, final loss %.6f\n", sources.size(),
                        res.log.empty() ? 0.0 : res.log.back().loss_total);
            return 0;
        }
        if (*adapt) {
            TrainConfig cfg = config_or_default(ad_config);
            const Checkpoint ck = load_checkpoint(ad_ckpt);
            if (ck.config_hash != config_hash(cfg)) {
                std::cerr << "warning: checkpoint was trained with a different config (" << ck.config_hash
                          << ")\n";
            }
            auto sources = load_subject_tree(ad_sources);
            if (cfg.mode == Mode::source_combined_uda) sources = {merge_domains(sources, "combined")};
            auto target = load_subject_dir(ad_target);
            std::optional<std::vector<int>> truth;
            if (!ad_truth.empty()) {
                auto t = load_subject_dir(ad_truth);
                if (!t.labels) throw ValidationError("--truth subject must be labeled");
                truth = *t.labels;
            }
            if (target.labeled()) target = strip_labels(std::move(target)).first;
            target.role = Role::target;
            StageOptions opts{kStreamStage2};
            if (truth) opts.target_truth = &*truth;
            auto res = adapt_target(cfg, ck.model, sources, target, opts);
            save_checkpoint(ad_out, res.model, config_hash(cfg));
            if (!ad_log.empty()) write_epoch_log(res.log, ad_log);
            for (std::size_t i = 0; i < res.refresh_epochs.size(); ++i) {
                std::printf("refresh epoch %zu tau %.4f selected %zu", res.refresh_epochs[i], res.tau_trace[i],
                            res.selected_count_trace[i]);
                if (i < res.pl_accuracy_trace.size()) std::printf(" pl_accuracy %.4f", res.pl_accuracy_trace[i]);
                std::printf("\n");
            }
            return 0;
        }
        if (*eval) {
            const Checkpoint ck = load_checkpoint(ev_ckpt);
            const auto data = load_subject_dir(ev_data);
            const Head head = ev_head == "target" ? Head::target : Head::source;
            print_metrics(evaluate(ck.model, head, data), data.subject_id, head);
            return 0;
        }
        if (*pseudo) {
            const Checkpoint ck = load_checkpoint(pl_ckpt);
            const auto target = load_subject_dir(pl_target);
            const auto pair = predict_pair(ck.model, target.samples, target.geometry);
            const auto pl = select_confident(pair.original, pair.augmented, pl_tau);
            write_pseudo_labels_csv(pl, pl_out);
            std::printf("selected %zu of %zu samples at tau %.4f\n", pl.size(), target.size(), pl_tau);
            if (target.labels) {
                if (auto acc = pseudo_label_accuracy(pl, *target.labels)) {
                    std::printf("pseudo-label accuracy %.6f\n", *acc);
                }
            }
            return 0;
        }
        if (*select) {
            const Checkpoint ck = load_checkpoint(ss_ckpt);
            const auto sources = load_subject_tree(ss_sources);
            const auto target = load_subject_dir(ss_target);
            const KernelConfig kernel =
                ss_bandwidth > 0.0 ? KernelConfig::fixed(ss_bandwidth) : KernelConfig::median(kStreamTopK);
            for (const auto& r : select_top_k_sources(ck.model, sources, target, ss_k, kernel)) {
                std::printf("%s %.8f\n", r.subject_id.c_str(), r.distance);
            }
            return 0;
        }
        if (*run) {
            ExperimentConfig cfg = load_experiment_config(ex_config);
            if (!ex_out.empty()) cfg.output_dir = ex_out;
            RunOptions opts;
            opts.jobs = ex_jobs;
            if (ex_verbose) opts.warn = warn_stderr;
            const auto outcome = run_experiment(cfg, opts);
            for (const auto& s : outcome.summary) {
                if (s.target_subject_id == "ALL") {
                    std::printf("%-20s mean accuracy %.4f over %zu runs\n", to_string(s.mode), s.mean_accuracy,
                                s.num_runs);
                }
            }
            std::size_t failed = 0;
            for (const auto& r : outcome.rows) {
                if (!r.ok) {
                    ++failed;
                    std::cerr << "failed: " << to_string(r.mode) << " " << r.target_subject_id << " seed "
                              << r.seed << ": " << r.error << "\n";
                }
            }
            std::printf("report: %s (%zu cells, %zu computed, %zu failed)\n", outcome.report_path.string().c_str(),
                        outcome.rows.size(), outcome.cells_computed, failed);
            return outcome.all_ok ? 0 : 1;
        }
        if (*ablation) {
            ExperimentConfig cfg = load_experiment_config(ab_config);
            if (!ab_out.empty()) cfg.output_dir = ab_out;
            RunOptions opts;
            opts.jobs = ab_jobs;
            if (ab_kind == "pl") {
                const auto r = ablation_pl(cfg, opts);
                std::printf("plain argmax accuracy %.4f\n", r.mean_plain);
                if (r.mean_acpl) std::printf("acpl accuracy        %.4f\n", *r.mean_acpl);
                std::printf("wrote %s\n", r.csv_path.string().c_str());
            } else {
                const auto r = ablation_scaling(cfg, opts);
                for (const auto& [n, acc] : r.mean_accuracy) {
                    std::printf("%2zu sources: accuracy %.4f, wall time %.2fs\n", n, acc, r.total_wall_time.at(n));
                }
                std::printf("wrote %s\n", r.csv_path.string().c_str());
            }
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
