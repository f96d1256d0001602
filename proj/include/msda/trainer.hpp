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

// Two-stage subject-based multi-source adaptation.
//
// Stage 1 trains the shared extractor and the source head on labeled source
// subjects with cross-entropy plus lambda times the mean pairwise MMD between
// the per-subject minibatch features. Stage 2 keeps training on the sources,
// trains the target head on confident pseudo-labelled target samples, and
// pulls the confident target features towards the pooled source features with
// MMD. Pseudo-labels are regenerated every pl_refresh_M epochs.

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "msda/acpl.hpp"
#include "msda/checkpoint.hpp"
#include "msda/data.hpp"
#include "msda/mmd.hpp"
#include "msda/nn.hpp"

namespace msda {

enum class Mode { source_only, source_combined_uda, msda, msda_topk, oracle };
enum class PairMode { all_pairs, random_pair };

inline constexpr Mode kAllModes[] = {Mode::source_only, Mode::source_combined_uda, Mode::msda,
                                     Mode::msda_topk, Mode::oracle};

inline const char* to_string(Mode m) {
    switch (m) {
        case Mode::source_only: return "source_only";
        case Mode::source_combined_uda: return "source_combined_uda";
        case Mode::msda: return "msda";
        case Mode::msda_topk: return "msda_topk";
        case Mode::oracle: return "oracle";
    }
    return "?";
}

inline Mode parse_mode(const std::string& s) {
    for (Mode m : kAllModes) {
        if (s == to_string(m)) return m;
    }
    if (s == "uda") return Mode::source_combined_uda;
    throw ValidationError("unknown mode '" + s + "'");
}

inline const char* to_string(PairMode m) {
    return m == PairMode::all_pairs ? "all_pairs" : "random_pair";
}

inline PairMode parse_pair_mode(const std::string& s) {
    if (s == "all_pairs") return PairMode::all_pairs;
    if (s == "random_pair") return PairMode::random_pair;
    throw ValidationError("unknown source_pair_mode '" + s + "'");
}

struct TrainConfig {
    Mode mode = Mode::msda;
    double lr = 1e-4;
    std::size_t batch_size = 16;
    double lambda_mmd = 1.0;
    std::size_t epochs_stage1 = 60;
    std::size_t epochs_stage2 = 60;
    std::size_t pl_refresh_M = 10;
    TauSchedule tau_schedule{};
    std::size_t top_k = 4;
    std::uint64_t seed = 0;
    PairMode source_pair_mode = PairMode::all_pairs;
    double stage2_mmd_weight = 1.0;  // weight of the source-target MMD term in stage 2
    double kernel_bandwidth = 0.0;   // 0 selects the per-epoch median heuristic
    std::vector<std::size_t> hidden_dims = {64};
    std::size_t feature_dim = 32;
    bool flip_augment = false;  // randomly mirror training rows

    void validate() const {
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("lr must be > 0");
        if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
        if (!(lambda_mmd >= 0.0)) throw ValidationError("lambda_mmd must be >= 0");
        if (pl_refresh_M < 1) throw ValidationError("pl_refresh_M must be >= 1");
        if (!(stage2_mmd_weight >= 0.0)) throw ValidationError("stage2_mmd_weight must be >= 0");
        if (!(kernel_bandwidth >= 0.0)) throw ValidationError("kernel_bandwidth must be >= 0");
        if (feature_dim < 1) throw ValidationError("feature_dim must be >= 1");
        tau_schedule.validate();
    }

    KernelConfig kernel(std::uint64_t salt) const {
        return kernel_bandwidth > 0.0 ? KernelConfig::fixed(kernel_bandwidth)
                                      : KernelConfig::median(seed * 1000003ULL + salt);
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"mode", to_string(c.mode)},
            {"lr", c.lr},
            {"batch_size", c.batch_size},
            {"lambda_mmd", c.lambda_mmd},
            {"epochs_stage1", c.epochs_stage1},
            {"epochs_stage2", c.epochs_stage2},
            {"pl_refresh_M", c.pl_refresh_M},
            {"tau_schedule",
             {{"tau_init", c.tau_schedule.tau_init},
              {"decay", c.tau_schedule.decay},
              {"period_epochs", c.tau_schedule.period_epochs},
              {"tau_min", c.tau_schedule.tau_min}}},
            {"top_k", c.top_k},
            {"seed", c.seed},
            {"source_pair_mode", to_string(c.source_pair_mode)},
            {"stage2_mmd_weight", c.stage2_mmd_weight},
            {"kernel_bandwidth", c.kernel_bandwidth},
            {"hidden_dims", c.hidden_dims},
            {"feature_dim", c.feature_dim},
            {"flip_augment", c.flip_augment}};
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
    if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) throw ValidationError("unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& dst) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad value for '") + key + "': " + e.what());
    }
}

}  // namespace detail

/// Fields absent from `j` keep their defaults; unknown keys are errors.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(
        j,
        {"mode", "lr", "batch_size", "lambda_mmd", "epochs_stage1", "epochs_stage2", "pl_refresh_M",
         "tau_schedule", "top_k", "seed", "source_pair_mode", "stage2_mmd_weight",
         "kernel_bandwidth", "hidden_dims", "feature_dim", "flip_augment"},
        "train config");
    TrainConfig c;
    std::string mode = to_string(c.mode), pair = to_string(c.source_pair_mode);
    detail::read_if(j, "mode", mode);
    detail::read_if(j, "source_pair_mode", pair);
    c.mode = parse_mode(mode);
    c.source_pair_mode = parse_pair_mode(pair);
    detail::read_if(j, "lr", c.lr);
    detail::read_if(j, "batch_size", c.batch_size);
    detail::read_if(j, "lambda_mmd", c.lambda_mmd);
    detail::read_if(j, "epochs_stage1", c.epochs_stage1);
    detail::read_if(j, "epochs_stage2", c.epochs_stage2);
    detail::read_if(j, "pl_refresh_M", c.pl_refresh_M);
    detail::read_if(j, "top_k", c.top_k);
    detail::read_if(j, "seed", c.seed);
    detail::read_if(j, "stage2_mmd_weight", c.stage2_mmd_weight);
    detail::read_if(j, "kernel_bandwidth", c.kernel_bandwidth);
    detail::read_if(j, "hidden_dims", c.hidden_dims);
    detail::read_if(j, "feature_dim", c.feature_dim);
    detail::read_if(j, "flip_augment", c.flip_augment);
    if (j.contains("tau_schedule")) {
        const auto& t = j.at("tau_schedule");
        detail::reject_unknown_keys(t, {"tau_init", "decay", "period_epochs", "tau_min"},
                                    "tau_schedule");
        detail::read_if(t, "tau_init", c.tau_schedule.tau_init);
        detail::read_if(t, "decay", c.tau_schedule.decay);
        detail::read_if(t, "period_epochs", c.tau_schedule.period_epochs);
        detail::read_if(t, "tau_min", c.tau_schedule.tau_min);
    }
    c.validate();
    return c;
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config not found: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed config " + path + ": " + e.what());
    }
    return train_config_from_json(j);
}

inline std::string config_hash(const TrainConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

// ---------------------------------------------------------------------------

/// Per-epoch means of the step losses. loss_mmd is the weighted MMD term, so
/// loss_total == loss_ce_s + loss_ce_t + loss_mmd.
struct EpochLog {
    std::size_t epoch = 0;
    double loss_total = 0.0;
    double loss_ce_s = 0.0;
    double loss_ce_t = 0.0;
    double loss_mmd = 0.0;
    std::optional<double> tau;
    std::optional<std::size_t> confident_count;
};

struct StageResult {
    ModelState model;
    std::vector<EpochLog> log;
    std::vector<std::size_t> refresh_epochs;
    std::vector<std::size_t> selected_count_trace;
    std::vector<double> pl_accuracy_trace;  // only when ground truth was supplied
    std::vector<double> tau_trace;
};

using WarningSink = std::function<void(const std::string&)>;

inline void warn_stderr(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

struct StageOptions {
    std::uint64_t rng_stream = 0;
    const std::vector<int>* target_truth = nullptr;  // diagnostics only
    WarningSink warn = warn_stderr;
};

inline constexpr std::uint64_t kStreamInit = 1;
inline constexpr std::uint64_t kStreamStage1 = 2;
inline constexpr std::uint64_t kStreamStage2 = 3;
inline constexpr std::uint64_t kStreamOracle = 4;
inline constexpr std::uint64_t kStreamTopK = 5;

/// Steps so that each domain is visited about once per epoch.
inline std::size_t steps_per_epoch(std::span<const SubjectDomain> domains, std::size_t batch_size) {
    std::size_t total = 0;
    for (const auto& d : domains) total += d.size();
    const std::size_t per_step = batch_size * domains.size();
    return std::max<std::size_t>(1, (total + per_step - 1) / per_step);
}

inline ModelState init_model_for(const TrainConfig& cfg, const SubjectDomain& like) {
    Rng rng = make_rng(cfg.seed, kStreamInit);
    return init_model({like.geometry.pixels(), cfg.hidden_dims, cfg.feature_dim, like.num_classes}, rng);
}

namespace detail {

inline void check_finite_loss(double v, const char* stage, std::size_t epoch, std::size_t step) {
    if (!std::isfinite(v)) {
        throw NumericError(concat("non-finite loss in ", stage, " at epoch ", epoch, ", step ", step));
    }
}

inline void check_sources(std::span<const SubjectDomain> sources) {
    if (sources.empty()) throw ValidationError("need at least one source subject");
    for (const auto& s : sources) {
        if (!s.labeled()) throw ValidationError("source subject " + s.subject_id + " is unlabeled");
        s.validate();
    }
}

inline std::vector<int> concat_labels(const std::vector<DomainBatch>& batches) {
    std::vector<int> y;
    for (const auto& b : batches) y.insert(y.end(), b.labels.begin(), b.labels.end());
    return y;
}

inline std::vector<Matrix> split_rows(const Matrix& m, std::size_t parts, std::size_t rows_each) {
    std::vector<Matrix> out;
    out.reserve(parts);
    for (std::size_t i = 0; i < parts; ++i) out.push_back(slice_rows(m, i * rows_each, rows_each));
    return out;
}

inline void add_rows(Matrix& dst, std::size_t first, const Matrix& src, double weight) {
    for (std::size_t r = 0; r < src.rows(); ++r) {
        auto d = dst.row(first + r);
        auto s = src.row(r);
        for (std::size_t c = 0; c < s.size(); ++c) d[c] += weight * s[c];
    }
}

inline double resolve_sigma(const TrainConfig& cfg, std::span<const Matrix> pooled, std::uint64_t salt) {
    return resolve_bandwidth(cfg.kernel(salt), pooled);
}

}  // namespace detail

/// Stage 1: L = CE over all source rows + lambda * MMD between source minibatches.
/// Starts from `initial` when given, otherwise from a seeded initialisation.
inline StageResult train_source_alignment(const TrainConfig& cfg, std::span<const SubjectDomain> sources,
                                          const ModelState* initial = nullptr,
                                          StageOptions opts = {kStreamStage1}) {
    cfg.validate();
    detail::check_sources(sources);
    StageResult res;
    res.model = initial ? *initial : init_model_for(cfg, sources.front());
    res.model.validate();
    Rng rng = make_rng(cfg.seed, opts.rng_stream);
    const std::size_t steps = steps_per_epoch(sources, cfg.batch_size);
    const std::size_t bs = cfg.batch_size;
    const bool use_mmd = sources.size() > 1 && cfg.lambda_mmd > 0.0;

    for (std::size_t epoch = 0; epoch < cfg.epochs_stage1; ++epoch) {
        EpochLog log;
        log.epoch = epoch;
        double sigma = 0.0;
        for (std::size_t step = 0; step < steps; ++step) {
            auto batches = sample_multi_domain_batch(sources, bs, rng);
            std::vector<Matrix> parts;
            for (std::size_t d = 0; d < batches.size(); ++d) {
                parts.push_back(std::move(batches[d].samples));
                if (cfg.flip_augment) random_hflip(parts.back(), sources[d].geometry, rng);
            }
            const Matrix x = vstack(parts);
            const auto y = detail::concat_labels(batches);

            const ForwardTrace trace = trace_features(res.model, x);
            const CrossEntropy ce =
                cross_entropy(softmax(forward_logits(res.model.source_head, trace.features)), y);
            HeadBackward hb = head_backward(res.model.source_head, trace.features, ce.grad_logits);
            Matrix feature_grad = std::move(hb.feature_grad);

            double mmd_term = 0.0;
            if (use_mmd) {
                const auto feats = detail::split_rows(trace.features, sources.size(), bs);
                if (step == 0) sigma = detail::resolve_sigma(cfg, feats, epoch);
                if (cfg.source_pair_mode == PairMode::all_pairs) {
                    auto pw = pairwise_source_mmd_gradient(feats, KernelConfig::fixed(sigma));
                    mmd_term = cfg.lambda_mmd * pw.value;
                    for (std::size_t i = 0; i < feats.size(); ++i) {
                        detail::add_rows(feature_grad, i * bs, pw.grads[i], cfg.lambda_mmd);
                    }
                } else {
                    std::uniform_int_distribution<std::size_t> pick(0, sources.size() - 1);
                    const std::size_t i = pick(rng);
                    std::size_t j = pick(rng);
                    while (j == i) j = pick(rng);
                    auto g = mmd_gradient_sigma(feats[i], feats[j], sigma);
                    mmd_term = cfg.lambda_mmd * g.value;
                    detail::add_rows(feature_grad, i * bs, g.grad_a, cfg.lambda_mmd);
                    detail::add_rows(feature_grad, j * bs, g.grad_b, cfg.lambda_mmd);
                }
            }
            const double total = ce.loss + mmd_term;
            detail::check_finite_loss(total, "source alignment", epoch, step);

            GradientSet grads = backward(res.model, trace, feature_grad);
            grads.source_head = std::move(hb.grad);
            res.model = sgd_step(std::move(res.model), grads, cfg.lr);

            log.loss_ce_s += ce.loss;
            log.loss_mmd += mmd_term;
            log.loss_total += total;
        }
        const double inv = 1.0 / static_cast<double>(steps);
        log.loss_ce_s *= inv;
        log.loss_mmd *= inv;
        log.loss_total *= inv;
        res.log.push_back(log);
    }
    return res;
}

/// Regenerates pseudo-labels with the source head and the threshold for `epoch`.
inline PseudoLabelSet refresh_pseudo_labels(const ModelState& model, const SubjectDomain& target,
                                            const TauSchedule& schedule, std::size_t epoch) {
    const auto pair = predict_pair(model, target.samples, target.geometry);
    return select_confident(pair.original, pair.augmented, tau_at(schedule, epoch));
}

/// Stage 2: L = CE_S(source head) + CE_T(target head on confident targets)
///              + w * MMD(pooled source features, confident target features).
/// The target head starts as a copy of the trained source head.
inline StageResult adapt_target(const TrainConfig& cfg, const ModelState& model,
                                std::span<const SubjectDomain> sources, const SubjectDomain& target,
                                StageOptions opts = {kStreamStage2}) {
    cfg.validate();
    detail::check_sources(sources);
    target.validate();
    if (target.labeled()) throw ValidationError("adaptation target " + target.subject_id + " must be unlabeled");
    if (target.samples.cols() != model.input_dim()) {
        throw ShapeError(detail::concat("target has ", target.samples.cols(),
                                        " columns, model expects ", model.input_dim()));
    }

    StageResult res;
    res.model = model;
    res.model.target_head = res.model.source_head;
    Rng rng = make_rng(cfg.seed, opts.rng_stream);
    const std::size_t steps = steps_per_epoch(sources, cfg.batch_size);
    const std::size_t bs = cfg.batch_size;
    const std::size_t n_source_rows = bs * sources.size();
    PseudoLabelSet pl;

    for (std::size_t epoch = 0; epoch < cfg.epochs_stage2; ++epoch) {
        const double tau = tau_at(cfg.tau_schedule, epoch);
        if (epoch % cfg.pl_refresh_M == 0) {
            pl = refresh_pseudo_labels(res.model, target, cfg.tau_schedule, epoch);
            res.refresh_epochs.push_back(epoch);
            res.selected_count_trace.push_back(pl.size());
            res.tau_trace.push_back(tau);
            if (opts.target_truth) {
                if (auto acc = pseudo_label_accuracy(pl, *opts.target_truth)) {
                    res.pl_accuracy_trace.push_back(*acc);
                } else {
                    res.pl_accuracy_trace.push_back(std::nan(""));
                }
            }
            if (pl.empty() && opts.warn) {
                opts.warn(detail::concat("no confident target samples for ", target.subject_id,
                                         " at epoch ", epoch, " (tau = ", pl.tau,
                                         "); target terms skipped until the next refresh"));
            }
        }
        const bool have_target = !pl.empty();
        EpochLog log;
        log.epoch = epoch;
        log.tau = pl.tau;
        log.confident_count = pl.size();
        double sigma = 0.0;

        for (std::size_t step = 0; step < steps; ++step) {
            auto batches = sample_multi_domain_batch(sources, bs, rng);
            std::vector<Matrix> parts;
            for (std::size_t d = 0; d < batches.size(); ++d) {
                parts.push_back(std::move(batches[d].samples));
                if (cfg.flip_augment) random_hflip(parts.back(), sources[d].geometry, rng);
            }
            auto y_source = detail::concat_labels(batches);
            std::vector<int> y_target;
            if (have_target) {
                const auto pick = sample_indices(pl.size(), bs, rng);
                std::vector<std::size_t> rows;
                rows.reserve(pick.size());
                for (auto k : pick) {
                    rows.push_back(pl.selected_indices[k]);
                    y_target.push_back(pl.labels[k]);
                }
                parts.push_back(select_rows(target.samples, rows));
                if (cfg.flip_augment) random_hflip(parts.back(), target.geometry, rng);
            }
            const Matrix x = vstack(parts);
            const ForwardTrace trace = trace_features(res.model, x);
            const Matrix fs = slice_rows(trace.features, 0, n_source_rows);

            const CrossEntropy ce_s =
                cross_entropy(softmax(forward_logits(res.model.source_head, fs)), y_source);
            HeadBackward hs = head_backward(res.model.source_head, fs, ce_s.grad_logits);
            Matrix feature_grad(trace.features.rows(), trace.features.cols());
            detail::add_rows(feature_grad, 0, hs.feature_grad, 1.0);

            std::optional<AffineLayer> target_head_grad;
            double ce_t_loss = 0.0, mmd_term = 0.0;
            if (have_target) {
                const Matrix ft = slice_rows(trace.features, n_source_rows, bs);
                const CrossEntropy ce_t =
                    cross_entropy(softmax(forward_logits(res.model.target_head, ft)), y_target);
                HeadBackward ht = head_backward(res.model.target_head, ft, ce_t.grad_logits);
                detail::add_rows(feature_grad, n_source_rows, ht.feature_grad, 1.0);
                target_head_grad = std::move(ht.grad);
                ce_t_loss = ce_t.loss;

                if (cfg.stage2_mmd_weight > 0.0) {
                    if (step == 0) {
                        const Matrix pooled[] = {fs, ft};
                        sigma = detail::resolve_sigma(cfg, pooled, 7919 + epoch);
                    }
                    auto g = mmd_gradient_sigma(fs, ft, sigma);
                    mmd_term = cfg.stage2_mmd_weight * g.value;
                    detail::add_rows(feature_grad, 0, g.grad_a, cfg.stage2_mmd_weight);
                    detail::add_rows(feature_grad, n_source_rows, g.grad_b, cfg.stage2_mmd_weight);
                }
            }
            const double total = ce_s.loss + ce_t_loss + mmd_term;
            detail::check_finite_loss(total, "target adaptation", epoch, step);

            GradientSet grads = backward(res.model, trace, feature_grad);
            grads.source_head = std::move(hs.grad);
            if (target_head_grad) grads.target_head = std::move(*target_head_grad);
            res.model = sgd_step(std::move(res.model), grads, cfg.lr);

            log.loss_ce_s += ce_s.loss;
            log.loss_ce_t += ce_t_loss;
            log.loss_mmd += mmd_term;
            log.loss_total += total;
        }
        const double inv = 1.0 / static_cast<double>(steps);
        log.loss_ce_s *= inv;
        log.loss_ce_t *= inv;
        log.loss_mmd *= inv;
        log.loss_total *= inv;
        res.log.push_back(log);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Metrics {
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    std::vector<double> loss_trace;
    std::vector<double> pl_accuracy_trace;
    std::vector<std::size_t> selected_count_trace;
};

inline std::vector<int> predict_labels(const ModelState& model, Head head, const Matrix& samples) {
    const Matrix logits = forward_logits(head_of(model, head), forward_features(model, samples));
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) out[r] = static_cast<int>(argmax(logits.row(r)));
    return out;
}

/// Argmax accuracy of the chosen head on a labeled set.
inline Metrics evaluate(const ModelState& model, Head head, const SubjectDomain& eval) {
    if (!eval.labeled()) throw ValidationError("evaluation set " + eval.subject_id + " is unlabeled");
    if (eval.size() == 0) throw ValidationError("evaluation set " + eval.subject_id + " is empty");
    const auto pred = predict_labels(model, head, eval.samples);
    const auto& truth = *eval.labels;
    Metrics m;
    std::vector<std::size_t> hits(eval.num_classes, 0), counts(eval.num_classes, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto y = static_cast<std::size_t>(truth[i]);
        ++counts[y];
        if (pred[i] == truth[i]) {
            ++correct;
            ++hits[y];
        }
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
    for (std::size_t c = 0; c < counts.size(); ++c) {
        m.per_class_accuracy.push_back(counts[c] ? static_cast<double>(hits[c]) / static_cast<double>(counts[c])
                                                 : std::nan(""));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Protocol modes

using Stage1Provider =
    std::function<StageResult(const TrainConfig&, std::span<const SubjectDomain>)>;

inline StageResult run_stage1_direct(const TrainConfig& cfg, std::span<const SubjectDomain> sources) {
    return train_source_alignment(cfg, sources);
}

struct ProtocolResult {
    Metrics metrics;
    ModelState model;
    Head eval_head = Head::source;
    std::vector<std::string> used_sources;
    std::vector<RankedSource> ranking;  // msda_topk only
    std::vector<EpochLog> stage1_log;
    std::vector<EpochLog> stage2_log;
};

/// Features of every source (full domain) and the target under `model`,
/// ranked by MMD; returns the k closest.
inline std::vector<RankedSource> select_top_k_sources(const ModelState& model,
                                                      std::span<const SubjectDomain> sources,
                                                      const SubjectDomain& target, std::size_t k,
                                                      const KernelConfig& kernel) {
    std::vector<std::pair<std::string, Matrix>> feats;
    for (const auto& s : sources) feats.emplace_back(s.subject_id, forward_features(model, s.samples));
    return rank_sources_by_mmd(forward_features(model, target.samples), std::move(feats), k, kernel);
}

/// Runs one protocol mode for one target subject. `target_truth` (labels of
/// the unlabeled adaptation data) is required by oracle mode and otherwise
/// only feeds the pseudo-label diagnostics.
inline ProtocolResult run_protocol(const TrainConfig& cfg, std::span<const SubjectDomain> sources,
                                   const SubjectDomain& target, const SubjectDomain& target_eval,
                                   const std::vector<int>* target_truth = nullptr,
                                   const Stage1Provider& stage1 = run_stage1_direct,
                                   WarningSink warn = warn_stderr) {
    cfg.validate();
    detail::check_sources(sources);
    ProtocolResult out;
    for (const auto& s : sources) out.used_sources.push_back(s.subject_id);
    StageOptions s2opts{kStreamStage2, target_truth, warn};

    auto finish = [&](StageResult s1, std::optional<StageResult> s2, Head head) {
        out.stage1_log = s1.log;
        for (const auto& e : s1.log) out.metrics.loss_trace.push_back(e.loss_total);
        if (s2) {
            out.stage2_log = s2->log;
            for (const auto& e : s2->log) out.metrics.loss_trace.push_back(e.loss_total);
            out.metrics.pl_accuracy_trace = s2->pl_accuracy_trace;
            out.metrics.selected_count_trace = s2->selected_count_trace;
            out.model = std::move(s2->model);
        } else {
            out.model = std::move(s1.model);
        }
        out.eval_head = head;
        Metrics m = evaluate(out.model, head, target_eval);
        out.metrics.accuracy = m.accuracy;
        out.metrics.per_class_accuracy = m.per_class_accuracy;
    };

    switch (cfg.mode) {
        case Mode::source_only: {
            finish(stage1(cfg, sources), std::nullopt, Head::source);
            break;
        }
        case Mode::source_combined_uda: {
            const SubjectDomain merged[] = {merge_domains(sources, "combined")};
            StageResult s1 = stage1(cfg, merged);
            StageResult s2 = adapt_target(cfg, s1.model, merged, target, s2opts);
            finish(std::move(s1), std::move(s2), Head::target);
            break;
        }
        case Mode::msda: {
            StageResult s1 = stage1(cfg, sources);
            StageResult s2 = adapt_target(cfg, s1.model, sources, target, s2opts);
            finish(std::move(s1), std::move(s2), Head::target);
            break;
        }
        case Mode::msda_topk: {
            if (cfg.top_k < 1 || cfg.top_k > sources.size()) {
                throw ValidationError(detail::concat("top_k = ", cfg.top_k, " but ", sources.size(),
                                                     " sources are available"));
            }
            const StageResult all = stage1(cfg, sources);
            out.ranking = select_top_k_sources(all.model, sources, target, cfg.top_k,
                                               cfg.kernel(kStreamTopK));
            std::set<std::string> keep;
            for (const auto& r : out.ranking) keep.insert(r.subject_id);
            std::vector<SubjectDomain> subset;
            for (const auto& s : sources) {
                if (keep.count(s.subject_id)) subset.push_back(s);
            }
            StageResult s1 = stage1(cfg, subset);
            StageResult s2 = adapt_target(cfg, s1.model, subset, target, s2opts);
            finish(std::move(s1), std::move(s2), Head::target);
            out.used_sources.clear();
            for (const auto& s : subset) out.used_sources.push_back(s.subject_id);
            break;
        }
        case Mode::oracle: {
            if (!target_truth) throw ValidationError("oracle mode needs target ground-truth labels");
            StageResult s1 = stage1(cfg, sources);
            SubjectDomain labeled = target;
            labeled.labels = *target_truth;
            labeled.role = Role::source;
            labeled.validate();
            TrainConfig ft = cfg;
            ft.epochs_stage1 = cfg.epochs_stage2;
            const SubjectDomain only[] = {labeled};
            StageResult tuned = train_source_alignment(ft, only, &s1.model, {kStreamOracle});
            out.stage2_log = tuned.log;
            for (const auto& e : s1.log) out.metrics.loss_trace.push_back(e.loss_total);
            out.stage1_log = s1.log;
            for (const auto& e : tuned.log) out.metrics.loss_trace.push_back(e.loss_total);
            out.model = std::move(tuned.model);
            out.eval_head = Head::source;
            Metrics m = evaluate(out.model, Head::source, target_eval);
            out.metrics.accuracy = m.accuracy;
            out.metrics.per_class_accuracy = m.per_class_accuracy;
            break;
        }
    }
    return out;
}

/// CSV `epoch,loss_total,loss_ce_s,loss_ce_t,loss_mmd,tau,confident_count`;
/// tau and confident_count are empty for stage-1 rows.
inline void write_epoch_log(const std::vector<EpochLog>& log, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "epoch,loss_total,loss_ce_s,loss_ce_t,loss_mmd,tau,confident_count\n";
    for (const auto& e : log) {
        out << e.epoch << ',' << format_double(e.loss_total) << ',' << format_double(e.loss_ce_s)
            << ',' << format_double(e.loss_ce_t) << ',' << format_double(e.loss_mmd) << ','
            << (e.tau ? format_double(*e.tau) : "") << ','
            << (e.confident_count ? std::to_string(*e.confident_count) : "") << '\n';
    }
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace msda
