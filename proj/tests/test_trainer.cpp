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
#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace msda;

namespace {

SubjectSpec small_spec(std::uint64_t seed, double brightness = 0.0) {
    SubjectSpec s;
    s.image = {8, 8};
    s.samples_per_class = 24;
    s.noise_std = 0.1;
    s.brightness_offset = brightness;
    s.seed = seed;
    return s;
}

SubjectDomain small_source(std::uint64_t seed, std::string id, double brightness = 0.0) {
    return generate_subject(small_spec(seed, brightness), std::move(id));
}

TrainConfig small_config() {
    TrainConfig c;
    c.lr = 0.05;
    c.batch_size = 8;
    c.lambda_mmd = 0.3;
    c.epochs_stage1 = 4;
    c.epochs_stage2 = 4;
    c.pl_refresh_M = 2;
    c.hidden_dims = {16};
    c.feature_dim = 8;
    return c;
}

struct SmallTask {
    std::vector<SubjectDomain> sources;
    SubjectDomain target;
    std::vector<int> truth;
    SubjectDomain eval;
};

SmallTask small_task() {
    SmallTask t;
    for (std::uint64_t i = 0; i < 3; ++i) t.sources.push_back(small_source(10 + i, "S0" + std::to_string(i)));
    auto spec = small_spec(99, 0.1);
    auto [u, y] = strip_labels(generate_subject(spec, "T00"));
    t.target = std::move(u);
    t.truth = std::move(y);
    spec.seed = 100;
    t.eval = generate_subject(spec, "T00");
    t.eval.role = Role::evaluation;
    return t;
}

void ignore_warning(const std::string&) {}

}  // namespace

TEST(TrainConfig, JsonRoundTrip) {
    TrainConfig c = small_config();
    c.mode = Mode::msda_topk;
    c.source_pair_mode = PairMode::random_pair;
    c.tau_schedule.tau_min = 0.6;
    c.flip_augment = true;
    const TrainConfig back = train_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(TrainConfig, MissingFieldsKeepDefaults) {
    const TrainConfig c = train_config_from_json(nlohmann::json::object());
    EXPECT_EQ(c.mode, Mode::msda);
    EXPECT_DOUBLE_EQ(c.lr, 1e-4);
    EXPECT_EQ(c.batch_size, 16u);
    EXPECT_DOUBLE_EQ(c.lambda_mmd, 1.0);
    EXPECT_EQ(c.epochs_stage1, 60u);
    EXPECT_EQ(c.epochs_stage2, 60u);
    EXPECT_EQ(c.pl_refresh_M, 10u);
    EXPECT_DOUBLE_EQ(c.tau_schedule.tau_init, 0.90);
    EXPECT_EQ(c.source_pair_mode, PairMode::all_pairs);
}

TEST(TrainConfig, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(train_config_from_json({{"learning_rate", 0.1}}), ValidationError);
    EXPECT_THROW(train_config_from_json({{"tau_schedule", {{"start", 0.9}}}}), ValidationError);
    EXPECT_THROW(train_config_from_json({{"mode", "fancy"}}), ValidationError);
    EXPECT_THROW(train_config_from_json({{"lr", "fast"}}), ValidationError);
    EXPECT_THROW(train_config_from_json({{"lr", -1.0}}), ValidationError);
    EXPECT_THROW(train_config_from_json({{"pl_refresh_M", 0}}), ValidationError);
    EXPECT_EQ(parse_mode("uda"), Mode::source_combined_uda);
}

TEST(TrainConfig, LoadFromFile) {
    const auto dir = std::filesystem::temp_directory_path() / "msda_trainer_cfg";
    std::filesystem::create_directories(dir);
    {
        std::ofstream(dir / "ok.json") << R"({"mode": "oracle", "lr": 0.01})";
        std::ofstream(dir / "bad.json") << "{ nope";
    }
    const TrainConfig c = load_train_config((dir / "ok.json").string());
    EXPECT_EQ(c.mode, Mode::oracle);
    EXPECT_DOUBLE_EQ(c.lr, 0.01);
    EXPECT_THROW(load_train_config((dir / "bad.json").string()), IoError);
    EXPECT_THROW(load_train_config((dir / "missing.json").string()), IoError);
}

TEST(StepsPerEpoch, CoversEveryDomainOnce) {
    const auto t = small_task();  // 3 domains x 48 rows
    EXPECT_EQ(steps_per_epoch(t.sources, 8), 6u);
    EXPECT_EQ(steps_per_epoch(t.sources, 16), 3u);
    EXPECT_EQ(steps_per_epoch(t.sources, 1000), 1u);
    const SubjectDomain merged[] = {merge_domains(t.sources, "m")};
    EXPECT_EQ(steps_per_epoch(merged, 8), 18u);
}

TEST(SourceAlignment, SingleSourceCrossEntropyDecreases) {
    TrainConfig c = small_config();
    c.lambda_mmd = 0.0;
    c.epochs_stage1 = 5;
    const SubjectDomain one[] = {small_source(0, "S00")};
    const auto r = train_source_alignment(c, one);
    ASSERT_EQ(r.log.size(), 5u);
    for (std::size_t e = 1; e < r.log.size(); ++e) {
        EXPECT_LT(r.log[e].loss_ce_s, r.log[e - 1].loss_ce_s) << "epoch " << e;
    }
    for (const auto& e : r.log) EXPECT_EQ(e.loss_mmd, 0.0);
}

TEST(SourceAlignment, IdenticalSourcesKeepMmdSmall) {
    TrainConfig c = small_config();
    c.lambda_mmd = 1.0;
    c.epochs_stage1 = 10;
    const SubjectDomain base = small_source(0, "S00");
    SubjectDomain copy = base;
    copy.subject_id = "S01";
    const SubjectDomain twins[] = {base, copy};
    const auto with = train_source_alignment(c, twins);
    const SubjectDomain apart[] = {base, small_source(5, "S02", 0.5)};
    const auto shifted = train_source_alignment(c, apart);
    c.lambda_mmd = 0.0;
    const auto without = train_source_alignment(c, twins);
    // only minibatch sampling noise is left between the twins
    EXPECT_LT(with.log.front().loss_mmd, 0.5 * shifted.log.front().loss_mmd);
    const double a = with.log.back().loss_ce_s, b = without.log.back().loss_ce_s;
    EXPECT_LT(std::abs(a - b), 0.05 * std::max(a, b) + 0.02);
}

TEST(SourceAlignment, ReducesHeldOutDiscrepancy) {
    TrainConfig c = small_config();
    c.lambda_mmd = 1.0;
    const SubjectDomain pair[] = {small_source(1, "S00", 0.0), small_source(2, "S01", 0.5)};
    const Matrix held_out[] = {small_source(3, "H0", 0.0).samples, small_source(4, "H1", 0.5).samples};
    auto discrepancy = [&](std::size_t epochs) {
        c.epochs_stage1 = epochs;
        const auto r = train_source_alignment(c, pair);
        const Matrix f[] = {forward_features(r.model, held_out[0]), forward_features(r.model, held_out[1])};
        return pairwise_source_mmd(f, KernelConfig::median(0));
    };
    EXPECT_LT(discrepancy(20), discrepancy(1));
}

TEST(SourceAlignment, LossComponentsAddUp) {
    const auto t = small_task();
    const auto r = train_source_alignment(small_config(), t.sources);
    for (const auto& e : r.log) {
        EXPECT_GT(e.loss_mmd, 0.0);
        EXPECT_NEAR(e.loss_total, e.loss_ce_s + e.loss_ce_t + e.loss_mmd, 1e-9);
    }
}

TEST(SourceAlignment, RejectsUnlabeledSource) {
    auto t = small_task();
    const SubjectDomain bad[] = {t.sources[0], t.target};
    EXPECT_THROW(train_source_alignment(small_config(), bad), ValidationError);
    EXPECT_THROW(train_source_alignment(small_config(), std::span<const SubjectDomain>{}), ValidationError);
}

TEST(SourceAlignment, NonFiniteLossAborts) {
    TrainConfig c = small_config();
    c.lr = 1e200;
    const auto t = small_task();
    try {
        train_source_alignment(c, t.sources);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
    }
}

TEST(SourceAlignment, RandomPairModeRuns) {
    TrainConfig c = small_config();
    c.source_pair_mode = PairMode::random_pair;
    const auto t = small_task();
    const auto r = train_source_alignment(c, t.sources);
    EXPECT_GT(r.log.back().loss_mmd, 0.0);
}

TEST(AdaptTarget, RefreshCadence) {
    TrainConfig c = small_config();
    c.epochs_stage2 = 7;
    c.pl_refresh_M = 3;
    const auto t = small_task();
    const auto s1 = train_source_alignment(c, t.sources);
    const auto r = adapt_target(c, s1.model, t.sources, t.target, {kStreamStage2, &t.truth, ignore_warning});
    EXPECT_EQ(r.refresh_epochs, (std::vector<std::size_t>{0, 3, 6}));
    EXPECT_EQ(r.selected_count_trace.size(), 3u);
    EXPECT_EQ(r.pl_accuracy_trace.size(), 3u);
    ASSERT_EQ(r.log.size(), 7u);
    for (const auto& e : r.log) {
        EXPECT_NEAR(e.loss_total, e.loss_ce_s + e.loss_ce_t + e.loss_mmd, 1e-9);
        ASSERT_TRUE(e.tau.has_value());
        EXPECT_DOUBLE_EQ(*e.tau, 0.90);
    }
}

TEST(AdaptTarget, UnreachableThresholdMatchesContinuedSourceTraining) {
    TrainConfig c = small_config();
    c.tau_schedule = {1.0, 0.0, 20, 0.5};
    const auto t = small_task();
    const auto s1 = train_source_alignment(c, t.sources);

    std::vector<std::string> warnings;
    const auto adapted = adapt_target(c, s1.model, t.sources, t.target,
                                      {kStreamStage2, nullptr, [&](const std::string& w) { warnings.push_back(w); }});
    for (auto n : adapted.selected_count_trace) EXPECT_EQ(n, 0u);
    EXPECT_EQ(warnings.size(), adapted.refresh_epochs.size());
    EXPECT_NE(warnings.front().find("tau"), std::string::npos);

    TrainConfig plain = c;
    plain.lambda_mmd = 0.0;
    plain.epochs_stage1 = c.epochs_stage2;
    const auto continued = train_source_alignment(plain, t.sources, &s1.model, {kStreamStage2});
    EXPECT_EQ(adapted.model.extractor, continued.model.extractor);
    EXPECT_EQ(adapted.model.source_head, continued.model.source_head);
    EXPECT_EQ(adapted.model.target_head, s1.model.source_head);
}

TEST(AdaptTarget, TargetCopiedFromSourceDoesNotLoseAccuracy) {
    TrainConfig c = small_config();
    const auto t = small_task();
    const auto s1 = train_source_alignment(c, t.sources);
    auto [copy, truth] = strip_labels(t.sources[1]);
    copy.subject_id = "copy";
    const auto r = adapt_target(c, s1.model, t.sources, copy, {kStreamStage2, &truth, ignore_warning});
    const double before = evaluate(s1.model, Head::source, t.sources[1]).accuracy;
    const double after = evaluate(r.model, Head::target, t.sources[1]).accuracy;
    EXPECT_GE(after, before);
}

TEST(AdaptTarget, MmdTermReachesExtractor) {
    TrainConfig c = small_config();
    c.tau_schedule = {0.5, 0.0, 20, 0.5};
    c.epochs_stage2 = 1;
    const auto t = small_task();
    const auto s1 = train_source_alignment(c, t.sources);
    const auto with = adapt_target(c, s1.model, t.sources, t.target, {kStreamStage2, nullptr, ignore_warning});
    ASSERT_GT(with.selected_count_trace.front(), 0u);
    EXPECT_GT(with.log.front().loss_mmd, 0.0);
    EXPECT_NE(with.model.extractor, s1.model.extractor);
    c.stage2_mmd_weight = 0.0;
    const auto without = adapt_target(c, s1.model, t.sources, t.target, {kStreamStage2, nullptr, ignore_warning});
    EXPECT_EQ(without.log.front().loss_mmd, 0.0);
    EXPECT_NE(with.model.extractor, without.model.extractor);
}

TEST(AdaptTarget, InputErrors) {
    const auto t = small_task();
    const auto c = small_config();
    const auto s1 = train_source_alignment(c, t.sources);
    EXPECT_THROW(adapt_target(c, s1.model, t.sources, t.sources[0]), ValidationError);
    SubjectDomain wide = t.target;
    wide.geometry = {4, 4};
    wide.samples = Matrix(wide.size(), 16);
    EXPECT_THROW(adapt_target(c, s1.model, t.sources, wide), ShapeError);
}

TEST(Evaluate, PerfectAndConstantModels) {
    // one-pixel images whose value is the label; identity features
    SubjectDomain d;
    d.subject_id = "tiny";
    d.geometry = {1, 2};
    d.samples = Matrix::from_rows({{1, 0}, {0, 1}, {1, 0}, {0, 1}});
    d.labels = std::vector<int>{0, 1, 0, 1};
    ModelState m;
    m.extractor = {AffineLayer(Matrix::from_rows({{1, 0}, {0, 1}}), {0, 0})};
    m.source_head = AffineLayer(Matrix::from_rows({{1, 0}, {0, 1}}), {0, 0});
    m.target_head = AffineLayer(Matrix(2, 2), {1, 0});
    EXPECT_DOUBLE_EQ(evaluate(m, Head::source, d).accuracy, 1.0);
    const auto constant = evaluate(m, Head::target, d);
    EXPECT_DOUBLE_EQ(constant.accuracy, 0.5);
    EXPECT_EQ(constant.per_class_accuracy, (std::vector<double>{1.0, 0.0}));
    d.labels.reset();
    d.role = Role::target;
    EXPECT_THROW(evaluate(m, Head::source, d), ValidationError);
}

TEST(Evaluate, MatchesCountingLoop) {
    const auto t = small_task();
    const auto s1 = train_source_alignment(small_config(), t.sources);
    const Matrix logits = oracle::naive_logits(s1.model.source_head, oracle::naive_features(s1.model, t.eval.samples));
    std::size_t hits = 0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c) {
            if (logits(r, c) > logits(r, best)) best = c;
        }
        hits += static_cast<int>(best) == (*t.eval.labels)[r];
    }
    EXPECT_DOUBLE_EQ(evaluate(s1.model, Head::source, t.eval).accuracy,
                     static_cast<double>(hits) / static_cast<double>(logits.rows()));
}

TEST(Protocol, ModesUseTheRightDataAndHead) {
    TrainConfig c = small_config();
    const auto t = small_task();
    auto run = [&](Mode m) {
        c.mode = m;
        return run_protocol(c, t.sources, t.target, t.eval, &t.truth, run_stage1_direct, ignore_warning);
    };
    const auto so = run(Mode::source_only);
    EXPECT_EQ(so.eval_head, Head::source);
    EXPECT_TRUE(so.stage2_log.empty());
    EXPECT_EQ(so.metrics.loss_trace.size(), c.epochs_stage1);
    EXPECT_EQ(so.used_sources.size(), 3u);

    const auto uda = run(Mode::source_combined_uda);
    EXPECT_EQ(uda.eval_head, Head::target);
    for (const auto& e : uda.stage1_log) EXPECT_EQ(e.loss_mmd, 0.0);
    EXPECT_EQ(uda.metrics.loss_trace.size(), c.epochs_stage1 + c.epochs_stage2);

    const auto ms = run(Mode::msda);
    EXPECT_GT(ms.stage1_log.front().loss_mmd, 0.0);
    EXPECT_FALSE(ms.metrics.selected_count_trace.empty());
    EXPECT_EQ(ms.metrics.pl_accuracy_trace.size(), ms.metrics.selected_count_trace.size());

    c.top_k = 2;
    const auto tk = run(Mode::msda_topk);
    ASSERT_EQ(tk.ranking.size(), 2u);
    EXPECT_EQ(tk.used_sources.size(), 2u);
    EXPECT_LE(tk.ranking[0].distance, tk.ranking[1].distance);

    const auto orc = run(Mode::oracle);
    EXPECT_EQ(orc.eval_head, Head::source);
    EXPECT_EQ(orc.stage2_log.size(), c.epochs_stage2);
}

TEST(Protocol, SingleSourceMsdaEqualsCombined) {
    TrainConfig c = small_config();
    const auto t = small_task();
    const SubjectDomain one[] = {t.sources[0]};
    c.mode = Mode::msda;
    const auto a = run_protocol(c, one, t.target, t.eval, nullptr, run_stage1_direct, ignore_warning);
    c.mode = Mode::source_combined_uda;
    const auto b = run_protocol(c, one, t.target, t.eval, nullptr, run_stage1_direct, ignore_warning);
    EXPECT_EQ(a.metrics.loss_trace, b.metrics.loss_trace);
    EXPECT_EQ(a.metrics.accuracy, b.metrics.accuracy);
}

TEST(Protocol, Errors) {
    TrainConfig c = small_config();
    const auto t = small_task();
    c.mode = Mode::msda_topk;
    c.top_k = 4;
    try {
        run_protocol(c, t.sources, t.target, t.eval);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find('4'), std::string::npos);
        EXPECT_NE(msg.find('3'), std::string::npos);
    }
    c.mode = Mode::oracle;
    EXPECT_THROW(run_protocol(c, t.sources, t.target, t.eval), ValidationError);
}

TEST(Protocol, DeterministicAcrossRuns) {
    TrainConfig c = small_config();
    c.flip_augment = true;
    const auto t = small_task();
    const auto a = run_protocol(c, t.sources, t.target, t.eval, &t.truth, run_stage1_direct, ignore_warning);
    const auto b = run_protocol(c, t.sources, t.target, t.eval, &t.truth, run_stage1_direct, ignore_warning);
    EXPECT_EQ(a.metrics.loss_trace, b.metrics.loss_trace);
    EXPECT_EQ(a.metrics.accuracy, b.metrics.accuracy);
    EXPECT_EQ(a.model, b.model);
    c.seed = 1;
    const auto d = run_protocol(c, t.sources, t.target, t.eval, &t.truth, run_stage1_direct, ignore_warning);
    EXPECT_NE(a.metrics.loss_trace, d.metrics.loss_trace);
}

TEST(EpochLogCsv, HeaderAndBlankStageOneColumns) {
    const auto path = std::filesystem::temp_directory_path() / "msda_epoch_log.csv";
    EpochLog s1;
    s1.loss_total = 1.5;
    s1.loss_ce_s = 1.5;
    EpochLog s2;
    s2.epoch = 1;
    s2.tau = 0.9;
    s2.confident_count = 12;
    write_epoch_log({s1, s2}, path.string());
    std::ifstream in(path);
    std::string header, first, second;
    std::getline(in, header);
    std::getline(in, first);
    std::getline(in, second);
    EXPECT_EQ(header, "epoch,loss_total,loss_ce_s,loss_ce_t,loss_mmd,tau,confident_count");
    EXPECT_EQ(first.substr(first.size() - 2), ",,");
    EXPECT_EQ(second.substr(second.size() - 7), ",0.9,12");
}
