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

#include <filesystem>
#include <fstream>
#include <sstream>

#include "msda/harness.hpp"

using namespace msda;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("msda_harness_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

ExperimentConfig tiny_experiment(const std::string& name) {
    ExperimentConfig c;
    auto& b = c.data.benchmark;
    b.num_sources = 3;
    b.num_targets = 2;
    b.samples_per_class = 8;
    b.eval_samples_per_class = 8;
    b.image = {8, 8};
    c.seeds = {0, 1};
    c.train.lr = 0.05;
    c.train.batch_size = 4;
    c.train.epochs_stage1 = 2;
    c.train.epochs_stage2 = 2;
    c.train.hidden_dims = {8};
    c.train.feature_dim = 4;
    c.train.top_k = 2;
    c.scaling_counts = {1, 3};
    c.output_dir = fresh_dir(name).string();
    return c;
}

}  // namespace

TEST(ExperimentConfig, JsonRoundTripAndHash) {
    ExperimentConfig c = tiny_experiment("cfg");
    c.data.benchmark.target_range.random_brightness_sign = false;
    c.modes = {Mode::msda, Mode::oracle};
    const auto back = experiment_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_EQ(experiment_hash(back), experiment_hash(c));
    ExperimentConfig moved = c;
    moved.output_dir = "elsewhere";
    EXPECT_EQ(experiment_hash(moved), experiment_hash(c));
    moved.seeds = {3};
    EXPECT_NE(experiment_hash(moved), experiment_hash(c));
}

TEST(ExperimentConfig, PartialJsonAndErrors) {
    const auto c = experiment_config_from_json(
        {{"data", {{"num_sources", 5}, {"target_range", {{"noise", {0.1, 0.2}}}}}},
         {"modes", {"source_only", "uda"}},
         {"train", {{"epochs_stage1", 3}}}});
    EXPECT_EQ(c.data.benchmark.num_sources, 5u);
    EXPECT_DOUBLE_EQ(c.data.benchmark.target_range.noise_hi, 0.2);
    EXPECT_EQ(c.data.benchmark.target_range.max_shift, BenchmarkSpec{}.target_range.max_shift);
    EXPECT_EQ(c.modes, (std::vector<Mode>{Mode::source_only, Mode::source_combined_uda}));
    EXPECT_EQ(c.train.epochs_stage1, 3u);
    EXPECT_EQ(c.seeds.size(), 5u);

    EXPECT_THROW(experiment_config_from_json({{"sedes", {1}}}), ValidationError);
    EXPECT_THROW(experiment_config_from_json({{"data", {{"subjects", 3}}}}), ValidationError);
    EXPECT_THROW(experiment_config_from_json({{"data", {{"source_range", {{"noise", {0.3, 0.1}}}}}}}),
                 ValidationError);
    EXPECT_THROW(experiment_config_from_json({{"seeds", nlohmann::json::array()}}), ValidationError);
    EXPECT_THROW(experiment_config_from_json({{"train", {{"lr", 0}}}}), ValidationError);
    EXPECT_THROW(load_experiment_config("/nonexistent/exp.json"), IoError);
}

TEST(Experiment, SingleCellGivesOneRowAndGoldenHeaders) {
    ExperimentConfig c = tiny_experiment("single");
    c.modes = {Mode::msda};
    c.seeds = {0};
    c.data.benchmark.num_targets = 1;
    const auto out = run_experiment(c);
    ASSERT_EQ(out.rows.size(), 1u);
    EXPECT_TRUE(out.all_ok);
    const auto report = lines_of(out.report_path);
    ASSERT_EQ(report.size(), 2u);
    EXPECT_EQ(report[0], "mode,target_subject_id,seed,status,accuracy,pl_accuracy_final");
    EXPECT_EQ(report[1].rfind("msda,T00,0,ok,", 0), 0u);
    const auto summary = lines_of(fs::path(c.output_dir) / "summary.csv");
    ASSERT_EQ(summary.size(), 3u);
    EXPECT_EQ(summary[0], "mode,target_subject_id,mean_accuracy,num_runs");
    EXPECT_EQ(summary[2].rfind("msda,ALL,", 0), 0u);
    EXPECT_EQ(lines_of(fs::path(c.output_dir) / "timings.csv")[0], "mode,target_subject_id,seed,wall_time_seconds");
    EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "config.json"));
}

TEST(Experiment, FullGridRowsSortedAndSummaryMatches) {
    ExperimentConfig c = tiny_experiment("grid");
    const auto out = run_experiment(c);
    ASSERT_EQ(out.rows.size(), 5u * 2u * 2u);
    EXPECT_TRUE(out.all_ok);
    EXPECT_EQ(out.cells_computed, 20u);
    EXPECT_EQ(out.rows.front().mode, Mode::source_only);
    EXPECT_EQ(out.rows.back().mode, Mode::oracle);
    for (Mode m : c.modes) {
        double sum = 0.0;
        int n = 0;
        for (const auto& r : out.rows) {
            if (r.mode == m) {
                sum += r.accuracy;
                ++n;
            }
        }
        ASSERT_TRUE(out.grand_mean(m).has_value());
        EXPECT_NEAR(*out.grand_mean(m), sum / n, 1e-12) << to_string(m);
    }
    for (const auto& r : out.rows) {
        EXPECT_EQ(r.pl_accuracy_final.has_value(),
                  r.mode != Mode::source_only && r.mode != Mode::oracle)
            << to_string(r.mode);
    }
}

TEST(Experiment, RerunReusesCellsAndIsByteIdentical) {
    ExperimentConfig c = tiny_experiment("rerun");
    c.modes = {Mode::source_only, Mode::msda};
    const auto first = run_experiment(c);
    const std::string report = slurp(first.report_path);
    const std::string summary = slurp(fs::path(c.output_dir) / "summary.csv");
    const auto second = run_experiment(c);
    EXPECT_EQ(second.cells_computed, 0u);
    EXPECT_EQ(slurp(second.report_path), report);
    EXPECT_EQ(slurp(fs::path(c.output_dir) / "summary.csv"), summary);

    // a fresh directory recomputes everything and still matches
    c.output_dir = fresh_dir("rerun2").string();
    const auto third = run_experiment(c);
    EXPECT_EQ(third.cells_computed, first.cells_computed);
    EXPECT_EQ(slurp(third.report_path), report);
}

TEST(Experiment, ParallelSeedsMatchSerial) {
    ExperimentConfig c = tiny_experiment("serial");
    c.modes = {Mode::msda, Mode::oracle};
    const auto serial = run_experiment(c);
    c.output_dir = fresh_dir("parallel").string();
    const auto parallel = run_experiment(c, {2, {}});
    EXPECT_EQ(slurp(parallel.report_path), slurp(serial.report_path));
}

TEST(Experiment, UnwritableOutputDirRaises) {
    const auto dir = fresh_dir("blocked");
    fs::create_directories(dir);
    std::ofstream(dir / "file") << "x";
    ExperimentConfig c = tiny_experiment("blocked_unused");
    c.output_dir = (dir / "file" / "out").string();
    EXPECT_THROW(run_experiment(c), IoError);
}

TEST(Experiment, FailedCellIsReportedNotFatal) {
    // benchmark on disk without target ground truth: oracle cannot run
    ExperimentConfig c = tiny_experiment("failed");
    const auto data = fresh_dir("failed_data");
    BenchmarkSpec spec = c.data.benchmark;
    write_benchmark_dir(generate_benchmark(spec), data);
    fs::remove_all(data / "targets_truth");
    c.data.data_dir = data.string();
    c.seeds = {0};
    c.modes = {Mode::source_only, Mode::oracle};
    const auto out = run_experiment(c);
    EXPECT_FALSE(out.all_ok);
    ASSERT_EQ(out.rows.size(), 4u);
    for (const auto& r : out.rows) {
        EXPECT_EQ(r.ok, r.mode == Mode::source_only);
        if (!r.ok) EXPECT_NE(r.error.find("ground-truth"), std::string::npos);
    }
    const auto report = lines_of(out.report_path);
    EXPECT_EQ(report[3], "oracle,T00,0,failed,,");
    ASSERT_TRUE(out.grand_mean(Mode::source_only).has_value());
    EXPECT_FALSE(out.grand_mean(Mode::oracle).has_value());
    // failures are retried on the next run
    EXPECT_EQ(run_experiment(c).cells_computed, 2u);
}

TEST(BenchmarkDir, RoundTrip) {
    BenchmarkSpec spec;
    spec.num_sources = 2;
    spec.num_targets = 1;
    spec.samples_per_class = 3;
    spec.eval_samples_per_class = 2;
    spec.image = {6, 6};
    const Benchmark b = generate_benchmark(spec);
    const auto dir = fresh_dir("bench_dir");
    write_benchmark_dir(b, dir);
    const Benchmark back = load_benchmark_dir(dir);
    ASSERT_EQ(back.sources.size(), 2u);
    ASSERT_EQ(back.targets.size(), 1u);
    EXPECT_EQ(back.sources[1].samples, b.sources[1].samples);
    EXPECT_EQ(back.targets[0].truth, b.targets[0].truth);
    EXPECT_FALSE(back.targets[0].unlabeled.labeled());
    EXPECT_EQ(back.targets[0].eval.labels, b.targets[0].eval.labels);
    EXPECT_EQ(back.targets[0].eval.role, Role::evaluation);
}

TEST(BenchmarkDir, SeedVariesPerRunUnlessPinned) {
    DataSpec d;
    EXPECT_NE(benchmark_seed_for(d, 0), benchmark_seed_for(d, 1));
    d.vary_with_seed = false;
    EXPECT_EQ(benchmark_seed_for(d, 0), d.benchmark.seed);
    EXPECT_EQ(benchmark_seed_for(d, 4), d.benchmark.seed);
}

TEST(Stage1Cache, ReturnsSameResultOnce) {
    ExperimentConfig c = tiny_experiment("cache");
    const Benchmark b = benchmark_for_seed(c.data, 0);
    Stage1Cache cache;
    const auto provider = cache.provider();
    const auto a = provider(c.train, b.sources);
    const auto again = provider(c.train, b.sources);
    EXPECT_EQ(a.model, again.model);
    EXPECT_EQ(a.model, train_source_alignment(c.train, b.sources).model);
    TrainConfig other = c.train;
    other.lambda_mmd = 0.0;
    EXPECT_NE(provider(other, b.sources).model, a.model);
}

TEST(Ablation, PlainVersusConfidentLabels) {
    ExperimentConfig c = tiny_experiment("pl");
    const auto out = ablation_pl(c);
    ASSERT_EQ(out.rows.size(), 4u);
    for (const auto& r : out.rows) {
        EXPECT_EQ(r.num_samples, 16u);
        EXPECT_LE(r.acpl_selected, r.num_samples);
        EXPECT_EQ(r.acpl_accuracy.has_value(), r.acpl_selected > 0);
    }
    const auto csv = lines_of(out.csv_path);
    ASSERT_EQ(csv.size(), 5u);
    EXPECT_EQ(csv[0], "target_subject_id,seed,num_samples,plain_accuracy,acpl_selected,acpl_accuracy");
}

TEST(Ablation, ScalingUsesNestedSubsets) {
    ExperimentConfig c = tiny_experiment("scaling");
    c.seeds = {0};
    const auto out = ablation_scaling(c);
    ASSERT_EQ(out.rows.size(), 2u * 2u);
    EXPECT_EQ(out.mean_accuracy.size(), 2u);
    EXPECT_TRUE(out.mean_accuracy.count(1));
    EXPECT_TRUE(out.mean_accuracy.count(3));
    EXPECT_TRUE(fs::exists(out.csv_path));
    c.scaling_counts = {4};
    EXPECT_THROW(ablation_scaling(c), ValidationError);
}
