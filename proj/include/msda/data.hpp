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

// Subject domains: synthetic generation, the on-disk directory format,
// horizontal-flip augmentation and per-domain minibatch sampling.
//
// On-disk layout of one subject:
//   <dir>/manifest.json  {"subject_id", "image_height", "image_width",
//                         "num_classes", "labeled"}
//   <dir>/samples.csv    label,px0,...,pxN per line, label -1 when unlabeled,
//                        pixels in [0,1], no header, LF line endings.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "msda/checkpoint.hpp"
#include "msda/matrix.hpp"

namespace msda {

enum class Role { source, target, evaluation };

inline const char* to_string(Role r) {
    switch (r) {
        case Role::source: return "source";
        case Role::target: return "target";
        case Role::evaluation: return "evaluation";
    }
    return "?";
}

struct ImageGeometry {
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t pixels() const { return height * width; }
};

/// One subject's samples. Target-role domains never carry labels.
struct SubjectDomain {
    std::string subject_id;
    Matrix samples;
    std::optional<std::vector<int>> labels;
    ImageGeometry geometry;
    std::size_t num_classes = 2;
    Role role = Role::source;

    std::size_t size() const { return samples.rows(); }
    bool labeled() const { return labels.has_value(); }

    void validate() const {
        if (samples.cols() != geometry.pixels()) {
            throw ShapeError(detail::concat("subject ", subject_id, ": ", samples.cols(),
                                            " columns but image is ", geometry.height, "x",
                                            geometry.width));
        }
        if ((role == Role::target) == labeled()) {
            throw ValidationError(detail::concat("subject ", subject_id, ": role ", to_string(role),
                                                 labeled() ? " must not" : " must",
                                                 " carry labels"));
        }
        if (labels) {
            if (labels->size() != samples.rows()) {
                throw ShapeError(detail::concat("subject ", subject_id, ": ", labels->size(),
                                                " labels for ", samples.rows(), " samples"));
            }
            for (int y : *labels) {
                if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
                    throw ValidationError(detail::concat("subject ", subject_id, ": label ", y,
                                                         " outside [0, ", num_classes, ")"));
                }
            }
        }
        for (double v : samples.data()) {
            if (!(v >= 0.0 && v <= 1.0)) {
                throw ValidationError(detail::concat("subject ", subject_id, ": pixel ", v,
                                                     " outside [0, 1]"));
            }
        }
    }
};

/// Per-subject appearance parameters for synthetic generation.
struct SubjectSpec {
    std::size_t num_classes = 2;
    std::size_t samples_per_class = 40;
    ImageGeometry image;
    double brightness_offset = 0.0;
    double contrast_gain = 1.0;
    int dx = 0;
    int dy = 0;
    double noise_std = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_classes < 1 || num_classes > 6) {
            throw ValidationError(detail::concat("num_classes must be in [1, 6], got ", num_classes));
        }
        if (samples_per_class < 1) throw ValidationError("samples_per_class must be >= 1");
        if (image.height < 1 || image.width < 1) throw ValidationError("image size must be positive");
        if (!(contrast_gain > 0.0)) throw ValidationError("contrast_gain must be > 0");
        if (!(noise_std >= 0.0)) throw ValidationError("noise_std must be >= 0");
        if (2 * static_cast<std::size_t>(std::abs(dx)) >= image.width ||
            2 * static_cast<std::size_t>(std::abs(dy)) >= image.height) {
            throw ValidationError(detail::concat("translation (", dx, ", ", dy,
                                                 ") must stay below half the image size"));
        }
        if (!std::isfinite(brightness_offset)) throw ValidationError("brightness_offset must be finite");
    }
};

/// Noise-free class template in [0,1], row-major H x W.
/// 0: gradient bright on the left; 1: centred blob; 2: blobs in both top
/// corners; 3: both bottom corners; 4: all four corners; 5: left and right
/// edge midpoints. Classes >= 1 are left-right symmetric.
inline std::vector<double> base_pattern(std::size_t cls, ImageGeometry g) {
    const double h = static_cast<double>(g.height), w = static_cast<double>(g.width);
    const double spread = std::max(1.0, std::min(h, w) / 6.0);
    std::vector<std::pair<double, double>> centres;  // (x, y)
    const double left = (w - 1.0) * 0.2, right = (w - 1.0) * 0.8;
    const double top = (h - 1.0) * 0.2, bottom = (h - 1.0) * 0.8;
    const double cx = (w - 1.0) / 2.0, cy = (h - 1.0) / 2.0;
    switch (cls) {
        case 0: break;
        case 1: centres = {{cx, cy}}; break;
        case 2: centres = {{left, top}, {right, top}}; break;
        case 3: centres = {{left, bottom}, {right, bottom}}; break;
        case 4: centres = {{left, top}, {right, top}, {left, bottom}, {right, bottom}}; break;
        case 5: centres = {{left, cy}, {right, cy}}; break;
        default: throw ValidationError(detail::concat("no base pattern for class ", cls));
    }
    std::vector<double> px(g.pixels(), 0.0);
    for (std::size_t y = 0; y < g.height; ++y) {
        for (std::size_t x = 0; x < g.width; ++x) {
            double v = 0.0;
            if (cls == 0) {
                v = g.width > 1 ? 1.0 - static_cast<double>(x) / (w - 1.0) : 1.0;
            } else {
                for (auto [bx, by] : centres) {
                    const double r2 = (static_cast<double>(x) - bx) * (static_cast<double>(x) - bx) +
                                      (static_cast<double>(y) - by) * (static_cast<double>(y) - by);
                    v = std::max(v, std::exp(-r2 / (2.0 * spread * spread)));
                }
            }
            px[y * g.width + x] = v;
        }
    }
    return px;
}

/// Labeled domain with exactly samples_per_class rows per class, class-major order.
inline SubjectDomain generate_subject(const SubjectSpec& spec, std::string subject_id = "subject") {
    spec.validate();
    const ImageGeometry g = spec.image;
    const std::size_t n = spec.num_classes * spec.samples_per_class;
    SubjectDomain d;
    d.subject_id = std::move(subject_id);
    d.geometry = g;
    d.num_classes = spec.num_classes;
    d.role = Role::source;
    d.samples = Matrix(n, g.pixels());
    d.labels.emplace();
    d.labels->reserve(n);

    Rng rng = make_rng(spec.seed, 0x73756a);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<double> shaded(g.pixels());
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        const auto base = base_pattern(c, g);
        for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++row) {
            for (std::size_t p = 0; p < g.pixels(); ++p) {
                const double eps = spec.noise_std > 0.0 ? spec.noise_std * noise(rng) : 0.0;
                shaded[p] = std::clamp(spec.contrast_gain * base[p] + spec.brightness_offset + eps, 0.0, 1.0);
            }
            auto out = d.samples.row(row);
            for (std::size_t y = 0; y < g.height; ++y) {
                for (std::size_t x = 0; x < g.width; ++x) {
                    const long sx = static_cast<long>(x) - spec.dx;
                    const long sy = static_cast<long>(y) - spec.dy;
                    const bool inside = sx >= 0 && sy >= 0 && sx < static_cast<long>(g.width) &&
                                        sy < static_cast<long>(g.height);
                    out[y * g.width + x] =
                        inside ? shaded[static_cast<std::size_t>(sy) * g.width + static_cast<std::size_t>(sx)] : 0.0;
                }
            }
            d.labels->push_back(static_cast<int>(c));
        }
    }
    return d;
}

/// Splits a labeled domain into an unlabeled target domain and its ground truth.
inline std::pair<SubjectDomain, std::vector<int>> strip_labels(SubjectDomain d) {
    if (!d.labels) throw ValidationError("subject " + d.subject_id + " has no labels to strip");
    std::vector<int> truth = std::move(*d.labels);
    d.labels.reset();
    d.role = Role::target;
    return {std::move(d), std::move(truth)};
}

/// Mirrors every row, read as an H x W image, left to right.
inline Matrix augment_hflip(const Matrix& batch, ImageGeometry g) {
    if (batch.cols() != g.pixels()) {
        throw ShapeError(detail::concat("hflip: rows have ", batch.cols(), " values but image is ",
                                        g.height, "x", g.width));
    }
    Matrix out(batch.rows(), batch.cols());
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        auto src = batch.row(r);
        auto dst = out.row(r);
        for (std::size_t y = 0; y < g.height; ++y) {
            for (std::size_t x = 0; x < g.width; ++x) {
                dst[y * g.width + x] = src[y * g.width + (g.width - 1 - x)];
            }
        }
    }
    return out;
}

inline SubjectDomain augment_hflip(SubjectDomain d) {
    d.samples = augment_hflip(d.samples, d.geometry);
    return d;
}

/// Mirrors each row in place with probability 1/2.
template <typename URBG>
void random_hflip(Matrix& batch, ImageGeometry g, URBG& rng) {
    if (batch.cols() != g.pixels()) {
        throw ShapeError(detail::concat("hflip: rows have ", batch.cols(), " values but image is ",
                                        g.height, "x", g.width));
    }
    std::bernoulli_distribution coin(0.5);
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        if (!coin(rng)) continue;
        auto row = batch.row(r);
        for (std::size_t y = 0; y < g.height; ++y) {
            std::reverse(row.begin() + static_cast<std::ptrdiff_t>(y * g.width),
                         row.begin() + static_cast<std::ptrdiff_t>((y + 1) * g.width));
        }
    }
}

// ---------------------------------------------------------------------------
// Disk format

inline void write_subject_dir(const SubjectDomain& d, const std::filesystem::path& dir) {
    d.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::json manifest = {{"subject_id", d.subject_id},
                               {"image_height", d.geometry.height},
                               {"image_width", d.geometry.width},
                               {"num_classes", d.num_classes},
                               {"labeled", d.labeled()}};
    {
        std::ofstream m(dir / "manifest.json", std::ios::binary);
        if (!m) throw IoError("cannot write " + (dir / "manifest.json").string());
        m << manifest.dump(2) << "\n";
    }
    std::ofstream out(dir / "samples.csv", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "samples.csv").string());
    for (std::size_t r = 0; r < d.samples.rows(); ++r) {
        out << (d.labels ? (*d.labels)[r] : -1);
        for (double v : d.samples.row(r)) out << ',' << format_double(v);
        out << '\n';
    }
    if (!out) throw IoError("failed writing " + (dir / "samples.csv").string());
}

/// Loads a subject directory. Labeled subjects get Role::source, unlabeled Role::target.
inline SubjectDomain load_subject_dir(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream m(manifest_path, std::ios::binary);
    if (!m) throw IoError("manifest not found: " + manifest_path.string());
    nlohmann::json manifest;
    try {
        m >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    SubjectDomain d;
    try {
        d.subject_id = manifest.at("subject_id").get<std::string>();
        d.geometry.height = manifest.at("image_height").get<std::size_t>();
        d.geometry.width = manifest.at("image_width").get<std::size_t>();
        d.num_classes = manifest.at("num_classes").get<std::size_t>();
        d.role = manifest.at("labeled").get<bool>() ? Role::source : Role::target;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest " + manifest_path.string() + ": " + e.what());
    }
    if (d.geometry.pixels() == 0 || d.num_classes == 0) {
        throw ValidationError("manifest " + manifest_path.string() + ": zero image size or classes");
    }

    const auto csv_path = dir / "samples.csv";
    std::ifstream in(csv_path, std::ios::binary);
    if (!in) throw IoError("samples file not found: " + csv_path.string());
    const std::size_t width = d.geometry.pixels();
    std::vector<double> pixels;
    std::vector<int> labels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string_view> fields;
        std::string_view rest(line);
        while (true) {
            const auto comma = rest.find(',');
            fields.push_back(rest.substr(0, comma));
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        if (fields.size() != width + 1) {
            throw IoError(detail::concat(csv_path.string(), " line ", line_no, ": expected ",
                                         width + 1, " fields (label + ", width, " pixels), got ",
                                         fields.size()));
        }
        int label = 0;
        auto res = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), label);
        if (res.ec != std::errc() || res.ptr != fields[0].data() + fields[0].size()) {
            throw IoError(detail::concat(csv_path.string(), " line ", line_no, ": bad label '",
                                         fields[0], "'"));
        }
        if (d.role == Role::target) {
            if (label != -1) {
                throw ValidationError(detail::concat(csv_path.string(), " line ", line_no,
                                                     ": unlabeled subject must use label -1"));
            }
        } else if (label < 0 || static_cast<std::size_t>(label) >= d.num_classes) {
            throw ValidationError(detail::concat(csv_path.string(), " line ", line_no, ": label ",
                                                 label, " outside [0, ", d.num_classes, ")"));
        }
        labels.push_back(label);
        for (std::size_t i = 1; i < fields.size(); ++i) {
            double v = 0.0;
            try {
                v = parse_double(fields[i]);
            } catch (const IoError&) {
                throw IoError(detail::concat(csv_path.string(), " line ", line_no, ": bad pixel '",
                                             fields[i], "'"));
            }
            if (!(v >= 0.0 && v <= 1.0)) {
                throw ValidationError(detail::concat(csv_path.string(), " line ", line_no,
                                                     ": pixel ", v, " outside [0, 1]"));
            }
            pixels.push_back(v);
        }
    }
    if (labels.empty()) {
        throw ValidationError("subject " + d.subject_id + " has no samples in " + csv_path.string());
    }
    d.samples = Matrix(labels.size(), width, std::move(pixels));
    if (d.role != Role::target) d.labels = std::move(labels);
    d.validate();
    return d;
}

/// Every subject directory directly below `root`, sorted by directory name.
inline std::vector<SubjectDomain> load_subject_tree(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) throw IoError("not a directory: " + root.string());
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator(root)) {
        if (e.is_directory()) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    std::vector<SubjectDomain> out;
    for (const auto& p : dirs) out.push_back(load_subject_dir(p));
    if (out.empty()) throw IoError("no subject directories under " + root.string());
    return out;
}

// ---------------------------------------------------------------------------
// Sampling

/// batch_size indices into n rows: without replacement when n >= batch_size,
/// uniformly with replacement otherwise.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t batch_size, Rng& rng) {
    if (n == 0) throw ValidationError("cannot sample from an empty domain");
    if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
    std::vector<std::size_t> idx;
    if (n < batch_size) {
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        idx.resize(batch_size);
        for (auto& i : idx) i = pick(rng);
        return idx;
    }
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < batch_size; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(batch_size);
    return idx;
}

struct DomainBatch {
    Matrix samples;
    std::vector<int> labels;  // empty for unlabeled domains
    std::vector<std::size_t> indices;
};

/// One batch of exactly batch_size rows from every domain, in domain order.
inline std::vector<DomainBatch> sample_multi_domain_batch(std::span<const SubjectDomain> domains,
                                                          std::size_t batch_size, Rng& rng) {
    if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
    for (const auto& d : domains) {
        if (d.size() == 0) throw ValidationError("domain " + d.subject_id + " has no samples");
    }
    std::vector<DomainBatch> out;
    out.reserve(domains.size());
    for (const auto& d : domains) {
        DomainBatch b;
        b.indices = sample_indices(d.size(), batch_size, rng);
        b.samples = select_rows(d.samples, b.indices);
        if (d.labels) {
            b.labels.reserve(batch_size);
            for (auto i : b.indices) b.labels.push_back((*d.labels)[i]);
        }
        out.push_back(std::move(b));
    }
    return out;
}

/// All domains concatenated in order into one labeled domain.
inline SubjectDomain merge_domains(std::span<const SubjectDomain> domains, std::string subject_id) {
    if (domains.empty()) throw ValidationError("nothing to merge");
    SubjectDomain merged;
    merged.subject_id = std::move(subject_id);
    merged.geometry = domains.front().geometry;
    merged.num_classes = domains.front().num_classes;
    merged.role = domains.front().role;
    std::vector<Matrix> parts;
    std::vector<int> labels;
    for (const auto& d : domains) {
        if (d.geometry.height != merged.geometry.height || d.geometry.width != merged.geometry.width) {
            throw ShapeError("cannot merge subjects with different image sizes");
        }
        parts.push_back(d.samples);
        if (d.labels) labels.insert(labels.end(), d.labels->begin(), d.labels->end());
    }
    merged.samples = vstack(parts);
    if (merged.role != Role::target) merged.labels = std::move(labels);
    merged.validate();
    return merged;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

/// Range from which per-subject appearance parameters are drawn.
struct NuisanceRange {
    double brightness_lo = 0.0, brightness_hi = 0.0;
    double contrast_lo = 1.0, contrast_hi = 1.0;
    int max_shift = 0;
    double noise_lo = 0.0, noise_hi = 0.0;
    bool random_brightness_sign = false;
};

struct BenchmarkSpec {
    std::size_t num_sources = 12;
    std::size_t num_targets = 3;
    std::size_t num_irrelevant = 0;  // how many of the sources use the irrelevant preset
    std::size_t num_classes = 2;
    std::size_t samples_per_class = 40;
    std::size_t eval_samples_per_class = 40;
    ImageGeometry image{16, 16};
    // sources differ from each other in brightness and contrast; targets are
    // washed out, noisier and shifted further than any source
    NuisanceRange source_range{0.05, 0.3, 0.6, 1.4, 1, 0.15, 0.25, true};
    NuisanceRange target_range{0.0, 0.3, 0.4, 0.7, 2, 0.3, 0.4, true};
    double irrelevant_contrast = 3.0;
    double irrelevant_noise = 0.5;
    std::uint64_t seed = 7;
};

struct TargetSubject {
    SubjectDomain unlabeled;   // adaptation data, Role::target
    std::vector<int> truth;    // ground truth for `unlabeled`, diagnostics and oracle only
    SubjectDomain eval;        // held-out labeled data from the same subject
};

struct Benchmark {
    std::vector<SubjectDomain> sources;
    std::vector<TargetSubject> targets;
    std::vector<std::string> irrelevant_ids;
};

inline SubjectSpec draw_subject_spec(const BenchmarkSpec& b, const NuisanceRange& r, Rng& rng) {
    auto uni = [&](double lo, double hi) {
        return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    SubjectSpec s;
    s.num_classes = b.num_classes;
    s.samples_per_class = b.samples_per_class;
    s.image = b.image;
    s.brightness_offset = uni(r.brightness_lo, r.brightness_hi);
    if (r.random_brightness_sign && std::bernoulli_distribution(0.5)(rng)) {
        s.brightness_offset = -s.brightness_offset;
    }
    s.contrast_gain = uni(r.contrast_lo, r.contrast_hi);
    std::uniform_int_distribution<int> shift(-r.max_shift, r.max_shift);
    s.dx = shift(rng);
    s.dy = shift(rng);
    s.noise_std = uni(r.noise_lo, r.noise_hi);
    s.seed = rng();
    return s;
}

inline std::string subject_name(char prefix, std::size_t i) {
    return detail::concat(prefix, i < 10 ? "0" : "", i);
}

/// Sources S00.., targets T00..; a seeded subset of sources gets the
/// irrelevant preset (extreme contrast and noise).
inline Benchmark generate_benchmark(const BenchmarkSpec& spec) {
    if (spec.num_irrelevant > spec.num_sources) {
        throw ValidationError(detail::concat("num_irrelevant (", spec.num_irrelevant,
                                             ") exceeds num_sources (", spec.num_sources, ")"));
    }
    Rng rng = make_rng(spec.seed, 0x62656e);
    std::vector<std::size_t> order(spec.num_sources);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> irrelevant(spec.num_sources, false);
    for (std::size_t i = 0; i < spec.num_irrelevant; ++i) irrelevant[order[i]] = true;

    Benchmark bench;
    for (std::size_t i = 0; i < spec.num_sources; ++i) {
        SubjectSpec s = draw_subject_spec(spec, spec.source_range, rng);
        const std::string id = subject_name('S', i);
        if (irrelevant[i]) {
            s.contrast_gain = spec.irrelevant_contrast;
            s.noise_std = spec.irrelevant_noise;
            bench.irrelevant_ids.push_back(id);
        }
        bench.sources.push_back(generate_subject(s, id));
    }
    for (std::size_t i = 0; i < spec.num_targets; ++i) {
        SubjectSpec s = draw_subject_spec(spec, spec.target_range, rng);
        const std::string id = subject_name('T', i);
        auto [unlabeled, truth] = strip_labels(generate_subject(s, id));
        SubjectSpec eval_spec = s;
        eval_spec.samples_per_class = spec.eval_samples_per_class;
        eval_spec.seed = s.seed ^ 0x9e3779b97f4a7c15ULL;
        SubjectDomain eval = generate_subject(eval_spec, id);
        eval.role = Role::evaluation;
        bench.targets.push_back({std::move(unlabeled), std::move(truth), std::move(eval)});
    }
    return bench;
}

}  // namespace msda
