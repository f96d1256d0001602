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

// Gaussian-kernel maximum mean discrepancy (biased V-statistic, diagonal
// terms included), its gradient with respect to both sample sets, and the
// multi-domain aggregates built on top of it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "msda/matrix.hpp"

namespace msda {

enum class BandwidthMode { fixed, median_heuristic };

struct KernelConfig {
    double bandwidth = 1.0;  // sigma; used only in fixed mode
    BandwidthMode mode = BandwidthMode::fixed;
    std::uint64_t seed = 0;  // pair subsampling for the median heuristic

    static KernelConfig fixed(double sigma) { return {sigma, BandwidthMode::fixed, 0}; }
    static KernelConfig median(std::uint64_t seed = 0) {
        return {1.0, BandwidthMode::median_heuristic, seed};
    }
};

struct MmdEstimate {
    double value = 0.0;
    std::size_t n = 0;
    std::size_t m = 0;
    double bandwidth_used = 0.0;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

/// exp(-||a-b||^2 / (2 sigma^2))
inline double gaussian_kernel(std::span<const double> a, std::span<const double> b, double sigma) {
    if (a.size() != b.size()) {
        throw ShapeError(detail::concat("gaussian_kernel: vectors have ", a.size(), " and ",
                                        b.size(), " entries"));
    }
    if (!(sigma > 0.0)) throw ValidationError("kernel bandwidth must be > 0");
    return std::exp(-squared_distance(a, b) / (2.0 * sigma * sigma));
}

inline double gaussian_kernel(std::span<const double> a, std::span<const double> b,
                              const KernelConfig& cfg) {
    if (cfg.mode != BandwidthMode::fixed) {
        throw ValidationError("gaussian_kernel needs a resolved (fixed) bandwidth");
    }
    return gaussian_kernel(a, b, cfg.bandwidth);
}

inline double median_of(std::vector<double> values) {
    const std::size_t mid = values.size() / 2;
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
    const double upper = values[mid];
    if (values.size() % 2 == 1) return upper;
    const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

inline constexpr std::size_t kMedianPairBudget = 1000;

/// Median pairwise Euclidean distance; all pairs when there are at most
/// 1000 of them, otherwise 1000 seeded random pairs. Zero median -> 1.0.
inline double median_heuristic(const Matrix& pooled, std::uint64_t seed) {
    if (pooled.rows() < 2) {
        throw ValidationError(detail::concat("median heuristic needs >= 2 rows, got ", pooled.rows()));
    }
    const std::size_t n = pooled.rows();
    const std::size_t total_pairs = n * (n - 1) / 2;
    std::vector<double> dists;
    if (total_pairs <= kMedianPairBudget) {
        dists.reserve(total_pairs);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                dists.push_back(std::sqrt(squared_distance(pooled.row(i), pooled.row(j))));
            }
        }
    } else {
        Rng rng = make_rng(seed, 0x6d6564);
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        dists.reserve(kMedianPairBudget);
        while (dists.size() < kMedianPairBudget) {
            const std::size_t i = pick(rng);
            const std::size_t j = pick(rng);
            if (i == j) continue;
            dists.push_back(std::sqrt(squared_distance(pooled.row(i), pooled.row(j))));
        }
    }
    const double med = median_of(std::move(dists));
    return med > 0.0 ? med : 1.0;
}

/// Concrete sigma for the given inputs (pooled for the median heuristic).
inline double resolve_bandwidth(const KernelConfig& cfg, std::span<const Matrix> pooled_parts) {
    if (cfg.mode == BandwidthMode::fixed) {
        if (!(cfg.bandwidth > 0.0) || !std::isfinite(cfg.bandwidth)) {
            throw ValidationError(detail::concat("fixed bandwidth must be > 0, got ", cfg.bandwidth));
        }
        return cfg.bandwidth;
    }
    return median_heuristic(vstack(pooled_parts), cfg.seed);
}

namespace detail {

inline void check_mmd_inputs(const Matrix& a, const Matrix& b) {
    if (a.rows() == 0 || b.rows() == 0) {
        throw ValidationError(concat("MMD needs non-empty inputs, got ", a.rows(), " and ",
                                     b.rows(), " rows"));
    }
    if (a.cols() != b.cols()) {
        throw ShapeError(concat("MMD inputs have ", a.cols(), " and ", b.cols(), " columns"));
    }
}

// Mean of k(x_i, y_j) over all i, j.
inline double mean_kernel(const Matrix& x, const Matrix& y, double inv_two_s2) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto xi = x.row(i);
        for (std::size_t j = 0; j < y.rows(); ++j) {
            acc += std::exp(-squared_distance(xi, y.row(j)) * inv_two_s2);
        }
    }
    return acc / (static_cast<double>(x.rows()) * static_cast<double>(y.rows()));
}

// Same-set mean exploiting symmetry; diagonal contributes exp(0) = 1.
inline double mean_kernel_self(const Matrix& x, double inv_two_s2) {
    double off = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto xi = x.row(i);
        for (std::size_t j = i + 1; j < x.rows(); ++j) {
            off += std::exp(-squared_distance(xi, x.row(j)) * inv_two_s2);
        }
    }
    const double n = static_cast<double>(x.rows());
    return (n + 2.0 * off) / (n * n);
}

}  // namespace detail

inline MmdEstimate mmd_biased_sigma(const Matrix& a, const Matrix& b, double sigma) {
    detail::check_mmd_inputs(a, b);
    if (!(sigma > 0.0)) throw ValidationError("kernel bandwidth must be > 0");
    const double inv = 1.0 / (2.0 * sigma * sigma);
    const double raw = detail::mean_kernel_self(a, inv) + detail::mean_kernel_self(b, inv) -
                       2.0 * detail::mean_kernel(a, b, inv);
    return {std::max(raw, 0.0), a.rows(), b.rows(), sigma};
}

inline MmdEstimate mmd_biased(const Matrix& a, const Matrix& b, const KernelConfig& cfg) {
    detail::check_mmd_inputs(a, b);
    const Matrix parts[] = {a, b};
    return mmd_biased_sigma(a, b, resolve_bandwidth(cfg, parts));
}

struct MmdGradient {
    double value = 0.0;
    Matrix grad_a;
    Matrix grad_b;
    double bandwidth_used = 0.0;
};

/// Value and d MMD / d rows of A and B, with sigma held constant.
inline MmdGradient mmd_gradient_sigma(const Matrix& a, const Matrix& b, double sigma) {
    detail::check_mmd_inputs(a, b);
    if (!(sigma > 0.0)) throw ValidationError("kernel bandwidth must be > 0");
    const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
    const double s2 = sigma * sigma;
    const double inv = 1.0 / (2.0 * s2);
    const double nn = static_cast<double>(n), mm = static_cast<double>(m);

    MmdGradient out{0.0, Matrix(n, d), Matrix(m, d), sigma};
    double kaa = 0.0, kbb = 0.0, kab = 0.0;

    // dk(x,y)/dx = -k (x - y) / s2
    auto self_term = [&](const Matrix& x, Matrix& gx, double scale, double& ksum) {
        ksum += static_cast<double>(x.rows());
        for (std::size_t i = 0; i < x.rows(); ++i) {
            auto xi = x.row(i);
            for (std::size_t j = i + 1; j < x.rows(); ++j) {
                auto xj = x.row(j);
                const double k = std::exp(-squared_distance(xi, xj) * inv);
                ksum += 2.0 * k;
                // pair (i,j) and (j,i) both appear in the double sum
                const double w = 2.0 * scale * k / s2;
                auto gi = gx.row(i);
                auto gj = gx.row(j);
                for (std::size_t c = 0; c < d; ++c) {
                    const double diff = xi[c] - xj[c];
                    gi[c] -= w * diff;
                    gj[c] += w * diff;
                }
            }
        }
    };
    self_term(a, out.grad_a, 1.0 / (nn * nn), kaa);
    self_term(b, out.grad_b, 1.0 / (mm * mm), kbb);

    const double cross = 2.0 / (nn * mm);
    for (std::size_t i = 0; i < n; ++i) {
        auto ai = a.row(i);
        auto gai = out.grad_a.row(i);
        for (std::size_t j = 0; j < m; ++j) {
            auto bj = b.row(j);
            const double k = std::exp(-squared_distance(ai, bj) * inv);
            kab += k;
            const double w = cross * k / s2;
            auto gbj = out.grad_b.row(j);
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = ai[c] - bj[c];
                gai[c] += w * diff;
                gbj[c] -= w * diff;
            }
        }
    }
    out.value = std::max(kaa / (nn * nn) + kbb / (mm * mm) - cross * kab, 0.0);
    return out;
}

inline MmdGradient mmd_gradient(const Matrix& a, const Matrix& b, const KernelConfig& cfg) {
    detail::check_mmd_inputs(a, b);
    const Matrix parts[] = {a, b};
    return mmd_gradient_sigma(a, b, resolve_bandwidth(cfg, parts));
}

struct PairwiseMmd {
    double value = 0.0;
    std::vector<Matrix> grads;  // one per input set
    double bandwidth_used = 0.0;
};

/// Mean MMD over all unordered pairs of sets, with gradients per set.
/// The bandwidth is resolved once on the pooled sets.
inline PairwiseMmd pairwise_source_mmd_gradient(std::span<const Matrix> sets, const KernelConfig& cfg) {
    if (sets.size() < 2) {
        throw ValidationError(detail::concat("pairwise MMD needs >= 2 feature sets, got ", sets.size()));
    }
    for (const auto& s : sets) detail::check_mmd_inputs(s, sets.front());
    const double sigma = resolve_bandwidth(cfg, sets);
    PairwiseMmd out;
    out.bandwidth_used = sigma;
    for (const auto& s : sets) out.grads.emplace_back(s.rows(), s.cols());
    const double pairs = static_cast<double>(sets.size() * (sets.size() - 1) / 2);
    for (std::size_t i = 0; i < sets.size(); ++i) {
        for (std::size_t j = i + 1; j < sets.size(); ++j) {
            auto g = mmd_gradient_sigma(sets[i], sets[j], sigma);
            out.value += g.value / pairs;
            for (std::size_t k = 0; k < g.grad_a.size(); ++k) {
                out.grads[i].data()[k] += g.grad_a.data()[k] / pairs;
            }
            for (std::size_t k = 0; k < g.grad_b.size(); ++k) {
                out.grads[j].data()[k] += g.grad_b.data()[k] / pairs;
            }
        }
    }
    return out;
}

inline double pairwise_source_mmd(std::span<const Matrix> sets, const KernelConfig& cfg) {
    if (sets.size() < 2) {
        throw ValidationError(detail::concat("pairwise MMD needs >= 2 feature sets, got ", sets.size()));
    }
    for (const auto& s : sets) detail::check_mmd_inputs(s, sets.front());
    const double sigma = resolve_bandwidth(cfg, sets);
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        for (std::size_t j = i + 1; j < sets.size(); ++j, ++pairs) {
            total += mmd_biased_sigma(sets[i], sets[j], sigma).value;
        }
    }
    return total / static_cast<double>(pairs);
}

/// MMD between all source rows pooled together and the target rows.
inline MmdEstimate source_target_mmd(std::span<const Matrix> sources, const Matrix& target,
                                     const KernelConfig& cfg) {
    if (sources.empty()) throw ValidationError("source_target_mmd: no source feature sets");
    if (target.rows() == 0) throw ValidationError("source_target_mmd: empty target features");
    return mmd_biased(vstack(sources), target, cfg);
}

struct RankedSource {
    std::string subject_id;
    double distance = 0.0;
};

/// Sources sorted by ascending MMD to the target (ties: ascending id), first k.
/// Median-heuristic bandwidth is resolved once on target + all sources in id order.
inline std::vector<RankedSource> rank_sources_by_mmd(
    const Matrix& target, std::vector<std::pair<std::string, Matrix>> sources, std::size_t k,
    const KernelConfig& cfg = KernelConfig::median()) {
    if (k < 1) throw ValidationError("top-k selection needs k >= 1");
    if (k > sources.size()) {
        throw ValidationError(detail::concat("top-k selection asked for k = ", k, " but only ",
                                             sources.size(), " sources are available"));
    }
    std::sort(sources.begin(), sources.end(),
              [](const auto& x, const auto& y) { return x.first < y.first; });
    for (std::size_t i = 1; i < sources.size(); ++i) {
        if (sources[i].first == sources[i - 1].first) {
            throw ValidationError("duplicate source subject id " + sources[i].first);
        }
    }
    std::vector<Matrix> pooled{target};
    for (const auto& s : sources) pooled.push_back(s.second);
    const double sigma = resolve_bandwidth(cfg, pooled);

    std::vector<RankedSource> ranked;
    ranked.reserve(sources.size());
    for (const auto& [id, feats] : sources) {
        ranked.push_back({id, mmd_biased_sigma(feats, target, sigma).value});
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const RankedSource& x, const RankedSource& y) {
        if (x.distance != y.distance) return x.distance < y.distance;
        return x.subject_id < y.subject_id;
    });
    ranked.resize(k);
    return ranked;
}

inline std::vector<RankedSource> rank_sources_by_mmd(const Matrix& target,
                                                     const std::map<std::string, Matrix>& sources,
                                                     std::size_t k,
                                                     const KernelConfig& cfg = KernelConfig::median()) {
    return rank_sources_by_mmd(
        target, std::vector<std::pair<std::string, Matrix>>(sources.begin(), sources.end()), k, cfg);
}

inline std::vector<RankedSource> rank_sources_by_mmd(
    const Matrix& target, const std::unordered_map<std::string, Matrix>& sources, std::size_t k,
    const KernelConfig& cfg = KernelConfig::median()) {
    return rank_sources_by_mmd(
        target, std::vector<std::pair<std::string, Matrix>>(sources.begin(), sources.end()), k, cfg);
}

}  // namespace msda
