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

// Augmented confident pseudo-labels: predict on each target sample and its
// horizontally flipped copy, average the two probability rows, keep samples
// whose averaged peak exceeds tau, and label them from the element-wise max.

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "msda/checkpoint.hpp"
#include "msda/data.hpp"
#include "msda/nn.hpp"

namespace msda {

/// Threshold that drops by `decay` every `period_epochs`, never below tau_min.
struct TauSchedule {
    double tau_init = 0.90;
    double decay = 0.02;
    std::size_t period_epochs = 20;
    double tau_min = 0.50;

    void validate() const {
        if (!(tau_init > 0.0 && tau_init <= 1.0)) throw ValidationError("tau_init must be in (0, 1]");
        if (!(decay >= 0.0)) throw ValidationError("tau decay must be >= 0");
        if (period_epochs < 1) throw ValidationError("tau period_epochs must be >= 1");
        if (!(tau_min >= 0.0 && tau_min < 1.0)) throw ValidationError("tau_min must be in [0, 1)");
        if (tau_init < tau_min) throw ValidationError("tau_init must be >= tau_min");
    }
};

inline double tau_at(const TauSchedule& s, std::size_t epoch) {
    const double steps = static_cast<double>(epoch / s.period_epochs);
    return std::max(s.tau_min, s.tau_init - s.decay * steps);
}

enum class Version { original, augmented };

inline const char* to_string(Version v) { return v == Version::original ? "original" : "augmented"; }

struct PseudoLabelSet {
    std::vector<std::size_t> selected_indices;  // strictly increasing
    std::vector<int> labels;
    std::vector<double> avg_confidence;
    std::vector<Version> chosen_version;
    double tau = 0.0;

    std::size_t size() const { return selected_indices.size(); }
    bool empty() const { return selected_indices.empty(); }
};

struct PredictionPair {
    Matrix original;   // P
    Matrix augmented;  // P_hat
};

/// Source-classifier probabilities for the samples and their flipped copies.
inline PredictionPair predict_pair(const ModelState& model, const Matrix& target_samples,
                                   ImageGeometry geometry) {
    return {predict_proba(model, Head::source, target_samples),
            predict_proba(model, Head::source, augment_hflip(target_samples, geometry))};
}

inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

/// Keeps rows whose averaged probability peak is strictly above tau.
/// Ties resolve to the lowest class index and to the original version.
inline PseudoLabelSet select_confident(const Matrix& p, const Matrix& p_hat, double tau) {
    if (p.rows() != p_hat.rows() || p.cols() != p_hat.cols()) {
        throw ShapeError(detail::concat("select_confident: P is ", p.rows(), "x", p.cols(),
                                        ", P_hat is ", p_hat.rows(), "x", p_hat.cols()));
    }
    PseudoLabelSet out;
    out.tau = tau;
    std::vector<double> avg(p.cols()), peak(p.cols());
    for (std::size_t j = 0; j < p.rows(); ++j) {
        auto a = p.row(j);
        auto b = p_hat.row(j);
        for (std::size_t c = 0; c < p.cols(); ++c) {
            avg[c] = 0.5 * (a[c] + b[c]);
            peak[c] = std::max(a[c], b[c]);
        }
        const double confidence = avg[argmax(avg)];
        if (!(confidence > tau)) continue;
        const std::size_t label = argmax(peak);
        out.selected_indices.push_back(j);
        out.labels.push_back(static_cast<int>(label));
        out.avg_confidence.push_back(confidence);
        out.chosen_version.push_back(a[label] >= b[label] ? Version::original : Version::augmented);
    }
    return out;
}

/// Fraction of pseudo-labels that agree with `truth`; nullopt when nothing was selected.
inline std::optional<double> pseudo_label_accuracy(const PseudoLabelSet& pl,
                                                   std::span<const int> truth) {
    if (pl.empty()) return std::nullopt;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pl.size(); ++i) {
        if (pl.selected_indices[i] >= truth.size()) {
            throw ShapeError("pseudo-label index beyond ground-truth length");
        }
        hits += truth[pl.selected_indices[i]] == pl.labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(pl.size());
}

/// CSV with header `index,label,avg_confidence,chosen_version`.
inline void write_pseudo_labels_csv(const PseudoLabelSet& pl, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "index,label,avg_confidence,chosen_version\n";
    for (std::size_t i = 0; i < pl.size(); ++i) {
        out << pl.selected_indices[i] << ',' << pl.labels[i] << ','
            << format_double(pl.avg_confidence[i]) << ',' << to_string(pl.chosen_version[i]) << '\n';
    }
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace msda
