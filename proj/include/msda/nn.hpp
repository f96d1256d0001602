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

// Shared feature extractor, source/target classifier heads, exact gradients
// and plain SGD. Everything runs single-threaded in double precision.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "msda/matrix.hpp"

namespace msda {

/// y = x * weight + bias, weight is in_dim x out_dim.
struct AffineLayer {
    Matrix weight;
    std::vector<double> bias;

    AffineLayer() = default;
    AffineLayer(std::size_t in_dim, std::size_t out_dim)
        : weight(in_dim, out_dim), bias(out_dim, 0.0) {}
    AffineLayer(Matrix w, std::vector<double> b) : weight(std::move(w)), bias(std::move(b)) {
        if (bias.size() != weight.cols()) {
            throw ShapeError(detail::concat("bias has ", bias.size(), " entries, weight has ",
                                            weight.cols(), " columns"));
        }
    }

    std::size_t in_dim() const noexcept { return weight.rows(); }
    std::size_t out_dim() const noexcept { return weight.cols(); }

    bool operator==(const AffineLayer&) const = default;
};

/// Extractor layers (affine + ReLU each) followed by two affine heads.
struct ModelState {
    std::vector<AffineLayer> extractor;
    AffineLayer source_head;
    AffineLayer target_head;

    std::size_t input_dim() const { return extractor.empty() ? 0 : extractor.front().in_dim(); }
    std::size_t feature_dim() const { return extractor.empty() ? 0 : extractor.back().out_dim(); }
    std::size_t num_classes() const { return source_head.out_dim(); }

    /// Throws ShapeError when layer dimensions do not chain or heads differ.
    void validate() const {
        if (extractor.empty()) throw ShapeError("model has no extractor layers");
        for (std::size_t i = 1; i < extractor.size(); ++i) {
            if (extractor[i].in_dim() != extractor[i - 1].out_dim()) {
                throw ShapeError(detail::concat("extractor layer ", i, " expects ",
                                                extractor[i].in_dim(), " inputs but layer ", i - 1,
                                                " produces ", extractor[i - 1].out_dim()));
            }
        }
        if (source_head.in_dim() != feature_dim()) {
            throw ShapeError(detail::concat("source head expects ", source_head.in_dim(),
                                            " features, extractor produces ", feature_dim()));
        }
        if (source_head.weight.rows() != target_head.weight.rows() ||
            source_head.weight.cols() != target_head.weight.cols()) {
            throw ShapeError("source and target heads have different shapes");
        }
    }

    bool operator==(const ModelState&) const = default;
};

/// One gradient buffer per ModelState buffer, same layout.
using GradientSet = ModelState;

enum class Head { source, target };

inline const char* to_string(Head h) { return h == Head::source ? "source" : "target"; }

/// Visits every parameter buffer with a stable name, e.g. "extractor.1.bias".
template <typename Model, typename Fn>
    requires std::same_as<std::remove_const_t<Model>, ModelState>
void for_each_buffer(Model& model, Fn&& fn) {
    auto visit = [&](const std::string& prefix, auto& layer) {
        fn(prefix + ".weight", layer.weight.data());
        fn(prefix + ".bias", layer.bias);
    };
    for (std::size_t i = 0; i < model.extractor.size(); ++i) {
        visit("extractor." + std::to_string(i), model.extractor[i]);
    }
    visit(std::string("source_head"), model.source_head);
    visit(std::string("target_head"), model.target_head);
}

inline GradientSet zeros_like(const ModelState& model) {
    GradientSet g = model;
    for_each_buffer(g, [](const std::string&, std::vector<double>& buf) {
        std::fill(buf.begin(), buf.end(), 0.0);
    });
    return g;
}

/// acc += other, buffer by buffer.
inline void accumulate(GradientSet& acc, const GradientSet& other) {
    std::vector<const std::vector<double>*> src;
    for_each_buffer(other, [&](const std::string&, const std::vector<double>& buf) {
        src.push_back(&buf);
    });
    std::size_t i = 0;
    for_each_buffer(acc, [&](const std::string& name, std::vector<double>& buf) {
        const auto& s = *src.at(i++);
        if (s.size() != buf.size()) {
            throw ShapeError(detail::concat("gradient buffer ", name, " size mismatch"));
        }
        for (std::size_t k = 0; k < buf.size(); ++k) buf[k] += s[k];
    });
}

/// Glorot-uniform weights, zero biases.
inline AffineLayer init_affine(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
    AffineLayer layer(in_dim, out_dim);
    const double limit = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& w : layer.weight.data()) w = dist(rng);
    return layer;
}

struct ModelShape {
    std::size_t input_dim = 256;
    std::vector<std::size_t> hidden = {64};
    std::size_t feature_dim = 32;
    std::size_t num_classes = 2;
};

inline ModelState init_model(const ModelShape& shape, Rng& rng) {
    if (shape.input_dim == 0 || shape.feature_dim == 0 || shape.num_classes == 0) {
        throw ValidationError("model dimensions must be positive");
    }
    ModelState m;
    std::size_t in = shape.input_dim;
    for (std::size_t h : shape.hidden) {
        m.extractor.push_back(init_affine(in, h, rng));
        in = h;
    }
    m.extractor.push_back(init_affine(in, shape.feature_dim, rng));
    m.source_head = init_affine(shape.feature_dim, shape.num_classes, rng);
    m.target_head = init_affine(shape.feature_dim, shape.num_classes, rng);
    return m;
}

inline Matrix affine(const AffineLayer& layer, const Matrix& x) {
    if (x.cols() != layer.in_dim()) {
        throw ShapeError(detail::concat("input has ", x.cols(), " columns, layer expects ",
                                        layer.in_dim()));
    }
    Matrix y = matmul(x, layer.weight);
    for (std::size_t r = 0; r < y.rows(); ++r) {
        auto row = y.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += layer.bias[c];
    }
    return y;
}

/// Activations kept from a forward pass so backward does not recompute them.
struct ForwardTrace {
    std::vector<Matrix> layer_inputs;  // input to each extractor layer
    std::vector<Matrix> pre_activations;
    Matrix features;
};

inline ForwardTrace trace_features(const ModelState& model, const Matrix& batch) {
    if (model.extractor.empty()) throw ShapeError("model has no extractor layers");
    if (batch.rows() == 0) throw ValidationError("empty batch (0 rows)");
    if (batch.cols() != model.input_dim()) {
        throw ShapeError(detail::concat("batch has ", batch.cols(), " columns but model input_dim is ",
                                        model.input_dim()));
    }
    ForwardTrace t;
    Matrix h = batch;
    for (const auto& layer : model.extractor) {
        Matrix pre = affine(layer, h);
        t.layer_inputs.push_back(std::move(h));
        h = pre;
        for (double& v : h.data()) v = v > 0.0 ? v : 0.0;
        t.pre_activations.push_back(std::move(pre));
    }
    t.features = std::move(h);
    return t;
}

inline Matrix forward_features(const ModelState& model, const Matrix& batch) {
    return trace_features(model, batch).features;
}

inline Matrix forward_logits(const AffineLayer& head, const Matrix& features) {
    if (features.cols() != head.in_dim()) {
        throw ShapeError(detail::concat("features have ", features.cols(),
                                        " columns, head expects feature_dim ", head.in_dim()));
    }
    return affine(head, features);
}

inline const AffineLayer& head_of(const ModelState& model, Head head) {
    return head == Head::source ? model.source_head : model.target_head;
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto in = logits.row(r);
        auto dst = out.row(r);
        const double peak = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            dst[c] = std::exp(in[c] - peak);
            total += dst[c];
        }
        for (double& v : dst) v /= total;
    }
    return out;
}

inline Matrix predict_proba(const ModelState& model, Head head, const Matrix& batch) {
    return softmax(forward_logits(head_of(model, head), forward_features(model, batch)));
}

struct CrossEntropy {
    double loss = 0.0;
    Matrix grad_logits;  // d loss / d logits, already divided by the row count
};

/// Mean negative log-likelihood of `labels` under row-normalized `probs`.
inline CrossEntropy cross_entropy(const Matrix& probs, std::span<const int> labels) {
    if (probs.rows() == 0) throw ValidationError("cross_entropy on empty batch");
    if (labels.size() != probs.rows()) {
        throw ShapeError(detail::concat("cross_entropy: ", labels.size(), " labels for ",
                                        probs.rows(), " rows"));
    }
    CrossEntropy ce;
    ce.grad_logits = probs;
    const double n = static_cast<double>(probs.rows());
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= probs.cols()) {
            throw ValidationError(detail::concat("label ", y, " at row ", r, " outside [0, ",
                                                 probs.cols(), ")"));
        }
        const double p = std::max(probs(r, static_cast<std::size_t>(y)),
                                  std::numeric_limits<double>::min());
        ce.loss -= std::log(p);
        ce.grad_logits(r, static_cast<std::size_t>(y)) -= 1.0;
    }
    ce.loss /= n;
    for (double& g : ce.grad_logits.data()) g /= n;
    return ce;
}

struct HeadBackward {
    AffineLayer grad;
    Matrix feature_grad;
};

inline HeadBackward head_backward(const AffineLayer& head, const Matrix& features,
                                  const Matrix& grad_logits) {
    if (grad_logits.rows() != features.rows() || grad_logits.cols() != head.out_dim()) {
        throw ShapeError(detail::concat("head_backward: grad is ", grad_logits.rows(), "x",
                                        grad_logits.cols(), ", expected ", features.rows(), "x",
                                        head.out_dim()));
    }
    HeadBackward hb;
    hb.grad.weight = matmul_tn(features, grad_logits);
    hb.grad.bias.assign(head.out_dim(), 0.0);
    for (std::size_t r = 0; r < grad_logits.rows(); ++r) {
        for (std::size_t c = 0; c < grad_logits.cols(); ++c) hb.grad.bias[c] += grad_logits(r, c);
    }
    hb.feature_grad = matmul_nt(grad_logits, head.weight);
    return hb;
}

/// Chain rule through the extractor. Head buffers of the result are zero.
inline GradientSet backward(const ModelState& model, const ForwardTrace& trace,
                            const Matrix& upstream_feature_grad) {
    if (upstream_feature_grad.rows() != trace.features.rows() ||
        upstream_feature_grad.cols() != trace.features.cols()) {
        throw ShapeError(detail::concat("upstream gradient is ", upstream_feature_grad.rows(), "x",
                                        upstream_feature_grad.cols(), ", features are ",
                                        trace.features.rows(), "x", trace.features.cols()));
    }
    GradientSet grads = zeros_like(model);
    Matrix delta = upstream_feature_grad;
    for (std::size_t i = model.extractor.size(); i-- > 0;) {
        const Matrix& pre = trace.pre_activations[i];
        for (std::size_t k = 0; k < delta.size(); ++k) {
            if (!(pre.data()[k] > 0.0)) delta.data()[k] = 0.0;
        }
        auto& g = grads.extractor[i];
        g.weight = matmul_tn(trace.layer_inputs[i], delta);
        for (std::size_t r = 0; r < delta.rows(); ++r) {
            for (std::size_t c = 0; c < delta.cols(); ++c) g.bias[c] += delta(r, c);
        }
        if (i > 0) delta = matmul_nt(delta, model.extractor[i].weight);
    }
    return grads;
}

inline GradientSet backward(const ModelState& model, const Matrix& batch,
                            const Matrix& upstream_feature_grad) {
    return backward(model, trace_features(model, batch), upstream_feature_grad);
}

/// p <- p - lr * g for every buffer. Throws NumericError naming the first non-finite buffer.
inline ModelState sgd_step(ModelState model, const GradientSet& grads, double lr) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
        throw ValidationError(detail::concat("learning rate must be finite and >= 0, got ", lr));
    }
    std::vector<std::pair<std::string, const std::vector<double>*>> src;
    for_each_buffer(grads, [&](const std::string& name, const std::vector<double>& buf) {
        src.emplace_back(name, &buf);
    });
    for (const auto& [name, buf] : src) {
        for (double v : *buf) {
            if (!std::isfinite(v)) {
                throw NumericError("non-finite gradient in buffer " + name);
            }
        }
    }
    std::size_t i = 0;
    for_each_buffer(model, [&](const std::string& name, std::vector<double>& buf) {
        const auto& g = *src.at(i++).second;
        if (g.size() != buf.size()) {
            throw ShapeError(detail::concat("gradient buffer ", name, " has ", g.size(),
                                            " entries, parameter has ", buf.size()));
        }
        for (std::size_t k = 0; k < buf.size(); ++k) buf[k] -= lr * g[k];
    });
    return model;
}

}  // namespace msda
