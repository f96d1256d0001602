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

// Text checkpoint format, one buffer per block:
//
//   msda-checkpoint 1
//   config_hash <16 hex digits>
//   extractor_layers <L>
//   buffer <name> <rows> <cols>
//   <rows*cols values, shortest round-trip decimal, space separated>
//   ...
//   end
//
// Buffers appear in for_each_buffer order: extractor.0.weight,
// extractor.0.bias, ..., source_head.weight, source_head.bias,
// target_head.weight, target_head.bias. Biases are written as 1 x n.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>

#include "msda/nn.hpp"

namespace msda {

/// 64-bit FNV-1a, used to key configs and result cells.
inline std::uint64_t fnv1a64(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view text) {
    double v = 0.0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
        throw IoError("not a number: '" + std::string(text) + "'");
    }
    return v;
}

struct Checkpoint {
    ModelState model;
    std::string config_hash;
};

inline void save_checkpoint(const std::string& path, const ModelState& model,
                            const std::string& config_hash) {
    model.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out << "msda-checkpoint 1\n";
    out << "config_hash " << config_hash << "\n";
    out << "extractor_layers " << model.extractor.size() << "\n";
    auto write_layer = [&](const std::string& prefix, const AffineLayer& layer) {
        out << "buffer " << prefix << ".weight " << layer.weight.rows() << ' '
            << layer.weight.cols() << "\n";
        for (std::size_t i = 0; i < layer.weight.size(); ++i) {
            out << (i ? " " : "") << format_double(layer.weight.data()[i]);
        }
        out << "\nbuffer " << prefix << ".bias 1 " << layer.bias.size() << "\n";
        for (std::size_t i = 0; i < layer.bias.size(); ++i) {
            out << (i ? " " : "") << format_double(layer.bias[i]);
        }
        out << "\n";
    };
    for (std::size_t i = 0; i < model.extractor.size(); ++i) {
        write_layer("extractor." + std::to_string(i), model.extractor[i]);
    }
    write_layer("source_head", model.source_head);
    write_layer("target_head", model.target_head);
    out << "end\n";
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint not found: " + path);
    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != "msda-checkpoint" || version != 1) {
        throw IoError("not an msda checkpoint (version 1): " + path);
    }
    Checkpoint ck;
    std::string key;
    std::size_t layers = 0;
    in >> key >> ck.config_hash;
    if (key != "config_hash") throw IoError("checkpoint missing config_hash: " + path);
    in >> key >> layers;
    if (key != "extractor_layers" || layers == 0) {
        throw IoError("checkpoint missing extractor_layers: " + path);
    }

    auto read_buffer = [&](const std::string& expected, std::size_t& rows, std::size_t& cols) {
        std::string tag, name;
        in >> tag >> name >> rows >> cols;
        if (!in || tag != "buffer" || name != expected) {
            throw IoError("checkpoint " + path + ": expected buffer " + expected);
        }
        std::vector<double> values(rows * cols);
        std::string tok;
        for (double& v : values) {
            if (!(in >> tok)) throw IoError("checkpoint " + path + ": truncated buffer " + expected);
            v = parse_double(tok);
        }
        return values;
    };
    auto read_layer = [&](const std::string& prefix) {
        std::size_t r = 0, c = 0, br = 0, bc = 0;
        auto w = read_buffer(prefix + ".weight", r, c);
        auto b = read_buffer(prefix + ".bias", br, bc);
        if (br != 1 || bc != c) throw IoError("checkpoint " + path + ": bad bias shape for " + prefix);
        return AffineLayer(Matrix(r, c, std::move(w)), std::move(b));
    };
    for (std::size_t i = 0; i < layers; ++i) {
        ck.model.extractor.push_back(read_layer("extractor." + std::to_string(i)));
    }
    ck.model.source_head = read_layer("source_head");
    ck.model.target_head = read_layer("target_head");
    in >> key;
    if (key != "end") throw IoError("checkpoint " + path + ": missing end marker");
    ck.model.validate();
    return ck;
}

}  // namespace msda
