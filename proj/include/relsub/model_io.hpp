#pragma once
// Model JSON serialization. Weight arrays are nested row-major so the file is
// self-describing; numbers are written with 17 significant digits, which
// round-trips IEEE doubles exactly.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "relsub/core.hpp"
#include "relsub/net.hpp"

namespace relsub {

namespace detail {

// nested row-major array, one bracket level per tensor axis
inline void write_nested(std::ostream& os, const Tensor& t, std::size_t axis, std::size_t& off) {
    os << '[';
    std::size_t n = t.shape()[axis];
    if (axis + 1 == t.rank()) {
        for (std::size_t i = 0; i < n; ++i) {
            if (i) os << ',';
            os << fmt17(t[off++]);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            if (i) os << ',';
            write_nested(os, t, axis + 1, off);
        }
    }
    os << ']';
}

inline void nested_shape(const nlohmann::json& j, Shape& s) {
    if (!j.is_array()) return;
    s.push_back(j.size());
    if (!j.empty()) nested_shape(j[0], s);
}

inline void nested_values(const nlohmann::json& j, const Shape& s, std::size_t axis,
                          std::vector<double>& out) {
    if (!j.is_array() || j.size() != s[axis])
        throw data_error("weight array is ragged or has wrong extent");
    if (axis + 1 == s.size()) {
        for (const auto& e : j) {
            if (!e.is_number()) throw data_error("weight entry is not a number");
            out.push_back(e.get<double>());
        }
    } else {
        for (const auto& e : j) nested_values(e, s, axis + 1, out);
    }
}

inline Tensor parse_weight(const nlohmann::json& j) {
    Shape s;
    nested_shape(j, s);
    if (s.empty()) throw data_error("weights must be a non-empty array");
    std::vector<double> v;
    v.reserve(shape_size(s));
    nested_values(j, s, 0, v);
    return Tensor::from(s, std::move(v));
}

}  // namespace detail

inline void save_model(const Model& m, const std::string& path) {
    std::ostringstream os;
    os << "{\"input_shape\":[";
    for (std::size_t i = 0; i < m.input_shape.size(); ++i)
        os << (i ? "," : "") << m.input_shape[i];
    os << "],\"num_classes\":" << m.num_classes << ",\"layers\":[";
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const Layer& l = m.layers[li];
        if (li) os << ',';
        os << "{\"kind\":\"" << layer_kind_name(l.kind) << '"';
        if (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2D) {
            os << ",\"weights\":";
            std::size_t off = 0;
            detail::write_nested(os, l.weight, 0, off);
            os << ",\"bias\":";
            if (l.has_bias()) {
                os << '[';
                for (std::size_t i = 0; i < l.bias.size(); ++i)
                    os << (i ? "," : "") << fmt17(l.bias[i]);
                os << ']';
            } else {
                os << "null";
            }
        } else if (l.kind == LayerKind::MaxPool2D || l.kind == LayerKind::AvgPool2D) {
            os << ",\"kernel\":" << l.kernel << ",\"stride\":" << l.stride;
        }
        os << '}';
    }
    os << "]}\n";
    std::ofstream f(path);
    if (!f) throw data_error("cannot open " + path + " for writing");
    f << os.str();
    if (!f) throw data_error("write failed: " + path);
}

inline Model load_model(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw data_error("malformed model file " + path + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("input_shape") || !j.contains("num_classes") ||
        !j.contains("layers"))
        throw data_error("model file missing input_shape/num_classes/layers");
    Model m;
    for (const auto& e : j["input_shape"]) {
        if (!e.is_number_unsigned() || e.get<std::size_t>() == 0)
            throw data_error("input_shape entries must be positive integers");
        m.input_shape.push_back(e.get<std::size_t>());
    }
    if (!j["num_classes"].is_number_unsigned())
        throw data_error("num_classes must be a positive integer");
    m.num_classes = j["num_classes"].get<std::size_t>();
    if (!j["layers"].is_array()) throw data_error("layers must be an array");
    for (const auto& lj : j["layers"]) {
        if (!lj.is_object() || !lj.contains("kind") || !lj["kind"].is_string())
            throw data_error("each layer needs a string kind");
        std::string kind = lj["kind"].get<std::string>();
        auto bias_of = [&]() -> std::vector<double> {
            if (!lj.contains("bias") || lj["bias"].is_null()) return {};
            std::vector<double> b;
            for (const auto& e : lj["bias"]) {
                if (!e.is_number()) throw data_error("bias entry is not a number");
                b.push_back(e.get<double>());
            }
            return b;
        };
        auto pool_args = [&](std::size_t& k, std::size_t& s) {
            if (!lj.contains("kernel") || !lj.contains("stride"))
                throw data_error("pool layer needs kernel and stride");
            k = lj["kernel"].get<std::size_t>();
            s = lj["stride"].get<std::size_t>();
        };
        if (kind == "Dense") {
            if (!lj.contains("weights")) throw data_error("Dense layer needs weights");
            Tensor w = detail::parse_weight(lj["weights"]);
            m.layers.push_back(Layer::dense(std::move(w), bias_of()));
        } else if (kind == "Conv2D") {
            if (!lj.contains("weights")) throw data_error("Conv2D layer needs weights");
            Tensor w = detail::parse_weight(lj["weights"]);
            m.layers.push_back(Layer::conv2d(std::move(w), bias_of()));
        } else if (kind == "ReLU") {
            m.layers.push_back(Layer::relu());
        } else if (kind == "MaxPool2D") {
            std::size_t k = 0, s = 0;
            pool_args(k, s);
            m.layers.push_back(Layer::maxpool(k, s));
        } else if (kind == "AvgPool2D") {
            std::size_t k = 0, s = 0;
            pool_args(k, s);
            m.layers.push_back(Layer::avgpool(k, s));
        } else if (kind == "Flatten") {
            m.layers.push_back(Layer::flatten());
        } else {
            throw data_error("unknown layer kind '" + kind + "'");
        }
    }
    validate(m);  // shape-chain violations surface here
    return m;
}

}  // namespace relsub
