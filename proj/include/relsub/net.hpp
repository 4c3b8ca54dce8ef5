#pragma once
// Minimal feedforward core: Dense, Conv2D (stride 1, valid), ReLU, MaxPool2D,
// AvgPool2D, Flatten. Forward traces keep every layer output so attribution
// passes can restart anywhere. All reverse passes are vector-Jacobian products.

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "relsub/core.hpp"

namespace relsub {

enum class LayerKind { Dense, Conv2D, ReLU, MaxPool2D, AvgPool2D, Flatten };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Dense: return "Dense";
        case LayerKind::Conv2D: return "Conv2D";
        case LayerKind::ReLU: return "ReLU";
        case LayerKind::MaxPool2D: return "MaxPool2D";
        case LayerKind::AvgPool2D: return "AvgPool2D";
        case LayerKind::Flatten: return "Flatten";
    }
    return "?";
}

struct Layer {
    LayerKind kind = LayerKind::ReLU;
    Tensor weight;             // Dense: (in,out); Conv2D: (co,ci,kh,kw)
    std::vector<double> bias;  // empty means no bias
    std::size_t kernel = 0;    // pools (square window)
    std::size_t stride = 1;    // pools; conv is fixed at stride 1

    bool has_bias() const { return !bias.empty(); }

    static Layer dense(Tensor w, std::vector<double> b = {}) {
        if (w.rank() != 2) throw shape_error("dense weight must be rank 2 (in,out)");
        if (!b.empty() && b.size() != w.shape()[1])
            throw shape_error("dense bias length must equal fan-out");
        Layer l;
        l.kind = LayerKind::Dense;
        l.weight = std::move(w);
        l.bias = std::move(b);
        return l;
    }
    static Layer conv2d(Tensor w, std::vector<double> b = {}) {
        if (w.rank() != 4) throw shape_error("conv weight must be rank 4 (co,ci,kh,kw)");
        if (!b.empty() && b.size() != w.shape()[0])
            throw shape_error("conv bias length must equal out-channel count");
        Layer l;
        l.kind = LayerKind::Conv2D;
        l.weight = std::move(w);
        l.bias = std::move(b);
        return l;
    }
    static Layer relu() { return Layer{LayerKind::ReLU, {}, {}, 0, 1}; }
    static Layer maxpool(std::size_t k, std::size_t s) {
        if (k == 0 || s == 0) throw shape_error("pool kernel and stride must be positive");
        return Layer{LayerKind::MaxPool2D, {}, {}, k, s};
    }
    static Layer avgpool(std::size_t k, std::size_t s) {
        if (k == 0 || s == 0) throw shape_error("pool kernel and stride must be positive");
        return Layer{LayerKind::AvgPool2D, {}, {}, k, s};
    }
    static Layer flatten() { return Layer{LayerKind::Flatten, {}, {}, 0, 1}; }
};

inline Shape out_shape(const Layer& l, const Shape& in) {
    switch (l.kind) {
        case LayerKind::Dense: {
            if (in.size() != 1) throw shape_error("dense expects rank-1 input, got " + shape_str(in));
            if (in[0] != l.weight.shape()[0])
                throw shape_error("dense fan-in " + std::to_string(l.weight.shape()[0]) +
                                  " does not match input " + shape_str(in));
            return {l.weight.shape()[1]};
        }
        case LayerKind::Conv2D: {
            if (in.size() != 3) throw shape_error("conv expects (c,h,w) input, got " + shape_str(in));
            const Shape& w = l.weight.shape();
            if (in[0] != w[1]) throw shape_error("conv in-channels mismatch");
            if (in[1] < w[2] || in[2] < w[3]) throw shape_error("conv kernel larger than input");
            return {w[0], in[1] - w[2] + 1, in[2] - w[3] + 1};
        }
        case LayerKind::ReLU:
            return in;
        case LayerKind::MaxPool2D:
        case LayerKind::AvgPool2D: {
            if (in.size() != 3) throw shape_error("pool expects (c,h,w) input, got " + shape_str(in));
            if (in[1] < l.kernel || in[2] < l.kernel) throw shape_error("pool kernel larger than input");
            return {in[0], (in[1] - l.kernel) / l.stride + 1, (in[2] - l.kernel) / l.stride + 1};
        }
        case LayerKind::Flatten:
            return {shape_size(in)};
    }
    throw shape_error("unknown layer kind");
}

struct Model {
    Shape input_shape;
    std::size_t num_classes = 0;
    std::vector<Layer> layers;
};

inline void validate(const Model& m) {
    if (m.layers.empty()) throw shape_error("model must have at least one layer");
    if (m.num_classes == 0) throw shape_error("model must have at least one class");
    Shape s = m.input_shape;
    for (const Layer& l : m.layers) s = out_shape(l, s);
    if (s.size() != 1 || s[0] != m.num_classes)
        throw shape_error("model output " + shape_str(s) + " does not match num_classes " +
                          std::to_string(m.num_classes));
}

struct ForwardTrace {
    Tensor input;
    std::vector<Tensor> outputs;  // outputs[i] is the output of layer i

    const Tensor& layer_input(std::size_t i) const { return i == 0 ? input : outputs[i - 1]; }
    const Tensor& logits() const { return outputs.back(); }
};

/* per-layer forward */

inline Tensor apply_layer(const Layer& l, const Tensor& x) {
    Shape os = out_shape(l, x.shape());
    switch (l.kind) {
        case LayerKind::Dense: {
            std::size_t in = l.weight.shape()[0], out = l.weight.shape()[1];
            Tensor y(os);
            for (std::size_t o = 0; o < out; ++o) {
                double acc = l.has_bias() ? l.bias[o] : 0.0;
                for (std::size_t i = 0; i < in; ++i) acc += x[i] * l.weight[i * out + o];
                y[o] = acc;
            }
            return y;
        }
        case LayerKind::Conv2D: {
            const Shape& w = l.weight.shape();
            std::size_t co = w[0], ci = w[1], kh = w[2], kw = w[3];
            std::size_t H = x.shape()[1], W = x.shape()[2];
            std::size_t oh = os[1], ow = os[2];
            Tensor y(os);
            for (std::size_t o = 0; o < co; ++o)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        double acc = l.has_bias() ? l.bias[o] : 0.0;
                        for (std::size_t c = 0; c < ci; ++c)
                            for (std::size_t u = 0; u < kh; ++u)
                                for (std::size_t v = 0; v < kw; ++v)
                                    acc += x[(c * H + i + u) * W + j + v] *
                                           l.weight[((o * ci + c) * kh + u) * kw + v];
                        y.at(o, i, j) = acc;
                    }
            return y;
        }
        case LayerKind::ReLU: {
            Tensor y = x;
            for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
            return y;
        }
        case LayerKind::MaxPool2D: {
            std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
            (void)H;
            Tensor y(os);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < os[1]; ++i)
                    for (std::size_t j = 0; j < os[2]; ++j) {
                        double best = x[(c * x.shape()[1] + i * l.stride) * W + j * l.stride];
                        for (std::size_t u = 0; u < l.kernel; ++u)
                            for (std::size_t v = 0; v < l.kernel; ++v)
                                best = std::max(best,
                                                x[(c * x.shape()[1] + i * l.stride + u) * W +
                                                  j * l.stride + v]);
                        y.at(c, i, j) = best;
                    }
            return y;
        }
        case LayerKind::AvgPool2D: {
            std::size_t C = x.shape()[0], W = x.shape()[2];
            Tensor y(os);
            double inv = 1.0 / double(l.kernel * l.kernel);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < os[1]; ++i)
                    for (std::size_t j = 0; j < os[2]; ++j) {
                        double acc = 0.0;
                        for (std::size_t u = 0; u < l.kernel; ++u)
                            for (std::size_t v = 0; v < l.kernel; ++v)
                                acc += x[(c * x.shape()[1] + i * l.stride + u) * W + j * l.stride + v];
                        y.at(c, i, j) = acc * inv;
                    }
            return y;
        }
        case LayerKind::Flatten:
            return x.reshaped(os);
    }
    throw shape_error("unknown layer kind");
}

inline ForwardTrace forward(const Model& m, const Tensor& x) {
    if (x.shape() != m.input_shape)
        throw shape_error("input shape " + shape_str(x.shape()) + " does not match model " +
                          shape_str(m.input_shape));
    ForwardTrace t;
    t.input = x;
    t.outputs.reserve(m.layers.size());
    const Tensor* cur = &x;
    for (const Layer& l : m.layers) {
        t.outputs.push_back(apply_layer(l, *cur));
        cur = &t.outputs.back();
    }
    return t;
}

// logits of the tail starting at layer `first`, fed with `in`
inline Tensor forward_from(const Model& m, std::size_t first, const Tensor& in) {
    Tensor cur = in;
    for (std::size_t i = first; i < m.layers.size(); ++i) cur = apply_layer(m.layers[i], cur);
    return cur;
}

/* per-layer VJP; x is the traced layer input, g the cotangent at the output */

inline Tensor layer_vjp(const Layer& l, const Tensor& x, const Tensor& g) {
    switch (l.kind) {
        case LayerKind::Dense: {
            std::size_t in = l.weight.shape()[0], out = l.weight.shape()[1];
            Tensor dx(x.shape());
            for (std::size_t i = 0; i < in; ++i) {
                double acc = 0.0;
                for (std::size_t o = 0; o < out; ++o) acc += l.weight[i * out + o] * g[o];
                dx[i] = acc;
            }
            return dx;
        }
        case LayerKind::Conv2D: {
            const Shape& w = l.weight.shape();
            std::size_t co = w[0], ci = w[1], kh = w[2], kw = w[3];
            std::size_t H = x.shape()[1], W = x.shape()[2];
            std::size_t oh = g.shape()[1], ow = g.shape()[2];
            (void)H;
            Tensor dx(x.shape());
            for (std::size_t o = 0; o < co; ++o)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        double gv = g.at(o, i, j);
                        if (gv == 0.0) continue;
                        for (std::size_t c = 0; c < ci; ++c)
                            for (std::size_t u = 0; u < kh; ++u)
                                for (std::size_t v = 0; v < kw; ++v)
                                    dx[(c * x.shape()[1] + i + u) * W + j + v] +=
                                        l.weight[((o * ci + c) * kh + u) * kw + v] * gv;
                    }
            return dx;
        }
        case LayerKind::ReLU: {
            // subgradient 0 at exactly 0
            Tensor dx(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
            return dx;
        }
        case LayerKind::MaxPool2D: {
            std::size_t C = x.shape()[0], W = x.shape()[2];
            Tensor dx(x.shape());
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < g.shape()[1]; ++i)
                    for (std::size_t j = 0; j < g.shape()[2]; ++j) {
                        // ties go to the lowest flat index: strict > keeps the first max
                        std::size_t bi = 0, bj = 0;
                        double best = x[(c * x.shape()[1] + i * l.stride) * W + j * l.stride];
                        for (std::size_t u = 0; u < l.kernel; ++u)
                            for (std::size_t v = 0; v < l.kernel; ++v) {
                                double val = x[(c * x.shape()[1] + i * l.stride + u) * W +
                                               j * l.stride + v];
                                if (val > best) {
                                    best = val;
                                    bi = u;
                                    bj = v;
                                }
                            }
                        dx[(c * x.shape()[1] + i * l.stride + bi) * W + j * l.stride + bj] +=
                            g.at(c, i, j);
                    }
            return dx;
        }
        case LayerKind::AvgPool2D: {
            std::size_t C = x.shape()[0], W = x.shape()[2];
            Tensor dx(x.shape());
            double inv = 1.0 / double(l.kernel * l.kernel);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < g.shape()[1]; ++i)
                    for (std::size_t j = 0; j < g.shape()[2]; ++j) {
                        double gv = g.at(c, i, j) * inv;
                        for (std::size_t u = 0; u < l.kernel; ++u)
                            for (std::size_t v = 0; v < l.kernel; ++v)
                                dx[(c * x.shape()[1] + i * l.stride + u) * W + j * l.stride + v] += gv;
                    }
            return dx;
        }
        case LayerKind::Flatten:
            return g.reshaped(x.shape());
    }
    throw shape_error("unknown layer kind");
}

// cotangent at the output of layer `top`, pulled back to the input of layer `bottom`
inline Tensor vjp_range(const Model& m, const ForwardTrace& t, std::size_t bottom, std::size_t top,
                        Tensor cot) {
    for (std::size_t i = top + 1; i-- > bottom;)
        cot = layer_vjp(m.layers[i], t.layer_input(i), cot);
    return cot;
}

inline Tensor backward_gradient(const Model& m, const ForwardTrace& t, std::size_t class_index) {
    if (class_index >= m.num_classes)
        throw shape_error("class index " + std::to_string(class_index) + " out of range");
    Tensor seed(Shape{m.num_classes});
    seed[class_index] = 1.0;
    return vjp_range(m, t, 0, m.layers.size() - 1, std::move(seed));
}

// gradient of one logit of the tail model starting at `first` w.r.t. its input `in`
inline Tensor submodel_gradient(const Model& m, std::size_t first, const Tensor& in,
                                std::size_t class_index) {
    if (class_index >= m.num_classes)
        throw shape_error("class index " + std::to_string(class_index) + " out of range");
    std::vector<Tensor> outs;
    outs.reserve(m.layers.size() - first);
    const Tensor* cur = &in;
    for (std::size_t i = first; i < m.layers.size(); ++i) {
        outs.push_back(apply_layer(m.layers[i], *cur));
        cur = &outs.back();
    }
    Tensor cot(Shape{m.num_classes});
    cot[class_index] = 1.0;
    for (std::size_t i = m.layers.size(); i-- > first;) {
        const Tensor& x = (i == first) ? in : outs[i - first - 1];
        cot = layer_vjp(m.layers[i], x, cot);
    }
    return cot;
}

}  // namespace relsub
