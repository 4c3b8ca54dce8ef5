#pragma once
// Layer-wise relevance propagation with per-layer rule assignment.
// Rule algebra: each output neuron k distributes R_k over its inputs in
// proportion to rule-specific contributions s_jk, normalized by a denominator
// that includes the bias term; a zero denominator contributes nothing.

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "relsub/core.hpp"
#include "relsub/net.hpp"

namespace relsub {

enum class LrpRuleKind { Zero, Epsilon, Gamma, GenGamma, ZB };

struct LrpRule {
    LrpRuleKind kind = LrpRuleKind::Zero;
    double eps = 1e-6;
    double gamma = 0.0;
    std::vector<double> lower, upper;  // ZB bounds; size 1 broadcasts

    static LrpRule zero() { return {}; }
    static LrpRule epsilon(double e) {
        if (e <= 0.0) throw usage_error("LRP epsilon must be positive");
        LrpRule r;
        r.kind = LrpRuleKind::Epsilon;
        r.eps = e;
        return r;
    }
    static LrpRule with_gamma(double g) {
        if (g < 0.0) throw usage_error("LRP gamma must be nonnegative");
        LrpRule r;
        r.kind = LrpRuleKind::Gamma;
        r.gamma = g;
        return r;
    }
    static LrpRule gen_gamma(double g) {
        if (g < 0.0) throw usage_error("LRP gamma must be nonnegative");
        LrpRule r;
        r.kind = LrpRuleKind::GenGamma;
        r.gamma = g;
        return r;
    }
    static LrpRule zb(std::vector<double> l, std::vector<double> h) {
        for (double v : l)
            if (v > 0.0) throw usage_error("zB lower bounds must be <= 0");
        for (double v : h)
            if (v < 0.0) throw usage_error("zB upper bounds must be >= 0");
        LrpRule r;
        r.kind = LrpRuleKind::ZB;
        r.lower = std::move(l);
        r.upper = std::move(h);
        return r;
    }
    static LrpRule zb(double l, double h) { return zb(std::vector<double>{l}, std::vector<double>{h}); }
};

struct LrpConfig {
    std::map<std::size_t, LrpRule> rules;  // layer index -> rule for Dense/Conv2D layers
};

namespace detail {

inline double sign_pos(double v) { return v < 0.0 ? -1.0 : 1.0; }  // sign(0) = +1
inline double pos(double v) { return v > 0.0 ? v : 0.0; }
inline double neg(double v) { return v < 0.0 ? v : 0.0; }

inline double zb_bound(const LrpRule& r, const std::vector<double>& b, std::size_t j) {
    if (r.kind != LrpRuleKind::ZB) return 0.0;  // bounds are unset for other rules
    return b.size() == 1 ? b[0] : b[j];
}

// contribution of one (input value, weight) pair under the rule; `positive_branch`
// selects the gen-gamma branch chosen by the sign of the plain pre-activation
inline double contrib(const LrpRule& r, double xj, double w, bool positive_branch,
                      double lj, double hj) {
    switch (r.kind) {
        case LrpRuleKind::Zero:
        case LrpRuleKind::Epsilon:
            return xj * w;
        case LrpRuleKind::Gamma:
            return xj * (w + r.gamma * pos(w));
        case LrpRuleKind::GenGamma:
            return positive_branch
                       ? pos(xj) * (w + r.gamma * pos(w)) + neg(xj) * (w + r.gamma * neg(w))
                       : pos(xj) * (w + r.gamma * neg(w)) + neg(xj) * (w + r.gamma * pos(w));
        case LrpRuleKind::ZB:
            return xj * w - lj * pos(w) - hj * neg(w);
    }
    return 0.0;
}

// bias entering the denominator (the a_0 = 1 convention); zB takes none
inline double bias_term(const LrpRule& r, double b, bool positive_branch) {
    switch (r.kind) {
        case LrpRuleKind::Zero:
        case LrpRuleKind::Epsilon:
            return b;
        case LrpRuleKind::Gamma:
            return b + r.gamma * pos(b);
        case LrpRuleKind::GenGamma:
            return positive_branch ? b + r.gamma * pos(b) : b + r.gamma * neg(b);
        case LrpRuleKind::ZB:
            return 0.0;
    }
    return 0.0;
}

}  // namespace detail

// relevance at the input of a single layer, given relevance R at its output;
// x and y are the traced layer input and output
inline Tensor lrp_layer(const Layer& l, const Tensor& x, const Tensor& y, const Tensor& R,
                        const LrpRule* rule) {
    using namespace detail;
    switch (l.kind) {
        case LayerKind::Dense: {
            if (!rule) throw usage_error("no LRP rule assigned to a Dense layer");
            std::size_t in = l.weight.shape()[0], out = l.weight.shape()[1];
            if (rule->kind == LrpRuleKind::ZB && rule->lower.size() != 1 &&
                rule->lower.size() != in)
                throw shape_error("zB bounds length does not match layer input");
            Tensor Rin(x.shape());
            std::vector<double> s(in);
            for (std::size_t k = 0; k < out; ++k) {
                if (R[k] == 0.0) continue;
                bool pb = y[k] >= 0.0;
                double d = bias_term(*rule, l.has_bias() ? l.bias[k] : 0.0, pb);
                for (std::size_t j = 0; j < in; ++j) {
                    s[j] = contrib(*rule, x[j], l.weight[j * out + k], pb,
                                   zb_bound(*rule, rule->lower, j), zb_bound(*rule, rule->upper, j));
                    d += s[j];
                }
                if (rule->kind == LrpRuleKind::Epsilon) d += rule->eps * sign_pos(d);
                if (d == 0.0) continue;
                double scale = R[k] / d;
                for (std::size_t j = 0; j < in; ++j) Rin[j] += s[j] * scale;
            }
            return Rin;
        }
        case LayerKind::Conv2D: {
            if (!rule) throw usage_error("no LRP rule assigned to a Conv2D layer");
            const Shape& w = l.weight.shape();
            std::size_t co = w[0], ci = w[1], kh = w[2], kw = w[3];
            std::size_t H = x.shape()[1], W = x.shape()[2];
            std::size_t oh = y.shape()[1], ow = y.shape()[2];
            if (rule->kind == LrpRuleKind::ZB && rule->lower.size() != 1 &&
                rule->lower.size() != x.size())
                throw shape_error("zB bounds length does not match layer input");
            (void)H;
            Tensor Rin(x.shape());
            std::vector<double> s(ci * kh * kw);
            for (std::size_t o = 0; o < co; ++o)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        double Rk = R.at(o, i, j);
                        if (Rk == 0.0) continue;
                        bool pb = y.at(o, i, j) >= 0.0;
                        double d = bias_term(*rule, l.has_bias() ? l.bias[o] : 0.0, pb);
                        std::size_t t = 0;
                        for (std::size_t c = 0; c < ci; ++c)
                            for (std::size_t u = 0; u < kh; ++u)
                                for (std::size_t v = 0; v < kw; ++v, ++t) {
                                    std::size_t xi = (c * x.shape()[1] + i + u) * W + j + v;
                                    s[t] = contrib(*rule, x[xi],
                                                   l.weight[((o * ci + c) * kh + u) * kw + v], pb,
                                                   zb_bound(*rule, rule->lower, xi),
                                                   zb_bound(*rule, rule->upper, xi));
                                    d += s[t];
                                }
                        if (rule->kind == LrpRuleKind::Epsilon) d += rule->eps * sign_pos(d);
                        if (d == 0.0) continue;
                        double scale = Rk / d;
                        t = 0;
                        for (std::size_t c = 0; c < ci; ++c)
                            for (std::size_t u = 0; u < kh; ++u)
                                for (std::size_t v = 0; v < kw; ++v, ++t)
                                    Rin[(c * x.shape()[1] + i + u) * W + j + v] += s[t] * scale;
                    }
            return Rin;
        }
        case LayerKind::ReLU:
            return R;
        case LayerKind::MaxPool2D: {
            // winner-take-all; ties go to the lowest flat index
            std::size_t C = x.shape()[0], W = x.shape()[2];
            Tensor Rin(x.shape());
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < y.shape()[1]; ++i)
                    for (std::size_t j = 0; j < y.shape()[2]; ++j) {
                        double Rk = R.at(c, i, j);
                        if (Rk == 0.0) continue;
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
                        Rin[(c * x.shape()[1] + i * l.stride + bi) * W + j * l.stride + bj] += Rk;
                    }
            return Rin;
        }
        case LayerKind::AvgPool2D: {
            // linear layer under LRP-0: share by value, denominator is the window sum
            std::size_t C = x.shape()[0], W = x.shape()[2];
            Tensor Rin(x.shape());
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < y.shape()[1]; ++i)
                    for (std::size_t j = 0; j < y.shape()[2]; ++j) {
                        double Rk = R.at(c, i, j);
                        if (Rk == 0.0) continue;
                        double d = y.at(c, i, j) * double(l.kernel * l.kernel);
                        if (d == 0.0) continue;
                        double scale = Rk / d;
                        for (std::size_t u = 0; u < l.kernel; ++u)
                            for (std::size_t v = 0; v < l.kernel; ++v) {
                                std::size_t xi =
                                    (c * x.shape()[1] + i * l.stride + u) * W + j * l.stride + v;
                                Rin[xi] += x[xi] * scale;
                            }
                    }
            return Rin;
        }
        case LayerKind::Flatten:
            return R.reshaped(x.shape());
    }
    throw shape_error("unknown layer kind");
}

inline void check_lrp_rules(const Model& m, const LrpConfig& cfg, std::size_t top) {
    for (std::size_t i = 0; i <= top; ++i) {
        const Layer& l = m.layers[i];
        if (l.kind != LayerKind::Dense && l.kind != LayerKind::Conv2D) continue;
        auto it = cfg.rules.find(i);
        if (it == cfg.rules.end())
            throw usage_error("no LRP rule assigned to layer " + std::to_string(i));
        if (it->second.kind == LrpRuleKind::ZB && i != 0)
            throw usage_error("zB rule is only valid on the first layer");
    }
}

// propagate a given relevance at the output of layer `top` down to the input.
// maps[i] is the relevance at the input of layer i; maps[top+1] is the seed.
inline std::vector<Tensor> lrp_from(const Model& m, const ForwardTrace& t, std::size_t top,
                                    Tensor seed, const LrpConfig& cfg) {
    if (top >= m.layers.size()) throw shape_error("layer index out of range");
    if (!seed.same_shape(t.outputs[top]))
        throw shape_error("relevance seed shape does not match layer output");
    check_lrp_rules(m, cfg, top);
    std::vector<Tensor> maps(top + 2);
    maps[top + 1] = std::move(seed);
    for (std::size_t i = top + 1; i-- > 0;) {
        const LrpRule* rule = nullptr;
        auto it = cfg.rules.find(i);
        if (it != cfg.rules.end()) rule = &it->second;
        maps[i] = lrp_layer(m.layers[i], t.layer_input(i), t.outputs[i], maps[i + 1], rule);
    }
    return maps;
}

// standard top-down pass: relevance starts as the class logit
inline std::vector<Tensor> lrp(const Model& m, const ForwardTrace& t, std::size_t class_index,
                               const LrpConfig& cfg) {
    if (class_index >= m.num_classes) throw shape_error("class index out of range");
    Tensor seed(Shape{m.num_classes});
    seed[class_index] = t.logits()[class_index];
    return lrp_from(m, t, m.layers.size() - 1, std::move(seed), cfg);
}

// the same rule on every parameterized layer
inline LrpConfig uniform_lrp(const Model& m, const LrpRule& rule) {
    LrpConfig cfg;
    for (std::size_t i = 0; i < m.layers.size(); ++i)
        if (m.layers[i].kind == LayerKind::Dense || m.layers[i].kind == LayerKind::Conv2D)
            cfg.rules[i] = rule;
    return cfg;
}

}  // namespace relsub
