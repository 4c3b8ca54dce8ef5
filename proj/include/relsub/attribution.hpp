#pragma once
// Attribution backends on top of the network core: Gradient×Input, Integrated
// Gradients (midpoint rule, zero baseline), exact and permutation-sampled
// Shapley values (removal = set to zero), and context-vector extraction at a
// designated layer for each backend.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "relsub/core.hpp"
#include "relsub/lrp.hpp"
#include "relsub/net.hpp"
#include "relsub/parallel.hpp"
#include "relsub/rng.hpp"

namespace relsub {

struct AttributionConfig {
    std::size_t ig_steps = 100;
    std::size_t shapley_permutations = 25;
    std::size_t patch_size = 4;
    std::uint64_t seed = 0;
    LrpConfig lrp;
    std::size_t threads = 1;
};

inline Tensor grad_x_input(const Model& m, const Tensor& x, std::size_t class_index) {
    ForwardTrace t = forward(m, x);
    Tensor g = backward_gradient(m, t, class_index);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= x[i];
    return g;
}

// midpoint rule on the straight path from 0 to x:
// R_i = Σ_{s=1..S} (∂f/∂x_i at x·(s−½)/S) · x_i / S
inline Tensor integrated_gradients(const Model& m, const Tensor& x, std::size_t class_index,
                                   const AttributionConfig& cfg) {
    if (cfg.ig_steps == 0) throw usage_error("ig_steps must be >= 1");
    Tensor acc(x.shape());
    for (std::size_t s = 1; s <= cfg.ig_steps; ++s) {
        double t = (double(s) - 0.5) / double(cfg.ig_steps);
        Tensor xt = x;
        for (double& v : xt.values()) v *= t;
        ForwardTrace tr = forward(m, xt);
        Tensor g = backward_gradient(m, tr, class_index);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }
    double inv = 1.0 / double(cfg.ig_steps);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] *= x[i] * inv;
    return acc;
}

/* Shapley values over an arbitrary coalition game. The game maps a presence
   mask over n players to a scalar payoff. */

using CoalitionGame = std::function<double(const std::vector<char>&)>;

inline std::vector<double> shapley_exact_game(const CoalitionGame& f, std::size_t n) {
    if (n == 0) throw usage_error("shapley needs at least one player");
    if (n > 14)
        throw usage_error("exact Shapley limited to 14 groups (2^14 coalitions); use sampling");
    // cache all 2^n coalition payoffs, then combine with exact factorial weights
    std::vector<double> payoff(std::size_t{1} << n);
    std::vector<char> mask(n);
    for (std::size_t bits = 0; bits < payoff.size(); ++bits) {
        for (std::size_t i = 0; i < n; ++i) mask[i] = (bits >> i) & 1 ? 1 : 0;
        payoff[bits] = f(mask);
    }
    std::vector<double> fact(n + 1, 1.0);  // 14! < 2^53, exact in doubles
    for (std::size_t i = 1; i <= n; ++i) fact[i] = fact[i - 1] * double(i);
    std::vector<double> phi(n, 0.0);
    for (std::size_t bits = 0; bits < payoff.size(); ++bits) {
        std::size_t sz = std::size_t(std::popcount(bits));
        for (std::size_t i = 0; i < n; ++i) {
            if ((bits >> i) & 1) continue;
            double w = fact[sz] * fact[n - sz - 1] / fact[n];
            phi[i] += w * (payoff[bits | (std::size_t{1} << i)] - payoff[bits]);
        }
    }
    return phi;
}

// permutation sampling; chunked so the result is independent of thread count
inline std::vector<double> shapley_sampling_game(const CoalitionGame& f, std::size_t n,
                                                 std::size_t permutations, std::uint64_t seed,
                                                 std::size_t threads = 1) {
    if (n == 0) throw usage_error("shapley needs at least one player");
    if (permutations == 0) throw usage_error("shapley_permutations must be >= 1");
    const std::size_t chunk = 64;
    auto partials = chunk_map<std::vector<double>>(
        permutations, chunk, threads, [&](std::size_t chunk_idx, std::size_t lo, std::size_t hi) {
            Rng rng(mix_seed(seed, chunk_idx));
            std::vector<double> acc(n, 0.0);
            std::vector<std::size_t> order(n);
            std::vector<char> mask(n);
            for (std::size_t p = lo; p < hi; ++p) {
                for (std::size_t i = 0; i < n; ++i) order[i] = i;
                rng.shuffle(order);
                std::fill(mask.begin(), mask.end(), 0);
                double prev = f(mask);
                for (std::size_t i : order) {
                    mask[i] = 1;
                    double cur = f(mask);
                    acc[i] += cur - prev;
                    prev = cur;
                }
            }
            return acc;
        });
    std::vector<double> phi(n, 0.0);
    for (const auto& part : partials)
        for (std::size_t i = 0; i < n; ++i) phi[i] += part[i];
    for (double& v : phi) v /= double(permutations);
    return phi;
}

/* model-surface wrappers: groups of flat input indices, removal sets them to 0 */

inline CoalitionGame logit_game(const Model& m, const Tensor& x, std::size_t class_index,
                                const std::vector<std::vector<std::size_t>>& groups) {
    if (class_index >= m.num_classes) throw shape_error("class index out of range");
    for (const auto& g : groups)
        for (std::size_t i : g)
            if (i >= x.size()) throw shape_error("group index out of range");
    return [&m, &x, class_index, &groups](const std::vector<char>& mask) {
        Tensor masked(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) masked[i] = x[i];
        for (std::size_t g = 0; g < groups.size(); ++g)
            if (!mask[g])
                for (std::size_t i : groups[g]) masked[i] = 0.0;
        return forward(m, masked).logits()[class_index];
    };
}

// per-group scores spread equally over member features
inline Tensor scores_to_map(const Shape& shape, const std::vector<std::vector<std::size_t>>& groups,
                            const std::vector<double>& phi) {
    Tensor out(shape);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].empty()) continue;
        double share = phi[g] / double(groups[g].size());
        for (std::size_t i : groups[g]) out[i] += share;
    }
    return out;
}

inline Tensor shapley_exact(const Model& m, const Tensor& x, std::size_t class_index,
                            const std::vector<std::vector<std::size_t>>& groups) {
    auto phi = shapley_exact_game(logit_game(m, x, class_index, groups), groups.size());
    return scores_to_map(x.shape(), groups, phi);
}

inline Tensor shapley_sampling(const Model& m, const Tensor& x, std::size_t class_index,
                               const std::vector<std::vector<std::size_t>>& groups,
                               const AttributionConfig& cfg) {
    auto phi = shapley_sampling_game(logit_game(m, x, class_index, groups), groups.size(),
                                     cfg.shapley_permutations, cfg.seed, cfg.threads);
    return scores_to_map(x.shape(), groups, phi);
}

// square patches over the spatial dims of a (c,h,w) or (h,w) tensor, all
// channels of a patch grouped together; trailing partial patches included
inline std::vector<std::vector<std::size_t>> patch_groups(const Shape& shape, std::size_t patch) {
    if (patch == 0) throw usage_error("patch size must be positive");
    std::size_t C = 1, H = 0, W = 0;
    if (shape.size() == 3) {
        C = shape[0];
        H = shape[1];
        W = shape[2];
    } else if (shape.size() == 2) {
        H = shape[0];
        W = shape[1];
    } else {
        throw shape_error("patch grouping needs a rank-2 or rank-3 tensor");
    }
    std::size_t ph = (H + patch - 1) / patch, pw = (W + patch - 1) / patch;
    std::vector<std::vector<std::size_t>> groups;
    groups.reserve(ph * pw);
    for (std::size_t pi = 0; pi < ph; ++pi)
        for (std::size_t pj = 0; pj < pw; ++pj) {
            std::vector<std::size_t> g;
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = pi * patch; i < std::min(H, (pi + 1) * patch); ++i)
                    for (std::size_t j = pj * patch; j < std::min(W, (pj + 1) * patch); ++j)
                        g.push_back((c * H + i) * W + j);
            groups.push_back(std::move(g));
        }
    return groups;
}

/* context vectors at the output of a designated layer */

enum class ContextMethod { LRP, GradInput, IntegratedGradients, ShapleyExact, ShapleySampling };

inline ContextMethod context_method_from(const std::string& s) {
    if (s == "lrp") return ContextMethod::LRP;
    if (s == "gradinput") return ContextMethod::GradInput;
    if (s == "ig") return ContextMethod::IntegratedGradients;
    if (s == "shapley") return ContextMethod::ShapleyExact;
    if (s == "shapley-sampling") return ContextMethod::ShapleySampling;
    throw usage_error("unknown context method '" + s + "'");
}

// returns a tensor shaped like the layer output; the context vector at a
// spatial position is the channel fiber at that position
inline Tensor context_map(const Model& m, const ForwardTrace& t, std::size_t layer_index,
                          std::size_t class_index, ContextMethod method,
                          const AttributionConfig& cfg) {
    if (layer_index >= m.layers.size()) throw shape_error("layer index out of range");
    const Tensor& act = t.outputs[layer_index];
    switch (method) {
        case ContextMethod::LRP: {
            auto maps = lrp(m, t, class_index, cfg.lrp);
            const Tensor& R = maps[layer_index + 1];
            Tensor c(act.shape());
            for (std::size_t i = 0; i < act.size(); ++i)
                c[i] = act[i] != 0.0 ? R[i] / act[i] : 0.0;
            return c;
        }
        case ContextMethod::GradInput:
            return submodel_gradient(m, layer_index + 1, act, class_index);
        case ContextMethod::IntegratedGradients: {
            if (cfg.ig_steps == 0) throw usage_error("ig_steps must be >= 1");
            Tensor acc(act.shape());
            for (std::size_t s = 1; s <= cfg.ig_steps; ++s) {
                double tmid = (double(s) - 0.5) / double(cfg.ig_steps);
                Tensor at = act;
                for (double& v : at.values()) v *= tmid;
                Tensor g = submodel_gradient(m, layer_index + 1, at, class_index);
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
            }
            for (double& v : acc.values()) v /= double(cfg.ig_steps);
            return acc;
        }
        case ContextMethod::ShapleyExact:
        case ContextMethod::ShapleySampling: {
            // groups = channels of the activation map, scored on the
            // activation-to-logit submodel; c is constant within a channel
            std::size_t D = act.rank() == 3 ? act.shape()[0] : act.size();
            std::size_t hw = act.size() / D;
            CoalitionGame game = [&](const std::vector<char>& mask) {
                Tensor masked = act;
                for (std::size_t ch = 0; ch < D; ++ch)
                    if (!mask[ch])
                        for (std::size_t p = 0; p < hw; ++p) masked[ch * hw + p] = 0.0;
                return forward_from(m, layer_index + 1, masked)[class_index];
            };
            std::vector<double> phi =
                method == ContextMethod::ShapleyExact
                    ? shapley_exact_game(game, D)
                    : shapley_sampling_game(game, D, cfg.shapley_permutations, cfg.seed,
                                            cfg.threads);
            Tensor c(act.shape());
            for (std::size_t ch = 0; ch < D; ++ch) {
                double sum = 0.0;
                for (std::size_t p = 0; p < hw; ++p) sum += act[ch * hw + p];
                double val = sum != 0.0 ? phi[ch] / sum : 0.0;
                for (std::size_t p = 0; p < hw; ++p) c[ch * hw + p] = val;
            }
            return c;
        }
    }
    throw usage_error("unknown context method");
}

}  // namespace relsub
