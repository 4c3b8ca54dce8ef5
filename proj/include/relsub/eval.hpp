#pragma once
// Explanation evaluation: patch-flipping with area-under-curve scoring (single
// map and multi-component union variant), total relevance, separability,
// peakness, class-subspace matching, rank AUROC, and prototype selection.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "relsub/attribution.hpp"
#include "relsub/core.hpp"
#include "relsub/net.hpp"
#include "relsub/rng.hpp"
#include "relsub/subspace.hpp"
#include "relsub/vlayer.hpp"

namespace relsub {

enum class Inpainter { Zero, NeighborhoodMean };

inline const char* inpainter_name(Inpainter p) {
    return p == Inpainter::Zero ? "zero" : "neighborhood_mean";
}

struct FlipOptions {
    std::size_t patch_size = 4;
    std::size_t flips_per_step = 1;   // ignored when tau_squared_schedule is set
    bool tau_squared_schedule = false;
    Inpainter inpainter = Inpainter::Zero;
    bool rectify_output = true;
};

struct FlipReport {
    std::vector<double> steps;    // recorded class output, step 0 = untouched input
    std::vector<double> weights;  // fraction of patches newly removed per step
    double aupc = 0.0;
    FlipOptions options;
};

namespace detail {

// harmonic fill: removed pixels relax to the average of their in-bounds
// 4-neighbors (Jacobi iteration from zero); regions with no intact boundary
// stay at zero
inline void inpaint_channel(std::vector<double>& img, const std::vector<char>& removed,
                            std::size_t H, std::size_t W, Inpainter kind) {
    if (kind == Inpainter::Zero) {
        for (std::size_t i = 0; i < img.size(); ++i)
            if (removed[i]) img[i] = 0.0;
        return;
    }
    std::vector<double> cur(img.size()), next(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) cur[i] = removed[i] ? 0.0 : img[i];
    for (std::size_t iter = 0; iter < 100000; ++iter) {
        double delta = 0.0;
        for (std::size_t r = 0; r < H; ++r)
            for (std::size_t c = 0; c < W; ++c) {
                std::size_t i = r * W + c;
                if (!removed[i]) {
                    next[i] = cur[i];
                    continue;
                }
                double sum = 0.0;
                int cnt = 0;
                if (r > 0) { sum += cur[i - W]; ++cnt; }
                if (r + 1 < H) { sum += cur[i + W]; ++cnt; }
                if (c > 0) { sum += cur[i - 1]; ++cnt; }
                if (c + 1 < W) { sum += cur[i + 1]; ++cnt; }
                next[i] = cnt ? sum / cnt : 0.0;
                delta = std::max(delta, std::abs(next[i] - cur[i]));
            }
        cur.swap(next);
        if (delta < 1e-13) break;
    }
    img = cur;
}

inline Tensor inpaint(const Tensor& x, const std::vector<char>& removed_pixels, Inpainter kind) {
    std::size_t C = x.rank() == 3 ? x.shape()[0] : 1;
    std::size_t H = x.rank() == 3 ? x.shape()[1] : x.shape()[0];
    std::size_t W = x.rank() == 3 ? x.shape()[2] : x.shape()[1];
    Tensor out = x;
    std::vector<double> chan(H * W);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < H * W; ++i) chan[i] = x[c * H * W + i];
        inpaint_channel(chan, removed_pixels, H, W, kind);
        for (std::size_t i = 0; i < H * W; ++i) out[c * H * W + i] = chan[i];
    }
    return out;
}

inline void check_patch_grid(const Shape& shape, std::size_t patch) {
    if (patch == 0) throw usage_error("patch size must be positive");
    std::size_t H = shape.size() == 3 ? shape[1] : shape[0];
    std::size_t W = shape.size() == 3 ? shape[2] : shape[1];
    if (H % patch || W % patch)
        throw shape_error("image dims must be divisible by the patch size");
}

// descending patch order by summed heatmap relevance, ties to the lower index
inline std::vector<std::size_t> patch_order(const Tensor& heatmap,
                                            const std::vector<std::vector<std::size_t>>& groups) {
    std::vector<double> rel(groups.size(), 0.0);
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (std::size_t i : groups[g]) rel[g] += heatmap[i];
    std::vector<std::size_t> order(groups.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return rel[a] > rel[b]; });
    return order;
}

inline std::size_t schedule_increment(const FlipOptions& o, std::size_t step) {
    return o.tau_squared_schedule ? step * step : o.flips_per_step;
}

}  // namespace detail

// single-map flipping: remove patches most-relevant-first, inpaint, record the
// (rectified) class output, and integrate the decay
inline FlipReport patch_flip(const Model& m, const Tensor& x, std::size_t class_index,
                             const Tensor& heatmap, const FlipOptions& opts) {
    if (!heatmap.same_shape(x)) throw shape_error("heatmap must have the input shape");
    detail::check_patch_grid(x.shape(), opts.patch_size);
    if (!opts.tau_squared_schedule && opts.flips_per_step == 0)
        throw usage_error("flips_per_step must be positive");
    auto groups = patch_groups(x.shape(), opts.patch_size);
    auto order = detail::patch_order(heatmap, groups);
    std::size_t HW = (x.rank() == 3 ? x.shape()[1] * x.shape()[2] : x.size());

    FlipReport rep;
    rep.options = opts;
    auto record = [&](const Tensor& img) {
        double f = forward(m, img).logits()[class_index];
        rep.steps.push_back(opts.rectify_output ? std::max(0.0, f) : f);
    };
    record(x);
    std::vector<char> removed(HW, 0);
    std::size_t cursor = 0;
    for (std::size_t step = 1; cursor < order.size(); ++step) {
        std::size_t inc = std::min(detail::schedule_increment(opts, step),
                                   order.size() - cursor);
        for (std::size_t t = 0; t < inc; ++t, ++cursor)
            for (std::size_t i : groups[order[cursor]]) removed[i % HW] = 1;
        rep.weights.push_back(double(inc) / double(order.size()));
        record(detail::inpaint(x, removed, opts.inpainter));
    }
    for (std::size_t t = 0; t < rep.weights.size(); ++t)
        rep.aupc += rep.weights[t] * (rep.steps[t] - rep.steps[t + 1]) / 2.0;
    return rep;
}

// multi-component flipping: each component advances its own removal order and
// the removed set is the union; steps that add nothing are merged away
inline FlipReport patch_flip_multi(const Model& m, const Tensor& x, std::size_t class_index,
                                   const JointExplanation& joint, const FlipOptions& opts) {
    if (joint.maps.empty()) throw usage_error("need at least one component map");
    for (const Tensor& t : joint.maps)
        if (!t.same_shape(x)) throw shape_error("component map must have the input shape");
    detail::check_patch_grid(x.shape(), opts.patch_size);
    if (!opts.tau_squared_schedule && opts.flips_per_step == 0)
        throw usage_error("flips_per_step must be positive");
    auto groups = patch_groups(x.shape(), opts.patch_size);
    std::vector<std::vector<std::size_t>> orders;
    orders.reserve(joint.maps.size());
    for (const Tensor& t : joint.maps) orders.push_back(detail::patch_order(t, groups));
    std::size_t HW = (x.rank() == 3 ? x.shape()[1] * x.shape()[2] : x.size());

    FlipReport rep;
    rep.options = opts;
    auto record = [&](const Tensor& img) {
        double f = forward(m, img).logits()[class_index];
        rep.steps.push_back(opts.rectify_output ? std::max(0.0, f) : f);
    };
    record(x);
    std::vector<char> patch_removed(groups.size(), 0);
    std::vector<char> removed(HW, 0);
    std::size_t cursor = 0, removed_patches = 0;
    for (std::size_t step = 1; removed_patches < groups.size(); ++step) {
        std::size_t inc = std::min(detail::schedule_increment(opts, step),
                                   groups.size() - cursor);
        std::size_t newly = 0;
        for (std::size_t t = 0; t < inc; ++t, ++cursor)
            for (const auto& ord : orders) {
                std::size_t g = ord[cursor];
                if (patch_removed[g]) continue;
                patch_removed[g] = 1;
                ++newly;
                for (std::size_t i : groups[g]) removed[i % HW] = 1;
            }
        removed_patches += newly;
        if (newly == 0) continue;  // keeps every recorded weight positive
        rep.weights.push_back(double(newly) / double(groups.size()));
        record(detail::inpaint(x, removed, opts.inpainter));
    }
    for (std::size_t t = 0; t < rep.weights.size(); ++t)
        rep.aupc += rep.weights[t] * (rep.steps[t] - rep.steps[t + 1]) / 2.0;
    return rep;
}

// mean over inputs of the total input relevance assigned to the subspace;
// propagation backends sum the filtered pixel map, perturbation backends use
// the closed-form shortcut
inline double total_relevance_metric(const Model& m, const std::vector<Tensor>& inputs,
                                     std::size_t class_index, std::size_t layer_index,
                                     const Eigen::MatrixXd& U_sub, ContextMethod backend,
                                     const AttributionConfig& cfg) {
    if (inputs.empty()) throw usage_error("need at least one input");
    if (U_sub.cols() == 0) return 0.0;
    double total = 0.0;
    for (const Tensor& x : inputs) {
        if (backend == ContextMethod::LRP || backend == ContextMethod::GradInput) {
            SubspaceBasis b;
            b.dim = std::size_t(U_sub.rows());
            std::size_t d = std::size_t(U_sub.cols());
            b.block_dims = d < b.dim ? std::vector<std::size_t>{d, b.dim - d}
                                     : std::vector<std::size_t>{d};
            Eigen::MatrixXd full(U_sub.rows(), U_sub.rows());
            full.leftCols(U_sub.cols()) = U_sub;
            if (d < b.dim) {
                // any orthonormal completion works: the complement block is discarded
                Eigen::MatrixXd G = Eigen::MatrixXd::Identity(U_sub.rows(), U_sub.rows()) -
                                    U_sub * U_sub.transpose();
                Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
                full.rightCols(Eigen::Index(b.dim - d)) =
                    es.eigenvectors().rightCols(Eigen::Index(b.dim - d));
            }
            b.matrix = full;
            b.check();
            JointExplanation joint =
                two_step_explain(m, x, class_index, layer_index, b, backend, cfg);
            double s = 0.0;
            for (std::size_t i = 0; i < joint.maps[0].size(); ++i) s += joint.maps[0][i];
            total += s;
        } else {
            total += total_relevance_shortcut(m, x, class_index, layer_index, U_sub, backend, cfg);
        }
    }
    return total / double(inputs.size());
}

inline double separability(const JointExplanation& joint) {
    if (joint.maps.empty()) throw usage_error("need at least one component map");
    std::size_t n = joint.maps[0].size();
    double sum_max = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
        double mx = joint.maps[0][p];
        for (std::size_t k = 1; k < joint.maps.size(); ++k)
            mx = std::max(mx, joint.maps[k][p]);
        sum_max += mx;
    }
    double max_total = 0.0;
    for (std::size_t k = 0; k < joint.maps.size(); ++k) {
        double t = 0.0;
        for (std::size_t p = 0; p < n; ++p) t += joint.maps[k][p];
        max_total = k == 0 ? t : std::max(max_total, t);
    }
    return sum_max - max_total;
}

inline double peakness(const JointExplanation& joint) {
    if (joint.maps.empty()) throw usage_error("need at least one component map");
    double total = 0.0;
    for (const Tensor& map : joint.maps) {
        double mx = map[0];
        for (std::size_t p = 1; p < map.size(); ++p) mx = std::max(mx, map[p]);
        total += mx;
    }
    return total;
}

// order-statistic quantile with linear interpolation at position (n−1)·p
inline double quantile(std::vector<double> v, double p) {
    if (v.empty()) throw data_error("quantile of an empty sample");
    if (p < 0.0 || p > 1.0) throw usage_error("quantile level must be in [0,1]");
    std::sort(v.begin(), v.end());
    double pos = double(v.size() - 1) * p;
    std::size_t lo = std::size_t(pos);
    double frac = pos - double(lo);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

// match(k, ω) iff the within-class α-quantile of subspace k's score exceeds
// the overall β-quantile
inline std::vector<std::vector<bool>> class_subspace_match(
    const std::vector<std::vector<double>>& scores,  // scores[k][n]
    const std::vector<std::uint32_t>& labels, std::size_t num_classes, double alpha = 0.75,
    double beta = 0.85) {
    if (alpha >= beta) throw usage_error("alpha must be below beta");
    if (scores.empty()) throw usage_error("need at least one subspace");
    for (const auto& s : scores)
        if (s.size() != labels.size())
            throw shape_error("score count does not match label count");
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] >= num_classes) throw data_error("label out of range");
        by_class[labels[n]].push_back(n);
    }
    for (std::size_t w = 0; w < num_classes; ++w)
        if (by_class[w].empty())
            throw data_error("class " + std::to_string(w) + " has no samples");
    std::vector<std::vector<bool>> table(scores.size(), std::vector<bool>(num_classes, false));
    for (std::size_t k = 0; k < scores.size(); ++k) {
        double overall = quantile(scores[k], beta);
        for (std::size_t w = 0; w < num_classes; ++w) {
            std::vector<double> cls;
            cls.reserve(by_class[w].size());
            for (std::size_t n : by_class[w]) cls.push_back(scores[k][n]);
            table[k][w] = quantile(std::move(cls), alpha) > overall;
        }
    }
    return table;
}

// Mann-Whitney statistic with half credit for ties
inline double auroc(const std::vector<double>& scores, const std::vector<char>& labels) {
    if (scores.size() != labels.size()) throw shape_error("score/label count mismatch");
    std::size_t pos = 0, neg = 0;
    for (char l : labels) (l ? pos : neg) += 1;
    if (pos == 0 || neg == 0) throw data_error("need at least one positive and one negative");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // average ranks across tie groups
    std::vector<double> rank(scores.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        double avg = (double(i + 1) + double(j + 1)) / 2.0;
        for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = avg;
        i = j + 1;
    }
    double rank_sum = 0.0;
    for (std::size_t n = 0; n < labels.size(); ++n)
        if (labels[n]) rank_sum += rank[n];
    double U = rank_sum - double(pos) * double(pos + 1) / 2.0;
    return U / (double(pos) * double(neg));
}

struct PrototypeResult {
    std::vector<std::size_t> ids;
    double objective = 0.0;
};

// draw N seeded random size-n subsets and keep the one whose members maximize
// the disentanglement objective under the given basis
inline PrototypeResult prototypes(const ActivationContextDataset& ds, const SubspaceBasis& basis,
                                  std::size_t N, std::size_t n, std::uint64_t seed, double q = 0.5,
                                  double delta = 1e-12) {
    ds.check();
    if (n == 0 || n > ds.size()) throw usage_error("subset size out of range");
    if (N == 0) throw usage_error("need at least one candidate subset");
    Rng rng(seed);
    PrototypeResult best;
    for (std::size_t t = 0; t < N; ++t) {
        std::vector<std::size_t> ids = rng.sample_indices(ds.size(), n);
        ActivationContextDataset sub;
        sub.A.resize(ds.A.rows(), Eigen::Index(n));
        sub.C.resize(ds.C.rows(), Eigen::Index(n));
        for (std::size_t i = 0; i < n; ++i) {
            sub.A.col(Eigen::Index(i)) = ds.A.col(Eigen::Index(ids[i]));
            sub.C.col(Eigen::Index(i)) = ds.C.col(Eigen::Index(ids[i]));
        }
        double J = drsa_objective(basis, sub, q, delta);
        if (t == 0 || J > best.objective) {
            best.objective = J;
            best.ids = std::move(ids);
        }
    }
    return best;
}

}  // namespace relsub
