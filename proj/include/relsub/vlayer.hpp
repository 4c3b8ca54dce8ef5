#pragma once
// Orthogonal virtual layer: a block-partitioned basis U inserted as U·Uᵀ at a
// designated layer, concept relevance R_k = (U_kᵀa)ᵀ(U_kᵀc), and the two-step
// joint pixel-concept explanation. Propagation backends (LRP, Gradient×Input)
// filter the backward pass below the layer; perturbation backends (IG,
// Shapley) attribute a relevance model with the context frozen at the
// unperturbed input.

#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "relsub/attribution.hpp"
#include "relsub/core.hpp"
#include "relsub/lrp.hpp"
#include "relsub/net.hpp"

namespace relsub {

struct SubspaceBasis {
    std::size_t dim = 0;
    std::vector<std::size_t> block_dims;
    Eigen::MatrixXd matrix;  // D×D, block k occupies columns [offset_k, offset_k + d_k)

    std::size_t blocks() const { return block_dims.size(); }
    std::size_t block_offset(std::size_t k) const {
        std::size_t off = 0;
        for (std::size_t i = 0; i < k; ++i) off += block_dims[i];
        return off;
    }
    Eigen::MatrixXd block(std::size_t k) const {
        if (k >= block_dims.size()) throw shape_error("block index out of range");
        return matrix.middleCols(Eigen::Index(block_offset(k)), Eigen::Index(block_dims[k]));
    }
    void check() const {
        std::size_t total = 0;
        for (std::size_t d : block_dims) {
            if (d == 0) throw shape_error("block dims must be positive");
            total += d;
        }
        if (total != dim) throw shape_error("block dims must sum to the basis dimension");
        if (matrix.rows() != Eigen::Index(dim) || matrix.cols() != Eigen::Index(dim))
            throw shape_error("basis matrix must be D x D");
        Eigen::MatrixXd G = matrix.transpose() * matrix;
        double err = (G - Eigen::MatrixXd::Identity(G.rows(), G.cols())).cwiseAbs().maxCoeff();
        if (err > 1e-8) throw numeric_error("basis is not orthonormal (residual " +
                                            std::to_string(err) + ")");
    }
};

inline void save_basis(const SubspaceBasis& b, const std::string& path) {
    std::ostringstream os;
    os << "{\"dim\":" << b.dim << ",\"block_dims\":[";
    for (std::size_t i = 0; i < b.block_dims.size(); ++i)
        os << (i ? "," : "") << b.block_dims[i];
    os << "],\"matrix\":[";
    for (std::size_t r = 0; r < b.dim; ++r)
        for (std::size_t c = 0; c < b.dim; ++c) {
            if (r + c) os << ',';
            os << fmt17(b.matrix(Eigen::Index(r), Eigen::Index(c)));
        }
    os << "]}\n";
    std::ofstream f(path);
    if (!f) throw data_error("cannot open " + path + " for writing");
    f << os.str();
    if (!f) throw data_error("write failed: " + path);
}

inline SubspaceBasis load_basis(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw data_error("malformed basis file " + path + ": " + e.what());
    }
    if (!j.contains("dim") || !j.contains("block_dims") || !j.contains("matrix"))
        throw data_error("basis file missing dim/block_dims/matrix");
    SubspaceBasis b;
    b.dim = j["dim"].get<std::size_t>();
    for (const auto& e : j["block_dims"]) b.block_dims.push_back(e.get<std::size_t>());
    const auto& mj = j["matrix"];
    if (!mj.is_array() || mj.size() != b.dim * b.dim)
        throw data_error("basis matrix must hold dim*dim row-major entries");
    b.matrix.resize(Eigen::Index(b.dim), Eigen::Index(b.dim));
    for (std::size_t r = 0; r < b.dim; ++r)
        for (std::size_t c = 0; c < b.dim; ++c)
            b.matrix(Eigen::Index(r), Eigen::Index(c)) = mj[r * b.dim + c].get<double>();
    b.check();
    return b;
}

namespace detail {

// channel fiber at a flat spatial position of a (D,H,W) map; a D-vector is one position
inline std::size_t positions_of(const Tensor& t, std::size_t D) {
    if (t.rank() == 1) {
        if (t.size() != D) throw shape_error("vector length does not match basis dim");
        return 1;
    }
    if (t.rank() == 3) {
        if (t.shape()[0] != D) throw shape_error("channel count does not match basis dim");
        return t.shape()[1] * t.shape()[2];
    }
    throw shape_error("expected a D-vector or a (D,h,w) map");
}

inline Eigen::VectorXd fiber(const Tensor& t, std::size_t D, std::size_t hw, std::size_t p) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(Eigen::Index(D));
    for (std::size_t ch = 0; ch < D; ++ch) v[Eigen::Index(ch)] = t[ch * hw + p];
    return v;
}

inline void set_fiber(Tensor& t, std::size_t D, std::size_t hw, std::size_t p,
                      const Eigen::VectorXd& v) {
    for (std::size_t ch = 0; ch < D; ++ch) t[ch * hw + p] = v[Eigen::Index(ch)];
}

}  // namespace detail

struct VirtualLayerOutput {
    Tensor reconstructed;          // U Uᵀ a, equal to a up to roundoff
    std::vector<Tensor> h_blocks;  // h_k = U_kᵀ a per position, shape (d_k[,h,w])
};

inline VirtualLayerOutput apply_virtual_layer(const Tensor& a, const SubspaceBasis& basis) {
    std::size_t D = basis.dim;
    std::size_t hw = detail::positions_of(a, D);
    VirtualLayerOutput out;
    out.reconstructed = Tensor(a.shape());
    for (std::size_t k = 0; k < basis.blocks(); ++k) {
        Shape hs;
        if (a.rank() == 1)
            hs = {basis.block_dims[k]};
        else
            hs = {basis.block_dims[k], a.shape()[1], a.shape()[2]};
        out.h_blocks.emplace_back(hs);
    }
    for (std::size_t p = 0; p < hw; ++p) {
        Eigen::VectorXd v = detail::fiber(a, D, hw, p);
        Eigen::VectorXd h = basis.matrix.transpose() * v;
        Eigen::VectorXd rec = basis.matrix * h;
        detail::set_fiber(out.reconstructed, D, hw, p, rec);
        for (std::size_t k = 0; k < basis.blocks(); ++k) {
            std::size_t off = basis.block_offset(k), d = basis.block_dims[k];
            for (std::size_t i = 0; i < d; ++i)
                out.h_blocks[k][i * hw + p] = h[Eigen::Index(off + i)];
        }
    }
    return out;
}

// R_k = (U_kᵀa)ᵀ(U_kᵀc) for one position
inline std::vector<double> concept_relevance(const Eigen::VectorXd& a, const Eigen::VectorXd& c,
                                             const SubspaceBasis& basis) {
    if (a.size() != Eigen::Index(basis.dim) || c.size() != Eigen::Index(basis.dim))
        throw shape_error("vector length does not match basis dim");
    std::vector<double> R(basis.blocks());
    for (std::size_t k = 0; k < basis.blocks(); ++k) {
        auto Uk = basis.block(k);
        R[k] = (Uk.transpose() * a).dot(Uk.transpose() * c);
    }
    return R;
}

// per-concept relevance summed over spatial positions
inline std::vector<double> concept_relevance_map(const Tensor& act, const Tensor& ctx,
                                                 const SubspaceBasis& basis) {
    std::size_t D = basis.dim;
    std::size_t hw = detail::positions_of(act, D);
    if (!act.same_shape(ctx)) throw shape_error("activation and context shapes differ");
    std::vector<double> R(basis.blocks(), 0.0);
    for (std::size_t p = 0; p < hw; ++p) {
        Eigen::VectorXd a = detail::fiber(act, D, hw, p);
        Eigen::VectorXd c = detail::fiber(ctx, D, hw, p);
        std::vector<double> r = concept_relevance(a, c, basis);
        for (std::size_t k = 0; k < basis.blocks(); ++k) R[k] += r[k];
    }
    return R;
}

struct JointExplanation {
    std::vector<Tensor> maps;           // one input-shaped map per concept
    std::vector<double> concept_scores; // R_k summed over positions
    std::size_t class_index = 0;
};

namespace detail {

// fiber-wise U_k U_kᵀ projection of a (D[,h,w]) map
inline Tensor project_fibers(const Tensor& t, const SubspaceBasis& basis, std::size_t k) {
    std::size_t D = basis.dim;
    std::size_t hw = positions_of(t, D);
    auto Uk = basis.block(k);
    Tensor out(t.shape());
    for (std::size_t p = 0; p < hw; ++p) {
        Eigen::VectorXd v = fiber(t, D, hw, p);
        Eigen::VectorXd proj = Uk * (Uk.transpose() * v);
        set_fiber(out, D, hw, p, proj);
    }
    return out;
}

}  // namespace detail

inline JointExplanation two_step_explain(const Model& m, const Tensor& x, std::size_t class_index,
                                         std::size_t layer_index, const SubspaceBasis& basis,
                                         ContextMethod backend, const AttributionConfig& cfg) {
    if (backend == ContextMethod::ShapleyExact)
        throw usage_error("two-step explanation supports lrp, gradinput, ig, shapley-sampling");
    ForwardTrace trace = forward(m, x);
    if (layer_index >= m.layers.size()) throw shape_error("layer index out of range");
    const Tensor& act = trace.outputs[layer_index];
    detail::positions_of(act, basis.dim);  // D check
    Tensor ctx = context_map(m, trace, layer_index, class_index, backend, cfg);

    JointExplanation out;
    out.class_index = class_index;
    out.concept_scores = concept_relevance_map(act, ctx, basis);
    out.maps.reserve(basis.blocks());

    for (std::size_t k = 0; k < basis.blocks(); ++k) {
        switch (backend) {
            case ContextMethod::LRP: {
                // restart the pass from R_j = (U_k U_kᵀ a)_j · c_j per position
                Tensor filtered = detail::project_fibers(act, basis, k);
                for (std::size_t i = 0; i < filtered.size(); ++i) filtered[i] *= ctx[i];
                auto maps = lrp_from(m, trace, layer_index, std::move(filtered), cfg.lrp);
                out.maps.push_back(std::move(maps[0]));
                break;
            }
            case ContextMethod::GradInput: {
                // pull back the projected context as the cotangent, then gate by the input
                Tensor cot = detail::project_fibers(ctx, basis, k);
                Tensor g = vjp_range(m, trace, 0, layer_index, std::move(cot));
                for (std::size_t i = 0; i < g.size(); ++i) g[i] *= x[i];
                out.maps.push_back(std::move(g));
                break;
            }
            case ContextMethod::IntegratedGradients: {
                // relevance model R̂_k(x') = Σ_pos φ(x')ᵀ U_k U_kᵀ c̄, midpoint rule on 0→x
                if (cfg.ig_steps == 0) throw usage_error("ig_steps must be >= 1");
                Tensor cot = detail::project_fibers(ctx, basis, k);
                Tensor acc(x.shape());
                for (std::size_t s = 1; s <= cfg.ig_steps; ++s) {
                    double tm = (double(s) - 0.5) / double(cfg.ig_steps);
                    Tensor xt = x;
                    for (double& v : xt.values()) v *= tm;
                    ForwardTrace tt = forward(m, xt);
                    Tensor g = vjp_range(m, tt, 0, layer_index, cot);
                    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
                }
                for (std::size_t i = 0; i < acc.size(); ++i)
                    acc[i] *= x[i] / double(cfg.ig_steps);
                out.maps.push_back(std::move(acc));
                break;
            }
            case ContextMethod::ShapleySampling: {
                // sampled Shapley of the relevance model over input patches
                Tensor cot = detail::project_fibers(ctx, basis, k);
                auto groups = patch_groups(x.shape(), cfg.patch_size);
                CoalitionGame game = [&](const std::vector<char>& mask) {
                    Tensor masked(x.shape());
                    for (std::size_t i = 0; i < x.size(); ++i) masked[i] = x[i];
                    for (std::size_t g = 0; g < groups.size(); ++g)
                        if (!mask[g])
                            for (std::size_t i : groups[g]) masked[i] = 0.0;
                    Tensor phi = forward(m, masked).outputs[layer_index];
                    double v = 0.0;
                    for (std::size_t i = 0; i < phi.size(); ++i) v += phi[i] * cot[i];
                    return v;
                };
                auto phi = shapley_sampling_game(game, groups.size(), cfg.shapley_permutations,
                                                 mix_seed(cfg.seed, k), cfg.threads);
                out.maps.push_back(scores_to_map(x.shape(), groups, phi));
                break;
            }
            default:
                throw usage_error("unsupported two-step backend");
        }
    }
    return out;
}

// (φ(x) − φ(0̄))ᵀ U U ᵀ c̄ summed over positions, skipping step-2 attribution
inline double total_relevance_shortcut(const Model& m, const Tensor& x, std::size_t class_index,
                                       std::size_t layer_index, const Eigen::MatrixXd& U_sub,
                                       ContextMethod backend, const AttributionConfig& cfg) {
    if (layer_index >= m.layers.size()) throw shape_error("layer index out of range");
    Eigen::MatrixXd G = U_sub.transpose() * U_sub;
    double err = (G - Eigen::MatrixXd::Identity(G.rows(), G.cols())).cwiseAbs().maxCoeff();
    if (err > 1e-8) throw numeric_error("subspace matrix is not column-orthonormal");
    ForwardTrace trace = forward(m, x);
    const Tensor& act = trace.outputs[layer_index];
    std::size_t D = std::size_t(U_sub.rows());
    std::size_t hw = detail::positions_of(act, D);
    Tensor ctx = context_map(m, trace, layer_index, class_index, backend, cfg);
    Tensor zero_in(x.shape());
    Tensor act0 = forward(m, zero_in).outputs[layer_index];
    double total = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
        Eigen::VectorXd da = detail::fiber(act, D, hw, p) - detail::fiber(act0, D, hw, p);
        Eigen::VectorXd c = detail::fiber(ctx, D, hw, p);
        total += (U_sub.transpose() * da).dot(U_sub.transpose() * c);
    }
    return total;
}

// f(x) − Σ_{k∈CH} max(0, R_k(x) − mean_k): subtract only relevance in excess
// of what the reference sample exhibits on the flagged blocks
inline double refine_prediction(const Model& m, const Tensor& x, std::size_t class_index,
                                std::size_t layer_index, const SubspaceBasis& basis,
                                const std::vector<std::size_t>& ch_blocks,
                                const std::vector<double>& class_means, ContextMethod backend,
                                const AttributionConfig& cfg) {
    if (ch_blocks.empty()) throw usage_error("refinement needs at least one flagged block");
    for (std::size_t k : ch_blocks)
        if (k >= basis.blocks()) throw shape_error("flagged block index out of range");
    if (class_means.size() != basis.blocks())
        throw shape_error("class_means must have one entry per block");
    ForwardTrace trace = forward(m, x);
    Tensor ctx = context_map(m, trace, layer_index, class_index, backend, cfg);
    std::vector<double> R = concept_relevance_map(trace.outputs[layer_index], ctx, basis);
    double refined = trace.logits()[class_index];
    for (std::size_t k : ch_blocks) refined -= std::max(0.0, R[k] - class_means[k]);
    return refined;
}

}  // namespace relsub
