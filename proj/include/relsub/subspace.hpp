#pragma once
// Subspace learners: the relevance-maximizing eigenproblem (top block of the
// symmetrized cross-covariance), disentangling gradient ascent on the
// orthogonal group, and the PCA / activation-only / random / top-channel
// baselines. All randomness flows through explicit seeds; sample reductions
// are chunk-ordered so thread count never changes a result.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "relsub/core.hpp"
#include "relsub/linalg.hpp"
#include "relsub/parallel.hpp"
#include "relsub/rng.hpp"
#include "relsub/vlayer.hpp"

namespace relsub {

struct SampleMeta {
    std::uint32_t image_id = 0;
    std::uint32_t class_label = 0;
    std::uint16_t row = 0;
    std::uint16_t col = 0;
};

struct ActivationContextDataset {
    Eigen::MatrixXd A;  // D×N activations
    Eigen::MatrixXd C;  // D×N contexts, column-paired with A
    std::vector<SampleMeta> meta;

    std::size_t dim() const { return std::size_t(A.rows()); }
    std::size_t size() const { return std::size_t(A.cols()); }
    void check() const {
        if (A.cols() == 0) throw data_error("dataset is empty");
        if (A.rows() != C.rows() || A.cols() != C.cols())
            throw shape_error("activation and context matrices must have equal shape");
        if (!meta.empty() && meta.size() != std::size_t(A.cols()))
            throw shape_error("metadata count does not match sample count");
        if (!A.allFinite() || !C.allFinite()) throw numeric_error("dataset has non-finite entries");
    }
};

struct NormalizeScales {
    double a_scale = 1.0;
    double c_scale = 1.0;
};

// â = a / (D^{1/4} · sqrt(mean over samples and coordinates of a²)), same for c
inline NormalizeScales normalize_dataset(ActivationContextDataset& ds) {
    ds.check();
    double D = double(ds.dim());
    double msa = ds.A.squaredNorm() / (D * double(ds.size()));
    double msc = ds.C.squaredNorm() / (D * double(ds.size()));
    if (msa == 0.0) throw data_error("cannot normalize: activations are all zero");
    if (msc == 0.0) throw data_error("cannot normalize: contexts are all zero");
    NormalizeScales s;
    s.a_scale = std::pow(D, 0.25) * std::sqrt(msa);
    s.c_scale = std::pow(D, 0.25) * std::sqrt(msc);
    ds.A /= s.a_scale;
    ds.C /= s.c_scale;
    return s;
}

struct EigenBasisResult {
    SubspaceBasis basis;          // blocks (d, D−d)
    Eigen::VectorXd eigenvalues;  // full spectrum, descending
    double objective = 0.0;       // mean relevance of the top block
};

// mean relevance of block k of U on the dataset: E[(U_kᵀa)ᵀ(U_kᵀc)]
inline double block_mean_relevance(const Eigen::MatrixXd& Uk, const ActivationContextDataset& ds) {
    Eigen::MatrixXd Ha = Uk.transpose() * ds.A;
    Eigen::MatrixXd Hc = Uk.transpose() * ds.C;
    return Ha.cwiseProduct(Hc).sum() / double(ds.size());
}

inline EigenBasisResult prca(const ActivationContextDataset& ds, std::size_t d) {
    ds.check();
    std::size_t D = ds.dim();
    if (d < 1 || d > D) throw usage_error("subspace dimension out of range");
    Eigen::MatrixXd cross = ds.A * ds.C.transpose() / double(ds.size());
    Eigen::MatrixXd sigma = cross + cross.transpose();
    if (!sigma.allFinite()) throw numeric_error("non-finite cross-covariance");
    SymEig eig = sym_eig_desc(sigma);
    EigenBasisResult out;
    out.eigenvalues = eig.values;
    out.basis.dim = D;
    out.basis.block_dims = d < D ? std::vector<std::size_t>{d, D - d} : std::vector<std::size_t>{d};
    out.basis.matrix = eig.vectors;
    out.objective = block_mean_relevance(out.basis.block(0), ds);
    return out;
}

inline EigenBasisResult pca(const ActivationContextDataset& ds, std::size_t d) {
    ds.check();
    std::size_t D = ds.dim();
    if (d < 1 || d > D) throw usage_error("subspace dimension out of range");
    Eigen::MatrixXd sigma = ds.A * ds.A.transpose() / double(ds.size());
    if (!sigma.allFinite()) throw numeric_error("non-finite covariance");
    SymEig eig = sym_eig_desc(sigma);
    EigenBasisResult out;
    out.eigenvalues = eig.values;
    out.basis.dim = D;
    out.basis.block_dims = d < D ? std::vector<std::size_t>{d, D - d} : std::vector<std::size_t>{d};
    out.basis.matrix = eig.vectors;
    out.objective = block_mean_relevance(out.basis.block(0), ds);
    return out;
}

struct DrsaOptions {
    double q = 0.5;
    std::vector<std::size_t> block_dims;
    std::size_t iterations = 1000;
    double learning_rate = 0.01;
    std::size_t restarts = 3;
    std::uint64_t seed = 0;
    double clamp_floor = 1e-12;
    std::size_t threads = 1;

    void check(std::size_t D) const {
        if (q <= 0.0) throw usage_error("q must be positive");
        if (learning_rate <= 0.0) throw usage_error("learning rate must be positive");
        if (restarts < 1) throw usage_error("need at least one restart");
        if (clamp_floor <= 0.0) throw usage_error("clamp floor must be positive");
        std::size_t total = 0;
        for (std::size_t b : block_dims) {
            if (b == 0) throw usage_error("block dims must be positive");
            total += b;
        }
        if (total != D) throw shape_error("block dims must sum to the data dimension");
    }
};

namespace detail {

// per-sample block relevances R_{kn} = Σ_{rows of block k} (Uᵀa)·(Uᵀc)
inline Eigen::MatrixXd block_relevances(const Eigen::MatrixXd& U,
                                        const std::vector<std::size_t>& block_dims,
                                        const Eigen::MatrixXd& A, const Eigen::MatrixXd& C) {
    Eigen::MatrixXd P = (U.transpose() * A).cwiseProduct(U.transpose() * C);
    Eigen::MatrixXd R(Eigen::Index(block_dims.size()), A.cols());
    Eigen::Index row = 0;
    for (std::size_t k = 0; k < block_dims.size(); ++k) {
        R.row(Eigen::Index(k)) = P.middleRows(row, Eigen::Index(block_dims[k])).colwise().sum();
        row += Eigen::Index(block_dims[k]);
    }
    return R;
}

struct DrsaEval {
    double J = 0.0;
    Eigen::VectorXd m;   // per-block quadratic means of the clamped relevances
    Eigen::MatrixXd T;   // clamped positive relevances, K×N
};

inline DrsaEval drsa_eval(const Eigen::MatrixXd& U, const std::vector<std::size_t>& block_dims,
                          const ActivationContextDataset& ds, double q, double delta,
                          std::size_t threads) {
    std::size_t K = block_dims.size(), N = ds.size();
    DrsaEval ev;
    ev.T = block_relevances(U, block_dims, ds.A, ds.C).cwiseMax(delta);
    // chunk-ordered sums of squares keep the result independent of thread count
    auto partials = chunk_map<Eigen::VectorXd>(
        N, kDefaultChunk, threads, [&](std::size_t, std::size_t lo, std::size_t hi) {
            Eigen::VectorXd acc = Eigen::VectorXd::Zero(Eigen::Index(K));
            for (std::size_t n = lo; n < hi; ++n)
                acc += ev.T.col(Eigen::Index(n)).cwiseAbs2();
            return acc;
        });
    Eigen::VectorXd ssq = Eigen::VectorXd::Zero(Eigen::Index(K));
    for (const auto& p : partials) ssq += p;
    ev.m = (ssq / double(N)).cwiseSqrt();
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::pow(ev.m[Eigen::Index(k)], q);
    ev.J = std::pow(s / double(K), 1.0 / q);
    return ev;
}

}  // namespace detail

inline double drsa_objective(const Eigen::MatrixXd& U, const std::vector<std::size_t>& block_dims,
                             const ActivationContextDataset& ds, double q, double delta,
                             std::size_t threads = 1) {
    ds.check();
    return detail::drsa_eval(U, block_dims, ds, q, delta, threads).J;
}

inline double drsa_objective(const SubspaceBasis& b, const ActivationContextDataset& ds, double q,
                             double delta, std::size_t threads = 1) {
    return drsa_objective(b.matrix, b.block_dims, ds, q, delta, threads);
}

// ∂J/∂U, assembled block-wise: the clamped branch (R < δ) contributes nothing;
// elsewhere ∂J/∂U_k = Σ_n w_k · t_{kn}/(N·m_k) · (a_ncᵀ_n + c_naᵀ_n)U_k with
// w_k = J^{1−q} m_k^{q−1}/K
inline Eigen::MatrixXd drsa_gradient(const Eigen::MatrixXd& U,
                                     const std::vector<std::size_t>& block_dims,
                                     const ActivationContextDataset& ds, double q, double delta,
                                     std::size_t threads = 1) {
    ds.check();
    std::size_t K = block_dims.size(), N = ds.size(), D = ds.dim();
    detail::DrsaEval ev = detail::drsa_eval(U, block_dims, ds, q, delta, threads);
    Eigen::MatrixXd R = detail::block_relevances(U, block_dims, ds.A, ds.C);
    // per-sample coefficients γ_{kn}; zero on the clamped branch
    Eigen::MatrixXd gamma = Eigen::MatrixXd::Zero(Eigen::Index(K), Eigen::Index(N));
    for (std::size_t k = 0; k < K; ++k) {
        double mk = ev.m[Eigen::Index(k)];
        double wk = std::pow(ev.J, 1.0 - q) * std::pow(mk, q - 1.0) / double(K);
        for (std::size_t n = 0; n < N; ++n) {
            double r = R(Eigen::Index(k), Eigen::Index(n));
            gamma(Eigen::Index(k), Eigen::Index(n)) =
                r >= delta ? wk * ev.T(Eigen::Index(k), Eigen::Index(n)) / (double(N) * mk) : 0.0;
        }
    }
    auto partials = chunk_map<Eigen::MatrixXd>(
        N, kDefaultChunk, threads, [&](std::size_t, std::size_t lo, std::size_t hi) {
            Eigen::MatrixXd G = Eigen::MatrixXd::Zero(Eigen::Index(D), Eigen::Index(D));
            Eigen::Index cnt = Eigen::Index(hi - lo);
            auto Ac = ds.A.middleCols(Eigen::Index(lo), cnt);
            auto Cc = ds.C.middleCols(Eigen::Index(lo), cnt);
            Eigen::Index col = 0;
            for (std::size_t k = 0; k < block_dims.size(); ++k) {
                Eigen::Index dk = Eigen::Index(block_dims[k]);
                auto Uk = U.middleCols(col, dk);
                Eigen::VectorXd g =
                    gamma.row(Eigen::Index(k)).segment(Eigen::Index(lo), cnt).transpose();
                Eigen::MatrixXd CU = Cc.transpose() * Uk;  // n×d_k
                Eigen::MatrixXd AU = Ac.transpose() * Uk;
                G.middleCols(col, dk) = Ac * (g.asDiagonal() * CU) + Cc * (g.asDiagonal() * AU);
                col += dk;
            }
            return G;
        });
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(Eigen::Index(D), Eigen::Index(D));
    for (const auto& p : partials) G += p;
    return G;
}

struct DrsaResult {
    SubspaceBasis basis;
    double best_objective = 0.0;
    std::size_t best_restart = 0;
    std::vector<std::vector<double>> trajectories;  // objective per iteration, per restart
};

using DrsaMonitor = std::function<void(std::size_t restart, std::size_t iteration, double J)>;

inline DrsaResult drsa(const ActivationContextDataset& ds, const DrsaOptions& opts,
                       const DrsaMonitor& monitor = {}) {
    ds.check();
    std::size_t D = ds.dim();
    opts.check(D);
    DrsaResult out;
    out.trajectories.resize(opts.restarts);
    Eigen::MatrixXd best_U;
    for (std::size_t r = 0; r < opts.restarts; ++r) {
        Rng rng(mix_seed(opts.seed, r));
        Eigen::MatrixXd U = Eigen::MatrixXd::Zero(Eigen::Index(D), Eigen::Index(D));
        for (std::size_t i = 0; i < D; ++i)
            for (std::size_t j = 0; j < D; ++j)
                U(Eigen::Index(i), Eigen::Index(j)) = rng.normal();
        U = orthogonalize(U);
        double J = drsa_objective(U, opts.block_dims, ds, opts.q, opts.clamp_floor, opts.threads);
        out.trajectories[r].push_back(J);
        if (monitor) monitor(r, 0, J);
        for (std::size_t it = 1; it <= opts.iterations; ++it) {
            Eigen::MatrixXd G =
                drsa_gradient(U, opts.block_dims, ds, opts.q, opts.clamp_floor, opts.threads);
            U = orthogonalize(U + opts.learning_rate * G);
            J = drsa_objective(U, opts.block_dims, ds, opts.q, opts.clamp_floor, opts.threads);
            out.trajectories[r].push_back(J);
            if (monitor) monitor(r, it, J);
        }
        if (r == 0 || J > out.best_objective) {  // exact ties keep the earlier restart
            out.best_objective = J;
            out.best_restart = r;
            best_U = U;
        }
    }
    // order blocks by descending mean relevance, stable on ties
    std::size_t K = opts.block_dims.size();
    std::vector<double> rel(K);
    std::vector<std::size_t> offs(K);
    {
        std::size_t off = 0;
        for (std::size_t k = 0; k < K; ++k) {
            offs[k] = off;
            auto Uk = best_U.middleCols(Eigen::Index(off), Eigen::Index(opts.block_dims[k]));
            rel[k] = block_mean_relevance(Uk, ds);
            off += opts.block_dims[k];
        }
    }
    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return rel[x] > rel[y]; });
    out.basis.dim = D;
    out.basis.matrix.resize(Eigen::Index(D), Eigen::Index(D));
    Eigen::Index col = 0;
    for (std::size_t k : order) {
        Eigen::Index dk = Eigen::Index(opts.block_dims[k]);
        out.basis.matrix.middleCols(col, dk) =
            best_U.middleCols(Eigen::Index(offs[k]), dk);
        out.basis.block_dims.push_back(opts.block_dims[k]);
        col += dk;
    }
    return out;
}

// activation-only ablation: the same optimizer with every context replaced by
// its paired activation
inline DrsaResult dsa(const ActivationContextDataset& ds, const DrsaOptions& opts,
                      const DrsaMonitor& monitor = {}) {
    ActivationContextDataset self;
    self.A = ds.A;
    self.C = ds.A;
    self.meta = ds.meta;
    return drsa(self, opts, monitor);
}

inline SubspaceBasis random_basis(std::size_t D, const std::vector<std::size_t>& block_dims,
                                  std::uint64_t seed) {
    std::size_t total = 0;
    for (std::size_t b : block_dims) total += b;
    if (total != D) throw shape_error("block dims must sum to D");
    Rng rng(seed);
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(Eigen::Index(D), Eigen::Index(D));
    for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) M(Eigen::Index(i), Eigen::Index(j)) = rng.normal();
    SubspaceBasis b;
    b.dim = D;
    b.block_dims = block_dims;
    b.matrix = orthogonalize(M);
    return b;
}

// top-d canonical channels by relevance, descending, ties to the lower index
inline SubspaceBasis maxrel(const std::vector<double>& channel_relevances, std::size_t d) {
    std::size_t D = channel_relevances.size();
    if (d < 1 || d > D) throw usage_error("subspace dimension out of range");
    std::vector<std::size_t> order(D);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return channel_relevances[x] > channel_relevances[y];
    });
    std::vector<std::size_t> rest(order.begin() + std::ptrdiff_t(d), order.end());
    std::sort(rest.begin(), rest.end());
    SubspaceBasis b;
    b.dim = D;
    b.block_dims = d < D ? std::vector<std::size_t>{d, D - d} : std::vector<std::size_t>{d};
    b.matrix = Eigen::MatrixXd::Zero(Eigen::Index(D), Eigen::Index(D));
    for (std::size_t i = 0; i < d; ++i) b.matrix(Eigen::Index(order[i]), Eigen::Index(i)) = 1.0;
    for (std::size_t i = 0; i < rest.size(); ++i)
        b.matrix(Eigen::Index(rest[i]), Eigen::Index(d + i)) = 1.0;
    return b;
}

}  // namespace relsub
