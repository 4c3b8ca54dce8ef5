#pragma once
// Symmetric eigendecomposition with deterministic ordering: eigenvalues
// descending (index tie-break), and each eigenvector's first entry with
// magnitude > 1e-12 made nonnegative.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "relsub/core.hpp"

namespace relsub {

struct SymEig {
    Eigen::VectorXd values;   // descending
    Eigen::MatrixXd vectors;  // columns, same order as values
};

inline void fix_eigvec_signs(Eigen::MatrixXd& V) {
    for (Eigen::Index c = 0; c < V.cols(); ++c) {
        for (Eigen::Index r = 0; r < V.rows(); ++r) {
            if (std::abs(V(r, c)) > 1e-12) {
                if (V(r, c) < 0.0) V.col(c) = -V.col(c);
                break;
            }
        }
    }
}

inline SymEig sym_eig_desc(const Eigen::MatrixXd& S) {
    if (S.rows() != S.cols()) throw shape_error("eigendecomposition needs a square matrix");
    if (!S.allFinite()) throw numeric_error("non-finite matrix in eigendecomposition");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    if (es.info() != Eigen::Success) throw numeric_error("eigendecomposition failed to converge");
    // solver returns ascending order; reverse to descending, index tie-break preserved
    Eigen::Index n = S.rows();
    SymEig out;
    out.values.resize(n);
    out.vectors.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        out.values[i] = es.eigenvalues()[n - 1 - i];
        out.vectors.col(i) = es.eigenvectors().col(n - 1 - i);
    }
    fix_eigvec_signs(out.vectors);
    return out;
}

// polar factor M(MᵀM)^{−1/2}; throws if M is rank-deficient
inline Eigen::MatrixXd orthogonalize(const Eigen::MatrixXd& M) {
    if (M.rows() != M.cols()) throw shape_error("orthogonalize needs a square matrix");
    Eigen::MatrixXd G = M.transpose() * M;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
    if (es.info() != Eigen::Success) throw numeric_error("orthogonalize: eigendecomposition failed");
    const Eigen::VectorXd& ev = es.eigenvalues();
    if (ev.minCoeff() <= 1e-24)  // singular values are sqrt of these
        throw numeric_error("orthogonalize: matrix is rank-deficient");
    Eigen::VectorXd inv_sqrt = ev.array().sqrt().inverse();
    return M * es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace relsub
