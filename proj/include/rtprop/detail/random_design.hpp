#pragma once

// Sparse random-effects design shared by the Gaussian and logistic mixed
// models. Random effects are written b = Lambda * u with u spherical; each term
// contributes a (1) or (1, x) covariate row per observation and a shared
// lower-triangular relative Cholesky factor per level.
//
// The penalized system matrix A = Lambda' Z' W Z Lambda + I has a fixed
// sparsity pattern, so assembly writes straight into precomputed value slots
// and the symbolic factorization is done once. Consecutive rows with the
// same levels form a group; within a group a row of Z Lambda is linear in x,
// so the products reduce to per-group moments.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <span>
#include <string>
#include <vector>

namespace rtprop::detail {

struct RandomTerm {
    std::string name;
    int n_levels = 0;
    int dim = 1; // 1: intercept, 2: intercept + covariate slope
    std::vector<int> level; // per row, in [0, n_levels)
};

using SpMat = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;
using Factor = Eigen::SimplicialLLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<int>>;

class RandomDesign {
public:
    // `covariate` supplies x for dim-2 terms (ignored otherwise).
    RandomDesign(std::vector<RandomTerm> terms, std::vector<double> covariate);

    int rows() const { return n_; }
    int q() const { return q_; }
    int width() const { return m_; }
    const std::vector<RandomTerm>& terms() const { return terms_; }
    int offset(std::size_t term) const { return offsets_[term]; }

    // One lower-triangular dim x dim factor per term (relative scale).
    void set_lambda(const std::vector<Eigen::MatrixXd>& lambda);
    const std::vector<Eigen::MatrixXd>& lambda() const { return lambda_; }

    // Lower triangle of Lambda'Z'WZLambda + I; weights empty means W = I.
    void assemble(std::span<const double> weights);
    const SpMat& system() const { return a_; }

    // Symbolic analysis happens on the first call.
    void factorize();
    const Factor& factor() const { return factor_; }
    double logdet() const; // log|A| from the current factorization

    // out = Z Lambda u (per row)
    void zl_times(const Eigen::VectorXd& u, Eigen::VectorXd& out) const;
    // out = Lambda' Z' r
    void zl_transpose_times(const Eigen::VectorXd& r, Eigen::VectorXd& out) const;
    // Lambda' Z' diag(w) X for a dense n x p X
    Eigen::MatrixXd zl_transpose_weighted(std::span<const double> w, const Eigen::MatrixXd& x) const;

    // b = Lambda u, split per term as (n_levels x dim) row-major blocks.
    Eigen::VectorXd scale(const Eigen::VectorXd& u) const;

    // Entries of A^{-1} on the pattern of A (indexed by slot), via the
    // Takahashi recurrence on the current Cholesky factor.
    const std::vector<double>& selected_inverse();
    // z_i' A^{-1} z_i for every row, where z_i is row i of Z Lambda.
    Eigen::VectorXd leverage_terms();

private:
    int slot_of(int row, int col) const; // row >= col

    std::vector<RandomTerm> terms_;
    std::vector<double> covariate_;
    std::vector<int> offsets_;
    std::vector<Eigen::MatrixXd> lambda_;
    int n_ = 0, q_ = 0, m_ = 0;
    int groups_ = 0;
    std::vector<int> gstart_;  // first row of each group, plus n
    std::vector<int> gpos_;    // groups x m positions in u
    std::vector<int> gslots_;  // groups x m(m+1)/2 value slots, pairs (a >= b) in row-major lower order
    std::vector<double> c0_, c1_;
    std::vector<int> diag_slots_;
    SpMat a_;
    Factor factor_;
    bool analyzed_ = false;

    // selected inversion
    std::vector<int> lp_, li_; // CSC pattern of L (sorted rows)
    std::vector<int> l_inner_, lmap_; // L as stored, and stored position -> sorted position
    std::vector<double> lx_, zx_;
    std::vector<int> slot_to_l_; // slot -> index into zx_
    std::vector<double> sel_inv_;
};

} // namespace rtprop::detail
