#include "rtprop/detail/random_design.hpp"

#include "rtprop/common.hpp"

#include <algorithm>
#include <cmath>

namespace rtprop::detail {

RandomDesign::RandomDesign(std::vector<RandomTerm> terms, std::vector<double> covariate)
    : terms_(std::move(terms)), covariate_(std::move(covariate)) {
    if (terms_.empty()) config_error("random design needs at least one term");
    n_ = static_cast<int>(terms_.front().level.size());
    bool slopes = false;
    for (const auto& t : terms_) {
        if (static_cast<int>(t.level.size()) != n_) config_error("random term '" + t.name + "' has wrong length");
        if (t.dim != 1 && t.dim != 2) config_error("random term dimension must be 1 or 2");
        if (t.dim == 2 && static_cast<int>(covariate_.size()) != n_)
            config_error("random slope term needs one covariate value per row");
        slopes = slopes || t.dim == 2;
        offsets_.push_back(q_);
        q_ += t.n_levels * t.dim;
        m_ += t.dim;
    }
    if (!slopes) covariate_.assign(static_cast<std::size_t>(n_), 0.0);

    // Consecutive rows with the same levels in every term form one group.
    std::vector<int> row_pos(static_cast<std::size_t>(m_));
    gstart_.push_back(0);
    for (int i = 0; i < n_; ++i) {
        int a = 0;
        for (std::size_t t = 0; t < terms_.size(); ++t) {
            const int lvl = terms_[t].level[i];
            if (lvl < 0 || lvl >= terms_[t].n_levels) config_error("random term level out of range");
            for (int c = 0; c < terms_[t].dim; ++c) row_pos[a++] = offsets_[t] + lvl * terms_[t].dim + c;
        }
        const bool same = i > 0 && std::equal(row_pos.begin(), row_pos.end(), gpos_.end() - m_);
        if (!same) {
            if (i > 0) gstart_.push_back(i);
            gpos_.insert(gpos_.end(), row_pos.begin(), row_pos.end());
        }
    }
    gstart_.push_back(n_);
    groups_ = n_ > 0 ? static_cast<int>(gstart_.size()) - 1 : 0;
    if (n_ == 0) gstart_.assign(1, 0);

    // Lower-triangular pattern: identity plus every within-row pair.
    std::vector<std::pair<int, int>> entries; // (col, row), row >= col
    entries.reserve(static_cast<std::size_t>(q_) + static_cast<std::size_t>(groups_) * m_ * (m_ + 1) / 2);
    for (int j = 0; j < q_; ++j) entries.emplace_back(j, j);
    for (int g = 0; g < groups_; ++g) {
        const int* p = &gpos_[static_cast<std::size_t>(g) * m_];
        for (int a = 0; a < m_; ++a)
            for (int b = 0; b <= a; ++b) entries.emplace_back(std::min(p[a], p[b]), std::max(p[a], p[b]));
    }
    std::sort(entries.begin(), entries.end());
    entries.erase(std::unique(entries.begin(), entries.end()), entries.end());

    a_.resize(q_, q_);
    {
        std::vector<Eigen::Triplet<double>> trip;
        trip.reserve(entries.size());
        for (auto [c, r] : entries) trip.emplace_back(r, c, 0.0);
        a_.setFromTriplets(trip.begin(), trip.end());
        a_.makeCompressed();
    }

    const int npairs = m_ * (m_ + 1) / 2;
    gslots_.resize(static_cast<std::size_t>(groups_) * npairs);
    for (int g = 0; g < groups_; ++g) {
        const int* p = &gpos_[static_cast<std::size_t>(g) * m_];
        int k = 0;
        for (int a = 0; a < m_; ++a)
            for (int b = 0; b <= a; ++b)
                gslots_[static_cast<std::size_t>(g) * npairs + k++] = slot_of(std::max(p[a], p[b]), std::min(p[a], p[b]));
    }
    diag_slots_.resize(q_);
    for (int j = 0; j < q_; ++j) diag_slots_[j] = slot_of(j, j);

    c0_.assign(static_cast<std::size_t>(m_), 0.0);
    c1_.assign(static_cast<std::size_t>(m_), 0.0);
    std::vector<Eigen::MatrixXd> zero;
    for (const auto& t : terms_) zero.push_back(Eigen::MatrixXd::Zero(t.dim, t.dim));
    set_lambda(zero);
}

int RandomDesign::slot_of(int row, int col) const {
    const int* begin = a_.innerIndexPtr() + a_.outerIndexPtr()[col];
    const int* end = a_.innerIndexPtr() + a_.outerIndexPtr()[col + 1];
    const int* it = std::lower_bound(begin, end, row);
    return static_cast<int>(it - a_.innerIndexPtr());
}

void RandomDesign::set_lambda(const std::vector<Eigen::MatrixXd>& lambda) {
    if (lambda.size() != terms_.size()) config_error("one relative covariance factor per term is required");
    lambda_ = lambda;
    // Row i of Z Lambda is c0 + x_i * c1.
    int a = 0;
    for (std::size_t t = 0; t < terms_.size(); ++t) {
        const Eigen::MatrixXd& l = lambda_[t];
        if (terms_[t].dim == 1) {
            c0_[a] = l(0, 0);
            c1_[a++] = 0.0;
        } else {
            c0_[a] = l(0, 0);
            c1_[a++] = l(1, 0);
            c0_[a] = 0.0;
            c1_[a++] = l(1, 1);
        }
    }
}

void RandomDesign::assemble(std::span<const double> weights) {
    double* val = a_.valuePtr();
    std::fill(val, val + a_.nonZeros(), 0.0);
    for (int s : diag_slots_) val[s] = 1.0;
    const int npairs = m_ * (m_ + 1) / 2;
    const double* x = covariate_.data();
    for (int g = 0; g < groups_; ++g) {
        double s0 = 0.0, s1 = 0.0, s2 = 0.0;
        for (int i = gstart_[g]; i < gstart_[g + 1]; ++i) {
            const double w = weights.empty() ? 1.0 : weights[i];
            s0 += w;
            s1 += w * x[i];
            s2 += w * x[i] * x[i];
        }
        const int* s = &gslots_[static_cast<std::size_t>(g) * npairs];
        int k = 0;
        for (int a = 0; a < m_; ++a)
            for (int b = 0; b <= a; ++b)
                val[s[k++]] += c0_[a] * c0_[b] * s0 + (c0_[a] * c1_[b] + c1_[a] * c0_[b]) * s1 + c1_[a] * c1_[b] * s2;
    }
}

void RandomDesign::factorize() {
    if (!analyzed_) {
        factor_.analyzePattern(a_);
        analyzed_ = true;
    }
    factor_.factorize(a_);
    if (factor_.info() != Eigen::Success) numerical_error("sparse Cholesky factorization failed");
}

double RandomDesign::logdet() const {
    const SpMat& l = factor_.matrixL().nestedExpression();
    double s = 0.0;
    for (int j = 0; j < l.outerSize(); ++j) {
        for (SpMat::InnerIterator it(l, j); it; ++it) {
            if (it.row() == j) {
                s += std::log(it.value());
                break;
            }
        }
    }
    return 2.0 * s;
}

void RandomDesign::zl_times(const Eigen::VectorXd& u, Eigen::VectorXd& out) const {
    out.resize(n_);
    const double* x = covariate_.data();
    for (int g = 0; g < groups_; ++g) {
        const int* p = &gpos_[static_cast<std::size_t>(g) * m_];
        double e0 = 0.0, e1 = 0.0;
        for (int a = 0; a < m_; ++a) {
            e0 += c0_[a] * u[p[a]];
            e1 += c1_[a] * u[p[a]];
        }
        for (int i = gstart_[g]; i < gstart_[g + 1]; ++i) out[i] = e0 + e1 * x[i];
    }
}

void RandomDesign::zl_transpose_times(const Eigen::VectorXd& r, Eigen::VectorXd& out) const {
    out.setZero(q_);
    const double* x = covariate_.data();
    for (int g = 0; g < groups_; ++g) {
        double r0 = 0.0, r1 = 0.0;
        for (int i = gstart_[g]; i < gstart_[g + 1]; ++i) {
            r0 += r[i];
            r1 += r[i] * x[i];
        }
        const int* p = &gpos_[static_cast<std::size_t>(g) * m_];
        for (int a = 0; a < m_; ++a) out[p[a]] += c0_[a] * r0 + c1_[a] * r1;
    }
}

Eigen::MatrixXd RandomDesign::zl_transpose_weighted(std::span<const double> w, const Eigen::MatrixXd& xm) const {
    const Eigen::Index pc = xm.cols();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(q_, pc);
    Eigen::VectorXd m0(pc), m1(pc);
    const double* x = covariate_.data();
    for (int g = 0; g < groups_; ++g) {
        m0.setZero();
        m1.setZero();
        for (int i = gstart_[g]; i < gstart_[g + 1]; ++i) {
            const double wi = w.empty() ? 1.0 : w[i];
            for (Eigen::Index c = 0; c < pc; ++c) {
                const double v = wi * xm(i, c);
                m0[c] += v;
                m1[c] += v * x[i];
            }
        }
        const int* p = &gpos_[static_cast<std::size_t>(g) * m_];
        for (int a = 0; a < m_; ++a)
            for (Eigen::Index c = 0; c < pc; ++c) out(p[a], c) += c0_[a] * m0[c] + c1_[a] * m1[c];
    }
    return out;
}

Eigen::VectorXd RandomDesign::scale(const Eigen::VectorXd& u) const {
    Eigen::VectorXd b(q_);
    for (std::size_t t = 0; t < terms_.size(); ++t) {
        const int d = terms_[t].dim;
        const Eigen::MatrixXd& l = lambda_[t];
        for (int lvl = 0; lvl < terms_[t].n_levels; ++lvl) {
            const int o = offsets_[t] + lvl * d;
            b.segment(o, d) = l.triangularView<Eigen::Lower>() * u.segment(o, d);
        }
    }
    return b;
}

const std::vector<double>& RandomDesign::selected_inverse() {
    const SpMat& l = factor_.matrixL().nestedExpression();
    const int nq = q_;
    const int* l_outer = l.outerIndexPtr();
    const int* l_inner = l.innerIndexPtr();
    auto col_end = [&](int j) { return l.isCompressed() ? l_outer[j + 1] : l_outer[j] + l.innerNonZeroPtr()[j]; };
    const bool fresh = l_inner_.size() == static_cast<std::size_t>(l.nonZeros()) &&
                       std::equal(l_inner_.begin(), l_inner_.end(), l_inner);
    if (!fresh) {
        // Pattern of L with rows sorted, and where each stored entry lands.
        l_inner_.assign(l_inner, l_inner + l.nonZeros());
        lp_.assign(nq + 1, 0);
        li_.clear();
        lmap_.assign(l_inner_.size(), 0);
        std::vector<std::pair<int, int>> col;
        for (int j = 0; j < nq; ++j) {
            col.clear();
            for (int k = l_outer[j]; k < col_end(j); ++k) col.emplace_back(l_inner[k], k);
            std::sort(col.begin(), col.end());
            for (auto [r, k] : col) {
                lmap_[static_cast<std::size_t>(k)] = static_cast<int>(li_.size());
                li_.push_back(r);
            }
            lp_[j + 1] = static_cast<int>(li_.size());
        }
        lx_.assign(li_.size(), 0.0);
        zx_.assign(li_.size(), 0.0);

        const auto& perm = factor_.permutationP().indices();
        auto find = [&](int r, int c) {
            const int* b = li_.data() + lp_[c];
            const int* e = li_.data() + lp_[c + 1];
            const int* it = std::lower_bound(b, e, r);
            if (it == e || *it != r) numerical_error("selected inverse: entry outside the factor pattern");
            return static_cast<int>(it - li_.data());
        };
        slot_to_l_.assign(a_.nonZeros(), 0);
        for (int j = 0; j < nq; ++j) {
            for (int k = a_.outerIndexPtr()[j]; k < a_.outerIndexPtr()[j + 1]; ++k) {
                const int pi = perm[a_.innerIndexPtr()[k]], pj = perm[j];
                slot_to_l_[k] = find(std::max(pi, pj), std::min(pi, pj));
            }
        }
    }
    const double* l_val = l.valuePtr();
    for (int j = 0; j < nq; ++j)
        for (int k = l_outer[j]; k < col_end(j); ++k) lx_[lmap_[k]] = l_val[k];

    // Column j of Z = A^{-1} on the pattern of L, from the last column back.
    // Every pair of rows below the diagonal of column j is stored in the
    // column of the smaller row, so one merge per row covers both orders.
    std::vector<double> acc;
    for (int j = nq - 1; j >= 0; --j) {
        const int begin = lp_[j], end = lp_[j + 1];
        const int k = end - begin - 1;
        const double ljj = lx_[begin];
        acc.assign(static_cast<std::size_t>(k), 0.0);
        for (int a = 0; a < k; ++a) {
            const int t = li_[begin + 1 + a];
            const double lt = lx_[begin + 1 + a];
            // rows r >= t of column j, looked up in column t
            int q = lp_[t];
            const int qe = lp_[t + 1];
            for (int b = a; b < k; ++b) {
                const int r = li_[begin + 1 + b];
                while (q < qe && li_[q] < r) ++q;
                const double z = zx_[q];
                acc[static_cast<std::size_t>(b)] += lt * z;
                if (b != a) acc[static_cast<std::size_t>(a)] += lx_[begin + 1 + b] * z;
            }
        }
        double diag = 0.0;
        for (int a = 0; a < k; ++a) {
            zx_[begin + 1 + a] = -acc[static_cast<std::size_t>(a)] / ljj;
            diag += lx_[begin + 1 + a] * zx_[begin + 1 + a];
        }
        zx_[begin] = (1.0 / ljj - diag) / ljj;
    }

    sel_inv_.resize(a_.nonZeros());
    for (std::size_t k = 0; k < sel_inv_.size(); ++k) sel_inv_[k] = zx_[slot_to_l_[k]];
    return sel_inv_;
}

Eigen::VectorXd RandomDesign::leverage_terms() {
    const auto& inv = selected_inverse();
    const int npairs = m_ * (m_ + 1) / 2;
    Eigen::VectorXd h(n_);
    const double* x = covariate_.data();
    for (int g = 0; g < groups_; ++g) {
        const int* s = &gslots_[static_cast<std::size_t>(g) * npairs];
        double h0 = 0.0, h1 = 0.0, h2 = 0.0;
        int k = 0;
        for (int a = 0; a < m_; ++a)
            for (int b = 0; b <= a; ++b, ++k) {
                const double v = (a == b ? 1.0 : 2.0) * inv[s[k]];
                h0 += v * c0_[a] * c0_[b];
                h1 += v * (c0_[a] * c1_[b] + c1_[a] * c0_[b]);
                h2 += v * c1_[a] * c1_[b];
            }
        for (int i = gstart_[g]; i < gstart_[g + 1]; ++i) h[i] = h0 + x[i] * (h1 + x[i] * h2);
    }
    return h;
}

} // namespace rtprop::detail
