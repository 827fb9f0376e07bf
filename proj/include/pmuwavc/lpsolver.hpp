#pragma once

// min ||a x + b||_inf  s.t.  x_lo <= x <= x_hi,  g_lo <= g x <= g_hi
// through the epigraph LP and a dense two-phase simplex with Bland's rule.

#include <pmuwavc/errors.hpp>

#include <Eigen/Dense>

#include <limits>
#include <optional>
#include <vector>

namespace pmuwavc {

struct LinfProblem {
    Eigen::MatrixXd a; // r x d
    Eigen::VectorXd b; // r
    Eigen::VectorXd x_lo, x_hi;
    std::optional<Eigen::MatrixXd> g; // q x d
    Eigen::VectorXd g_lo, g_hi;
};

enum class LpStatus { optimal, infeasible };

/// Constraint indices (used by active_set and separating_constraint):
///   [0, r)            a x + b <= t
///   [r, 2r)           -(a x + b) <= t
///   [2r, 2r+d)        x >= x_lo
///   [2r+d, 2r+2d)     x <= x_hi
///   [2r+2d, +q)       g x >= g_lo
///   [2r+2d+q, +q)     g x <= g_hi
struct LinfSolution {
    Eigen::VectorXd x;
    double objective = 0.0;
    LpStatus status = LpStatus::optimal;
    std::vector<int> active_set;
    int separating_constraint = -1;
    int pivots = 0;
};

namespace detail {

/// Dense tableau simplex for  min c^T z  s.t.  A z <= rhs (any sign), z >= 0.
class Simplex {
public:
    static constexpr double pivot_tol = 1e-11;
    static constexpr double feas_tol = 1e-9;

    Simplex(const Eigen::MatrixXd &a, const Eigen::VectorXd &rhs, const Eigen::VectorXd &cost)
        : m_(a.rows()), n_(a.cols()) {
        // Columns: structural [0,n), slacks [n, n+m), artificials after.
        n_art_ = (rhs.array() < 0).count();
        cols_ = n_ + m_ + n_art_;
        t_ = Eigen::MatrixXd::Zero(m_ + 1, cols_ + 1);
        basis_.assign(static_cast<std::size_t>(m_), 0);
        Eigen::Index art = 0;
        for (Eigen::Index i = 0; i < m_; ++i) {
            const double sgn = rhs(i) < 0 ? -1.0 : 1.0;
            t_.row(i).head(n_) = sgn * a.row(i);
            t_(i, n_ + i) = sgn;
            t_(i, cols_) = sgn * rhs(i);
            if (sgn < 0) {
                t_(i, n_ + m_ + art) = 1.0;
                basis_[static_cast<std::size_t>(i)] = n_ + m_ + art;
                art_rows_.push_back(i);
                ++art;
            } else {
                basis_[static_cast<std::size_t>(i)] = n_ + i;
            }
        }
        cost_ = cost;
    }

    /// Returns false when the constraints are infeasible.
    bool solve() {
        if (n_art_ > 0) {
            // Phase 1: minimise the sum of artificials.
            set_objective([&](Eigen::Index j) { return j >= n_ + m_ ? 1.0 : 0.0; });
            iterate(cols_);
            if (-t_(m_, cols_) > feas_tol) return false;
            drive_out_artificials();
        }
        set_objective([&](Eigen::Index j) { return j < n_ ? cost_(j) : 0.0; });
        iterate(n_ + m_);
        return true;
    }

    Eigen::VectorXd primal() const {
        Eigen::VectorXd z = Eigen::VectorXd::Zero(n_);
        for (Eigen::Index i = 0; i < m_; ++i) {
            const auto b = basis_[static_cast<std::size_t>(i)];
            if (b < n_) z(b) = t_(i, cols_);
        }
        return z;
    }

    /// Row whose artificial variable carries the most residual infeasibility.
    Eigen::Index worst_infeasible_row() const {
        Eigen::Index best = -1;
        double worst = 0.0;
        for (Eigen::Index i = 0; i < m_; ++i) {
            const auto b = basis_[static_cast<std::size_t>(i)];
            if (b >= n_ + m_ && t_(i, cols_) > worst) {
                worst = t_(i, cols_);
                best = art_row(b);
            }
        }
        return best;
    }

    int pivots() const { return pivots_; }

private:
    template <class F> void set_objective(F coef) {
        t_.row(m_).setZero();
        for (Eigen::Index j = 0; j < cols_; ++j) t_(m_, j) = coef(j);
        for (Eigen::Index i = 0; i < m_; ++i) {
            const double cb = coef(basis_[static_cast<std::size_t>(i)]);
            if (cb != 0.0) t_.row(m_) -= cb * t_.row(i);
        }
    }

    // Bland's rule: lowest-index improving column, lowest-index leaving basic variable among ties.
    void iterate(Eigen::Index allowed_cols) {
        for (int guard = 0; guard < 100000; ++guard) {
            Eigen::Index enter = -1;
            for (Eigen::Index j = 0; j < allowed_cols; ++j) {
                if (t_(m_, j) < -feas_tol * 1e-3) {
                    enter = j;
                    break;
                }
            }
            if (enter < 0) return;
            Eigen::Index leave = -1;
            double best = std::numeric_limits<double>::infinity();
            for (Eigen::Index i = 0; i < m_; ++i) {
                const double piv = t_(i, enter);
                if (piv <= pivot_tol) continue;
                const double ratio = t_(i, cols_) / piv;
                if (ratio < best - 1e-14 ||
                    (std::abs(ratio - best) <= 1e-14 && basis_[static_cast<std::size_t>(i)] < basis_[static_cast<std::size_t>(leave)])) {
                    best = ratio;
                    leave = i;
                }
            }
            if (leave < 0) throw Error(ErrorCode::invalid_argument, "linear program is unbounded");
            pivot(leave, enter);
        }
        throw Error(ErrorCode::ill_conditioned, "simplex iteration limit reached");
    }

    void pivot(Eigen::Index row, Eigen::Index col) {
        t_.row(row) /= t_(row, col);
        for (Eigen::Index i = 0; i <= m_; ++i) {
            if (i == row) continue;
            const double f = t_(i, col);
            if (f != 0.0) t_.row(i) -= f * t_.row(row);
        }
        basis_[static_cast<std::size_t>(row)] = col;
        ++pivots_;
    }

    void drive_out_artificials() {
        for (Eigen::Index i = 0; i < m_; ++i) {
            if (basis_[static_cast<std::size_t>(i)] < n_ + m_) continue;
            for (Eigen::Index j = 0; j < n_ + m_; ++j) {
                if (std::abs(t_(i, j)) > pivot_tol) {
                    pivot(i, j);
                    break;
                }
            }
            // A row that stays artificial is redundant; its artificial sits at zero.
        }
        for (Eigen::Index i = 0; i < m_; ++i)
            if (basis_[static_cast<std::size_t>(i)] >= n_ + m_) t_.row(i).head(n_ + m_).setZero();
        t_.middleCols(n_ + m_, n_art_).setZero();
    }

    Eigen::Index art_row(Eigen::Index art_col) const { return art_rows_[static_cast<std::size_t>(art_col - n_ - m_)]; }

    Eigen::Index m_, n_, n_art_ = 0, cols_ = 0;
    Eigen::MatrixXd t_;
    Eigen::VectorXd cost_;
    std::vector<Eigen::Index> basis_;
    std::vector<Eigen::Index> art_rows_;
    int pivots_ = 0;
};

} // namespace detail

inline LinfSolution solve_linf(const LinfProblem &p) {
    const auto r = p.a.rows();
    const auto d = p.a.cols();
    const auto q = p.g ? p.g->rows() : Eigen::Index{0};
    if (p.b.size() != r || p.x_lo.size() != d || p.x_hi.size() != d)
        throw Error(ErrorCode::invalid_argument, "LinfProblem dimensions disagree");
    if (p.g && (p.g->cols() != d || p.g_lo.size() != q || p.g_hi.size() != q))
        throw Error(ErrorCode::invalid_argument, "range constraint dimensions disagree");
    if ((p.x_lo.array() > p.x_hi.array()).any()) throw Error(ErrorCode::invalid_argument, "x_lo must not exceed x_hi");
    if (q > 0 && (p.g_lo.array() > p.g_hi.array()).any())
        throw Error(ErrorCode::invalid_argument, "g_lo must not exceed g_hi");

    const double tol = detail::Simplex::feas_tol;
    LinfSolution sol;
    const int base_range = static_cast<int>(2 * r + 2 * d);

    // A range row no point of the box can satisfy separates on its own.
    for (Eigen::Index i = 0; i < q; ++i) {
        double lo = 0.0, hi = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) {
            const double gij = (*p.g)(i, j);
            lo += std::min(gij * p.x_lo(j), gij * p.x_hi(j));
            hi += std::max(gij * p.x_lo(j), gij * p.x_hi(j));
        }
        if (hi < p.g_lo(i) - tol) {
            sol.status = LpStatus::infeasible;
            sol.separating_constraint = base_range + static_cast<int>(i);
            return sol;
        }
        if (lo > p.g_hi(i) + tol) {
            sol.status = LpStatus::infeasible;
            sol.separating_constraint = base_range + static_cast<int>(q + i);
            return sol;
        }
    }

    if (d == 0) {
        sol.x = Eigen::VectorXd(0);
        sol.objective = r > 0 ? p.b.cwiseAbs().maxCoeff() : 0.0;
        for (Eigen::Index i = 0; i < r; ++i) {
            if (std::abs(p.b(i) - sol.objective) <= tol) sol.active_set.push_back(static_cast<int>(i));
            if (std::abs(-p.b(i) - sol.objective) <= tol) sol.active_set.push_back(static_cast<int>(r + i));
        }
        return sol;
    }

    // Shift to y = x - x_lo >= 0; variables z = (y, t).
    const Eigen::VectorXd span = p.x_hi - p.x_lo;
    const Eigen::VectorXd b0 = p.b + p.a * p.x_lo;
    const auto rows = 2 * r + d + 2 * q;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(rows, d + 1);
    Eigen::VectorXd rhs(rows);
    A.topLeftCorner(r, d) = p.a;
    A.block(0, d, r, 1).setConstant(-1.0);
    rhs.head(r) = -b0;
    A.block(r, 0, r, d) = -p.a;
    A.block(r, d, r, 1).setConstant(-1.0);
    rhs.segment(r, r) = b0;
    A.block(2 * r, 0, d, d).setIdentity();
    rhs.segment(2 * r, d) = span;
    if (q > 0) {
        const Eigen::VectorXd g0 = *p.g * p.x_lo;
        A.block(2 * r + d, 0, q, d) = -*p.g;
        rhs.segment(2 * r + d, q) = -(p.g_lo - g0);
        A.block(2 * r + d + q, 0, q, d) = *p.g;
        rhs.segment(2 * r + d + q, q) = p.g_hi - g0;
    }
    Eigen::VectorXd cost = Eigen::VectorXd::Zero(d + 1);
    cost(d) = 1.0;

    detail::Simplex lp(A, rhs, cost);
    const bool feasible = lp.solve();
    sol.pivots = lp.pivots();
    if (!feasible) {
        sol.status = LpStatus::infeasible;
        const auto row = lp.worst_infeasible_row();
        // Map tableau rows back to the public constraint numbering.
        if (row >= 2 * r + d + q) sol.separating_constraint = base_range + static_cast<int>(q + row - (2 * r + d + q));
        else if (row >= 2 * r + d) sol.separating_constraint = base_range + static_cast<int>(row - (2 * r + d));
        else sol.separating_constraint = static_cast<int>(row);
        return sol;
    }
    const Eigen::VectorXd z = lp.primal();
    sol.x = (p.x_lo + z.head(d)).cwiseMax(p.x_lo).cwiseMin(p.x_hi);
    const Eigen::VectorXd res = p.a * sol.x + p.b;
    sol.objective = r > 0 ? res.cwiseAbs().maxCoeff() : 0.0;
    for (Eigen::Index i = 0; i < r; ++i) {
        if (std::abs(res(i) - sol.objective) <= tol) sol.active_set.push_back(static_cast<int>(i));
        if (std::abs(-res(i) - sol.objective) <= tol) sol.active_set.push_back(static_cast<int>(r + i));
    }
    for (Eigen::Index j = 0; j < d; ++j)
        if (std::abs(sol.x(j) - p.x_lo(j)) <= tol) sol.active_set.push_back(static_cast<int>(2 * r + j));
    for (Eigen::Index j = 0; j < d; ++j)
        if (std::abs(sol.x(j) - p.x_hi(j)) <= tol) sol.active_set.push_back(static_cast<int>(2 * r + d + j));
    if (q > 0) {
        const Eigen::VectorXd gx = *p.g * sol.x;
        for (Eigen::Index i = 0; i < q; ++i)
            if (std::abs(gx(i) - p.g_lo(i)) <= tol) sol.active_set.push_back(base_range + static_cast<int>(i));
        for (Eigen::Index i = 0; i < q; ++i)
            if (std::abs(gx(i) - p.g_hi(i)) <= tol) sol.active_set.push_back(base_range + static_cast<int>(q + i));
    }
    return sol;
}

} // namespace pmuwavc
