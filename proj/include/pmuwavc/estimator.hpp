#pragma once

// Model-free identification from PMU windows: OU regression theorem for the
// state matrix, linear regression for the load time constants, and the
// resulting power-flow sensitivities. LS/TLS baselines at the bottom.

#include <pmuwavc/simulator.hpp>
#include <unsupported/Eigen/MatrixFunctions>

namespace pmuwavc {

struct SampleStats {
    Vector mean;  // 2m
    Matrix cov;   // 2m x 2m, 1/(n-1)
    Matrix lag_cov;
    double dt = 0.0; // lag in seconds
    Eigen::Index n = 0;
    std::vector<std::string> channels; // theta_<bus>..., v_<bus>...
};

inline std::vector<std::string> channel_names(const std::vector<int> &bus_ids) {
    std::vector<std::string> out;
    for (int b : bus_ids) out.push_back("theta_" + std::to_string(b));
    for (int b : bus_ids) out.push_back("v_" + std::to_string(b));
    return out;
}

/// Sample mean, covariance and lag covariance of the rows of `x` (n samples
/// by d channels). Both lagged factors are centred on the full-window mean.
inline SampleStats sample_stats(const Matrix &x, double sample_dt, int lag = 1) {
    const auto n = x.rows();
    if (n < 2) throw Error(ErrorCode::insufficient_data, "need at least 2 samples, got " + std::to_string(n));
    if (lag < 1 || lag >= n) throw Error(ErrorCode::invalid_argument, "lag must be in [1, n)");
    SampleStats st;
    st.n = n;
    st.dt = sample_dt * lag;
    st.mean = x.colwise().mean().transpose();
    const Matrix d = x.rowwise() - st.mean.transpose();
    const double norm = 1.0 / static_cast<double>(n - 1);
    st.cov = d.transpose() * d * norm;
    st.cov = 0.5 * (st.cov + st.cov.transpose());
    st.lag_cov = d.bottomRows(n - lag).transpose() * d.topRows(n - lag) * norm;
    return st;
}

inline SampleStats sample_stats(const PmuWindow &w, int lag = 1) {
    auto st = sample_stats(w.states(), w.dt(), lag);
    st.channels = channel_names(w.bus_ids);
    return st;
}

struct MatrixLog {
    Matrix value;
    double imag_residual = 0.0; // Frobenius norm of the discarded imaginary part
};

/// Principal logarithm through a complex eigendecomposition.
inline MatrixLog matrix_log(const Matrix &m) {
    if (m.rows() != m.cols()) throw Error(ErrorCode::invalid_argument, "matrix_log needs a square matrix");
    if (m.size() == 0) return {Matrix(0, 0), 0.0};
    Eigen::ComplexEigenSolver<CMatrix> es(m.cast<Complex>());
    if (es.info() != Eigen::Success) throw Error(ErrorCode::ill_conditioned, "eigendecomposition failed");
    const CVector lam = es.eigenvalues();
    const CMatrix &v = es.eigenvectors();
    for (Eigen::Index i = 0; i < lam.size(); ++i)
        if (std::abs(lam(i)) < 1e-12)
            throw Error(ErrorCode::singular_matrix, "matrix has an eigenvalue of modulus " + std::to_string(std::abs(lam(i))));
    Eigen::JacobiSVD<CMatrix> svd(v);
    const auto &sv = svd.singularValues();
    const double kappa = sv(0) / sv(sv.size() - 1);
    if (!(kappa < 1e12))
        throw Error(ErrorCode::ill_conditioned, "eigenvector matrix condition " + std::to_string(kappa) +
                                                    " (nearly defective); use a longer window");
    CVector loglam(lam.size());
    for (Eigen::Index i = 0; i < lam.size(); ++i) loglam(i) = std::log(lam(i));
    const CMatrix l = v * loglam.asDiagonal() * v.partialPivLu().inverse();
    return {l.real(), l.imag().norm()};
}

struct StateMatrixEstimate {
    Matrix a_hat;
    Matrix propagator; // G C^-1
    double condition = 0.0;
    double log_residual = 0.0;
    double roundtrip_residual = 0.0; // ||exp(dt A) - G C^-1||_F / ||G C^-1||_F
    bool stable = true;
    std::vector<std::string> warnings;
};

namespace detail {

inline std::string most_collinear_pair(const SampleStats &st) {
    const auto d = st.cov.rows();
    double best = -1.0;
    Eigen::Index bi = 0, bj = 0;
    for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = i + 1; j < d; ++j) {
            const double denom = std::sqrt(st.cov(i, i) * st.cov(j, j));
            const double rho = denom > 0 ? std::abs(st.cov(i, j)) / denom : 1.0;
            if (rho > best) best = rho, bi = i, bj = j;
        }
    }
    auto name = [&](Eigen::Index k) {
        return k < static_cast<Eigen::Index>(st.channels.size()) ? st.channels[static_cast<std::size_t>(k)]
                                                                  : "channel " + std::to_string(k);
    };
    return name(bi) + " and " + name(bj) + " (|corr| = " + std::to_string(best) + ")";
}

} // namespace detail

/// A = log(G C^-1) / dt. Unstable or implausible estimates are returned with
/// warnings rather than rejected.
inline StateMatrixEstimate estimate_state_matrix(const SampleStats &st) {
    StateMatrixEstimate out;
    out.condition = condition_number(st.cov);
    if (!(out.condition < 1e13))
        throw Error(ErrorCode::singular_matrix, "sample covariance is singular (cond " + std::to_string(out.condition) +
                                                    "); most collinear channels: " + detail::most_collinear_pair(st));
    // G C^-1 = (C^-T G^T)^T = (C^-1 G^T)^T since C is symmetric.
    out.propagator = st.cov.partialPivLu().solve(st.lag_cov.transpose()).transpose();
    const auto lg = matrix_log(out.propagator);
    out.a_hat = lg.value / st.dt;
    out.log_residual = lg.imag_residual;
    out.roundtrip_residual = ((out.a_hat * st.dt).exp() - out.propagator).norm() / out.propagator.norm();

    const Eigen::VectorXcd mu = out.propagator.eigenvalues();
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        if (std::abs(mu(i)) < 0.05) {
            out.warnings.push_back("a mode decays within one sample period; the window looks like white noise");
            break;
        }
    }
    if (out.log_residual > 1e-6 * std::max(1.0, lg.value.norm()))
        out.warnings.push_back("matrix logarithm is not real (imaginary residual " + std::to_string(out.log_residual) + ")");
    const Eigen::VectorXcd ev = out.a_hat.eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i).real() >= 0) {
            out.stable = false;
            out.warnings.push_back("estimated state matrix has an eigenvalue with non-negative real part");
            break;
        }
    }
    return out;
}

struct TimeConstants {
    Vector t_theta;
    Vector t_v;
};

/// How the power sample is paired with each state increment.
///  - sample: the power at the start of the interval (the plain regression).
///  - interval_average: the trapezoid mean of the interval's two power
///    samples, with the start sample as instrument. The start sample is
///    independent of the interval's noise increment, and the trapezoid
///    removes the bias from power moving inside the interval, which is large
///    when fast network modes decorrelate within one PMU period.
enum class RegressionForm { sample, interval_average };

/// Per bus, 1/tau is the slope of (x_{i+1} - x_i)/dt on the centred power.
/// `points` limits the fit to that many intervals starting at sample `start`.
inline TimeConstants estimate_time_constants(const PmuWindow &w, std::optional<Eigen::Index> points = std::nullopt,
                                             Eigen::Index start = 0,
                                             RegressionForm form = RegressionForm::interval_average) {
    if (!w.p || !w.q) throw Error(ErrorCode::invalid_argument, "time-constant regression needs P and Q channels");
    const Eigen::Index avail = w.samples() - 1 - start;
    const Eigen::Index p = points.value_or(avail);
    if (start < 0 || p < 2 || p > avail)
        throw Error(ErrorCode::insufficient_data, "regression needs at least 2 intervals inside the window");
    const double dt = w.dt();
    auto fit = [&](const Matrix &x, const Matrix &u, Eigen::Index col, const char *what) {
        const Vector u0 = u.col(col).segment(start, p);
        const double mean = u0.mean();
        const Vector du = u0.array() - mean;
        Vector reg = du;
        if (form == RegressionForm::interval_average) reg = 0.5 * (du + (u.col(col).segment(start + 1, p).array() - mean).matrix());
        const double den = du.dot(reg);
        if (du.squaredNorm() < 1e-14 || !(std::abs(den) > 0))
            throw Error(ErrorCode::unidentifiable, std::string(what) + " at bus " +
                                                       std::to_string(w.bus_ids[static_cast<std::size_t>(col)]) +
                                                       " does not vary enough to identify its time constant");
        const Vector rate = (x.col(col).segment(start + 1, p) - x.col(col).segment(start, p)) / dt;
        return den / du.dot(rate);
    };
    TimeConstants tc{Vector(w.buses()), Vector(w.buses())};
    for (Eigen::Index k = 0; k < w.buses(); ++k) {
        tc.t_theta(k) = fit(w.theta, *w.p, k, "active power");
        tc.t_v(k) = fit(w.v, *w.q, k, "reactive power");
    }
    return tc;
}

struct Sensitivities {
    Matrix j_hat;
    Matrix s_hat;
};

inline Sensitivities extract_sensitivities(const Matrix &a_hat, const Vector &t_theta, const Vector &t_v) {
    const auto m = t_theta.size();
    if (a_hat.rows() != 2 * m || a_hat.cols() != 2 * m || t_v.size() != m)
        throw Error(ErrorCode::invalid_argument, "state matrix and time-constant dimensions disagree");
    if ((t_theta.array() <= 0).any() || (t_v.array() <= 0).any())
        throw Error(ErrorCode::invalid_argument, "time constants must be positive");
    Vector t(2 * m);
    t << t_theta, t_v;
    Sensitivities out;
    out.j_hat = t.asDiagonal() * a_hat;
    Eigen::PartialPivLU<Matrix> lu(out.j_hat);
    const double kappa = condition_number(out.j_hat);
    if (!(kappa < 1e14)) throw Error(ErrorCode::singular_matrix, "Jacobian estimate is singular (cond " + std::to_string(kappa) + ")");
    out.s_hat = lu.inverse();
    return out;
}

struct SensitivityEstimate {
    Matrix a_hat;
    Vector t_theta;
    Vector t_v;
    Matrix j_hat;
    Matrix s_hat;
    std::vector<int> bus_ids;
    double log_residual = 0.0;
    double condition = 0.0;
    bool stable = true;
    std::vector<std::string> warnings;
    Matrix propagator;
    double roundtrip_residual = 0.0;
};

struct EstimationOptions {
    int lag = 1;
    std::optional<Eigen::Index> regression_points; // default: whole window
    Eigen::Index regression_start = 0;
    RegressionForm regression_form = RegressionForm::interval_average;
};

/// Steps E1-E4 on one window: statistics, state matrix, time constants,
/// sensitivities.
inline SensitivityEstimate estimate_sensitivities(const PmuWindow &w, const EstimationOptions &opt = {}) {
    const auto st = sample_stats(w, opt.lag);
    const auto sm = estimate_state_matrix(st);
    const auto tc = estimate_time_constants(w, opt.regression_points, opt.regression_start, opt.regression_form);
    const auto js = extract_sensitivities(sm.a_hat, tc.t_theta, tc.t_v);
    return {sm.a_hat, tc.t_theta, tc.t_v, js.j_hat, js.s_hat, w.bus_ids, sm.log_residual, sm.condition, sm.stable,
            sm.warnings, sm.propagator, sm.roundtrip_residual};
}

/// Blocks of S_VP and S_VQ split by controlled (c) and uncontrolled (u)
/// buses; rows are voltage magnitudes, columns are P or Q injections.
struct PartitionedS {
    std::vector<int> controlled;
    std::vector<int> uncontrolled;
    Matrix svp_cc, svp_cu, svp_uc, svp_uu;
    Matrix svq_cc, svq_cu, svq_uc, svq_uu;
};

namespace detail {

inline std::vector<Eigen::Index> positions(const std::vector<int> &bus_ids, const std::vector<int> &wanted) {
    std::vector<Eigen::Index> out;
    for (int b : wanted) {
        auto it = std::find(bus_ids.begin(), bus_ids.end(), b);
        if (it == bus_ids.end()) throw Error(ErrorCode::unknown_bus, "bus " + std::to_string(b) + " is not in the estimate");
        out.push_back(it - bus_ids.begin());
    }
    return out;
}

inline Matrix select(const Matrix &s, const std::vector<Eigen::Index> &rows, const std::vector<Eigen::Index> &cols,
                     Eigen::Index row_off, Eigen::Index col_off) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j)
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s(row_off + rows[i], col_off + cols[j]);
    return out;
}

} // namespace detail

/// `s` is the 2m x 2m inverse Jacobian ordered [theta; v] x [P; Q] over `bus_ids`.
inline PartitionedS partition(const Matrix &s, const std::vector<int> &bus_ids, const std::vector<int> &controlled,
                              const std::vector<int> &uncontrolled) {
    const auto m = static_cast<Eigen::Index>(bus_ids.size());
    if (s.rows() != 2 * m || s.cols() != 2 * m) throw Error(ErrorCode::invalid_argument, "sensitivity matrix size mismatch");
    for (int c : controlled)
        if (std::find(uncontrolled.begin(), uncontrolled.end(), c) != uncontrolled.end())
            throw Error(ErrorCode::invalid_argument, "bus " + std::to_string(c) + " is both controlled and uncontrolled");
    const auto ci = detail::positions(bus_ids, controlled);
    const auto ui = detail::positions(bus_ids, uncontrolled);
    PartitionedS p;
    p.controlled = controlled;
    p.uncontrolled = uncontrolled;
    // S_VP: rows m.., cols 0..; S_VQ: rows m.., cols m..
    p.svp_cc = detail::select(s, ci, ci, m, 0);
    p.svp_cu = detail::select(s, ci, ui, m, 0);
    p.svp_uc = detail::select(s, ui, ci, m, 0);
    p.svp_uu = detail::select(s, ui, ui, m, 0);
    p.svq_cc = detail::select(s, ci, ci, m, m);
    p.svq_cu = detail::select(s, ci, ui, m, m);
    p.svq_uc = detail::select(s, ui, ci, m, m);
    p.svq_uu = detail::select(s, ui, ui, m, m);
    return p;
}

inline PartitionedS partition(const SensitivityEstimate &e, const std::vector<int> &controlled,
                              const std::vector<int> &uncontrolled) {
    return partition(e.s_hat, e.bus_ids, controlled, uncontrolled);
}

/// Sensitivity matrix restricted to the buses that have PMUs.
struct ReducedSensitivity {
    Matrix s;
    std::vector<int> bus_ids;
    std::vector<Eigen::Index> index_map; // position in the original ordering
};

inline ReducedSensitivity reduce_for_missing(const Matrix &s, const std::vector<int> &bus_ids,
                                             const std::vector<int> &available) {
    const auto m = static_cast<Eigen::Index>(bus_ids.size());
    ReducedSensitivity out;
    for (Eigen::Index k = 0; k < m; ++k) {
        const int b = bus_ids[static_cast<std::size_t>(k)];
        if (std::find(available.begin(), available.end(), b) != available.end()) {
            out.bus_ids.push_back(b);
            out.index_map.push_back(k);
        }
    }
    for (int b : available)
        if (std::find(bus_ids.begin(), bus_ids.end(), b) == bus_ids.end())
            throw Error(ErrorCode::unknown_bus, "available bus " + std::to_string(b) + " is not modelled");
    const auto r = static_cast<Eigen::Index>(out.index_map.size());
    std::vector<Eigen::Index> both;
    for (auto k : out.index_map) both.push_back(k);
    for (auto k : out.index_map) both.push_back(m + k);
    out.s.resize(2 * r, 2 * r);
    for (Eigen::Index i = 0; i < 2 * r; ++i)
        for (Eigen::Index j = 0; j < 2 * r; ++j) out.s(i, j) = s(both[static_cast<std::size_t>(i)], both[static_cast<std::size_t>(j)]);
    return out;
}

struct MissingPmuPartition {
    bool controller_enabled = true;
    PartitionedS blocks;           // over the buses that kept a PMU
    std::vector<int> dropped;      // controlled buses without PMU (no dispatch)
    std::vector<int> unobserved;   // uncontrolled buses without PMU
};

/// Drops buses without PMUs from both roles. When no controlled bus
/// survives the controller is disabled instead of failing.
inline MissingPmuPartition reduce_for_missing(const PartitionedS &p, const std::vector<int> &available) {
    MissingPmuPartition out;
    auto has = [&](int b) { return std::find(available.begin(), available.end(), b) != available.end(); };
    std::vector<Eigen::Index> ci, ui;
    for (std::size_t k = 0; k < p.controlled.size(); ++k) {
        if (has(p.controlled[k])) {
            out.blocks.controlled.push_back(p.controlled[k]);
            ci.push_back(static_cast<Eigen::Index>(k));
        } else {
            out.dropped.push_back(p.controlled[k]);
        }
    }
    for (std::size_t k = 0; k < p.uncontrolled.size(); ++k) {
        if (has(p.uncontrolled[k])) {
            out.blocks.uncontrolled.push_back(p.uncontrolled[k]);
            ui.push_back(static_cast<Eigen::Index>(k));
        } else {
            out.unobserved.push_back(p.uncontrolled[k]);
        }
    }
    out.controller_enabled = !ci.empty();
    auto sub = [](const Matrix &m, const std::vector<Eigen::Index> &r, const std::vector<Eigen::Index> &c) {
        return detail::select(m, r, c, 0, 0);
    };
    out.blocks.svp_cc = sub(p.svp_cc, ci, ci);
    out.blocks.svp_cu = sub(p.svp_cu, ci, ui);
    out.blocks.svp_uc = sub(p.svp_uc, ui, ci);
    out.blocks.svp_uu = sub(p.svp_uu, ui, ui);
    out.blocks.svq_cc = sub(p.svq_cc, ci, ci);
    out.blocks.svq_cu = sub(p.svq_cu, ci, ui);
    out.blocks.svq_uc = sub(p.svq_uc, ui, ci);
    out.blocks.svq_uu = sub(p.svq_uu, ui, ui);
    return out;
}

/// Consecutive-sample differences: dx is 2m x (n-1) of [dtheta; dv],
/// dy is 2m x (n-1) of [dP; dQ].
struct DifferenceData {
    Matrix dx;
    Matrix dy;
};

inline DifferenceData difference_data(const PmuWindow &w) {
    if (!w.p || !w.q) throw Error(ErrorCode::invalid_argument, "LS/TLS estimation needs P and Q channels");
    const auto n = w.samples();
    if (n < 2) throw Error(ErrorCode::insufficient_data, "need at least 2 samples");
    Matrix x = w.states();
    Matrix y(n, 2 * w.buses());
    y << *w.p, *w.q;
    return {(x.bottomRows(n - 1) - x.topRows(n - 1)).transpose(), (y.bottomRows(n - 1) - y.topRows(n - 1)).transpose()};
}

namespace detail {

inline void require_rank(const Matrix &dx, const char *what) {
    Eigen::JacobiSVD<Matrix> svd(dx);
    const auto &s = svd.singularValues();
    const double tol = std::max(dx.rows(), dx.cols()) * s(0) * 1e-12;
    Eigen::Index rank = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s(i) > tol) ++rank;
    if (s.size() == 0 || s(0) == 0.0) rank = 0;
    if (rank < dx.rows())
        throw Error(ErrorCode::rank_deficient, std::string(what) + ": state differences have numerical rank " +
                                                   std::to_string(rank) + " < " + std::to_string(dx.rows()));
}

} // namespace detail

/// Least squares fit of dy = J dx.
inline Matrix estimate_ls(const DifferenceData &d) {
    detail::require_rank(d.dx, "LS");
    // J^T solves dx^T J^T = dy^T.
    return d.dx.transpose().colPivHouseholderQr().solve(d.dy.transpose()).transpose();
}

/// Total least squares fit of dy = J dx via the trailing right singular
/// subspace of [dx^T dy^T].
inline Matrix estimate_tls(const DifferenceData &d) {
    detail::require_rank(d.dx, "TLS");
    const auto k = d.dx.rows();
    Matrix z(d.dx.cols(), 2 * k);
    z << d.dx.transpose(), d.dy.transpose();
    Eigen::JacobiSVD<Matrix> svd(z, Eigen::ComputeFullV);
    const Matrix &v = svd.matrixV();
    const Matrix vxy = v.topRightCorner(k, k);
    const Matrix vyy = v.bottomRightCorner(k, k);
    Eigen::FullPivLU<Matrix> lu(vyy.transpose());
    if (!lu.isInvertible()) throw Error(ErrorCode::rank_deficient, "TLS: trailing singular block is singular");
    // B = -vxy vyy^-1 is J^T.
    return -lu.solve(vxy.transpose());
}

} // namespace pmuwavc
