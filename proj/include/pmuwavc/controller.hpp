#pragma once

// Wide-area voltage control: trigger gates, the affine deviation model
// built from partitioned sensitivities, the LP dispatch, and the lambda
// performance index.

#include <pmuwavc/estimator.hpp>
#include <pmuwavc/lpsolver.hpp>

namespace pmuwavc {

enum class ControlMode { none, model_free, model_based, model_based_stale };

inline const char *to_string(ControlMode m) {
    switch (m) {
    case ControlMode::none: return "none";
    case ControlMode::model_free: return "model_free";
    case ControlMode::model_based: return "model_based";
    case ControlMode::model_based_stale: return "model_based_stale";
    }
    return "?";
}

inline ControlMode parse_control_mode(const std::string &s) {
    if (s == "none") return ControlMode::none;
    if (s == "model_free") return ControlMode::model_free;
    if (s == "model_based") return ControlMode::model_based;
    if (s == "model_based_stale") return ControlMode::model_based_stale;
    throw Error(ErrorCode::invalid_argument, "unknown controller mode '" + s + "'");
}

struct Bounds {
    double lo = 0.0;
    double hi = 0.0;
};

struct ControllerConfig {
    ControlMode mode = ControlMode::model_free;
    double d1 = 30.0;         // s after the disturbance before the first action
    double d2 = 0.2;          // s between actions
    double threshold = 0.005; // p.u., trigger on max |dV_u|
    double ss_window = 20.0;  // s, steady-state window for lambda
    std::map<int, Bounds> vc_bounds; // per SVC bus; default [0.90, 1.10]
    std::map<int, Bounds> qc_bounds; // per SVC bus, SVC output; default from the firing-angle limits at V = 1

    void validate() const {
        if (!(d1 > 0) || !(d2 > 0)) throw Error(ErrorCode::invalid_argument, "d1 and d2 must be positive");
        if (!(threshold > 0)) throw Error(ErrorCode::invalid_argument, "threshold must be positive");
        if (!(ss_window > 0)) throw Error(ErrorCode::invalid_argument, "ss_window must be positive");
        for (const auto *m : {&vc_bounds, &qc_bounds})
            for (const auto &[bus, b] : *m)
                if (!(b.lo <= b.hi)) throw Error(ErrorCode::invalid_argument, "bounds at bus " + std::to_string(bus) + " are not ordered");
    }

    Bounds vc(int bus) const {
        auto it = vc_bounds.find(bus);
        return it == vc_bounds.end() ? Bounds{0.90, 1.10} : it->second;
    }

    Bounds qc(const SvcParams &s) const {
        auto it = qc_bounds.find(s.bus);
        if (it != qc_bounds.end()) return it->second;
        const double a = svc_injection(s, s.alpha_min, 1.0), b = svc_injection(s, s.alpha_max, 1.0);
        return {std::min(a, b), std::max(a, b)};
    }
};

struct ControlAction {
    double t = 0.0;
    std::vector<int> buses;
    Vector delta_vref; // change applied at this tick
    Vector vref;       // resulting references
    double predicted_objective = 0.0;
};

/// Baseline and bookkeeping for one run. Deviations are measured from the
/// pre-disturbance steady state; the LP variable is the total voltage
/// change at the controlled buses relative to that state.
struct ControlState {
    std::vector<int> controlled;   // dispatchable SVC buses (PMU-equipped)
    std::vector<int> uncontrolled; // monitored uncontrolled buses
    Vector v_ref_u;                // steady-state V at uncontrolled buses
    Vector v_c0;                   // steady-state V at controlled buses
    Vector vref0;                  // SVC references in that state
    Vector qsvc0;                  // SVC outputs in that state
    Vector qnet_c0;                // reactive draw from the network at controlled buses
    Vector qsvc_lo, qsvc_hi;       // SVC output limits
    Vector vref_lo, vref_hi;       // reference limits
    Vector v_ref_c;                // current references
    double last_action_t = -std::numeric_limits<double>::infinity();
    double disturbance_t = std::numeric_limits<double>::infinity();
    int actions = 0;
    std::vector<std::string> log;
};

/// Live measurements relative to the baseline.
struct ControlMeasurement {
    Vector dv_u; // uncontrolled voltage deviations
    Vector dv_c; // controlled voltage deviations
    Vector dq_c; // change of reactive power drawn from the network at controlled buses
};

/// Baseline for `controlled` (installed SVC buses) and `uncontrolled`
/// taken from the steady state `x0` of `plant`.
inline ControlState initial_control_state(const GridDynamics &plant, const SystemState &x0, std::vector<int> controlled,
                                          std::vector<int> uncontrolled, const ControllerConfig &cfg) {
    ControlState st;
    const auto nc = static_cast<Eigen::Index>(controlled.size()), nu = static_cast<Eigen::Index>(uncontrolled.size());
    const auto row = measure(plant, x0);
    st.v_ref_u.resize(nu);
    for (Eigen::Index i = 0; i < nu; ++i) st.v_ref_u(i) = x0.v(plant.load_index(uncontrolled[static_cast<std::size_t>(i)]));
    for (auto *v : {&st.v_c0, &st.vref0, &st.qsvc0, &st.qnet_c0, &st.qsvc_lo, &st.qsvc_hi, &st.vref_lo, &st.vref_hi}) v->resize(nc);
    for (Eigen::Index i = 0; i < nc; ++i) {
        const int bus = controlled[static_cast<std::size_t>(i)];
        const int k = plant.load_index(bus), si = plant.svc_index(bus);
        const auto &svc = plant.svcs()[static_cast<std::size_t>(si)];
        st.v_c0(i) = x0.v(k);
        st.vref0(i) = x0.svc_vref(si);
        st.qsvc0(i) = svc_injection(svc, x0.svc_alpha(si), x0.v(k));
        st.qnet_c0(i) = row.q(k) - st.qsvc0(i);
        const auto qb = cfg.qc(svc);
        const auto vb = cfg.vc(bus);
        st.qsvc_lo(i) = qb.lo;
        st.qsvc_hi(i) = qb.hi;
        st.vref_lo(i) = vb.lo;
        st.vref_hi(i) = vb.hi;
    }
    st.v_ref_c = st.vref0;
    st.controlled = std::move(controlled);
    st.uncontrolled = std::move(uncontrolled);
    return st;
}

/// Deviations seen by the controller. The SVC output is read from the
/// device (firing angle and measured voltage); the PMU reactive channel
/// carries the load's total draw, so the network share is the difference.
inline ControlMeasurement control_measurement(const GridDynamics &plant, const SystemState &x, const MeasurementRow &row,
                                              const ControlState &st) {
    ControlMeasurement cm;
    const auto nc = static_cast<Eigen::Index>(st.controlled.size()), nu = static_cast<Eigen::Index>(st.uncontrolled.size());
    cm.dv_u.resize(nu);
    cm.dv_c.resize(nc);
    cm.dq_c.resize(nc);
    for (Eigen::Index i = 0; i < nu; ++i)
        cm.dv_u(i) = row.v(plant.load_index(st.uncontrolled[static_cast<std::size_t>(i)])) - st.v_ref_u(i);
    for (Eigen::Index i = 0; i < nc; ++i) {
        const int bus = st.controlled[static_cast<std::size_t>(i)];
        const int k = plant.load_index(bus), si = plant.svc_index(bus);
        const double qsvc = svc_injection(plant.svcs()[static_cast<std::size_t>(si)], x.svc_alpha(si), row.v(k));
        cm.dv_c(i) = row.v(k) - st.v_c0(i);
        cm.dq_c(i) = row.q(k) - qsvc - st.qnet_c0(i);
    }
    return cm;
}

inline bool should_act(double t, const Vector &dv_u, const ControlState &st, const ControllerConfig &cfg) {
    if (!(t >= st.disturbance_t + cfg.d1)) return false;
    if (!(t >= st.last_action_t + cfg.d2 - 1e-9)) return false;
    const double dev = dv_u.size() ? dv_u.cwiseAbs().maxCoeff() : 0.0;
    return dev >= cfg.threshold;
}

/// dV_u = M_c dV_c + dist with M_c = S_VQuc S_VQcc^-1; the disturbance is
/// read off the measurements, so only PMU-visible quantities enter.
inline LinfProblem assemble_problem(const PartitionedS &blk, const ControlMeasurement &meas, const ControlState &st) {
    const auto nc = static_cast<Eigen::Index>(blk.controlled.size());
    Eigen::FullPivLU<Matrix> lu(blk.svq_cc);
    if (nc > 0 && (!lu.isInvertible() || condition_number(blk.svq_cc) > 1e12))
        throw Error(ErrorCode::singular_matrix, "S_VQcc is singular (cond " + std::to_string(condition_number(blk.svq_cc)) + ")");
    const Matrix g = nc > 0 ? Matrix(lu.inverse()) : Matrix(0, 0);
    LinfProblem p;
    p.a = blk.svq_uc * g;
    p.b = meas.dv_u - p.a * meas.dv_c;
    p.x_lo = st.vref_lo - st.vref0;
    p.x_hi = st.vref_hi - st.vref0;
    if (nc > 0) {
        // dQ_c = g dV_c + q0; network draw changes opposite to the SVC output.
        const Vector q0 = meas.dq_c - g * meas.dv_c;
        p.g = g;
        p.g_lo = st.qsvc0 - st.qsvc_hi - q0;
        p.g_hi = st.qsvc0 - st.qsvc_lo - q0;
    }
    return p;
}

/// One controller step; returns the references to dispatch, if any.
/// Failures are logged and the tick is skipped.
inline std::optional<ControlAction> tick(double t, const ControlMeasurement &meas, const PartitionedS &blk, ControlState &st,
                                         const ControllerConfig &cfg) {
    if (cfg.mode == ControlMode::none || st.controlled.empty()) return std::nullopt;
    if (!should_act(t, meas.dv_u, st, cfg)) return std::nullopt;
    try {
        const auto prob = assemble_problem(blk, meas, st);
        const auto sol = solve_linf(prob);
        if (sol.status != LpStatus::optimal) {
            st.log.push_back("t=" + std::to_string(t) + ": LP infeasible (constraint " +
                             std::to_string(sol.separating_constraint) + "), tick skipped");
            st.last_action_t = t;
            return std::nullopt;
        }
        ControlAction act;
        act.t = t;
        act.buses = st.controlled;
        act.vref = (st.vref0 + sol.x).cwiseMax(st.vref_lo).cwiseMin(st.vref_hi);
        act.delta_vref = act.vref - st.v_ref_c;
        act.predicted_objective = sol.objective;
        st.v_ref_c = act.vref;
        st.last_action_t = t;
        ++st.actions;
        return act;
    } catch (const Error &e) {
        st.log.push_back("t=" + std::to_string(t) + ": " + e.what() + ", tick skipped");
        st.last_action_t = t;
        return std::nullopt;
    }
}

/// RMS over uncontrolled buses of the steady-state deviation, the steady
/// state being the per-bus mean over the final `ss_window` seconds.
/// `v_u` holds one row per sample at `sample_rate`.
inline double performance_index(const Matrix &v_u, double sample_rate, const Vector &v_ref_u, double ss_window) {
    const auto n = v_u.rows();
    const auto k = static_cast<Eigen::Index>(std::llround(ss_window * sample_rate));
    if (k < 1 || k > n) throw Error(ErrorCode::insufficient_data, "trajectory shorter than the steady-state window");
    if (v_u.cols() != v_ref_u.size()) throw Error(ErrorCode::invalid_argument, "reference size mismatch");
    if (v_u.cols() == 0) return 0.0;
    const Vector ss = v_u.bottomRows(k).colwise().mean().transpose();
    return std::sqrt((ss - v_ref_u).squaredNorm() / static_cast<double>(v_u.cols()));
}

} // namespace pmuwavc
