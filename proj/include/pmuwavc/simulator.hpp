#pragma once

// Stochastic load + SVC dynamics on a reduced network, integrated by
// Euler-Maruyama, with scenario events and PMU-like sampling.

#include <pmuwavc/netmodel.hpp>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>

namespace pmuwavc {

struct SystemState {
    double t = 0.0;
    Vector theta;     // load-bus angles, rad
    Vector v;         // load-bus magnitudes, p.u.
    Vector svc_vm;    // filtered voltages V_M
    Vector svc_alpha; // firing angles, rad
    Vector svc_vref;  // SVC references, p.u.
};

/// Reactive injection of a firing-angle SVC at bus voltage v.
inline double svc_susceptance(const SvcParams &s, double alpha) {
    return (2.0 * alpha - std::sin(2.0 * alpha) - std::numbers::pi * (2.0 - s.x_l / s.x_c)) / (std::numbers::pi * s.x_l);
}

inline double svc_susceptance_slope(const SvcParams &s, double alpha) {
    return (2.0 - 2.0 * std::cos(2.0 * alpha)) / (std::numbers::pi * s.x_l);
}

inline double svc_injection(const SvcParams &s, double alpha, double v) { return svc_susceptance(s, alpha) * v * v; }

/// Firing angle at which the SVC injects nothing, or mid-range when the
/// susceptance never crosses zero inside [alpha_min, alpha_max].
inline double svc_idle_angle(const SvcParams &s) {
    double lo = s.alpha_min, hi = s.alpha_max;
    double flo = svc_susceptance(s, lo), fhi = svc_susceptance(s, hi);
    if (flo * fhi > 0) return 0.5 * (lo + hi);
    for (int i = 0; i < 200 && hi - lo > 1e-15; ++i) {
        const double mid = 0.5 * (lo + hi);
        const double fm = svc_susceptance(s, mid);
        if ((fm <= 0) == (flo <= 0)) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

/// Gaussian increment source for the Wiener processes of the load model.
class ProcessNoise {
public:
    ProcessNoise() = default;
    explicit ProcessNoise(std::uint64_t seed) : enabled_(true), rng_(seed) {}

    static ProcessNoise off() { return ProcessNoise(); }

    bool enabled() const { return enabled_; }
    double draw() { return enabled_ ? normal_(rng_) : 0.0; }

private:
    bool enabled_ = false;
    std::mt19937_64 rng_{0};
    std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Selects load buses for an event; `uncontrolled` and `all` are resolved
/// against the installed SVC set when the event is applied.
struct BusSelector {
    enum class Kind { list, all, uncontrolled };
    Kind kind = Kind::list;
    std::vector<int> ids;
};

struct ScenarioEvent {
    enum class Kind { load_step, line_trip, set_vref };
    double at = 0.0;
    Kind kind = Kind::load_step;
    BusSelector buses; // load_step
    double dp = 0.0;   // load_step: fractional change of Ps
    double dq = 0.0;   // load_step: fractional change of Qs
    int from = 0;      // line_trip endpoints
    int to = 0;
    int bus = 0;       // set_vref
    double value = 0.0;

    static ScenarioEvent load_step(double at, BusSelector sel, double dp, double dq) {
        ScenarioEvent e;
        e.at = at;
        e.kind = Kind::load_step;
        e.buses = std::move(sel);
        e.dp = dp;
        e.dq = dq;
        return e;
    }
    static ScenarioEvent line_trip(double at, int from, int to) {
        ScenarioEvent e;
        e.at = at;
        e.kind = Kind::line_trip;
        e.from = from;
        e.to = to;
        return e;
    }
    static ScenarioEvent set_vref(double at, int bus, double value) {
        ScenarioEvent e;
        e.at = at;
        e.kind = Kind::set_vref;
        e.bus = bus;
        e.value = value;
        return e;
    }
};

/// The plant: reduced network, load parameters (with their current
/// steady-state set-points), and the installed SVCs.
class GridDynamics {
public:
    /// `installed_svcs` restricts which of the case's SVCs are in service;
    /// std::nullopt installs all of them.
    explicit GridDynamics(GridCase c, std::optional<std::vector<int>> installed_svcs = std::nullopt)
        : case_(std::move(c)) {
        case_.validate();
        for (const auto &s : case_.svcs) {
            if (installed_svcs && std::find(installed_svcs->begin(), installed_svcs->end(), s.bus) == installed_svcs->end())
                continue;
            svcs_.push_back(s);
        }
        if (installed_svcs) {
            for (int b : *installed_svcs)
                if (std::none_of(svcs_.begin(), svcs_.end(), [b](const SvcParams &s) { return s.bus == b; }))
                    throw Error(ErrorCode::invalid_argument, "no SVC defined at bus " + std::to_string(b));
        }
        rebuild_network();
        const auto m = net_.m();
        ps_.resize(m);
        qs_.resize(m);
        tau_theta_.resize(m);
        tau_v_.resize(m);
        sigma_p_.resize(m);
        sigma_q_.resize(m);
        for (Eigen::Index a = 0; a < m; ++a) {
            const auto &l = *case_.bus(net_.load_ids[static_cast<std::size_t>(a)]).load;
            ps_(a) = l.ps;
            qs_(a) = l.qs;
            tau_theta_(a) = l.tau_theta;
            tau_v_(a) = l.tau_v;
            sigma_p_(a) = l.sigma_p;
            sigma_q_(a) = l.sigma_q;
        }
        svc_pos_.clear();
        for (const auto &s : svcs_) svc_pos_.push_back(load_index(s.bus));
        // References left open in the case idle the SVC at the power-flow point.
        if (std::any_of(svcs_.begin(), svcs_.end(), [](const SvcParams &s) { return !s.vref0; })) {
            const auto pf = solve_power_flow(net_, ps_, qs_, start_theta(), start_v(), case_.solver);
            for (std::size_t i = 0; i < svcs_.size(); ++i) {
                auto &s = svcs_[i];
                if (s.vref0) continue;
                s.vref0 = s.k_m * pf.v(svc_pos_[i]) + s.k_d * svc_idle_angle(s) / s.k;
            }
        }
    }

    const GridCase &grid_case() const { return case_; }
    const ReducedNetwork &network() const { return net_; }
    int m() const { return net_.m(); }
    int n_svc() const { return static_cast<int>(svcs_.size()); }
    const std::vector<int> &load_ids() const { return net_.load_ids; }
    const std::vector<SvcParams> &svcs() const { return svcs_; }
    const std::vector<int> &svc_positions() const { return svc_pos_; }
    const Vector &ps() const { return ps_; }
    const Vector &qs() const { return qs_; }
    const Vector &tau_theta() const { return tau_theta_; }
    const Vector &tau_v() const { return tau_v_; }
    const Vector &sigma_p() const { return sigma_p_; }
    const Vector &sigma_q() const { return sigma_q_; }

    std::vector<int> svc_bus_ids() const {
        std::vector<int> out;
        for (const auto &s : svcs_) out.push_back(s.bus);
        return out;
    }

    std::vector<int> uncontrolled_ids() const {
        std::vector<int> out;
        const auto svc = svc_bus_ids();
        for (int id : net_.load_ids)
            if (std::find(svc.begin(), svc.end(), id) == svc.end()) out.push_back(id);
        return out;
    }

    int load_index(int bus) const {
        auto it = std::find(net_.load_ids.begin(), net_.load_ids.end(), bus);
        if (it == net_.load_ids.end())
            throw Error(ErrorCode::unknown_bus, "bus " + std::to_string(bus) + " is not a dynamic load bus");
        return static_cast<int>(it - net_.load_ids.begin());
    }

    int svc_index(int bus) const {
        for (std::size_t i = 0; i < svcs_.size(); ++i)
            if (svcs_[i].bus == bus) return static_cast<int>(i);
        throw Error(ErrorCode::unknown_bus, "no installed SVC at bus " + std::to_string(bus));
    }

    Vector start_theta() const {
        Vector t(m());
        for (Eigen::Index a = 0; a < m(); ++a) t(a) = case_.bus(net_.load_ids[static_cast<std::size_t>(a)]).theta0;
        return t;
    }
    Vector start_v() const {
        Vector v(m());
        for (Eigen::Index a = 0; a < m(); ++a) v(a) = case_.bus(net_.load_ids[static_cast<std::size_t>(a)]).v0;
        return v;
    }

    Vector vref0() const {
        Vector r(n_svc());
        for (int i = 0; i < n_svc(); ++i) r(i) = *svcs_[static_cast<std::size_t>(i)].vref0;
        return r;
    }

    /// Absorptions from the network at every load bus (complex-current form).
    PowerInjections injections(const Vector &theta, const Vector &v) const {
        const auto m = net_.m();
        CVector vc = gen_vc_;
        for (Eigen::Index a = 0; a < m; ++a) vc(a) = std::polar(v(a), theta(a));
        const CVector i = load_rows_ * vc;
        PowerInjections out{Vector(m), Vector(m)};
        for (Eigen::Index a = 0; a < m; ++a) {
            const Complex s = vc(a) * std::conj(i(a));
            out.p(a) = -s.real();
            out.q(a) = -s.imag();
        }
        return out;
    }

    /// Reactive power absorbed by each load: network plus SVC injection.
    Vector load_reactive(const SystemState &x, const PowerInjections &inj) const {
        Vector q = inj.q;
        for (std::size_t i = 0; i < svcs_.size(); ++i) {
            const auto k = svc_pos_[i];
            q(k) += svc_injection(svcs_[i], x.svc_alpha(static_cast<Eigen::Index>(i)), x.v(k));
        }
        return q;
    }

    JacobianBlocks jacobian(const Vector &theta, const Vector &v) const {
        return analytic_jacobian(network_voltages(net_, theta, v), net_.y, net_.load_ids);
    }

    /// Drift matrix of the linearized load model (network only; SVC states excluded).
    Matrix state_matrix(const Vector &theta, const Vector &v) const {
        const Matrix j = jacobian(theta, v).assembled();
        Vector inv_tau(2 * m());
        inv_tau << tau_theta_.cwiseInverse(), tau_v_.cwiseInverse();
        return inv_tau.asDiagonal() * j;
    }

    /// Diffusion matrix of the linearized load model.
    Matrix diffusion() const {
        Vector h(2 * m());
        h << -(ps_.cwiseProduct(sigma_p_)).cwiseQuotient(tau_theta_), -(qs_.cwiseProduct(sigma_q_)).cwiseQuotient(tau_v_);
        return h.asDiagonal();
    }

    /// Steady state of the full load + SVC dynamics for the given references.
    SystemState equilibrium(const Vector &vref, const SystemState *guess = nullptr) const {
        const auto m = net_.m();
        const int ns = n_svc();
        if (vref.size() != ns) throw Error(ErrorCode::invalid_argument, "reference vector size does not match SVC count");
        SystemState x;
        if (guess) {
            x = *guess;
        } else {
            const auto pf = solve_power_flow(net_, ps_, qs_, start_theta(), start_v(), case_.solver);
            x.theta = pf.theta;
            x.v = pf.v;
            x.svc_alpha.resize(ns);
            for (int i = 0; i < ns; ++i) x.svc_alpha(i) = svc_idle_angle(svcs_[static_cast<std::size_t>(i)]);
        }
        x.svc_vref = vref;
        std::vector<int> pinned(static_cast<std::size_t>(ns), 0); // -1 at alpha_min, +1 at alpha_max
        const int n = 2 * static_cast<int>(m) + ns;
        for (int pass = 0; pass < 4; ++pass) {
            bool converged = false;
            for (int it = 0; it <= 60; ++it) {
                const auto inj = injections(x.theta, x.v);
                Vector f(n);
                f.head(m) = inj.p - ps_;
                f.segment(m, m) = inj.q - qs_;
                Matrix jac = Matrix::Zero(n, n);
                jac.topLeftCorner(2 * m, 2 * m) = jacobian(x.theta, x.v).assembled();
                for (int i = 0; i < ns; ++i) {
                    const auto &s = svcs_[static_cast<std::size_t>(i)];
                    const auto k = svc_pos_[static_cast<std::size_t>(i)];
                    const double a = x.svc_alpha(i), vk = x.v(k);
                    f(m + k) += svc_injection(s, a, vk);
                    jac(m + k, m + k) += 2.0 * svc_susceptance(s, a) * vk;
                    jac(m + k, 2 * m + i) = svc_susceptance_slope(s, a) * vk * vk;
                    const auto r = 2 * m + i;
                    if (pinned[static_cast<std::size_t>(i)] != 0) {
                        const double lim = pinned[static_cast<std::size_t>(i)] < 0 ? s.alpha_min : s.alpha_max;
                        f(r) = a - lim;
                        jac(r, r) = 1.0;
                    } else {
                        f(r) = s.k_d * a - s.k * (vref(i) - s.k_m * vk);
                        jac(r, r) = s.k_d;
                        jac(r, m + k) = s.k * s.k_m;
                    }
                }
                const double res = f.lpNorm<Eigen::Infinity>();
                if (!std::isfinite(res)) throw Error(ErrorCode::power_flow_diverged, "equilibrium iteration diverged");
                if (res < 1e-11) {
                    converged = true;
                    break;
                }
                Eigen::PartialPivLU<Matrix> lu(jac);
                if (!(lu.rcond() > 1e-14)) throw Error(ErrorCode::singular_jacobian, "equilibrium Jacobian is singular");
                const Vector dz = lu.solve(-f);
                x.theta += dz.head(m);
                x.v += dz.segment(m, m);
                x.svc_alpha += dz.tail(ns);
            }
            if (!converged) throw Error(ErrorCode::power_flow_diverged, "equilibrium solve did not converge");
            bool changed = false;
            for (int i = 0; i < ns; ++i) {
                const auto &s = svcs_[static_cast<std::size_t>(i)];
                auto &p = pinned[static_cast<std::size_t>(i)];
                if (p == 0 && x.svc_alpha(i) < s.alpha_min) p = -1, changed = true;
                if (p == 0 && x.svc_alpha(i) > s.alpha_max) p = 1, changed = true;
            }
            if (!changed) break;
        }
        x.svc_vm.resize(ns);
        for (int i = 0; i < ns; ++i)
            x.svc_vm(i) = svcs_[static_cast<std::size_t>(i)].k_m * x.v(svc_pos_[static_cast<std::size_t>(i)]);
        return x;
    }

    SystemState initial_state() const { return equilibrium(vref0()); }

    std::vector<int> resolve(const BusSelector &sel) const {
        switch (sel.kind) {
        case BusSelector::Kind::all: return net_.load_ids;
        case BusSelector::Kind::uncontrolled: return uncontrolled_ids();
        case BusSelector::Kind::list: break;
        }
        for (int b : sel.ids) load_index(b);
        return sel.ids;
    }

    void scale_load(const BusSelector &sel, double dp, double dq) {
        for (int b : resolve(sel)) {
            const int k = load_index(b);
            ps_(k) *= 1.0 + dp;
            qs_(k) *= 1.0 + dq;
        }
    }

    void trip_line(int from, int to) {
        for (auto &br : case_.branches) {
            if (br.in_service && ((br.from == from && br.to == to) || (br.from == to && br.to == from))) {
                br.in_service = false;
                rebuild_network();
                return;
            }
        }
        throw Error(ErrorCode::invalid_argument,
                    "no in-service branch " + std::to_string(from) + "-" + std::to_string(to));
    }

private:
    void rebuild_network() {
        net_ = reduce_network(case_);
        const auto m = net_.m();
        const CMatrix y = net_.y.complex();
        load_rows_ = y.topRows(m);
        gen_vc_ = CVector::Zero(net_.size());
        for (Eigen::Index k = 0; k < net_.gen_v.size(); ++k) gen_vc_(m + k) = std::polar(net_.gen_v(k), net_.gen_theta(k));
    }

    GridCase case_;
    ReducedNetwork net_;
    std::vector<SvcParams> svcs_;
    std::vector<int> svc_pos_;
    CMatrix load_rows_;
    CVector gen_vc_;
    Vector ps_, qs_, tau_theta_, tau_v_, sigma_p_, sigma_q_;
};

/// One Euler-Maruyama step of the load SDEs with explicit Euler for the SVC
/// regulators; firing angles are clamped to their limits afterwards.
inline SystemState step(const SystemState &x, const GridDynamics &plant, double dt, ProcessNoise &noise) {
    if (!(dt > 0)) throw Error(ErrorCode::invalid_argument, "dt must be positive");
    const auto m = plant.m();
    const auto inj = plant.injections(x.theta, x.v);
    const Vector q_load = plant.load_reactive(x, inj);
    const double sq = std::sqrt(dt);
    SystemState y = x;
    y.t = x.t + dt;
    const auto &ps = plant.ps();
    const auto &qs = plant.qs();
    for (Eigen::Index k = 0; k < m; ++k) {
        const double w = noise.draw();
        y.theta(k) += dt * (inj.p(k) - ps(k)) / plant.tau_theta()(k) -
                      ps(k) * plant.sigma_p()(k) / plant.tau_theta()(k) * sq * w;
    }
    for (Eigen::Index k = 0; k < m; ++k) {
        const double w = noise.draw();
        y.v(k) += dt * (q_load(k) - qs(k)) / plant.tau_v()(k) - qs(k) * plant.sigma_q()(k) / plant.tau_v()(k) * sq * w;
    }
    const auto &svcs = plant.svcs();
    for (std::size_t i = 0; i < svcs.size(); ++i) {
        const auto &s = svcs[i];
        const auto ii = static_cast<Eigen::Index>(i);
        const double vk = x.v(plant.svc_positions()[i]);
        const double vm = x.svc_vm(ii);
        const double a = x.svc_alpha(ii);
        y.svc_vm(ii) += dt * (s.k_m * vk - vm) / s.t_m;
        const double da = (-s.k_d * a + s.k * s.t1 / (s.t2 * s.t_m) * (vm - s.k_m * vk)) / s.t2 +
                          s.k / s.t2 * (x.svc_vref(ii) - vm);
        y.svc_alpha(ii) = std::clamp(a + dt * da, s.alpha_min, s.alpha_max);
    }
    for (Eigen::Index k = 0; k < m; ++k) {
        if (!std::isfinite(y.theta(k)) || !std::isfinite(y.v(k)))
            throw Error(ErrorCode::integration_diverged,
                        "state at bus " + std::to_string(plant.load_ids()[static_cast<std::size_t>(k)]) +
                            " became non-finite at t=" + std::to_string(y.t));
    }
    for (std::size_t i = 0; i < svcs.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        if (!std::isfinite(y.svc_vm(ii)) || !std::isfinite(y.svc_alpha(ii)))
            throw Error(ErrorCode::integration_diverged,
                        "SVC state at bus " + std::to_string(svcs[i].bus) + " became non-finite at t=" + std::to_string(y.t));
    }
    return y;
}

enum class NoiseKind { none, low, high };

inline const char *to_string(NoiseKind k) {
    switch (k) {
    case NoiseKind::none: return "none";
    case NoiseKind::low: return "low";
    case NoiseKind::high: return "high";
    }
    return "?";
}

inline NoiseKind parse_noise_kind(const std::string &s) {
    if (s == "none") return NoiseKind::none;
    if (s == "low") return NoiseKind::low;
    if (s == "high") return NoiseKind::high;
    throw Error(ErrorCode::invalid_argument, "unknown noise kind '" + s + "'");
}

/// Additive PMU measurement noise on the angle and magnitude channels.
/// `low_scale` holds one standard deviation per channel (angles, then
/// magnitudes) and must be calibrated before a low-noise stream is drawn.
struct NoiseModel {
    static constexpr double high_std = 1e-4;

    NoiseKind kind = NoiseKind::none;
    std::uint64_t seed = 0;
    Vector low_scale;
};

/// One time-aligned PMU sample.
struct MeasurementRow {
    double t = 0.0;
    Vector theta;
    Vector v;
    Vector p;
    Vector q;
};

class MeasurementNoise {
public:
    explicit MeasurementNoise(const NoiseModel &model)
        : model_(model), rng_(model.seed ^ 0x9e3779b97f4a7c15ULL) {}

    MeasurementRow apply(MeasurementRow row) {
        const auto m = row.theta.size();
        if (model_.kind == NoiseKind::none) return row;
        if (model_.kind == NoiseKind::low && model_.low_scale.size() != 2 * m)
            throw Error(ErrorCode::invalid_argument, "low-noise model used before calibration");
        for (Eigen::Index k = 0; k < m; ++k)
            row.theta(k) += std_of(k) * normal_(rng_);
        for (Eigen::Index k = 0; k < m; ++k)
            row.v(k) += std_of(m + k) * normal_(rng_);
        return row;
    }

private:
    double std_of(Eigen::Index channel) const {
        return model_.kind == NoiseKind::high ? NoiseModel::high_std : model_.low_scale(channel);
    }

    NoiseModel model_;
    std::mt19937_64 rng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Noise-free measurement of a state: angles, magnitudes, and the active
/// and reactive power absorbed by each dynamic load.
inline MeasurementRow measure(const GridDynamics &plant, const SystemState &x) {
    const auto inj = plant.injections(x.theta, x.v);
    return {x.t, x.theta, x.v, inj.p, plant.load_reactive(x, inj)};
}

inline MeasurementRow sample_pmu(const GridDynamics &plant, const SystemState &x, MeasurementNoise &noise) {
    return noise.apply(measure(plant, x));
}

/// Fixed-rate measurement matrix; row i is the sample at t0 + i / sample_rate.
struct PmuWindow {
    double sample_rate = 60.0;
    double t0 = 0.0;
    Matrix theta; // n x m
    Matrix v;
    std::optional<Matrix> p;
    std::optional<Matrix> q;
    std::vector<int> bus_ids;

    Eigen::Index samples() const { return theta.rows(); }
    Eigen::Index buses() const { return theta.cols(); }
    double dt() const { return 1.0 / sample_rate; }

    /// n x 2m state matrix [theta, v].
    Matrix states() const {
        Matrix x(theta.rows(), 2 * theta.cols());
        x << theta, v;
        return x;
    }

    int column_of(int bus) const {
        auto it = std::find(bus_ids.begin(), bus_ids.end(), bus);
        if (it == bus_ids.end()) throw Error(ErrorCode::unknown_bus, "bus " + std::to_string(bus) + " not in window");
        return static_cast<int>(it - bus_ids.begin());
    }

    PmuWindow slice(Eigen::Index first, Eigen::Index count) const {
        if (first < 0 || count < 0 || first + count > samples())
            throw Error(ErrorCode::invalid_argument, "window slice out of range");
        PmuWindow w{sample_rate, t0 + static_cast<double>(first) / sample_rate, theta.middleRows(first, count),
                    v.middleRows(first, count), std::nullopt, std::nullopt, bus_ids};
        if (p) w.p = p->middleRows(first, count);
        if (q) w.q = q->middleRows(first, count);
        return w;
    }

    /// Columns restricted to `keep` (in the given order).
    PmuWindow subset(const std::vector<int> &keep) const {
        PmuWindow w{sample_rate, t0, Matrix(samples(), static_cast<Eigen::Index>(keep.size())),
                    Matrix(samples(), static_cast<Eigen::Index>(keep.size())), std::nullopt, std::nullopt, keep};
        if (p) w.p = Matrix(samples(), static_cast<Eigen::Index>(keep.size()));
        if (q) w.q = Matrix(samples(), static_cast<Eigen::Index>(keep.size()));
        for (std::size_t c = 0; c < keep.size(); ++c) {
            const auto src = column_of(keep[c]);
            const auto dst = static_cast<Eigen::Index>(c);
            w.theta.col(dst) = theta.col(src);
            w.v.col(dst) = v.col(src);
            if (p) w.p->col(dst) = p->col(src);
            if (q) w.q->col(dst) = q->col(src);
        }
        return w;
    }
};

/// Low-noise calibration: per channel, one tenth of the largest change
/// between consecutive samples of the (noise-free) window.
inline NoiseModel calibrate_low_noise(const PmuWindow &w, std::uint64_t seed) {
    const auto m = w.buses();
    NoiseModel model{NoiseKind::low, seed, Vector::Zero(2 * m)};
    const Matrix x = w.states();
    for (Eigen::Index c = 0; c < 2 * m; ++c) {
        double largest = 0.0;
        for (Eigen::Index i = 1; i < x.rows(); ++i) largest = std::max(largest, std::abs(x(i, c) - x(i - 1, c)));
        model.low_scale(c) = 0.1 * largest;
    }
    return model;
}

struct Scenario {
    double duration_s = 10.0;
    double dt_s = 1.0 / 600.0;
    double sample_rate_hz = 60.0;
    bool process_noise = true;
    NoiseModel noise;
    std::vector<ScenarioEvent> events;
    std::uint64_t seed = 0;
};

struct RunResult {
    std::vector<SystemState> states; // one per PMU sample
    PmuWindow truth;                 // noise-free channels
    PmuWindow measured;              // what the PMUs report
    std::vector<ScenarioEvent> applied;
};

/// Called once per PMU sample with the current state and the measured row;
/// returned events (typically set_vref) are applied immediately.
using SampleObserver = std::function<std::vector<ScenarioEvent>(const SystemState &, const MeasurementRow &)>;

namespace detail {

inline void apply_event(GridDynamics &plant, SystemState &x, const ScenarioEvent &e) {
    switch (e.kind) {
    case ScenarioEvent::Kind::load_step: plant.scale_load(e.buses, e.dp, e.dq); break;
    case ScenarioEvent::Kind::line_trip: plant.trip_line(e.from, e.to); break;
    case ScenarioEvent::Kind::set_vref: x.svc_vref(plant.svc_index(e.bus)) = e.value; break;
    }
}

inline const char *event_name(ScenarioEvent::Kind k) {
    switch (k) {
    case ScenarioEvent::Kind::load_step: return "load_step";
    case ScenarioEvent::Kind::line_trip: return "line_trip";
    case ScenarioEvent::Kind::set_vref: return "set_vref";
    }
    return "?";
}

} // namespace detail

/// Integrates `plant` from `start` (its equilibrium when absent). The plant
/// is mutated by load_step/line_trip events, so pass a copy to keep the
/// original.
inline RunResult run(GridDynamics &plant, const Scenario &sc, const SampleObserver &observer = {},
                     std::optional<SystemState> start = std::nullopt) {
    if (!(sc.dt_s > 0) || !(sc.sample_rate_hz > 0) || !(sc.duration_s > 0))
        throw Error(ErrorCode::invalid_argument, "duration, dt and sample rate must be positive");
    const double per_sample = 1.0 / (sc.sample_rate_hz * sc.dt_s);
    const auto substeps = static_cast<long>(std::llround(per_sample));
    if (substeps < 1 || std::abs(per_sample - static_cast<double>(substeps)) > 1e-9)
        throw Error(ErrorCode::invalid_argument, "sample period must be an integer multiple of dt");
    const auto n = static_cast<Eigen::Index>(std::llround(sc.duration_s * sc.sample_rate_hz));
    const double dt = 1.0 / (sc.sample_rate_hz * static_cast<double>(substeps));

    std::vector<ScenarioEvent> pending = sc.events;
    std::stable_sort(pending.begin(), pending.end(), [](const auto &a, const auto &b) { return a.at < b.at; });
    for (const auto &e : pending)
        if (e.at < 0) throw Error(ErrorCode::invalid_argument, "event time must be non-negative");

    SystemState x = start ? *start : plant.initial_state();
    const double t_start = x.t;
    const auto m = plant.m();
    RunResult out;
    out.truth = PmuWindow{sc.sample_rate_hz, t_start, Matrix(n, m), Matrix(n, m), Matrix(n, m), Matrix(n, m), plant.load_ids()};
    out.measured = out.truth;
    out.states.reserve(static_cast<std::size_t>(n));
    ProcessNoise wiener = sc.process_noise ? ProcessNoise(sc.seed) : ProcessNoise::off();
    MeasurementNoise meas(sc.noise);
    const bool defer_low = sc.noise.kind == NoiseKind::low && sc.noise.low_scale.size() == 0;
    std::size_t next = 0;
    auto apply_due = [&](double t) {
        while (next < pending.size() && pending[next].at <= t - t_start + 1e-12) {
            try {
                detail::apply_event(plant, x, pending[next]);
            } catch (const Error &err) {
                throw Error(err.code(), std::string("event ") + detail::event_name(pending[next].kind) + " at t=" +
                                            std::to_string(pending[next].at) + ": " + err.detail());
            }
            out.applied.push_back(pending[next]);
            ++next;
        }
    };

    for (Eigen::Index i = 0; i < n; ++i) {
        x.t = t_start + static_cast<double>(i) / sc.sample_rate_hz;
        apply_due(x.t);
        const MeasurementRow truth = measure(plant, x);
        const MeasurementRow seen = defer_low ? truth : meas.apply(truth);
        out.truth.theta.row(i) = truth.theta.transpose();
        out.truth.v.row(i) = truth.v.transpose();
        out.truth.p->row(i) = truth.p.transpose();
        out.truth.q->row(i) = truth.q.transpose();
        out.measured.theta.row(i) = seen.theta.transpose();
        out.measured.v.row(i) = seen.v.transpose();
        out.measured.p->row(i) = seen.p.transpose();
        out.measured.q->row(i) = seen.q.transpose();
        if (observer) {
            for (const auto &e : observer(x, seen)) {
                detail::apply_event(plant, x, e);
                out.applied.push_back(e);
            }
        }
        out.states.push_back(x);
        for (long s = 0; s < substeps; ++s) {
            try {
                x = step(x, plant, dt, wiener);
            } catch (const Error &err) {
                std::string ctx = err.detail();
                if (!out.applied.empty())
                    ctx += " (last event: " + std::string(detail::event_name(out.applied.back().kind)) + " at t=" +
                           std::to_string(out.applied.back().at) + ")";
                throw Error(err.code(), ctx);
            }
            // Recompute the nominal clock to avoid accumulating dt round-off.
            x.t = t_start + static_cast<double>(i) / sc.sample_rate_hz + static_cast<double>(s + 1) * dt;
            if (s + 1 < substeps) apply_due(x.t);
        }
    }
    if (defer_low) {
        NoiseModel model = calibrate_low_noise(out.truth, sc.noise.seed);
        MeasurementNoise late(model);
        for (Eigen::Index i = 0; i < n; ++i) {
            MeasurementRow r{0.0, out.truth.theta.row(i).transpose(), out.truth.v.row(i).transpose(),
                             out.truth.p->row(i).transpose(), out.truth.q->row(i).transpose()};
            r = late.apply(std::move(r));
            out.measured.theta.row(i) = r.theta.transpose();
            out.measured.v.row(i) = r.v.transpose();
        }
    }
    return out;
}

} // namespace pmuwavc
