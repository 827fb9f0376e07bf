#pragma once

// Static network model: admittance assembly, Kron elimination of static
// buses, load-bus power injections, their analytic Jacobian, and a Newton
// power flow with generator buses held as fixed voltage sources.

#include <pmuwavc/errors.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace pmuwavc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;
using Complex = std::complex<double>;

enum class BusKind { generator, dynamic_load, static_bus };

inline const char *to_string(BusKind k) {
    switch (k) {
    case BusKind::generator: return "generator";
    case BusKind::dynamic_load: return "dynamic_load";
    case BusKind::static_bus: return "static";
    }
    return "?";
}

struct LoadParams {
    double tau_theta = 30.0; // s
    double tau_v = 30.0;     // s
    double ps = 0.0;         // p.u. steady-state active absorption
    double qs = 0.0;         // p.u. steady-state reactive absorption
    double sigma_p = 0.0;
    double sigma_q = 0.0;
};

struct Bus {
    int id = 0;
    BusKind kind = BusKind::static_bus;
    double v0 = 1.0;
    double theta0 = 0.0;
    // Constant shunt admittance at the bus (p.u.); the only load form a
    // static bus may carry, since static buses are eliminated exactly.
    double gs = 0.0;
    double bs = 0.0;
    std::optional<LoadParams> load;
};

struct Branch {
    int from = 0;
    int to = 0;
    double r = 0.0;
    double x = 0.0;
    double b_shunt = 0.0;
    bool in_service = true;
};

/// Firing-angle SVC regulator. Defaults are representative thyristor
/// controlled reactor values; every field can be overridden per case.
struct SvcParams {
    int bus = 0;
    double k = 25.0;
    double k_m = 1.0;
    double k_d = 0.01;
    double t_m = 0.01;
    double t1 = 0.1;
    double t2 = 10.0;
    double x_l = 0.2;
    double x_c = 0.1;
    double alpha_min = std::numbers::pi / 2.0;
    double alpha_max = std::numbers::pi;
    std::optional<double> vref0; // absent: chosen so the SVC is idle at the power-flow point
};

struct GeneratorSource {
    int bus = 0;
    double v = 1.0;
    double theta = 0.0;
};

struct SolverOptions {
    double tolerance = 1e-8;
    int max_iterations = 50;
};

struct GridCase {
    std::string name;
    double base_mva = 100.0;
    int reference_bus = 0;
    std::vector<Bus> buses;
    std::vector<Branch> branches;
    std::vector<SvcParams> svcs;
    std::vector<GeneratorSource> generators;
    SolverOptions solver;

    const Bus &bus(int id) const {
        for (const auto &b : buses)
            if (b.id == id) return b;
        throw Error(ErrorCode::unknown_bus, "bus " + std::to_string(id) + " not in case '" + name + "'");
    }

    bool has_bus(int id) const {
        return std::any_of(buses.begin(), buses.end(), [id](const Bus &b) { return b.id == id; });
    }

    std::vector<int> ids_of(BusKind kind) const {
        std::vector<int> out;
        for (const auto &b : buses)
            if (b.kind == kind) out.push_back(b.id);
        return out;
    }

    std::vector<int> load_bus_ids() const { return ids_of(BusKind::dynamic_load); }

    const GeneratorSource &generator(int id) const {
        for (const auto &g : generators)
            if (g.bus == id) return g;
        throw Error(ErrorCode::invalid_case, "generator bus " + std::to_string(id) + " has no source entry");
    }

    /// Throws ErrorCode::invalid_case describing the first violated invariant.
    void validate() const {
        auto fail = [&](const std::string &msg) { throw Error(ErrorCode::invalid_case, name + ": " + msg); };
        if (!(base_mva > 0)) fail("base_mva must be positive");
        std::set<int> ids;
        for (const auto &b : buses) {
            if (!ids.insert(b.id).second) fail("duplicate bus id " + std::to_string(b.id));
            const bool is_load = b.kind == BusKind::dynamic_load;
            if (is_load != b.load.has_value())
                fail("bus " + std::to_string(b.id) + ": load parameters present iff kind is dynamic_load");
            if (b.load) {
                const auto &l = *b.load;
                if (!(l.tau_theta > 0) || !(l.tau_v > 0))
                    fail("bus " + std::to_string(b.id) + ": time constants must be positive");
                if (l.sigma_p < 0 || l.sigma_q < 0)
                    fail("bus " + std::to_string(b.id) + ": noise intensities must be non-negative");
            }
        }
        for (const auto &br : branches) {
            if (!ids.count(br.from) || !ids.count(br.to))
                fail("branch " + std::to_string(br.from) + "-" + std::to_string(br.to) + " references a missing bus");
            if (br.r < 0) fail("branch " + std::to_string(br.from) + "-" + std::to_string(br.to) + " has r < 0");
        }
        std::set<int> gen_ids;
        for (const auto &g : generators) {
            if (!ids.count(g.bus) || bus(g.bus).kind != BusKind::generator)
                fail("generator entry for non-generator bus " + std::to_string(g.bus));
            if (!gen_ids.insert(g.bus).second) fail("duplicate generator entry " + std::to_string(g.bus));
        }
        for (int id : ids_of(BusKind::generator))
            if (!gen_ids.count(id)) fail("generator bus " + std::to_string(id) + " has no source entry");
        if (!ids.count(reference_bus)) fail("reference bus missing");
        const Bus &ref = bus(reference_bus);
        if (ref.kind != BusKind::generator) fail("reference bus must be a generator");
        if (std::abs(generator(reference_bus).theta) > 0.0) fail("reference bus angle must be 0");
        std::set<int> svc_buses;
        for (const auto &s : svcs) {
            if (!ids.count(s.bus) || bus(s.bus).kind != BusKind::dynamic_load)
                fail("SVC at bus " + std::to_string(s.bus) + " which is not a dynamic load bus");
            if (!svc_buses.insert(s.bus).second) fail("two SVCs at bus " + std::to_string(s.bus));
            if (!(s.t_m > 0) || !(s.t2 > 0) || !(s.x_l > 0) || !(s.x_c > 0) || !(s.alpha_min < s.alpha_max))
                fail("SVC at bus " + std::to_string(s.bus) + " violates parameter invariants");
        }
    }
};

/// Dense bus admittance Y = g + j b, rows/columns in `bus_ids` order.
struct AdmittanceMatrix {
    Matrix g;
    Matrix b;
    std::vector<int> bus_ids;

    int index_of(int id) const {
        auto it = std::find(bus_ids.begin(), bus_ids.end(), id);
        if (it == bus_ids.end()) throw Error(ErrorCode::unknown_bus, "bus " + std::to_string(id) + " not in admittance ordering");
        return static_cast<int>(it - bus_ids.begin());
    }

    CMatrix complex() const {
        CMatrix y(g.rows(), g.cols());
        y.real() = g;
        y.imag() = b;
        return y;
    }
};

inline AdmittanceMatrix build_admittance(const GridCase &c) {
    const auto n = static_cast<Eigen::Index>(c.buses.size());
    AdmittanceMatrix y;
    y.g = Matrix::Zero(n, n);
    y.b = Matrix::Zero(n, n);
    std::map<int, Eigen::Index> index;
    for (Eigen::Index k = 0; k < n; ++k) {
        y.bus_ids.push_back(c.buses[k].id);
        index[c.buses[k].id] = k;
    }
    for (const auto &br : c.branches) {
        if (!br.in_service) continue;
        if (br.x == 0.0)
            throw Error(ErrorCode::zero_impedance,
                        "branch " + std::to_string(br.from) + "-" + std::to_string(br.to) + " has zero impedance");
        const Complex ys = 1.0 / Complex(br.r, br.x);
        const auto i = index.at(br.from), j = index.at(br.to);
        y.g(i, i) += ys.real();
        y.g(j, j) += ys.real();
        y.b(i, i) += ys.imag() + 0.5 * br.b_shunt;
        y.b(j, j) += ys.imag() + 0.5 * br.b_shunt;
        y.g(i, j) -= ys.real();
        y.g(j, i) -= ys.real();
        y.b(i, j) -= ys.imag();
        y.b(j, i) -= ys.imag();
    }
    for (Eigen::Index k = 0; k < n; ++k) {
        y.g(k, k) += c.buses[k].gs;
        y.b(k, k) += c.buses[k].bs;
    }
    return y;
}

/// Network seen from the dynamic-load and generator buses after exact
/// elimination of the zero-injection (constant-admittance) static buses.
/// Ordering of `y` is [load buses..., generator buses...].
struct ReducedNetwork {
    AdmittanceMatrix y;
    std::vector<int> load_ids;
    std::vector<int> generator_ids;
    Vector gen_v;
    Vector gen_theta;
    std::vector<int> static_ids;
    CMatrix recovery; // static-bus complex voltages = recovery * retained complex voltages

    int m() const { return static_cast<int>(load_ids.size()); }
    int size() const { return static_cast<int>(y.bus_ids.size()); }
};

inline ReducedNetwork reduce_network(const GridCase &c) {
    const AdmittanceMatrix full = build_admittance(c);
    ReducedNetwork net;
    net.load_ids = c.ids_of(BusKind::dynamic_load);
    net.generator_ids = c.ids_of(BusKind::generator);
    net.static_ids = c.ids_of(BusKind::static_bus);
    std::vector<int> kept = net.load_ids;
    kept.insert(kept.end(), net.generator_ids.begin(), net.generator_ids.end());

    const CMatrix yf = full.complex();
    const auto nk = static_cast<Eigen::Index>(kept.size());
    const auto ns = static_cast<Eigen::Index>(net.static_ids.size());
    std::vector<Eigen::Index> ki, si;
    for (int id : kept) ki.push_back(full.index_of(id));
    for (int id : net.static_ids) si.push_back(full.index_of(id));

    CMatrix ykk(nk, nk), yks(nk, ns), ysk(ns, nk), yss(ns, ns);
    for (Eigen::Index a = 0; a < nk; ++a) {
        for (Eigen::Index b = 0; b < nk; ++b) ykk(a, b) = yf(ki[a], ki[b]);
        for (Eigen::Index b = 0; b < ns; ++b) yks(a, b) = yf(ki[a], si[b]);
    }
    for (Eigen::Index a = 0; a < ns; ++a) {
        for (Eigen::Index b = 0; b < nk; ++b) ysk(a, b) = yf(si[a], ki[b]);
        for (Eigen::Index b = 0; b < ns; ++b) yss(a, b) = yf(si[a], si[b]);
    }
    CMatrix yr = ykk;
    net.recovery = CMatrix::Zero(ns, nk);
    if (ns > 0) {
        Eigen::FullPivLU<CMatrix> lu(yss);
        if (!lu.isInvertible())
            throw Error(ErrorCode::invalid_case, "static buses form an island; cannot eliminate them");
        net.recovery = -lu.solve(ysk);
        yr += yks * net.recovery;
    }
    net.y.g = yr.real();
    net.y.b = yr.imag();
    net.y.bus_ids = kept;
    net.gen_v.resize(static_cast<Eigen::Index>(net.generator_ids.size()));
    net.gen_theta.resize(net.gen_v.size());
    for (Eigen::Index k = 0; k < net.gen_v.size(); ++k) {
        const auto &g = c.generator(net.generator_ids[static_cast<std::size_t>(k)]);
        net.gen_v(k) = g.v;
        net.gen_theta(k) = g.theta;
    }
    return net;
}

/// Voltage magnitudes and angles over some admittance ordering.
struct BusVoltages {
    Vector vm;
    Vector va;
};

struct PowerInjections {
    Vector p;
    Vector q;
};

/// Active/reactive absorption from the network at each listed bus, using
/// P_k = sum_j V_k V_j (-G_kj cos th_kj - B_kj sin th_kj) and
/// Q_k = sum_j V_k V_j (-G_kj sin th_kj + B_kj cos th_kj).
inline PowerInjections power_injections(const BusVoltages &s, const AdmittanceMatrix &y,
                                        std::span<const int> load_bus_ids) {
    if (s.vm.size() != y.g.rows() || s.va.size() != y.g.rows())
        throw Error(ErrorCode::invalid_argument, "state dimension does not match admittance matrix");
    const auto m = static_cast<Eigen::Index>(load_bus_ids.size());
    PowerInjections out{Vector::Zero(m), Vector::Zero(m)};
    for (Eigen::Index a = 0; a < m; ++a) {
        const int k = y.index_of(load_bus_ids[static_cast<std::size_t>(a)]);
        double p = 0.0, q = 0.0;
        for (Eigen::Index j = 0; j < y.g.cols(); ++j) {
            const double th = s.va(k) - s.va(j);
            const double vv = s.vm(k) * s.vm(j);
            const double c = std::cos(th), sn = std::sin(th);
            p += vv * (-y.g(k, j) * c - y.b(k, j) * sn);
            q += vv * (-y.g(k, j) * sn + y.b(k, j) * c);
        }
        out.p(a) = p;
        out.q(a) = q;
    }
    return out;
}

struct JacobianBlocks {
    Matrix p_theta;
    Matrix p_v;
    Matrix q_theta;
    Matrix q_v;

    Eigen::Index m() const { return p_theta.rows(); }

    Matrix assembled() const {
        const auto m = p_theta.rows();
        Matrix j(2 * m, 2 * m);
        j << p_theta, p_v, q_theta, q_v;
        return j;
    }

    static JacobianBlocks from_assembled(const Matrix &j) {
        const auto m = j.rows() / 2;
        return {j.topLeftCorner(m, m), j.topRightCorner(m, m), j.bottomLeftCorner(m, m), j.bottomRightCorner(m, m)};
    }
};

/// Partial derivatives of the absorptions at the listed buses with respect
/// to the angles and magnitudes of those same buses; every other bus in the
/// ordering is held fixed.
inline JacobianBlocks analytic_jacobian(const BusVoltages &s, const AdmittanceMatrix &y,
                                        std::span<const int> load_bus_ids) {
    const auto m = static_cast<Eigen::Index>(load_bus_ids.size());
    const auto n = y.g.rows();
    std::vector<Eigen::Index> pos;
    for (int id : load_bus_ids) pos.push_back(y.index_of(id));
    JacobianBlocks jb{Matrix::Zero(m, m), Matrix::Zero(m, m), Matrix::Zero(m, m), Matrix::Zero(m, m)};
    for (Eigen::Index a = 0; a < m; ++a) {
        const auto k = pos[a];
        const double vk = s.vm(k);
        double dp_dthk = 0.0, dq_dthk = 0.0, dp_dvk = 0.0, dq_dvk = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == k) continue;
            const double th = s.va(k) - s.va(j);
            const double c = std::cos(th), sn = std::sin(th);
            const double g = y.g(k, j), b = y.b(k, j), vj = s.vm(j);
            dp_dthk += vk * vj * (g * sn - b * c);
            dq_dthk += vk * vj * (-g * c - b * sn);
            dp_dvk += vj * (-g * c - b * sn);
            dq_dvk += vj * (-g * sn + b * c);
        }
        dp_dvk += -2.0 * vk * y.g(k, k);
        dq_dvk += 2.0 * vk * y.b(k, k);
        jb.p_theta(a, a) = dp_dthk;
        jb.q_theta(a, a) = dq_dthk;
        jb.p_v(a, a) = dp_dvk;
        jb.q_v(a, a) = dq_dvk;
        for (Eigen::Index c_ = 0; c_ < m; ++c_) {
            if (c_ == a) continue;
            const auto l = pos[c_];
            const double th = s.va(k) - s.va(l);
            const double c = std::cos(th), sn = std::sin(th);
            const double g = y.g(k, l), b = y.b(k, l), vl = s.vm(l);
            jb.p_theta(a, c_) = vk * vl * (-g * sn + b * c);
            jb.q_theta(a, c_) = vk * vl * (g * c + b * sn);
            jb.p_v(a, c_) = vk * (-g * c - b * sn);
            jb.q_v(a, c_) = vk * (-g * sn + b * c);
        }
    }
    return jb;
}

/// Full voltage vector over a reduced network: load entries from
/// (theta, v), generator entries from the fixed sources.
inline BusVoltages network_voltages(const ReducedNetwork &net, const Vector &theta, const Vector &v) {
    const auto m = net.m();
    const auto n = net.size();
    BusVoltages s{Vector(n), Vector(n)};
    s.vm.head(m) = v;
    s.va.head(m) = theta;
    s.vm.tail(n - m) = net.gen_v;
    s.va.tail(n - m) = net.gen_theta;
    return s;
}

struct PowerFlowSolution {
    Vector theta; // load-bus angles, rad, in ReducedNetwork::load_ids order
    Vector v;     // load-bus magnitudes, p.u.
    std::vector<int> load_ids;
    int iterations = 0;
    double residual = 0.0; // final mismatch infinity norm, p.u.
};

inline double condition_number(const Matrix &a) {
    if (a.size() == 0) return 1.0;
    Eigen::JacobiSVD<Matrix> svd(a);
    const auto &s = svd.singularValues();
    const double smin = s(s.size() - 1);
    return smin > 0 ? s(0) / smin : std::numeric_limits<double>::infinity();
}

/// Newton iteration on P_k - ps_k, Q_k - qs_k at the load buses of `net`.
inline PowerFlowSolution solve_power_flow(const ReducedNetwork &net, const Vector &ps, const Vector &qs,
                                          const Vector &theta0, const Vector &v0, const SolverOptions &opt = {}) {
    const auto m = net.m();
    PowerFlowSolution sol{theta0, v0, net.load_ids, 0, 0.0};
    if (m == 0) return sol;
    const std::span<const int> loads(net.load_ids);
    for (int it = 0;; ++it) {
        const auto s = network_voltages(net, sol.theta, sol.v);
        const auto inj = power_injections(s, net.y, loads);
        Vector f(2 * m);
        f << inj.p - ps, inj.q - qs;
        sol.residual = f.lpNorm<Eigen::Infinity>();
        sol.iterations = it;
        if (!std::isfinite(sol.residual))
            throw Error(ErrorCode::power_flow_diverged, "mismatch became non-finite at iteration " + std::to_string(it));
        if (sol.residual < opt.tolerance) return sol;
        if (it >= opt.max_iterations)
            throw Error(ErrorCode::power_flow_diverged, "no convergence in " + std::to_string(opt.max_iterations) +
                                                            " iterations, final residual " + std::to_string(sol.residual));
        const Matrix j = analytic_jacobian(s, net.y, loads).assembled();
        Eigen::PartialPivLU<Matrix> lu(j);
        if (!(lu.rcond() > 1e-14))
            throw Error(ErrorCode::singular_jacobian, "power-flow Jacobian singular at iteration " + std::to_string(it) +
                                                          ", residual " + std::to_string(sol.residual));
        const Vector dx = lu.solve(-f);
        sol.theta += dx.head(m);
        sol.v += dx.tail(m);
    }
}

inline PowerFlowSolution solve_power_flow(const GridCase &c) {
    c.validate();
    const ReducedNetwork net = reduce_network(c);
    const auto m = net.m();
    Vector ps(m), qs(m), th0(m), v0(m);
    for (Eigen::Index a = 0; a < m; ++a) {
        const Bus &b = c.bus(net.load_ids[static_cast<std::size_t>(a)]);
        ps(a) = b.load->ps;
        qs(a) = b.load->qs;
        th0(a) = b.theta0;
        v0(a) = b.v0;
    }
    return solve_power_flow(net, ps, qs, th0, v0, c.solver);
}

/// Complex voltages at every bus of the case (static buses recovered from
/// the retained ones), keyed by bus id.
inline std::map<int, Complex> all_bus_voltages(const ReducedNetwork &net, const Vector &theta, const Vector &v) {
    const auto s = network_voltages(net, theta, v);
    CVector kept(net.size());
    for (Eigen::Index k = 0; k < kept.size(); ++k) kept(k) = std::polar(s.vm(k), s.va(k));
    std::map<int, Complex> out;
    for (Eigen::Index k = 0; k < kept.size(); ++k) out[net.y.bus_ids[static_cast<std::size_t>(k)]] = kept(k);
    if (!net.static_ids.empty()) {
        const CVector vs = net.recovery * kept;
        for (Eigen::Index k = 0; k < vs.size(); ++k) out[net.static_ids[static_cast<std::size_t>(k)]] = vs(k);
    }
    return out;
}

/// Apparent power |S| entering each in-service branch at its `from` end;
/// zero for out-of-service branches.
inline std::vector<double> branch_apparent_flows(const GridCase &c, const std::map<int, Complex> &volts) {
    std::vector<double> out;
    out.reserve(c.branches.size());
    for (const auto &br : c.branches) {
        if (!br.in_service) {
            out.push_back(0.0);
            continue;
        }
        const Complex vi = volts.at(br.from), vj = volts.at(br.to);
        const Complex ys = 1.0 / Complex(br.r, br.x);
        const Complex i = (vi - vj) * ys + vi * Complex(0.0, 0.5 * br.b_shunt);
        out.push_back(std::abs(vi * std::conj(i)));
    }
    return out;
}

} // namespace pmuwavc
