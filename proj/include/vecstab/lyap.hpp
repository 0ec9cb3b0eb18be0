#pragma once

// Isolated-subsystem Lyapunov machinery: quadratic synthesis with level-set
// scaling, boundary decay rates, and the norm-bound constants consumed by
// the comparison-matrix test.

#include "vecstab/model.hpp"
#include "vecstab/sos.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace vecstab {

struct LyapunovFn {
  int subsystem = 0;
  Polynomial V;
  int d = 2;               // lowest monomial degree, even and positive
  double gamma_max = 0.0;  // level the raw quadratic was divided by
  bool capped = false;     // level search stopped at the domain cap
  // Decay certificate for the unit level set of the scaled V.
  std::optional<ProveResult> scaling_cert;
};

// (sum of squares of vars)^(pow2/2); pow2 must be even.
inline Polynomial norm_power(UniverseRef u, std::span<const VarId> vars, int pow2) {
  if (pow2 < 0 || pow2 % 2 != 0)
    throw std::invalid_argument("norm_power: exponent must be even");
  Polynomial ss(u);
  for (VarId v : vars)
    ss += Polynomial::variable(u, v) * Polynomial::variable(u, v);
  Polynomial r = Polynomial::constant(u, 1.0);
  for (int k = 0; k < pow2 / 2; ++k) r = r * ss;
  return r;
}

// ---------------------------------------------------------------------------
// Quadratic synthesis

struct SynthOptions {
  double gamma_cap = 1e3;    // globally-contracting case stops here
  double gamma_floor = 1e-4; // below this the search gives up
  double bisect_tol = 1e-3;
  ProveOptions prove;
};

inline LyapunovFn synth_quadratic_lf(const Network& net, int id,
                                     const SynthOptions& opt = {}) {
  const Subsystem& s = net.subsystem(id);
  UniverseRef u = net.universe;
  int n = static_cast<int>(s.state_vars.size());

  Eigen::MatrixXd J = origin_jacobian(s);
  Eigen::EigenSolver<Eigen::MatrixXd> es(J);
  double maxre = es.eigenvalues().real().maxCoeff();
  if (!(maxre < 0))
    throw std::runtime_error("subsystem " + std::to_string(id) +
                             ": isolated Jacobian is not Hurwitz (max Re " +
                             std::to_string(maxre) + ")");

  // J^T P + P J = -I, vectorized row by row over the full n x n unknown.
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n * n, n * n);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n * n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      for (int c = 0; c < n; ++c) {
        A(a * n + b, c * n + b) += J(c, a);
        A(a * n + b, a * n + c) += J(c, b);
      }
      rhs(a * n + b) = (a == b) ? -1.0 : 0.0;
    }
  Eigen::VectorXd vecp = A.partialPivLu().solve(rhs);
  Eigen::MatrixXd P(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) P(a, b) = vecp(a * n + b);
  P = 0.5 * (P + P.transpose()).eval();
  if (Eigen::LLT<Eigen::MatrixXd>(P).info() != Eigen::Success)
    throw std::runtime_error("subsystem " + std::to_string(id) +
                             ": Lyapunov equation solution is not positive definite");

  Polynomial vt(u);
  for (int a = 0; a < n; ++a) {
    vt.add_term(Monomial::from_exponents({{s.state_vars[a].index, 2}}), P(a, a));
    for (int b = a + 1; b < n; ++b)
      vt.add_term(Monomial::from_exponents(
                      {{s.state_vars[a].index, 1}, {s.state_vars[b].index, 1}}),
                  2.0 * P(a, b));
  }
  Polynomial vdot = lie_derivative(vt, s.f, s.state_vars);

  // Certified-decay probe for the sublevel set {vt <= g}; an Unknown solver
  // verdict counts as uncertified so bisection stays on the proven side.
  auto certified = [&](double g) {
    ProveResult r = prove_nonneg_on(
        -1.0 * vdot, {{Polynomial::constant(u, g) - vt, false}}, opt.prove);
    return r.status == SosStatus::Feasible || r.status == SosStatus::Optimal;
  };

  double lo = 0, hi = 0;
  bool capped = false;
  double g0 = std::min(1.0, opt.gamma_cap);
  if (certified(g0)) {
    lo = g0;
    while (lo < opt.gamma_cap) {
      double next = std::min(lo * 2, opt.gamma_cap);
      if (certified(next)) {
        lo = next;
      } else {
        hi = next;
        break;
      }
    }
    if (hi == 0) capped = true;  // held all the way to the cap
  } else {
    double g = g0;
    while (true) {
      g *= 0.5;
      if (g < opt.gamma_floor)
        throw std::runtime_error(
            "subsystem " + std::to_string(id) +
            ": no certifiable decay level above the floor " +
            std::to_string(opt.gamma_floor));
      if (certified(g)) {
        lo = g;
        hi = 2 * g;
        break;
      }
    }
  }
  if (!capped)
    while (hi - lo > opt.bisect_tol) {
      double mid = 0.5 * (lo + hi);
      if (certified(mid))
        lo = mid;
      else
        hi = mid;
    }

  LyapunovFn lf;
  lf.subsystem = id;
  lf.d = 2;
  lf.gamma_max = lo;
  lf.capped = capped;
  lf.V = (1.0 / lo) * vt;
  // Same certificate rescaled; solved once more so the stored program talks
  // about the returned V and its unit level set.
  Polynomial vdot_scaled = lie_derivative(lf.V, s.f, s.state_vars);
  lf.scaling_cert = prove_nonneg_on(
      -1.0 * vdot_scaled, {{Polynomial::constant(u, 1.0) - lf.V, false}},
      opt.prove);
  return lf;
}

// ---------------------------------------------------------------------------
// Boundary decay rate

struct DecayOptions {
  double bisect_tol = 1e-3;
  double alpha_cap = 1e6;
  ProveOptions prove;
};

struct DecayRate {
  double alpha = 0.0;
  SosStatus status = SosStatus::Unknown;
  std::optional<ProveResult> certificate;  // solved at alpha - tol
};

// Largest alpha with grad(V)'f <= -alpha V on the level set {V = gamma},
// the level set treated as an equality with a sign-free multiplier.
inline DecayRate self_decay_rate(const LyapunovFn& lf,
                                 std::span<const Polynomial> f,
                                 std::span<const VarId> vars, double gamma,
                                 const DecayOptions& opt = {}) {
  if (!(gamma > 0) || gamma > 1.0 + 1e-9)
    throw std::invalid_argument("self_decay_rate: gamma must lie in (0, 1]");
  UniverseRef u = lf.V.universe();
  Polynomial vdot = lie_derivative(lf.V, f, vars);
  Polynomial level = Polynomial::constant(u, gamma) - lf.V;

  auto probe = [&](double alpha) {
    return prove_nonneg_on(-1.0 * vdot - alpha * lf.V, {{level, true}}, opt.prove);
  };

  DecayRate out;
  ProveResult r0 = probe(0.0);
  if (r0.status == SosStatus::Infeasible) {
    out.status = SosStatus::Infeasible;  // not even non-increase certifiable
    return out;
  }
  if (r0.status != SosStatus::Feasible && r0.status != SosStatus::Optimal) {
    out.status = SosStatus::Unknown;
    return out;
  }

  auto ok = [&](double alpha) {
    ProveResult r = probe(alpha);
    return r.status == SosStatus::Feasible || r.status == SosStatus::Optimal;
  };
  double lo = 0, hi = 1;
  while (hi < opt.alpha_cap && ok(hi)) {
    lo = hi;
    hi *= 2;
  }
  if (hi >= opt.alpha_cap) {
    out.alpha = lo;
    out.status = SosStatus::Feasible;
    out.certificate = probe(lo);
    return out;
  }
  while (hi - lo > opt.bisect_tol) {
    double mid = 0.5 * (lo + hi);
    if (ok(mid))
      lo = mid;
    else
      hi = mid;
  }
  out.alpha = lo;
  out.status = SosStatus::Feasible;
  out.certificate = probe(std::max(0.0, lo - opt.bisect_tol));
  return out;
}

// ---------------------------------------------------------------------------
// Level-set sampling (used for the post-solve audits)

// Point with V(x) <= gamma over `vars`: random direction, bisect the level
// crossing, then pull back radially. Entries are ordered like `vars`.
inline Eigen::VectorXd sample_level_set(const CompiledPoly& V,
                                        std::span<const VarId> vars, int nuniverse,
                                        double gamma, std::mt19937_64& rng) {
  int n = static_cast<int>(vars.size());
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> full(static_cast<size_t>(nuniverse), 0.0);
  auto value_at = [&](const Eigen::VectorXd& dir, double t) {
    for (int k = 0; k < n; ++k)
      full[static_cast<size_t>(vars[static_cast<size_t>(k)].index)] = t * dir(k);
    return V.eval(full.data());
  };
  while (true) {
    Eigen::VectorXd dir(n);
    for (int k = 0; k < n; ++k) dir(k) = gauss(rng);
    double nrm = dir.norm();
    if (nrm < 1e-12) continue;
    dir /= nrm;
    double T = 1.0;
    while (value_at(dir, T) < gamma && T < 1e8) T *= 2;
    if (T >= 1e8) continue;  // direction not usable, try another
    double a = 0, b = T;
    while (b - a > 1e-9 * std::max(1.0, gamma)) {
      double mid = 0.5 * (a + b);
      if (value_at(dir, mid) < gamma)
        a = mid;
      else
        b = mid;
    }
    double t = a * std::pow(unif(rng), 1.0 / n);
    for (int shrink = 0; value_at(dir, t) > gamma && shrink < 60; ++shrink)
      t *= 0.9;
    return t * dir;
  }
}

// ---------------------------------------------------------------------------
// Norm-bound constants

struct BoundOptions {
  int sigma_degree = -1;  // -1: even ceiling of the degree gap, capped at 4
  SosSolveOptions solve;
  int samples = 10000;
  std::uint64_t sample_seed = 0x5EED5EED;
  double sample_slack = 1e-6;
};

struct BoundConstants {
  int subsystem = 0;
  double gamma = 0;
  double eta1 = 0, eta2 = 0, eta3 = 0;
  std::map<int, double> zeta;  // source j -> gain, absent means zero
  std::map<std::string, SosStatus> solve_status;
  bool sampling_ok = false;
  double worst_violation = 0;

  double zeta_or_zero(int j) const {
    auto it = zeta.find(j);
    return it == zeta.end() ? 0.0 : it->second;
  }
};

namespace detail {
inline int bound_sigma_degree(int requested, int deg_p, int deg_k) {
  if (requested >= 0) return requested;
  int gap = std::max(0, deg_p - deg_k);
  if (gap % 2) ++gap;
  return std::min(gap, 4);
}
}  // namespace

// Tightest constants of the norm-bound envelope on the sublevel sets at
// `gamma`: eta1 |x|^d <= V <= eta2 |x|^d, grad(V)'f <= -eta3 |x|^d, and
// |grad(V)'g_ij| <= zeta_ij |x_i|^(d-1) |x_j| for neighbor states in their
// own sublevel sets. The gain is found through its square so the mixed
// norm power stays polynomial.
inline BoundConstants bound_constants(const Network& net, int id,
                                      const std::map<int, LyapunovFn>& lfs,
                                      double gamma,
                                      const BoundOptions& opt = {}) {
  const Subsystem& s = net.subsystem(id);
  UniverseRef u = net.universe;
  const LyapunovFn& lf = lfs.at(id);
  if (lf.d <= 0 || lf.d % 2 != 0)
    throw std::invalid_argument("bound_constants: d must be even and positive");

  BoundConstants out;
  out.subsystem = id;
  out.gamma = gamma;

  Polynomial w = norm_power(u, s.state_vars, lf.d);
  Polynomial level = Polynomial::constant(u, gamma) - lf.V;
  Polynomial vdot = lie_derivative(lf.V, s.f, s.state_vars);

  // Tightest eta with  base >= eta * w  (maximize) or  base <= eta * w
  // (minimize) on the sublevel set.
  auto eta_bound = [&](const Polynomial& base, bool maximize,
                       const std::string& label) {
    SosProgram prog(u);
    int eta = prog.add_scalar("eta");
    int sdeg = detail::bound_sigma_degree(opt.sigma_degree, base.degree(),
                                          lf.V.degree());
    int sig = prog.add_gram_poly(s.state_vars, sdeg, "sigma");
    SosExpr gap = maximize ? prog.lit(base) - prog.atom(eta) * prog.lit(w)
                           : prog.atom(eta) * prog.lit(w) - prog.lit(base);
    prog.require_sos(gap - prog.atom(sig) * prog.lit(level), label);
    prog.minimize({{eta, maximize ? -1.0 : 1.0}});
    SosResult res = solve(prog, opt.solve);
    out.solve_status[label] = res.status;
    return res.status == SosStatus::Optimal ? res.value_scalar(eta) : 0.0;
  };

  out.eta1 = eta_bound(lf.V, true, "eta1");
  out.eta2 = eta_bound(lf.V, false, "eta2");
  out.eta3 = eta_bound(-1.0 * vdot, true, "eta3");

  for (const Interaction* e : net.interactions_to(id)) {
    bool silent = true;
    for (const auto& p : e->g) silent = silent && p.is_zero();
    if (silent) {
      out.zeta[e->from] = 0.0;
      continue;
    }
    auto jt = lfs.find(e->from);
    if (jt == lfs.end())
      throw std::invalid_argument(
          "bound_constants: missing Lyapunov function for neighbor " +
          std::to_string(e->from));
    const Subsystem& sj = net.subsystem(e->from);
    Polynomial vg = lie_derivative(lf.V, e->g, s.state_vars);
    Polynomial mixed = norm_power(u, s.state_vars, 2 * (lf.d - 1)) *
                       norm_power(u, sj.state_vars, 2);
    Polynomial level_j = Polynomial::constant(u, gamma) - jt->second.V;

    std::vector<VarId> both = s.state_vars;
    both.insert(both.end(), sj.state_vars.begin(), sj.state_vars.end());
    std::sort(both.begin(), both.end());
    both.erase(std::unique(both.begin(), both.end()), both.end());

    SosProgram prog(u);
    int zsq = prog.add_nonneg_scalar("zeta_sq");
    Polynomial vg2 = vg * vg;
    int sdeg = detail::bound_sigma_degree(opt.sigma_degree, vg2.degree(),
                                          std::max(lf.V.degree(),
                                                   jt->second.V.degree()));
    int s1 = prog.add_gram_poly(both, sdeg, "sigma_own");
    int s2 = prog.add_gram_poly(both, sdeg, "sigma_nbr");
    std::string label = "zeta_" + std::to_string(e->from);
    prog.require_sos(prog.atom(zsq) * prog.lit(mixed) - prog.lit(vg2) -
                         prog.atom(s1) * prog.lit(level) -
                         prog.atom(s2) * prog.lit(level_j),
                     label);
    SosResult res = minimize_scalar(prog, zsq, opt.solve);
    out.solve_status[label] = res.status;
    out.zeta[e->from] =
        res.status == SosStatus::Optimal
            ? std::sqrt(std::max(0.0, res.value_scalar(zsq)))
            : 0.0;
  }

  // Sampling audit of every inequality the constants claim.
  std::mt19937_64 rng(opt.sample_seed ^ (0x9E3779B97F4A7C15ull * (id + 1)));
  CompiledPoly cV(lf.V), cw(w), cvdot(vdot);
  int nu = u->size();
  std::vector<double> full(static_cast<size_t>(nu), 0.0);
  auto fill = [&](std::span<const VarId> vars, const Eigen::VectorXd& x) {
    for (size_t k = 0; k < vars.size(); ++k)
      full[static_cast<size_t>(vars[k].index)] = x(static_cast<Eigen::Index>(k));
  };
  struct EdgeEval {
    int from;
    CompiledPoly vg;
    CompiledPoly vj;
    const Subsystem* sj;
  };
  std::vector<EdgeEval> edges;
  for (const Interaction* e : net.interactions_to(id)) {
    bool silent = true;
    for (const auto& p : e->g) silent = silent && p.is_zero();
    if (silent) continue;
    edges.push_back({e->from,
                     CompiledPoly(lie_derivative(lf.V, e->g, s.state_vars)),
                     CompiledPoly(lfs.at(e->from).V), &net.subsystem(e->from)});
  }
  double worst = 0;
  for (int k = 0; k < opt.samples; ++k) {
    Eigen::VectorXd xi = sample_level_set(cV, s.state_vars, nu, gamma, rng);
    std::fill(full.begin(), full.end(), 0.0);
    fill(s.state_vars, xi);
    double V = cV.eval(full.data());
    double W = cw.eval(full.data());
    double Vd = cvdot.eval(full.data());
    worst = std::max(worst, out.eta1 * W - V);
    worst = std::max(worst, V - out.eta2 * W);
    worst = std::max(worst, Vd + out.eta3 * W);
    double ni = xi.norm();
    for (auto& ee : edges) {
      Eigen::VectorXd xj =
          sample_level_set(ee.vj, ee.sj->state_vars, nu, gamma, rng);
      fill(ee.sj->state_vars, xj);
      double lhs = std::abs(ee.vg.eval(full.data()));
      double cap = out.zeta.at(ee.from) * std::pow(ni, lf.d - 1) * xj.norm();
      worst = std::max(worst, lhs - cap);
      fill(ee.sj->state_vars, Eigen::VectorXd::Zero(xj.size()));
    }
  }
  out.worst_violation = worst;
  out.sampling_ok = worst <= opt.sample_slack;
  return out;
}

// ---------------------------------------------------------------------------
// Serialization; polynomials are parsed against the network's universe.

inline nlohmann::json to_json(const LyapunovFn& lf) {
  nlohmann::json j;
  j["subsystem"] = lf.subsystem;
  j["d"] = lf.d;
  j["V"] = to_string(lf.V);
  j["gamma_max"] = lf.gamma_max;
  j["capped"] = lf.capped;
  return j;
}

inline LyapunovFn lf_from_json(const nlohmann::json& j, UniverseRef u) {
  LyapunovFn lf;
  lf.subsystem = j.at("subsystem").get<int>();
  lf.d = j.at("d").get<int>();
  if (lf.d <= 0 || lf.d % 2 != 0)
    throw std::runtime_error("lyapunov function: d must be even and positive");
  lf.V = parse_polynomial(j.at("V").get<std::string>(), u);
  if (std::abs(lf.V.coefficient(Monomial{})) > kCoeffZeroTol)
    throw std::runtime_error("lyapunov function: V(0) must be zero");
  lf.gamma_max = j.value("gamma_max", 0.0);
  lf.capped = j.value("capped", false);
  return lf;
}

inline void save_lfs(const std::map<int, LyapunovFn>& lfs,
                     const std::string& path) {
  nlohmann::json j;
  j["lfs"] = nlohmann::json::array();
  for (const auto& [id, lf] : lfs) j["lfs"].push_back(to_json(lf));
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

inline std::map<int, LyapunovFn> load_lfs(const std::string& path, UniverseRef u) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in);
  std::map<int, LyapunovFn> lfs;
  for (const auto& je : j.at("lfs")) {
    LyapunovFn lf = lf_from_json(je, u);
    lfs[lf.subsystem] = std::move(lf);
  }
  return lfs;
}

}  // namespace vecstab
