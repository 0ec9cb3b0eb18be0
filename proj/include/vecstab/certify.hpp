#pragma once

// Comparison-system constructions over a subsystem network: the classical
// norm-bound matrix, the SOS-direct matrix, the exponent-raising transform,
// and the two-phase distributed protocol (sequential and pairwise-parallel)
// that shrinks certified level sets round by round through neighbor messages.

#include "vecstab/lyap.hpp"
#include "vecstab/model.hpp"
#include "vecstab/poly.hpp"
#include "vecstab/sos.hpp"

#include <json.hpp>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vecstab {

// ---------------------------------------------------------------------------
// Comparison matrices

enum class CsProvenance { Traditional, Direct, PowerTransform, DiagonalStage };

inline const char* to_string(CsProvenance p) {
  switch (p) {
    case CsProvenance::Traditional: return "traditional";
    case CsProvenance::Direct: return "direct";
    case CsProvenance::PowerTransform: return "power-transform";
    case CsProvenance::DiagonalStage: return "diagonal-stage";
  }
  return "?";
}

// Metzler matrix whose rows bound the level dynamics of the subsystem
// functions on the sublevel sets listed in domain_gammas.
struct ComparisonMatrix {
  std::vector<int> ids;  // ascending subsystem ids, row/column order
  Eigen::MatrixXd a;
  Eigen::VectorXd domain_gammas;
  CsProvenance provenance = CsProvenance::Direct;

  int index_of(int id) const {
    auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) return -1;
    return static_cast<int>(it - ids.begin());
  }
  double row_sum(int r) const { return a.row(r).sum(); }
  double max_row_sum() const {
    double m = -std::numeric_limits<double>::infinity();
    for (int r = 0; r < a.rows(); ++r) m = std::max(m, row_sum(r));
    return m;
  }
  bool is_metzler(double tol = 0.0) const {
    for (int r = 0; r < a.rows(); ++r)
      for (int c = 0; c < a.cols(); ++c)
        if (r != c && a(r, c) < -tol) return false;
    return true;
  }
};

struct GershgorinVerdict {
  std::vector<bool> hurwitz_row;     // sum_j a_ij < 0, aligned with ids
  std::vector<bool> invariance_row;  // sum_j a_ij gamma_j < 0
  bool eigen_hurwitz = false;        // independent eigenvalue cross-check

  bool all_hurwitz() const {
    return std::all_of(hurwitz_row.begin(), hurwitz_row.end(),
                       [](bool b) { return b; });
  }
  bool all_invariance() const {
    return std::all_of(invariance_row.begin(), invariance_row.end(),
                       [](bool b) { return b; });
  }
};

// Row-sum tests plus an eigenvalue computation. For Metzler matrices the row
// conditions are sufficient for the eigenvalue one, never the other way
// around, which is what makes the pair a useful consistency probe.
inline GershgorinVerdict gershgorin_verdict(const ComparisonMatrix& A,
                                            const Eigen::VectorXd& gamma0) {
  int m = static_cast<int>(A.a.rows());
  if (!A.is_metzler())
    throw std::invalid_argument(
        "gershgorin_verdict: negative off-diagonal entry");
  if (gamma0.size() != m)
    throw std::invalid_argument("gershgorin_verdict: gamma vector size");
  GershgorinVerdict out;
  out.hurwitz_row.resize(static_cast<size_t>(m));
  out.invariance_row.resize(static_cast<size_t>(m));
  for (int r = 0; r < m; ++r) {
    out.hurwitz_row[static_cast<size_t>(r)] = A.row_sum(r) < 0;
    out.invariance_row[static_cast<size_t>(r)] = A.a.row(r).dot(gamma0) < 0;
  }
  Eigen::EigenSolver<Eigen::MatrixXd> es(A.a);
  out.eigen_hurwitz = es.eigenvalues().real().maxCoeff() < 0;
  return out;
}

// ---------------------------------------------------------------------------
// Classical construction from norm-bound constants

// Builds the comparison matrix for the rescaled functions V^(1/d) out of the
// envelope constants eta_1..eta_3 and the coupling gains zeta, all taken at
// one common level.
inline ComparisonMatrix traditional_single_cs(
    const Network& net, const std::map<int, LyapunovFn>& lfs,
    const std::map<int, BoundConstants>& consts) {
  ComparisonMatrix A;
  A.provenance = CsProvenance::Traditional;
  for (const auto& s : net.subsystems) A.ids.push_back(s.id);
  int m = static_cast<int>(A.ids.size());
  if (m == 0) throw std::invalid_argument("traditional_single_cs: empty network");

  double gamma = consts.at(A.ids.front()).gamma;
  std::map<int, double> et1, et2, et3;
  for (int id : A.ids) {
    const BoundConstants& c = consts.at(id);
    if (!(c.eta1 > 0) || !(c.eta2 > 0) || !(c.eta3 > 0))
      throw std::invalid_argument(
          "traditional_single_cs: nonpositive envelope constant for subsystem " +
          std::to_string(id));
    if (std::abs(c.gamma - gamma) > 1e-9 * std::max(1.0, std::abs(gamma)))
      throw std::invalid_argument(
          "traditional_single_cs: constants were not computed at a common level");
    double d = static_cast<double>(lfs.at(id).d);
    et1[id] = std::pow(c.eta1, 1.0 / d);
    et2[id] = std::pow(c.eta2, 1.0 / d);
    et3[id] = c.eta3 * et2[id] / (d * c.eta2);
  }

  A.a = Eigen::MatrixXd::Zero(m, m);
  A.domain_gammas = Eigen::VectorXd::Constant(m, gamma);
  for (int id : A.ids) {
    int r = A.index_of(id);
    A.a(r, r) = -et3[id] / et2[id];
    const BoundConstants& c = consts.at(id);
    double d = static_cast<double>(lfs.at(id).d);
    for (const auto& [j, zeta] : c.zeta) {
      if (j == id) continue;
      double zt = zeta * et1[id] / (d * c.eta1);
      A.a(r, A.index_of(j)) += zt / et1.at(j);
    }
  }
  return A;
}

// ---------------------------------------------------------------------------
// Exponent-raising transform

// Given a matrix for the d-th roots of the functions and positive pairwise
// ratios ct, produces the matrix for the functions themselves. The input rows
// must satisfy a_ii + sum_{j != i} a_ij ct_ij < 0; the output rows then
// satisfy the same inequality with ct_ij^d, and that identity is rechecked
// before returning.
inline ComparisonMatrix power_transform(const ComparisonMatrix& At,
                                        const Eigen::MatrixXd& ct, int d) {
  int m = static_cast<int>(At.a.rows());
  if (d < 1) throw std::invalid_argument("power_transform: d must be >= 1");
  if (ct.rows() != m || ct.cols() != m)
    throw std::invalid_argument("power_transform: ratio matrix size");
  for (int r = 0; r < m; ++r) {
    double row = At.a(r, r);
    for (int c = 0; c < m; ++c) {
      if (c == r) continue;
      if (!(ct(r, c) > 0))
        throw std::invalid_argument("power_transform: ratios must be positive");
      row += At.a(r, c) * ct(r, c);
    }
    if (!(row < 0))
      throw std::invalid_argument(
          "power_transform: weighted row sum is not negative at row " +
          std::to_string(r));
  }

  ComparisonMatrix out;
  out.ids = At.ids;
  out.domain_gammas = At.domain_gammas;
  out.provenance = CsProvenance::PowerTransform;
  out.a = Eigen::MatrixXd::Zero(m, m);
  for (int r = 0; r < m; ++r) {
    double cross = 0;
    for (int c = 0; c < m; ++c) {
      if (c == r) continue;
      cross += At.a(r, c) * ct(r, c);
      out.a(r, c) = At.a(r, c) * std::pow(ct(r, c), 1 - d);
    }
    out.a(r, r) = d * At.a(r, r) + (d - 1) * cross;
  }
  for (int r = 0; r < m; ++r) {
    double post = out.a(r, r);
    double pre = At.a(r, r);
    for (int c = 0; c < m; ++c) {
      if (c == r) continue;
      post += out.a(r, c) * std::pow(ct(r, c), d);
      pre += At.a(r, c) * ct(r, c);
    }
    double want = d * pre;
    if (std::abs(post - want) > 1e-12 * std::max(1.0, std::abs(want)))
      throw std::logic_error("power_transform: row identity drifted");
    if (!(post < 0)) throw std::logic_error("power_transform: output row sign");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Certificate records

// Every accepted solve is kept with its program so the identity can be
// re-expanded later and the claimed inequality re-sampled on its domain.
enum class ClaimKind {
  DirectRow,      // vdot_i <= sum_j a_ij V_j on the product of sublevel sets
  BoundaryDecay,  // vdot_i <= 0 on own boundary x neighbor sublevel sets
  AnnulusDecay,   // vdot_i <= a (V_i - g') between levels x neighbor sublevels
  EdgeBudget,     // w vf_i + vg_ij <= 0 on own boundary x one neighbor set
  EdgeAnnulus     // w vf_i + vg_ij <= a (V_i - g') between levels x one set
};

inline const char* to_string(ClaimKind k) {
  switch (k) {
    case ClaimKind::DirectRow: return "direct-row";
    case ClaimKind::BoundaryDecay: return "boundary-decay";
    case ClaimKind::AnnulusDecay: return "annulus-decay";
    case ClaimKind::EdgeBudget: return "edge-budget";
    case ClaimKind::EdgeAnnulus: return "edge-annulus";
  }
  return "?";
}

struct CertRecord {
  std::string where;
  ClaimKind kind = ClaimKind::DirectRow;
  int agent = 0;
  int edge = -1;  // source neighbor for pairwise solves
  int phase = 0;
  int round = 0;
  std::map<int, double> levels;  // levels in force during the solve, own id included
  double gamma_new = 0;          // accepted target level for annulus claims
  double a = 0;
  double w = 0;
  std::map<int, double> a_row;  // direct-construction rows
  std::optional<SosProgram> program;
  SosCertificate certificate;
};

namespace detail {

// drift of V_i along the full dynamics of subsystem i, coupling included
inline Polynomial total_vdot(const Network& net, const Polynomial& V, int id) {
  const Subsystem& s = net.subsystem(id);
  std::vector<Polynomial> field = net.coupling_sum(id);
  for (size_t k = 0; k < field.size(); ++k) field[k] += s.f[k];
  return lie_derivative(V, field, s.state_vars);
}

inline std::vector<int> sorted_neighbors(const Network& net, int id) {
  std::vector<int> nbr = net.neighborhoods.at(id);
  std::sort(nbr.begin(), nbr.end());
  return nbr;
}

inline bool sos_ok(SosStatus st) {
  return st == SosStatus::Feasible || st == SosStatus::Optimal;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SOS-direct construction

struct DirectOptions {
  bool minimize_rowsum = false;  // drop the row constraint, minimize the sum instead
  double eps_margin = 1e-6;
  int multiplier_degree = -1;  // -1: even ceiling of the degree gap, capped at 4
  SosSolveOptions solve;
};

struct DirectResult {
  bool feasible = false;
  std::vector<int> infeasible_ids;
  ComparisonMatrix A;
  std::map<int, SosStatus> row_status;
  std::vector<CertRecord> certificates;
};

// One SOS program per subsystem: decision scalars a_ii (free) and a_ij >= 0,
// one multiplier per neighbor, and the differential inequality as an SOS
// constraint. Both modes minimize the row sum so the returned entries are the
// strongest certified rates rather than an arbitrary interior point; the
// feasibility mode additionally keeps the negative-row-sum constraint so an
// infeasibility verdict means no Hurwitz-compatible row exists.
inline DirectResult direct_single_cs(const Network& net,
                                     const std::map<int, LyapunovFn>& lfs,
                                     const std::map<int, double>& gamma0,
                                     const DirectOptions& opt = {}) {
  UniverseRef u = net.universe;
  DirectResult out;
  out.A.provenance = CsProvenance::Direct;
  for (const auto& s : net.subsystems) out.A.ids.push_back(s.id);
  int m = static_cast<int>(out.A.ids.size());
  out.A.a = Eigen::MatrixXd::Zero(m, m);
  out.A.domain_gammas = Eigen::VectorXd::Zero(m);
  for (int id : out.A.ids) {
    double g = gamma0.at(id);
    if (!(g > 0) || g > 1.0)
      throw std::invalid_argument("direct_single_cs: levels must lie in (0,1]");
    out.A.domain_gammas(out.A.index_of(id)) = g;
  }

  for (const auto& s : net.subsystems) {
    int i = s.id;
    const Polynomial& Vi = lfs.at(i).V;
    Polynomial vdot = detail::total_vdot(net, Vi, i);
    std::vector<VarId> bar = net.neighborhood_vars(i);

    SosProgram prog(u);
    std::map<int, int> avar;
    SosExpr expr = prog.lit(-1.0 * vdot);
    for (int j : detail::sorted_neighbors(net, i)) {
      const Polynomial& Vj = lfs.at(j).V;
      int av = (j == i) ? prog.add_scalar("a_self")
                        : prog.add_nonneg_scalar("a_" + std::to_string(j));
      avar[j] = av;
      int mdeg =
          detail::bound_sigma_degree(opt.multiplier_degree, vdot.degree(), Vj.degree());
      int sv = prog.add_gram_poly(bar, mdeg, "sigma_" + std::to_string(j));
      Polynomial room = Polynomial::constant(u, gamma0.at(j)) - Vj;
      expr += prog.atom(av) * Vj - prog.atom(sv) * room;
    }
    prog.require_sos(std::move(expr), "row");

    SosExpr inv = prog.lit(-opt.eps_margin);
    for (const auto& [j, av] : avar) inv -= prog.atom(av) * gamma0.at(j);
    prog.require_sos(std::move(inv), "invariance_row");
    if (!opt.minimize_rowsum) {
      SosExpr hur = prog.lit(-opt.eps_margin);
      for (const auto& [j, av] : avar) hur -= prog.atom(av);
      prog.require_sos(std::move(hur), "hurwitz_row");
    }
    std::vector<std::pair<int, double>> objective;
    for (const auto& [j, av] : avar) objective.push_back({av, 1.0});
    prog.minimize(objective);

    SosResult r = solve(prog, opt.solve);
    out.row_status[i] = r.status;
    if (!detail::sos_ok(r.status)) {
      out.infeasible_ids.push_back(i);
      continue;
    }
    CertRecord rec;
    rec.kind = ClaimKind::DirectRow;
    rec.agent = i;
    rec.where = "direct row, subsystem " + std::to_string(i);
    int row = out.A.index_of(i);
    for (const auto& [j, av] : avar) {
      double val = r.value_scalar(av);
      out.A.a(row, out.A.index_of(j)) = val;
      rec.a_row[j] = val;
      rec.levels[j] = gamma0.at(j);
    }
    rec.program = prog;
    rec.certificate = *r.certificate;
    out.certificates.push_back(std::move(rec));
  }
  out.feasible = out.infeasible_ids.empty();
  return out;
}

// ---------------------------------------------------------------------------
// Distributed protocol: shared pieces

struct AgentMessage {
  int phase = 1;  // 1 grows the envelope, 2 shrinks it
  int round = 1;
  int sender = 0;
  double gamma = 0.0;
};

namespace detail {

inline std::optional<double> log_level(const std::vector<AgentMessage>& log,
                                       int phase, int round, int sender) {
  for (const auto& msg : log)
    if (msg.phase == phase && msg.round == round && msg.sender == sender)
      return msg.gamma;
  return std::nullopt;
}

// Level of `sender` as seen at the start of `round`. With a forced log the
// value is read from the recorded broadcasts instead of the live state, so a
// replay consumes exactly the messages the original run produced.
inline double view_level(const std::vector<AgentMessage>* forced, int phase,
                         int round, int sender,
                         const std::map<int, double>& start,
                         const std::map<int, double>& live) {
  if (!forced) return live.at(sender);
  if (round == 1) return start.at(sender);
  auto v = log_level(*forced, phase, round - 1, sender);
  if (!v)
    throw std::runtime_error("replay log is missing the broadcast of agent " +
                             std::to_string(sender) + " in phase " +
                             std::to_string(phase) + " round " +
                             std::to_string(round - 1));
  return *v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Phase 1: envelope growth

struct Phase1Options {
  double delta = 0.01;
  int max_rounds = 200;
  int multiplier_degree = -1;
  SosSolveOptions solve;
  const std::vector<AgentMessage>* forced_log = nullptr;
};

struct Phase1Result {
  bool ok = false;
  bool unknown = false;  // a solver gave up; the caller reports Inconclusive
  int failed_at = -1;    // subsystem whose envelope reached the unit level
  std::string message;
  std::map<int, double> gamma0;
  std::vector<std::map<int, double>> rounds;  // rounds[0] = v0
  std::map<int, std::map<int, double>> weights;  // parallel mode, final round
  std::vector<CertRecord> certificates;          // final round
  std::map<int, std::vector<VarId>> referenced;  // vars each agent's programs touched
  std::vector<AgentMessage> log;
};

namespace detail {

inline void merge_referenced(std::map<int, std::vector<VarId>>& dst, int agent,
                             const std::vector<VarId>& vars) {
  std::vector<VarId>& v = dst[agent];
  v.insert(v.end(), vars.begin(), vars.end());
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

inline void check_protocol_inputs(const Network& net,
                                  const std::map<int, LyapunovFn>& lfs,
                                  const std::map<int, double>& v0,
                                  const char* who) {
  for (const auto& s : net.subsystems) {
    if (!lfs.count(s.id))
      throw std::invalid_argument(std::string(who) +
                                  ": missing function for subsystem " +
                                  std::to_string(s.id));
    auto it = v0.find(s.id);
    if (it == v0.end())
      throw std::invalid_argument(std::string(who) +
                                  ": missing start level for subsystem " +
                                  std::to_string(s.id));
    if (!(it->second >= 0) || !(it->second < 1.0))
      throw std::invalid_argument(std::string(who) + ": start level of subsystem " +
                                  std::to_string(s.id) +
                                  " must lie in [0,1)");
  }
}

}  // namespace detail

// Synchronous rounds. Each agent raises its own trial level in steps of delta
// until its boundary-decay program over the neighborhood becomes feasible,
// then broadcasts; the phase settles once nobody moves. Growth past the unit
// level means the disturbance escapes the estimated region and the phase
// fails there.
inline Phase1Result phase1_envelope(const Network& net,
                                    const std::map<int, LyapunovFn>& lfs,
                                    const std::map<int, double>& v0,
                                    const Phase1Options& opt = {}) {
  detail::check_protocol_inputs(net, lfs, v0, "phase1_envelope");
  UniverseRef u = net.universe;
  Phase1Result out;
  std::map<int, double> cur = v0;
  out.rounds.push_back(cur);

  std::map<int, Polynomial> vdot;
  for (const auto& s : net.subsystems)
    vdot.emplace(s.id, detail::total_vdot(net, lfs.at(s.id).V, s.id));

  for (int round = 1; round <= opt.max_rounds; ++round) {
    std::map<int, double> next;
    std::vector<CertRecord> accepted;
    for (const auto& s : net.subsystems) {
      int i = s.id;
      double own =
          detail::view_level(opt.forced_log, 1, round, i, v0, cur);
      std::map<int, double> nbr;
      for (int j : detail::sorted_neighbors(net, i))
        if (j != i)
          nbr[j] = detail::view_level(opt.forced_log, 1, round, j, v0, cur);

      bool found = false;
      for (double trial = own; trial < 1.0 - 1e-12; trial += opt.delta) {
        std::vector<DomainConstraint> domain;
        domain.push_back({Polynomial::constant(u, trial) - lfs.at(i).V, true});
        for (const auto& [j, lvl] : nbr)
          domain.push_back({Polynomial::constant(u, lvl) - lfs.at(j).V, false});
        ProveOptions popt;
        popt.solve = opt.solve;
        if (opt.multiplier_degree >= 0)
          popt.multiplier_degrees.assign(domain.size(), opt.multiplier_degree);
        ProveResult pr = prove_nonneg_on(-1.0 * vdot.at(i), domain, popt);
        if (detail::sos_ok(pr.status)) {
          CertRecord rec;
          rec.kind = ClaimKind::BoundaryDecay;
          rec.agent = i;
          rec.phase = 1;
          rec.round = round;
          rec.gamma_new = trial;
          rec.levels = nbr;
          rec.levels[i] = trial;
          rec.where = "phase 1 round " + std::to_string(round) + ", subsystem " +
                      std::to_string(i);
          rec.program = pr.program;
          rec.certificate = *pr.certificate;
          detail::merge_referenced(out.referenced, i,
                                   rec.program->referenced_vars());
          accepted.push_back(std::move(rec));
          next[i] = trial;
          found = true;
          break;
        }
        if (pr.status != SosStatus::Infeasible) {
          out.unknown = true;
          out.message = "solver gave up while testing subsystem " +
                        std::to_string(i) + " at level " + std::to_string(trial);
          return out;
        }
      }
      if (!found) {
        out.failed_at = i;
        out.message = "envelope of subsystem " + std::to_string(i) +
                      " reached the unit level";
        return out;
      }
    }
    for (const auto& [id, g] : next)
      out.log.push_back({1, round, id, g});
    double move = 0;
    for (const auto& [id, g] : next) move = std::max(move, g - cur.at(id));
    out.rounds.push_back(next);
    out.certificates = std::move(accepted);
    cur = next;
    if (move < opt.delta / 2) {
      out.ok = true;
      out.gamma0 = cur;
      return out;
    }
  }
  out.message = "envelope did not settle within the round limit";
  return out;
}

namespace detail {

// Smallest cap in (0, hi] whose capped feasibility program solves. Minimizing
// runs tend to wedge exactly at the threshold they are converging to, so the
// fallback sticks to clean feasibility solves; a wedged or infeasible mid
// keeps the last certified cap. nullopt when even hi fails.
template <class Attempt>
std::optional<std::pair<SosResult, SosProgram>> bisect_scalar_cap(
    Attempt&& attempt, double hi, double tol) {
  auto top = attempt(hi);
  if (!sos_ok(top.first.status)) return std::nullopt;
  double lo = 0.0;
  while (hi - lo > tol) {
    double mid = 0.5 * (lo + hi);
    auto rp = attempt(mid);
    if (sos_ok(rp.first.status)) {
      hi = mid;
      top = std::move(rp);
    } else {
      lo = mid;
    }
  }
  return top;
}

inline constexpr double kWeightCapTol = 1e-2;

}  // namespace detail

// Pairwise variant: per neighbor, minimize the share of the self-decay budget
// that edge needs, and accept the trial level once the shares sum below one.
// Agents without in-neighbors keep their level untouched.
inline Phase1Result phase1_parallel(const Network& net,
                                    const std::map<int, LyapunovFn>& lfs,
                                    const std::map<int, double>& v0,
                                    const Phase1Options& opt = {}) {
  detail::check_protocol_inputs(net, lfs, v0, "phase1_parallel");
  UniverseRef u = net.universe;
  Phase1Result out;
  std::map<int, double> cur = v0;
  out.rounds.push_back(cur);

  for (int round = 1; round <= opt.max_rounds; ++round) {
    std::map<int, double> next;
    std::vector<CertRecord> accepted;
    std::map<int, std::map<int, double>> weights;
    for (const auto& s : net.subsystems) {
      int i = s.id;
      const Polynomial& Vi = lfs.at(i).V;
      Polynomial vf = lie_derivative(Vi, s.f, s.state_vars);
      double own = detail::view_level(opt.forced_log, 1, round, i, v0, cur);
      auto edges = net.interactions_to(i);
      if (edges.empty()) {
        next[i] = own;
        continue;
      }

      bool found = false;
      for (double trial = own; trial < 1.0 - 1e-12; trial += opt.delta) {
        double budget = 0;
        bool edge_fail = false;
        std::vector<CertRecord> trial_recs;
        std::map<int, double> trial_w;
        for (const Interaction* e : edges) {
          int j = e->from;
          double lvlj = detail::view_level(opt.forced_log, 1, round, j, v0, cur);
          const Polynomial& Vj = lfs.at(j).V;
          Polynomial vg = lie_derivative(Vi, e->g, s.state_vars);
          std::vector<VarId> pair = s.state_vars;
          const auto& jv = net.subsystem(j).state_vars;
          pair.insert(pair.end(), jv.begin(), jv.end());
          std::sort(pair.begin(), pair.end());
          pair.erase(std::unique(pair.begin(), pair.end()), pair.end());

          int degp = std::max(vf.degree(), vg.degree());
          auto build = [&](bool minimize,
                           double cap) -> std::pair<SosResult, SosProgram> {
            SosProgram prog(u);
            int w = prog.add_nonneg_scalar("w");
            int lam = prog.add_free_poly(
                pair,
                detail::bound_sigma_degree(opt.multiplier_degree, degp,
                                           Vi.degree()),
                "boundary");
            int sig = prog.add_gram_poly(
                pair,
                detail::bound_sigma_degree(opt.multiplier_degree, degp,
                                           Vj.degree()),
                "sigma_" + std::to_string(j));
            SosExpr ex = prog.lit(-1.0 * vg) - prog.atom(w) * vf -
                         prog.atom(lam) * (Polynomial::constant(u, trial) - Vi) -
                         prog.atom(sig) * (Polynomial::constant(u, lvlj) - Vj);
            prog.require_sos(std::move(ex), "edge");
            if (cap > 0)
              prog.require_sos(prog.lit(cap) - prog.atom(w), "w_cap");
            if (minimize) prog.minimize({{w, 1.0}});
            return {solve(prog, opt.solve), std::move(prog)};
          };
          auto [r, prog] = build(true, 0.0);
          if (r.status != SosStatus::Infeasible && !detail::sos_ok(r.status)) {
            // budget shares only matter below one, so a capped feasibility
            // search recovers a usable weight when the minimizer wedges
            auto capped = detail::bisect_scalar_cap(
                [&](double cap) { return build(false, cap); }, 1.0,
                detail::kWeightCapTol);
            if (!capped) {
              edge_fail = true;
              break;
            }
            r = std::move(capped->first);
            prog = std::move(capped->second);
          }
          if (r.status == SosStatus::Infeasible) {
            edge_fail = true;
            break;
          }
          if (!detail::sos_ok(r.status)) {
            out.unknown = true;
            out.message = "solver gave up on edge " + std::to_string(j) +
                          " -> " + std::to_string(i) + " at level " +
                          std::to_string(trial);
            return out;
          }
          double wv = r.value_scalar(0);
          budget += wv;
          trial_w[j] = wv;
          CertRecord rec;
          rec.kind = ClaimKind::EdgeBudget;
          rec.agent = i;
          rec.edge = j;
          rec.phase = 1;
          rec.round = round;
          rec.gamma_new = trial;
          rec.levels[i] = trial;
          rec.levels[j] = lvlj;
          rec.w = wv;
          rec.where = "phase 1 round " + std::to_string(round) + ", edge " +
                      std::to_string(j) + " -> " + std::to_string(i);
          rec.program = prog;
          rec.certificate = *r.certificate;
          detail::merge_referenced(out.referenced, i,
                                   rec.program->referenced_vars());
          trial_recs.push_back(std::move(rec));
        }
        if (!edge_fail && budget < 1.0) {
          next[i] = trial;
          weights[i] = std::move(trial_w);
          for (auto& rec : trial_recs) accepted.push_back(std::move(rec));
          found = true;
          break;
        }
      }
      if (!found) {
        out.failed_at = i;
        out.message = "envelope of subsystem " + std::to_string(i) +
                      " reached the unit level";
        return out;
      }
    }
    for (const auto& [id, g] : next)
      out.log.push_back({1, round, id, g});
    double move = 0;
    for (const auto& [id, g] : next) move = std::max(move, g - cur.at(id));
    out.rounds.push_back(next);
    out.certificates = std::move(accepted);
    out.weights = std::move(weights);
    cur = next;
    if (move < opt.delta / 2) {
      out.ok = true;
      out.gamma0 = cur;
      return out;
    }
  }
  out.message = "envelope did not settle within the round limit";
  return out;
}

// ---------------------------------------------------------------------------
// Phase 2: level shrinking

struct Phase2Options {
  double tol = 1e-3;
  double eps_margin = 1e-6;
  // keeps the rate variable compact; without a floor the multipliers admit
  // rays along which a_ii drifts without changing anything on the domain
  double rate_cap = 1e3;
  int max_rounds = 200;
  int multiplier_degree = -1;
  SosSolveOptions solve;
  // boundary search used when the sequence stops above zero
  int obstruction_restarts = 48;
  int obstruction_iters = 80;
  std::uint64_t obstruction_seed = 20260822;
  const std::vector<AgentMessage>* forced_log = nullptr;
};

struct Phase2Step {
  std::map<int, double> gamma;
  std::map<int, double> a_ii;  // absent where no fresh certificate was produced
  std::map<int, std::map<int, double>> weights;  // parallel mode
  std::set<int> stalled;
};

struct LevelSequence {
  std::vector<Phase2Step> steps;  // steps[0] holds the start levels only
  std::map<int, double> gamma_star;
  bool reached_zero = false;
  bool any_stall = false;
  // some solve gave up even after the objective-free retry; the affected
  // target was skipped or held, so no accepted certificate depends on it
  bool unknown = false;
  std::string message;
  // agents whose stalled boundary carries a sampled point with vdot >= 0,
  // i.e. the stall is a property of the functions and not of the relaxation
  std::set<int> limit_obstruction;
  std::map<int, double> boundary_sup;  // best ascent value per checked agent
  std::vector<CertRecord> certificates;  // accepted solves, all rounds
  std::map<int, std::vector<VarId>> referenced;
  std::vector<AgentMessage> log;
};

namespace detail {

// scale the coordinate block `vars` of `full` so that V lands on `gamma`
inline void rescale_to_level(const CompiledPoly& V, std::span<const VarId> vars,
                             std::vector<double>& full, double gamma) {
  if (gamma <= 0) {
    for (VarId v : vars) full[static_cast<size_t>(v.index)] = 0;
    return;
  }
  auto value_at = [&](double t) {
    std::vector<double> tmp = full;
    for (VarId v : vars) tmp[static_cast<size_t>(v.index)] *= t;
    return V.eval(tmp.data());
  };
  double norm2 = 0;
  for (VarId v : vars) {
    double c = full[static_cast<size_t>(v.index)];
    norm2 += c * c;
  }
  if (norm2 < 1e-300) return;  // no direction to scale along
  double hi = 1.0;
  while (value_at(hi) < gamma && hi < 1e8) hi *= 2;
  double lo = 0;
  for (int it = 0; it < 80 && hi - lo > 1e-12 * std::max(1.0, hi); ++it) {
    double mid = 0.5 * (lo + hi);
    (value_at(mid) < gamma ? lo : hi) = mid;
  }
  for (VarId v : vars) full[static_cast<size_t>(v.index)] *= hi;
}

// Approximate sup of vdot_i over (own boundary at levels[i]) x (neighbor
// sublevel sets): random starts followed by projected gradient ascent. Used
// to decide whether a stalled level is a genuine obstruction.
inline double boundary_sup_vdot(const Network& net,
                                const std::map<int, LyapunovFn>& lfs, int id,
                                const std::map<int, double>& levels,
                                int restarts, int iters, std::mt19937_64& rng) {
  UniverseRef u = net.universe;
  int nu = u->size();
  const Subsystem& s = net.subsystem(id);
  Polynomial vdot = total_vdot(net, lfs.at(id).V, id);
  CompiledPoly cvd(vdot);
  std::vector<VarId> bar = net.neighborhood_vars(id);
  std::vector<CompiledPoly> grad;
  grad.reserve(bar.size());
  for (VarId v : bar) grad.emplace_back(vdot.derivative(v));

  struct Block {
    int j;
    CompiledPoly V;
    std::vector<VarId> vars;
    double gamma;
  };
  std::vector<Block> blocks;
  for (int j : sorted_neighbors(net, id))
    blocks.push_back({j, CompiledPoly(lfs.at(j).V), net.subsystem(j).state_vars,
                      levels.at(j)});

  std::normal_distribution<double> gauss;
  double best = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    std::vector<double> x(static_cast<size_t>(nu), 0.0);
    for (const Block& b : blocks) {
      for (VarId v : b.vars) x[static_cast<size_t>(v.index)] = gauss(rng);
      rescale_to_level(b.V, b.vars, x, b.gamma);
      if (b.j != id) {
        // interior point, not just the rim
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        double t = std::pow(unif(rng), 1.0 / std::max<size_t>(1, b.vars.size()));
        for (VarId v : b.vars) x[static_cast<size_t>(v.index)] *= t;
      }
    }
    auto project = [&](std::vector<double>& p) {
      for (const Block& b : blocks) {
        if (b.j == id) {
          rescale_to_level(b.V, b.vars, p, b.gamma);
        } else if (b.V.eval(p.data()) > b.gamma) {
          rescale_to_level(b.V, b.vars, p, b.gamma);
        }
      }
    };
    project(x);
    double fx = cvd.eval(x.data());
    double step = 0.1;
    for (int it = 0; it < iters; ++it) {
      std::vector<double> cand = x;
      double gn = 0;
      for (size_t k = 0; k < bar.size(); ++k) {
        double g = grad[k].eval(x.data());
        cand[static_cast<size_t>(bar[k].index)] += step * g;
        gn += g * g;
      }
      if (gn < 1e-24) break;
      project(cand);
      double fc = cvd.eval(cand.data());
      if (fc > fx) {
        x = std::move(cand);
        fx = fc;
        step *= 1.3;
      } else {
        step *= 0.5;
        if (step < 1e-9) break;
      }
    }
    best = std::max(best, fx);
  }
  return best;
}

inline constexpr double kObstructionTol = 1e-7;

}  // namespace detail

// Each round every agent bisects for the smallest target level it can still
// certify against its neighbors' previous levels, trying zero outright first.
// An agent whose program is infeasible even at its current level stalls and
// rebroadcasts it. After the sequence settles above zero, the stalled
// boundaries are probed by ascent sampling to tell a genuine limit from a
// relaxation artifact.
inline LevelSequence phase2_diagonal(const Network& net,
                                     const std::map<int, LyapunovFn>& lfs,
                                     const std::map<int, double>& gamma0,
                                     const Phase2Options& opt = {}) {
  UniverseRef u = net.universe;
  LevelSequence out;
  std::map<int, double> cur = gamma0;
  for (const auto& s : net.subsystems)
    if (!gamma0.count(s.id) || !lfs.count(s.id))
      throw std::invalid_argument("phase2_diagonal: missing data for subsystem " +
                                  std::to_string(s.id));
  out.steps.push_back({cur, {}, {}, {}});

  std::map<int, Polynomial> vdot;
  for (const auto& s : net.subsystems)
    vdot.emplace(s.id, detail::total_vdot(net, lfs.at(s.id).V, s.id));

  for (int round = 1; round <= opt.max_rounds; ++round) {
    Phase2Step step;
    std::vector<CertRecord> accepted;
    for (const auto& s : net.subsystems) {
      int i = s.id;
      const Polynomial& Vi = lfs.at(i).V;
      double own = detail::view_level(opt.forced_log, 2, round, i, gamma0, cur);
      if (own == 0.0) {
        step.gamma[i] = 0.0;
        continue;
      }
      std::map<int, double> view;
      for (int j : detail::sorted_neighbors(net, i))
        view[j] = detail::view_level(opt.forced_log, 2, round, j, gamma0, cur);

      // target == own is the stall probe and runs without an objective; a
      // genuine shrink minimizes a_ii so the recorded rate is the strongest
      // one the relaxation supports
      auto attempt = [&](double target, bool minimize)
          -> std::pair<SosResult, SosProgram> {
        SosProgram prog(u);
        int av = prog.add_scalar("a_self");
        std::vector<VarId> bar = net.neighborhood_vars(i);
        int mdeg = detail::bound_sigma_degree(opt.multiplier_degree,
                                      vdot.at(i).degree(), Vi.degree());
        int lower = prog.add_gram_poly(bar, mdeg, "sigma_floor");
        Polynomial inner = Vi - Polynomial::constant(u, target);
        SosExpr ex = prog.lit(-1.0 * vdot.at(i)) +
                     (prog.atom(av) - prog.atom(lower)) * inner;
        for (const auto& [j, lvl] : view) {
          const Polynomial& Vj = lfs.at(j).V;
          int sj = prog.add_gram_poly(
              bar,
              detail::bound_sigma_degree(opt.multiplier_degree, vdot.at(i).degree(),
                                 Vj.degree()),
              "sigma_" + std::to_string(j));
          ex += prog.atom(sj) * (Vj - Polynomial::constant(u, lvl));
        }
        prog.require_sos(std::move(ex), "shrink");
        prog.require_sos(prog.lit(-opt.eps_margin) - prog.atom(av), "rate_sign");
        prog.require_sos(prog.lit(opt.rate_cap) + prog.atom(av), "rate_floor");
        if (minimize) prog.minimize({{av, 1.0}});
        SosResult r = solve(prog, opt.solve);
        if (detail::sos_ok(r.status))
          detail::merge_referenced(out.referenced, i, prog.referenced_vars());
        return {std::move(r), std::move(prog)};
      };
      auto record = [&](double target, const SosResult& r,
                        const SosProgram& prog) {
        CertRecord rec;
        rec.kind = ClaimKind::AnnulusDecay;
        rec.agent = i;
        rec.phase = 2;
        rec.round = round;
        rec.gamma_new = target;
        rec.levels = view;
        rec.a = r.value_scalar(0);
        rec.where = "phase 2 round " + std::to_string(round) + ", subsystem " +
                    std::to_string(i);
        rec.program = prog;
        rec.certificate = *r.certificate;
        step.gamma[i] = target;
        step.a_ii[i] = rec.a;
        accepted.push_back(std::move(rec));
      };
      auto note_gaveup = [&](const SosResult& r, double target) {
        out.unknown = true;
        out.message = "solver gave up on subsystem " + std::to_string(i) +
                      " at target " + std::to_string(target) + ": " + r.message;
      };
      // A degenerate optimal face can wedge the minimizing run even though the
      // level itself is certifiable; any feasible rate certifies it, so retry
      // without the objective before giving up on a target.
      auto attempt_min = [&](double target) {
        auto rp = attempt(target, true);
        if (rp.first.status != SosStatus::Infeasible &&
            !detail::sos_ok(rp.first.status))
          rp = attempt(target, false);
        return rp;
      };

      auto [r0, p0] = attempt_min(0.0);
      if (detail::sos_ok(r0.status)) {
        record(0.0, r0, p0);
        continue;
      }
      if (r0.status != SosStatus::Infeasible) note_gaveup(r0, 0.0);
      auto [rk, pk] = attempt(own, false);
      if (!detail::sos_ok(rk.status)) {
        // certified infeasibility at the current level is a stall; an
        // unresolved solve is held the same way, claiming nothing new
        if (rk.status != SosStatus::Infeasible) note_gaveup(rk, own);
        step.gamma[i] = own;
        step.stalled.insert(i);
        out.any_stall = true;
        continue;
      }
      double lo = 0.0, hi = own;
      SosResult best = std::move(rk);
      SosProgram bestp = std::move(pk);
      while (hi - lo >= opt.tol) {
        double mid = 0.5 * (lo + hi);
        auto [rm, pm] = attempt_min(mid);
        if (detail::sos_ok(rm.status)) {
          hi = mid;
          best = std::move(rm);
          bestp = std::move(pm);
        } else {
          if (rm.status != SosStatus::Infeasible) note_gaveup(rm, mid);
          lo = mid;
        }
      }
      record(hi, best, bestp);
    }

    for (const auto& [id, g] : step.gamma)
      out.log.push_back({2, round, id, g});
    double move = 0;
    bool all_zero = true;
    for (const auto& [id, g] : step.gamma) {
      move = std::max(move, cur.at(id) - g);
      all_zero = all_zero && g == 0.0;
    }
    cur = step.gamma;
    out.steps.push_back(step);
    for (auto& rec : accepted) out.certificates.push_back(std::move(rec));
    if (all_zero || move < opt.tol) break;
  }

  out.gamma_star = cur;
  out.reached_zero = std::all_of(cur.begin(), cur.end(),
                                 [](const auto& kv) { return kv.second == 0.0; });
  if (!out.reached_zero) {
    std::mt19937_64 rng(opt.obstruction_seed);
    for (const auto& [id, g] : cur) {
      if (g == 0.0) continue;
      double sup = detail::boundary_sup_vdot(net, lfs, id, cur,
                                             opt.obstruction_restarts,
                                             opt.obstruction_iters, rng);
      out.boundary_sup[id] = sup;
      if (sup >= -detail::kObstructionTol) out.limit_obstruction.insert(id);
    }
  }
  return out;
}

// Pairwise variant of the shrink phase. Edges are certified one at a time
// with a shared budget on the self-decay weight; an agent without
// in-neighbors falls back to the plain single-agent program, which is what
// the pairwise decomposition degenerates to when the sum over edges is empty.
inline LevelSequence phase2_parallel(const Network& net,
                                     const std::map<int, LyapunovFn>& lfs,
                                     const std::map<int, double>& gamma0,
                                     const Phase2Options& opt = {}) {
  UniverseRef u = net.universe;
  LevelSequence out;
  std::map<int, double> cur = gamma0;
  for (const auto& s : net.subsystems)
    if (!gamma0.count(s.id) || !lfs.count(s.id))
      throw std::invalid_argument("phase2_parallel: missing data for subsystem " +
                                  std::to_string(s.id));
  out.steps.push_back({cur, {}, {}, {}});

  for (int round = 1; round <= opt.max_rounds; ++round) {
    Phase2Step step;
    std::vector<CertRecord> accepted;
    for (const auto& s : net.subsystems) {
      int i = s.id;
      const Polynomial& Vi = lfs.at(i).V;
      Polynomial vf = lie_derivative(Vi, s.f, s.state_vars);
      double own = detail::view_level(opt.forced_log, 2, round, i, gamma0, cur);
      if (own == 0.0) {
        step.gamma[i] = 0.0;
        continue;
      }
      auto edges = net.interactions_to(i);
      std::map<int, double> view;
      for (int j : detail::sorted_neighbors(net, i))
        view[j] = detail::view_level(opt.forced_log, 2, round, j, gamma0, cur);

      if (edges.empty()) {
        // single-agent program, same as the diagonal phase
        auto attempt = [&](double target, bool minimize)
            -> std::pair<SosResult, SosProgram> {
          SosProgram prog(u);
          int av = prog.add_scalar("a_self");
          int mdeg = detail::bound_sigma_degree(opt.multiplier_degree, vf.degree(),
                                        Vi.degree());
          int lower = prog.add_gram_poly(s.state_vars, mdeg, "sigma_floor");
          int upper = prog.add_gram_poly(s.state_vars, mdeg, "sigma_self");
          Polynomial inner = Vi - Polynomial::constant(u, target);
          SosExpr ex = prog.lit(-1.0 * vf) +
                       (prog.atom(av) - prog.atom(lower)) * inner +
                       prog.atom(upper) * (Vi - Polynomial::constant(u, own));
          prog.require_sos(std::move(ex), "shrink");
          prog.require_sos(prog.lit(-opt.eps_margin) - prog.atom(av),
                           "rate_sign");
          prog.require_sos(prog.lit(opt.rate_cap) + prog.atom(av), "rate_floor");
          if (minimize) prog.minimize({{av, 1.0}});
          SosResult r = solve(prog, opt.solve);
          if (detail::sos_ok(r.status))
            detail::merge_referenced(out.referenced, i, prog.referenced_vars());
          return {std::move(r), std::move(prog)};
        };
        auto record = [&](double target, const SosResult& r,
                          const SosProgram& prog) {
          CertRecord rec;
          rec.kind = ClaimKind::AnnulusDecay;
          rec.agent = i;
          rec.phase = 2;
          rec.round = round;
          rec.gamma_new = target;
          rec.levels = view;
          rec.a = r.value_scalar(0);
          rec.where = "phase 2 round " + std::to_string(round) +
                      ", subsystem " + std::to_string(i);
          rec.program = prog;
          rec.certificate = *r.certificate;
          step.gamma[i] = target;
          step.a_ii[i] = rec.a;
          accepted.push_back(std::move(rec));
        };
        auto note_gaveup = [&] {
          out.unknown = true;
          out.message = "solver gave up on subsystem " + std::to_string(i);
        };
        // see phase2_diagonal: retry a wedged minimizing run without the
        // objective before discarding the target
        auto attempt_min = [&](double target) {
          auto rp = attempt(target, true);
          if (rp.first.status != SosStatus::Infeasible &&
              !detail::sos_ok(rp.first.status))
            rp = attempt(target, false);
          return rp;
        };
        auto [r0, p0] = attempt_min(0.0);
        if (detail::sos_ok(r0.status)) {
          record(0.0, r0, p0);
          continue;
        }
        if (r0.status != SosStatus::Infeasible) note_gaveup();
        auto [rk, pk] = attempt(own, false);
        if (!detail::sos_ok(rk.status)) {
          if (rk.status != SosStatus::Infeasible) note_gaveup();
          step.gamma[i] = own;
          step.stalled.insert(i);
          out.any_stall = true;
          continue;
        }
        double lo = 0.0, hi = own;
        SosResult best = std::move(rk);
        SosProgram bestp = std::move(pk);
        while (hi - lo >= opt.tol) {
          double mid = 0.5 * (lo + hi);
          auto [rm, pm] = attempt_min(mid);
          if (detail::sos_ok(rm.status)) {
            hi = mid;
            best = std::move(rm);
            bestp = std::move(pm);
          } else {
            if (rm.status != SosStatus::Infeasible) note_gaveup();
            lo = mid;
          }
        }
        record(hi, best, bestp);
        continue;
      }

      // per-edge weight minimization; a trial level is accepted when the
      // weights sum below one
      struct EdgeOut {
        double w = 0, a = 0;
        CertRecord rec;
      };
      auto try_level = [&](double target,
                           std::vector<EdgeOut>* keep) -> bool {
        double budget = 0;
        std::vector<EdgeOut> outs;
        for (const Interaction* e : edges) {
          int j = e->from;
          const Polynomial& Vj = lfs.at(j).V;
          Polynomial vg = lie_derivative(Vi, e->g, s.state_vars);
          std::vector<VarId> pair = s.state_vars;
          const auto& jv = net.subsystem(j).state_vars;
          pair.insert(pair.end(), jv.begin(), jv.end());
          std::sort(pair.begin(), pair.end());
          pair.erase(std::unique(pair.begin(), pair.end()), pair.end());
          int degp = std::max(vf.degree(), vg.degree());

          auto build = [&](bool minimize,
                           double cap) -> std::pair<SosResult, SosProgram> {
            SosProgram prog(u);
            int w = prog.add_nonneg_scalar("w");
            int av = prog.add_scalar("a_self");
            int mdeg = detail::bound_sigma_degree(opt.multiplier_degree, degp,
                                                  Vi.degree());
            int lower = prog.add_gram_poly(pair, mdeg, "sigma_floor");
            int upper = prog.add_gram_poly(pair, mdeg, "sigma_self");
            int sj = prog.add_gram_poly(
                pair,
                detail::bound_sigma_degree(opt.multiplier_degree, degp,
                                           Vj.degree()),
                "sigma_" + std::to_string(j));
            Polynomial inner = Vi - Polynomial::constant(u, target);
            SosExpr ex = prog.lit(-1.0 * vg) - prog.atom(w) * vf +
                         (prog.atom(av) - prog.atom(lower)) * inner +
                         prog.atom(upper) *
                             (Vi - Polynomial::constant(u, view.at(i))) +
                         prog.atom(sj) *
                             (Vj - Polynomial::constant(u, view.at(j)));
            prog.require_sos(std::move(ex), "edge");
            prog.require_sos(prog.lit(-opt.eps_margin) - prog.atom(av),
                             "rate_sign");
            prog.require_sos(prog.lit(opt.rate_cap) + prog.atom(av),
                             "rate_floor");
            if (cap > 0)
              prog.require_sos(prog.lit(cap) - prog.atom(w), "w_cap");
            if (minimize) prog.minimize({{w, 1.0}});
            return {solve(prog, opt.solve), std::move(prog)};
          };
          auto [r, prog] = build(true, 0.0);
          if (r.status != SosStatus::Infeasible && !detail::sos_ok(r.status)) {
            auto capped = detail::bisect_scalar_cap(
                [&](double cap) { return build(false, cap); }, 1.0,
                detail::kWeightCapTol);
            if (!capped) return false;
            r = std::move(capped->first);
            prog = std::move(capped->second);
          }
          if (r.status == SosStatus::Infeasible) return false;
          if (!detail::sos_ok(r.status)) {
            out.unknown = true;
            out.message = "solver gave up on edge " + std::to_string(j) +
                          " -> " + std::to_string(i);
            return false;
          }
          detail::merge_referenced(out.referenced, i, prog.referenced_vars());
          EdgeOut eo;
          eo.w = r.value_scalar(0);
          eo.a = r.value_scalar(1);
          budget += eo.w;
          eo.rec.kind = ClaimKind::EdgeAnnulus;
          eo.rec.agent = i;
          eo.rec.edge = j;
          eo.rec.phase = 2;
          eo.rec.round = round;
          eo.rec.gamma_new = target;
          eo.rec.levels[i] = view.at(i);
          eo.rec.levels[j] = view.at(j);
          eo.rec.a = eo.a;
          eo.rec.w = eo.w;
          eo.rec.where = "phase 2 round " + std::to_string(round) + ", edge " +
                         std::to_string(j) + " -> " + std::to_string(i);
          eo.rec.program = std::move(prog);
          eo.rec.certificate = *r.certificate;
          outs.push_back(std::move(eo));
        }
        if (budget >= 1.0) return false;
        if (keep) *keep = std::move(outs);
        return true;
      };

      std::vector<EdgeOut> kept;
      if (try_level(0.0, &kept)) {
        step.gamma[i] = 0.0;
      } else if (!try_level(own, &kept)) {
        step.gamma[i] = own;
        step.stalled.insert(i);
        out.any_stall = true;
        continue;
      } else {
        double lo = 0.0, hi = own;
        while (hi - lo >= opt.tol) {
          double mid = 0.5 * (lo + hi);
          std::vector<EdgeOut> mid_keep;
          if (try_level(mid, &mid_keep)) {
            hi = mid;
            kept = std::move(mid_keep);
          } else {
            lo = mid;
          }
        }
        step.gamma[i] = hi;
      }
      double asum = 0;
      for (auto& eo : kept) {
        step.weights[i][eo.rec.edge] = eo.w;
        asum += eo.a;
        accepted.push_back(std::move(eo.rec));
      }
      // aggregated diagonal rate of the pairwise decomposition
      step.a_ii[i] = asum;
    }

    for (const auto& [id, g] : step.gamma)
      out.log.push_back({2, round, id, g});
    double move = 0;
    bool all_zero = true;
    for (const auto& [id, g] : step.gamma) {
      move = std::max(move, cur.at(id) - g);
      all_zero = all_zero && g == 0.0;
    }
    cur = step.gamma;
    out.steps.push_back(step);
    for (auto& rec : accepted) out.certificates.push_back(std::move(rec));
    if (all_zero || move < opt.tol) break;
  }

  out.gamma_star = cur;
  out.reached_zero = std::all_of(cur.begin(), cur.end(),
                                 [](const auto& kv) { return kv.second == 0.0; });
  if (!out.reached_zero) {
    std::mt19937_64 rng(opt.obstruction_seed);
    for (const auto& [id, g] : cur) {
      if (g == 0.0) continue;
      double sup = detail::boundary_sup_vdot(net, lfs, id, cur,
                                             opt.obstruction_restarts,
                                             opt.obstruction_iters, rng);
      out.boundary_sup[id] = sup;
      if (sup >= -detail::kObstructionTol) out.limit_obstruction.insert(id);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Staged-certificate checker

struct MultiCsCheck {
  bool ok = false;
  // (stage, subsystem) pairs whose SOS re-derivation or row test failed
  std::vector<std::pair<int, int>> failed;
  std::vector<std::string> notes;
};

// Re-derives a user-supplied chain of comparison matrices: stage k must bound
// the drift between the level vectors gammas[k] and gammas[k+1], every row
// sum must be negative, and the first stage must strictly shrink the start
// levels. Nothing from the producing solves is reused; each stage gets a
// fresh SOS program.
inline MultiCsCheck check_multi_cs(const Network& net,
                                   const std::map<int, LyapunovFn>& lfs,
                                   const std::vector<ComparisonMatrix>& stages,
                                   const std::vector<std::map<int, double>>& gammas,
                                   const ProveOptions& popt = {}) {
  if (gammas.size() != stages.size() + 1)
    throw std::invalid_argument("check_multi_cs: need one more level vector than stages");
  UniverseRef u = net.universe;
  MultiCsCheck out;
  for (size_t k = 0; k < stages.size(); ++k) {
    const ComparisonMatrix& A = stages[k];
    if (!A.is_metzler())
      throw std::invalid_argument("check_multi_cs: stage " + std::to_string(k) +
                                  " has a negative off-diagonal entry");
    for (const auto& s : net.subsystems) {
      int i = s.id;
      int r = A.index_of(i);
      if (r < 0) {
        out.failed.push_back({static_cast<int>(k), i});
        out.notes.push_back("stage " + std::to_string(k) + ": no row for subsystem " +
                            std::to_string(i));
        continue;
      }
      double row = 0, inv0 = 0;
      Polynomial p = -1.0 * detail::total_vdot(net, lfs.at(i).V, i);
      std::vector<DomainConstraint> domain;
      for (int j : detail::sorted_neighbors(net, i)) {
        double aij = A.a(r, A.index_of(j));
        double glo = gammas[k + 1].at(j);
        double ghi = gammas[k].at(j);
        p += aij * (lfs.at(j).V - Polynomial::constant(u, glo));
        domain.push_back({lfs.at(j).V - Polynomial::constant(u, glo), false});
        domain.push_back({Polynomial::constant(u, ghi) - lfs.at(j).V, false});
        row += aij;
        inv0 += aij * (ghi - glo);
      }
      if (!(row < 0)) {
        out.failed.push_back({static_cast<int>(k), i});
        out.notes.push_back("stage " + std::to_string(k) + " row " +
                            std::to_string(i) + ": sum not negative");
        continue;
      }
      if (k == 0 && !(inv0 < 0)) {
        out.failed.push_back({0, i});
        out.notes.push_back("first stage row " + std::to_string(i) +
                            ": no strict initial shrink");
        continue;
      }
      ProveResult pr = prove_nonneg_on(p, domain, popt);
      if (!detail::sos_ok(pr.status)) {
        out.failed.push_back({static_cast<int>(k), i});
        out.notes.push_back("stage " + std::to_string(k) + " row " +
                            std::to_string(i) + ": drift bound not certified");
      }
    }
  }
  out.ok = out.failed.empty();
  return out;
}

// Diagonal stage matrices of a shrink run, for feeding back into
// check_multi_cs. Rates are carried forward for agents that sat at zero.
inline std::pair<std::vector<ComparisonMatrix>, std::vector<std::map<int, double>>>
diagonal_matrices(const Network& net, const LevelSequence& seq) {
  std::vector<ComparisonMatrix> stages;
  std::vector<std::map<int, double>> gammas;
  if (seq.steps.empty()) return {stages, gammas};
  std::vector<int> ids;
  for (const auto& s : net.subsystems) ids.push_back(s.id);
  gammas.push_back(seq.steps.front().gamma);
  std::map<int, double> last_rate;
  for (size_t k = 1; k < seq.steps.size(); ++k) {
    const Phase2Step& st = seq.steps[k];
    if (!st.stalled.empty())
      throw std::invalid_argument(
          "diagonal_matrices: sequence has a stalled step");
    ComparisonMatrix A;
    A.ids = ids;
    A.provenance = CsProvenance::DiagonalStage;
    int m = static_cast<int>(ids.size());
    A.a = Eigen::MatrixXd::Zero(m, m);
    A.domain_gammas = Eigen::VectorXd::Zero(m);
    for (int id : ids) {
      auto it = st.a_ii.find(id);
      if (it != st.a_ii.end()) last_rate[id] = it->second;
      if (!last_rate.count(id))
        throw std::invalid_argument(
            "diagonal_matrices: no rate recorded for subsystem " +
            std::to_string(id));
      int r = A.index_of(id);
      A.a(r, r) = last_rate.at(id);
      A.domain_gammas(r) = seq.steps[k - 1].gamma.at(id);
    }
    stages.push_back(std::move(A));
    gammas.push_back(st.gamma);
  }
  return {stages, gammas};
}

// ---------------------------------------------------------------------------
// Protocol driver

enum class Verdict { ExponentiallyStable, ConvergesToLimitSet, Inconclusive };
enum class ProtocolMode { Sequential, Parallel };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::ExponentiallyStable: return "exponentially-stable";
    case Verdict::ConvergesToLimitSet: return "converges-to-limit-set";
    case Verdict::Inconclusive: return "inconclusive";
  }
  return "?";
}

inline const char* to_string(ProtocolMode m) {
  return m == ProtocolMode::Sequential ? "sequential" : "parallel";
}

struct ProtocolOptions {
  Phase1Options phase1;
  Phase2Options phase2;
  const std::vector<AgentMessage>* forced_log = nullptr;  // replay both phases
};

struct CertificationReport {
  ProtocolMode mode = ProtocolMode::Sequential;
  std::map<int, double> v0, gamma0, gamma_star;
  Phase1Result phase1;
  LevelSequence phase2;
  Verdict verdict = Verdict::Inconclusive;
  std::string diagnostics;
  std::vector<AgentMessage> log;  // phase 1 then phase 2, ordered by round and sender
};

inline CertificationReport run_protocol(const Network& net,
                                        const std::map<int, LyapunovFn>& lfs,
                                        const std::map<int, double>& v0,
                                        ProtocolMode mode,
                                        const ProtocolOptions& opt = {}) {
  detail::check_protocol_inputs(net, lfs, v0, "run_protocol");
  CertificationReport rep;
  rep.mode = mode;
  rep.v0 = v0;

  Phase1Options p1 = opt.phase1;
  if (opt.forced_log) p1.forced_log = opt.forced_log;
  rep.phase1 = mode == ProtocolMode::Sequential
                   ? phase1_envelope(net, lfs, v0, p1)
                   : phase1_parallel(net, lfs, v0, p1);
  rep.log = rep.phase1.log;
  if (!rep.phase1.ok) {
    rep.verdict = Verdict::Inconclusive;
    rep.diagnostics = rep.phase1.message;
    return rep;
  }
  rep.gamma0 = rep.phase1.gamma0;

  Phase2Options p2 = opt.phase2;
  if (opt.forced_log) p2.forced_log = opt.forced_log;
  rep.phase2 = mode == ProtocolMode::Sequential
                   ? phase2_diagonal(net, lfs, rep.gamma0, p2)
                   : phase2_parallel(net, lfs, rep.gamma0, p2);
  rep.log.insert(rep.log.end(), rep.phase2.log.begin(), rep.phase2.log.end());
  rep.gamma_star = rep.phase2.gamma_star;

  if (rep.phase2.reached_zero) {
    rep.verdict = Verdict::ExponentiallyStable;
    rep.diagnostics = "all levels certified down to zero";
  } else if (!rep.phase2.limit_obstruction.empty()) {
    rep.verdict = Verdict::ConvergesToLimitSet;
    std::ostringstream os;
    os << "drift stops decaying on the stalled boundary of subsystem";
    if (rep.phase2.limit_obstruction.size() > 1) os << "s";
    for (int id : rep.phase2.limit_obstruction) os << " " << id;
    rep.diagnostics = os.str();
  } else {
    rep.verdict = Verdict::Inconclusive;
    rep.diagnostics =
        "levels stopped above zero without a witnessed obstruction";
    if (rep.phase2.unknown) rep.diagnostics += "; " + rep.phase2.message;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Report serialization

namespace detail {

inline nlohmann::json level_array(const std::map<int, double>& m) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [id, v] : m)
    arr.push_back({{"subsystem", id}, {"value", v}});
  return arr;
}

}  // namespace detail

inline nlohmann::json report_json(const CertificationReport& rep) {
  nlohmann::json j;
  j["schema"] = "vecstab.report/1";
  j["mode"] = to_string(rep.mode);
  j["verdict"] = to_string(rep.verdict);
  j["diagnostics"] = rep.diagnostics;
  j["v0"] = detail::level_array(rep.v0);
  j["gamma0"] = detail::level_array(rep.gamma0);
  j["gamma_star"] = detail::level_array(rep.gamma_star);

  nlohmann::json p1;
  p1["ok"] = rep.phase1.ok;
  p1["failed_at"] = rep.phase1.failed_at;
  p1["rounds"] = nlohmann::json::array();
  for (const auto& r : rep.phase1.rounds)
    p1["rounds"].push_back(detail::level_array(r));
  j["phase1"] = std::move(p1);

  nlohmann::json p2;
  p2["reached_zero"] = rep.phase2.reached_zero;
  p2["steps"] = nlohmann::json::array();
  for (size_t k = 0; k < rep.phase2.steps.size(); ++k) {
    const Phase2Step& st = rep.phase2.steps[k];
    nlohmann::json sj;
    sj["k"] = k;
    sj["gamma"] = detail::level_array(st.gamma);
    sj["a_ii"] = detail::level_array(st.a_ii);
    sj["stalled"] = nlohmann::json::array();
    for (int id : st.stalled) sj["stalled"].push_back(id);
    sj["weights"] = nlohmann::json::array();
    for (const auto& [id, ws] : st.weights) {
      nlohmann::json wj;
      wj["subsystem"] = id;
      wj["edges"] = nlohmann::json::array();
      for (const auto& [from, w] : ws)
        wj["edges"].push_back({{"from", from}, {"w", w}});
      sj["weights"].push_back(std::move(wj));
    }
    p2["steps"].push_back(std::move(sj));
  }
  nlohmann::json obs = nlohmann::json::array();
  for (int id : rep.phase2.limit_obstruction) obs.push_back(id);
  p2["limit_obstruction"] = std::move(obs);
  j["phase2"] = std::move(p2);

  j["log"] = nlohmann::json::array();
  for (const auto& msg : rep.log)
    j["log"].push_back({{"phase", msg.phase},
                        {"round", msg.round},
                        {"sender", msg.sender},
                        {"gamma", msg.gamma}});

  nlohmann::json certs = nlohmann::json::array();
  auto push_cert = [&](const CertRecord& rec) {
    certs.push_back({{"where", rec.where},
                     {"kind", to_string(rec.kind)},
                     {"agent", rec.agent},
                     {"edge", rec.edge},
                     {"round", rec.round},
                     {"grams", rec.certificate.constraint_grams.size()}});
  };
  for (const auto& rec : rep.phase1.certificates) push_cert(rec);
  for (const auto& rec : rep.phase2.certificates) push_cert(rec);
  j["certificates"] = std::move(certs);
  return j;
}

// One row per (step, subsystem) of the shrink phase; weights are empty in
// sequential mode and joined as from:value pairs in parallel mode.
inline void write_rounds_csv(const CertificationReport& rep, std::ostream& os) {
  os << "round,subsystem,gamma,a_ii,weights\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return std::string(buf);
  };
  for (size_t k = 0; k < rep.phase2.steps.size(); ++k) {
    const Phase2Step& st = rep.phase2.steps[k];
    for (const auto& [id, g] : st.gamma) {
      os << k << "," << id << "," << num(g) << ",";
      auto it = st.a_ii.find(id);
      if (it != st.a_ii.end()) os << num(it->second);
      os << ",";
      auto wit = st.weights.find(id);
      if (wit != st.weights.end()) {
        bool first = true;
        for (const auto& [from, w] : wit->second) {
          if (!first) os << ";";
          os << from << ":" << num(w);
          first = false;
        }
      }
      os << "\n";
    }
  }
}

inline std::string rounds_csv(const CertificationReport& rep) {
  std::ostringstream os;
  write_rounds_csv(rep, os);
  return os.str();
}

// ---------------------------------------------------------------------------
// Certificate audit

struct AuditOptions {
  int samples_per_claim = 10000;
  std::uint64_t seed = 7;
  double residual_tol = 1e-6;
  double sample_tol = 1e-5;
};

struct AuditResult {
  int claims = 0;
  double max_residual = 0;
  double min_gram_eigen = std::numeric_limits<double>::infinity();
  double max_violation = -std::numeric_limits<double>::infinity();
  bool ok = true;
  std::vector<std::string> failures;
};

namespace detail {

// boundary point: random direction scaled onto {V = gamma}
inline void boundary_point(const CompiledPoly& V, std::span<const VarId> vars,
                           std::vector<double>& full, double gamma,
                           std::mt19937_64& rng) {
  std::normal_distribution<double> gauss;
  for (VarId v : vars) full[static_cast<size_t>(v.index)] = gauss(rng);
  rescale_to_level(V, vars, full, gamma);
}

// point with lo < V <= hi: pick a level uniformly, land on its rim, so thin
// shells are covered as well as thick ones
inline void annulus_point(const CompiledPoly& V, std::span<const VarId> vars,
                          std::vector<double>& full, double lo, double hi,
                          std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double level = lo + (hi - lo) * unif(rng);
  if (level <= 0) level = hi * 1e-6;
  boundary_point(V, vars, full, level, rng);
}

inline void sublevel_point(const CompiledPoly& V, std::span<const VarId> vars,
                           std::vector<double>& full, double gamma,
                           std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  boundary_point(V, vars, full, gamma, rng);
  double t = std::pow(unif(rng), 1.0 / std::max<size_t>(1, vars.size()));
  for (VarId v : vars) full[static_cast<size_t>(v.index)] *= t;
}

}  // namespace detail

// Re-expands every stored identity against its program and re-samples the
// claimed inequality on the domain the record says it holds on. This is the
// guard that the protocol's bookkeeping and the solver agree.
inline AuditResult audit_certificates(const Network& net,
                                      const std::map<int, LyapunovFn>& lfs,
                                      std::span<const CertRecord> certs,
                                      const AuditOptions& opt = {}) {
  AuditResult out;
  UniverseRef u = net.universe;
  int nu = u->size();
  std::mt19937_64 rng(opt.seed);
  for (const CertRecord& rec : certs) {
    ++out.claims;
    CertCheck cc = check_certificate(*rec.program, rec.certificate);
    out.max_residual = std::max(out.max_residual, cc.max_coeff_residual);
    out.min_gram_eigen = std::min(out.min_gram_eigen, cc.min_gram_eigen);
    if (cc.max_coeff_residual > opt.residual_tol) {
      out.ok = false;
      out.failures.push_back(rec.where + ": identity residual " +
                             std::to_string(cc.max_coeff_residual));
    }

    const Subsystem& s = net.subsystem(rec.agent);
    const Polynomial& Vi = lfs.at(rec.agent).V;
    CompiledPoly cVi(Vi);
    Polynomial claim(u);  // sampled violation is claim > 0
    switch (rec.kind) {
      case ClaimKind::DirectRow: {
        claim = detail::total_vdot(net, Vi, rec.agent);
        for (const auto& [j, aij] : rec.a_row) claim -= aij * lfs.at(j).V;
        break;
      }
      case ClaimKind::BoundaryDecay:
        claim = detail::total_vdot(net, Vi, rec.agent);
        break;
      case ClaimKind::AnnulusDecay: {
        claim = detail::total_vdot(net, Vi, rec.agent) -
                rec.a * (Vi - Polynomial::constant(u, rec.gamma_new));
        break;
      }
      case ClaimKind::EdgeBudget:
      case ClaimKind::EdgeAnnulus: {
        Polynomial vf = lie_derivative(Vi, s.f, s.state_vars);
        const Interaction* edge = nullptr;
        for (const Interaction* e : net.interactions_to(rec.agent))
          if (e->from == rec.edge) edge = e;
        if (!edge) {
          out.ok = false;
          out.failures.push_back(rec.where + ": edge not found");
          continue;
        }
        claim = rec.w * vf + lie_derivative(Vi, edge->g, s.state_vars);
        if (rec.kind == ClaimKind::EdgeAnnulus)
          claim -= rec.a * (Vi - Polynomial::constant(u, rec.gamma_new));
        break;
      }
    }
    CompiledPoly cclaim(claim);
    std::map<int, CompiledPoly> cV;
    for (const auto& [j, lvl] : rec.levels) cV.emplace(j, lfs.at(j).V);

    std::vector<double> x(static_cast<size_t>(nu), 0.0);
    double worst = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < opt.samples_per_claim; ++k) {
      for (const auto& [j, lvl] : rec.levels) {
        const auto& vars = net.subsystem(j).state_vars;
        const CompiledPoly& cVj = cV.at(j);
        if (j == rec.agent) {
          switch (rec.kind) {
            case ClaimKind::BoundaryDecay:
            case ClaimKind::EdgeBudget:
              detail::boundary_point(cVj, vars, x, lvl, rng);
              break;
            case ClaimKind::AnnulusDecay:
            case ClaimKind::EdgeAnnulus:
              detail::annulus_point(cVj, vars, x, rec.gamma_new, lvl, rng);
              break;
            case ClaimKind::DirectRow:
              detail::sublevel_point(cVj, vars, x, lvl, rng);
              break;
          }
        } else {
          detail::sublevel_point(cVj, vars, x, lvl, rng);
        }
      }
      worst = std::max(worst, cclaim.eval(x.data()));
    }
    out.max_violation = std::max(out.max_violation, worst);
    if (worst > opt.sample_tol) {
      out.ok = false;
      out.failures.push_back(rec.where + ": sampled violation " +
                             std::to_string(worst));
    }
  }
  return out;
}

}  // namespace vecstab
