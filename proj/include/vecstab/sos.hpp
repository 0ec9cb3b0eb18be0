#pragma once

// Sum-of-squares programming on top of the SDP layer. A program owns decision
// variables (SOS polynomials via Gram matrices, free polynomials, scalars) and
// constraints that are affine in those variables; lowering produces one PSD
// block per SOS object plus coefficient-matching equalities, and solutions map
// back to polynomials with a checkable certificate.

#include "vecstab/poly.hpp"
#include "vecstab/sdp.hpp"

#include <json.hpp>

#include <cassert>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace vecstab {

enum class SosVarKind { GramPolynomial, FreePolynomial, ScalarFree, ScalarNonneg };

inline const char* to_string(SosVarKind k) {
  switch (k) {
    case SosVarKind::GramPolynomial: return "gram";
    case SosVarKind::FreePolynomial: return "free_poly";
    case SosVarKind::ScalarFree: return "scalar";
    case SosVarKind::ScalarNonneg: return "scalar_nonneg";
  }
  return "?";
}

struct SosDecisionVar {
  SosVarKind kind;
  std::vector<VarId> vars;
  int degree = 0;
  std::string name;
};

// Affine expression in the decision variables. Building one from two
// expressions that both carry decision terms via operator* is a bilinearity
// and is rejected.
class SosExpr {
 public:
  SosExpr() = default;
  explicit SosExpr(Polynomial known) : known_(std::move(known)) {}
  SosExpr(int var_index, Polynomial multiplier) {
    terms_.push_back({var_index, std::move(multiplier)});
  }

  const Polynomial& known() const { return known_; }
  const std::vector<std::pair<int, Polynomial>>& terms() const { return terms_; }
  bool has_decision_terms() const { return !terms_.empty(); }

  SosExpr& operator+=(const SosExpr& o) {
    known_ += o.known_;
    for (auto& t : o.terms_) add_scaled_term(t.first, t.second);
    return *this;
  }
  SosExpr& operator-=(const SosExpr& o) {
    known_ -= o.known_;
    for (auto& t : o.terms_) add_scaled_term(t.first, -t.second);
    return *this;
  }
  friend SosExpr operator+(SosExpr a, const SosExpr& b) { return a += b; }
  friend SosExpr operator-(SosExpr a, const SosExpr& b) { return a -= b; }
  friend SosExpr operator-(SosExpr a) {
    a.known_ = -a.known_;
    for (auto& t : a.terms_) t.second = -t.second;
    return a;
  }
  friend SosExpr operator*(const SosExpr& a, const SosExpr& b) {
    if (a.has_decision_terms() && b.has_decision_terms())
      throw std::invalid_argument(
          "bilinear product of decision-variable expressions");
    const SosExpr& dec = a.has_decision_terms() ? a : b;
    const Polynomial& kn = a.has_decision_terms() ? b.known_ : a.known_;
    SosExpr r;
    r.known_ = dec.known_ * kn;
    for (auto& t : dec.terms_) r.terms_.push_back({t.first, t.second * kn});
    return r;
  }
  friend SosExpr operator*(SosExpr a, const Polynomial& p) {
    a.known_ = a.known_ * p;
    for (auto& t : a.terms_) t.second = t.second * p;
    return a;
  }
  friend SosExpr operator*(const Polynomial& p, SosExpr a) { return std::move(a) * p; }
  friend SosExpr operator*(SosExpr a, double s) {
    a.known_ *= s;
    for (auto& t : a.terms_) t.second *= s;
    return a;
  }
  friend SosExpr operator*(double s, SosExpr a) { return std::move(a) * s; }

 private:
  void add_scaled_term(int var, const Polynomial& mult) {
    for (auto& t : terms_)
      if (t.first == var) {
        t.second += mult;
        return;
      }
    terms_.push_back({var, mult});
  }

  Polynomial known_;
  std::vector<std::pair<int, Polynomial>> terms_;
};

class SosProgram {
 public:
  explicit SosProgram(UniverseRef u) : u_(std::move(u)) {}

  const UniverseRef& universe() const { return u_; }

  int add_gram_poly(std::vector<VarId> vars, int degree, std::string name) {
    if (degree < 0 || degree % 2 != 0)
      throw std::invalid_argument("sos: Gram polynomial degree must be even, got " +
                                  std::to_string(degree));
    return add_var({SosVarKind::GramPolynomial, sorted(std::move(vars)), degree,
                    std::move(name)});
  }
  int add_free_poly(std::vector<VarId> vars, int degree, std::string name) {
    if (degree < 0) throw std::invalid_argument("sos: negative degree");
    return add_var({SosVarKind::FreePolynomial, sorted(std::move(vars)), degree,
                    std::move(name)});
  }
  int add_scalar(std::string name) {
    return add_var({SosVarKind::ScalarFree, {}, 0, std::move(name)});
  }
  int add_nonneg_scalar(std::string name) {
    return add_var({SosVarKind::ScalarNonneg, {}, 0, std::move(name)});
  }

  const std::vector<SosDecisionVar>& variables() const { return vars_; }

  SosExpr atom(int var) const {
    check_var(var);
    return SosExpr(var, Polynomial::constant(u_, 1.0));
  }
  SosExpr lit(Polynomial p) const { return SosExpr(std::move(p)); }
  SosExpr lit(double c) const { return SosExpr(Polynomial::constant(u_, c)); }

  void require_sos(SosExpr e, std::string label) {
    cons_.push_back({std::move(e), true, std::move(label)});
  }
  void require_zero(SosExpr e, std::string label) {
    cons_.push_back({std::move(e), false, std::move(label)});
  }

  struct Constraint {
    SosExpr expr;
    bool is_sos;
    std::string label;
  };
  const std::vector<Constraint>& constraints() const { return cons_; }

  void minimize(std::vector<std::pair<int, double>> linear) {
    for (auto& [v, c] : linear) {
      check_var(v);
      SosVarKind k = vars_[static_cast<size_t>(v)].kind;
      if (k != SosVarKind::ScalarFree && k != SosVarKind::ScalarNonneg)
        throw std::invalid_argument("sos: objective must be over scalar variables");
    }
    objective_ = std::move(linear);
    has_objective_ = true;
  }
  bool has_objective() const { return has_objective_; }
  const std::vector<std::pair<int, double>>& objective() const { return objective_; }

  // Union of polynomial variables referenced anywhere; used by locality checks.
  std::vector<VarId> referenced_vars() const {
    std::vector<VarId> all;
    auto absorb = [&](const std::vector<VarId>& vs) {
      all.insert(all.end(), vs.begin(), vs.end());
    };
    for (const auto& v : vars_) absorb(v.vars);
    for (const auto& c : cons_) {
      absorb(c.expr.known().support());
      for (auto& [vi, mult] : c.expr.terms()) absorb(mult.support());
    }
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    return all;
  }

 private:
  static std::vector<VarId> sorted(std::vector<VarId> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  }
  int add_var(SosDecisionVar v) {
    vars_.push_back(std::move(v));
    return static_cast<int>(vars_.size()) - 1;
  }
  void check_var(int v) const {
    if (v < 0 || v >= static_cast<int>(vars_.size()))
      throw std::invalid_argument("sos: bad decision variable index");
  }

  UniverseRef u_;
  std::vector<SosDecisionVar> vars_;
  std::vector<Constraint> cons_;
  std::vector<std::pair<int, double>> objective_;
  bool has_objective_ = false;
};

// ---------------------------------------------------------------------------
// Lowering

struct SosLowering {
  SdpProblem sdp;
  // Per decision variable: where its parameters live.
  struct VarMap {
    SosVarKind kind;
    int block = -1;                  // Gram / nonneg scalar
    std::vector<Monomial> basis;     // Gram or free-poly basis
    std::vector<int> free_indices;   // free-poly coefficients / free scalar
  };
  std::vector<VarMap> var_maps;
  // Per SOS constraint (in program order): its expression Gram.
  struct ConstraintGram {
    int constraint_index;  // index into program.constraints()
    int block;
    std::vector<Monomial> basis;
  };
  std::vector<ConstraintGram> constraint_grams;
  bool trivially_infeasible = false;
  std::string note;
};

namespace detail {
inline int even_ceil(int d) { return d <= 0 ? 0 : d + (d % 2); }
}  // namespace

inline int sos_var_degree(const SosDecisionVar& v) {
  switch (v.kind) {
    case SosVarKind::GramPolynomial:
    case SosVarKind::FreePolynomial: return v.degree;
    default: return 0;
  }
}

inline SosLowering lower(const SosProgram& prog) {
  SosLowering low;
  SdpProblem& sdp = low.sdp;

  // Allocate parameter storage for every decision variable.
  for (const auto& v : prog.variables()) {
    SosLowering::VarMap vm;
    vm.kind = v.kind;
    switch (v.kind) {
      case SosVarKind::GramPolynomial: {
        vm.basis = monomial_basis(v.vars, v.degree / 2, 0);
        vm.block = static_cast<int>(sdp.block_dims.size());
        sdp.block_dims.push_back(static_cast<int>(vm.basis.size()));
        break;
      }
      case SosVarKind::FreePolynomial: {
        vm.basis = monomial_basis(v.vars, v.degree, 0);
        for (size_t k = 0; k < vm.basis.size(); ++k)
          vm.free_indices.push_back(sdp.num_free++);
        break;
      }
      case SosVarKind::ScalarFree:
        vm.free_indices.push_back(sdp.num_free++);
        break;
      case SosVarKind::ScalarNonneg:
        vm.block = static_cast<int>(sdp.block_dims.size());
        sdp.block_dims.push_back(1);
        break;
    }
    low.var_maps.push_back(std::move(vm));
  }

  // One coefficient-matching equality per monomial per constraint.
  for (size_t ci = 0; ci < prog.constraints().size(); ++ci) {
    const auto& con = prog.constraints()[ci];
    // Degree and variable span of the whole expression.
    int deg = con.expr.known().degree();
    std::vector<VarId> span_vars = con.expr.known().support();
    for (auto& [vi, mult] : con.expr.terms()) {
      const auto& dv = prog.variables()[static_cast<size_t>(vi)];
      if (mult.is_zero()) continue;
      deg = std::max(deg, mult.degree() + sos_var_degree(dv));
      auto ms = mult.support();
      span_vars.insert(span_vars.end(), ms.begin(), ms.end());
      span_vars.insert(span_vars.end(), dv.vars.begin(), dv.vars.end());
    }
    std::sort(span_vars.begin(), span_vars.end());
    span_vars.erase(std::unique(span_vars.begin(), span_vars.end()),
                    span_vars.end());

    int gram_block = -1;
    std::vector<Monomial> gram_basis;
    if (con.is_sos) {
      if (deg < 0) deg = 0;  // identically-zero expression: Gram over {1}
      // Odd formal degree is allowed: the Gram spans floor(deg/2), and the
      // odd-top coefficient rows become pure cancellation equations on the
      // decision variables (infeasible when nothing can reach them).
      gram_basis = monomial_basis(span_vars, deg / 2, 0);
      gram_block = static_cast<int>(sdp.block_dims.size());
      sdp.block_dims.push_back(static_cast<int>(gram_basis.size()));
      low.constraint_grams.push_back(
          {static_cast<int>(ci), gram_block, gram_basis});
    }

    // Collect, per monomial, the linear equation across all parameters.
    std::map<Monomial, SdpConstraint, MonoLess> rows;
    auto row_of = [&](const Monomial& m) -> SdpConstraint& { return rows[m]; };

    // Every monomial of the known part needs a row even when no parameter
    // reaches it (the empty-row check below then decides feasibility).
    for (auto& [m, c] : con.expr.known().terms()) row_of(m);
    if (con.is_sos) {
      // Expression Gram contributes <E_m, Q>.
      for (size_t a = 0; a < gram_basis.size(); ++a)
        for (size_t b = a; b < gram_basis.size(); ++b)
          row_of(gram_basis[a] * gram_basis[b])
              .mat.push_back({gram_block, static_cast<int>(a),
                              static_cast<int>(b), 1.0});
    }

    for (auto& [vi, mult] : con.expr.terms()) {
      const auto& vm = low.var_maps[static_cast<size_t>(vi)];
      switch (vm.kind) {
        case SosVarKind::GramPolynomial: {
          for (size_t a = 0; a < vm.basis.size(); ++a)
            for (size_t b = a; b < vm.basis.size(); ++b) {
              Monomial wab = vm.basis[a] * vm.basis[b];
              for (auto& [mm, mc] : mult.terms())
                row_of(mm * wab).mat.push_back(
                    {vm.block, static_cast<int>(a), static_cast<int>(b), -mc});
            }
          break;
        }
        case SosVarKind::FreePolynomial: {
          for (size_t k = 0; k < vm.basis.size(); ++k)
            for (auto& [mm, mc] : mult.terms())
              row_of(mm * vm.basis[k])
                  .free_c.push_back({vm.free_indices[0] + static_cast<int>(k),
                                     -mc});
          break;
        }
        case SosVarKind::ScalarFree: {
          for (auto& [mm, mc] : mult.terms())
            row_of(mm).free_c.push_back({vm.free_indices[0], -mc});
          break;
        }
        case SosVarKind::ScalarNonneg: {
          for (auto& [mm, mc] : mult.terms())
            row_of(mm).mat.push_back({vm.block, 0, 0, -mc});
          break;
        }
      }
    }

    // Fold duplicate coordinates and emit the rows.
    for (auto& [m, row] : rows) {
      row.rhs = con.expr.known().coefficient(m);
      std::map<std::tuple<int, int, int>, double> mat_acc;
      for (auto& e : row.mat) mat_acc[{e.block, e.row, e.col}] += e.value;
      row.mat.clear();
      for (auto& [key, v] : mat_acc)
        if (v != 0.0)
          row.mat.push_back({std::get<0>(key), std::get<1>(key),
                             std::get<2>(key), v});
      std::map<int, double> free_acc;
      for (auto& [k, v] : row.free_c) free_acc[k] += v;
      row.free_c.clear();
      for (auto& [k, v] : free_acc)
        if (v != 0.0) row.free_c.push_back({k, v});
      if (row.mat.empty() && row.free_c.empty()) {
        if (std::abs(row.rhs) <= kCoeffZeroTol) continue;  // 0 = 0
        low.trivially_infeasible = true;
        low.note = "constraint '" + con.label + "' pins coefficient of a " +
                   "monomial no parameter can reach (rhs " +
                   std::to_string(row.rhs) + ")";
        continue;
      }
      sdp.constraints.push_back(std::move(row));
    }
  }

  if (prog.has_objective()) {
    sdp.sense = SdpSense::Minimize;
    for (auto& [v, c] : prog.objective()) {
      const auto& vm = low.var_maps[static_cast<size_t>(v)];
      if (vm.kind == SosVarKind::ScalarFree)
        sdp.objective.free_c.push_back({vm.free_indices[0], c});
      else
        sdp.objective.mat.push_back({vm.block, 0, 0, c});
    }
  } else {
    sdp.sense = SdpSense::Feasibility;
  }
  return low;
}

// ---------------------------------------------------------------------------
// Results and certificates

enum class SosStatus { Feasible, Optimal, Infeasible, Unbounded, Unknown };

inline const char* to_string(SosStatus s) {
  switch (s) {
    case SosStatus::Feasible: return "Feasible";
    case SosStatus::Optimal: return "Optimal";
    case SosStatus::Infeasible: return "Infeasible";
    case SosStatus::Unbounded: return "Unbounded";
    case SosStatus::Unknown: return "Unknown";
  }
  return "?";
}

struct SosCertificate {
  struct Gram {
    std::string label;
    std::vector<Monomial> basis;
    Eigen::MatrixXd Q;
  };
  std::vector<Gram> constraint_grams;  // sigma_0 of each SOS constraint
  struct Value {
    std::string name;
    SosVarKind kind;
    Polynomial poly;           // polynomial kinds
    double scalar = 0.0;       // scalar kinds
    std::vector<Monomial> gram_basis;  // Gram kind only
    Eigen::MatrixXd gram;
  };
  std::vector<Value> values;  // aligned with program variables
  double objective = 0.0;
};

struct SosSolveOptions {
  SolverOptions sdp{.gap_tol = 1e-9, .feas_tol = 1e-9};
  double psd_tol = 1e-7;
};

struct SosResult {
  SosStatus status = SosStatus::Unknown;
  std::optional<SosCertificate> certificate;
  double objective = 0.0;
  SdpStatus sdp_status = SdpStatus::NumericFailure;
  double sdp_primal_residual = 0.0;
  int sdp_iterations = 0;
  std::string message;

  const Polynomial& value_poly(int var) const {
    return certificate->values[static_cast<size_t>(var)].poly;
  }
  double value_scalar(int var) const {
    return certificate->values[static_cast<size_t>(var)].scalar;
  }
};

inline Polynomial gram_to_poly(UniverseRef u, const std::vector<Monomial>& basis,
                               const Eigen::MatrixXd& Q) {
  Polynomial p(u);
  for (size_t a = 0; a < basis.size(); ++a)
    for (size_t b = a; b < basis.size(); ++b) {
      double w = (a == b ? 1.0 : 2.0) * Q(static_cast<Eigen::Index>(a),
                                          static_cast<Eigen::Index>(b));
      if (w != 0.0) p.add_term(basis[a] * basis[b], w);
    }
  return p;
}

inline SosResult solve(const SosProgram& prog, const SosSolveOptions& opt = {}) {
  SosResult res;
  SosLowering low = lower(prog);
  if (low.trivially_infeasible) {
    res.status = SosStatus::Infeasible;
    res.message = low.note;
    return res;
  }
  SdpSolution sol = vecstab::solve(low.sdp, opt.sdp);
  res.sdp_status = sol.status;
  res.sdp_primal_residual = sol.primal_residual;
  res.sdp_iterations = sol.iterations;
  res.message = sol.message;
  switch (sol.status) {
    case SdpStatus::Feasible: res.status = SosStatus::Feasible; break;
    case SdpStatus::Optimal:
      res.status = prog.has_objective() ? SosStatus::Optimal : SosStatus::Feasible;
      break;
    case SdpStatus::Infeasible: res.status = SosStatus::Infeasible; return res;
    case SdpStatus::Unbounded: res.status = SosStatus::Unbounded; return res;
    case SdpStatus::NumericFailure: res.status = SosStatus::Unknown; return res;
  }

  SosCertificate cert;
  cert.objective = sol.objective;
  res.objective = sol.objective;
  for (size_t vi = 0; vi < prog.variables().size(); ++vi) {
    const auto& dv = prog.variables()[vi];
    const auto& vm = low.var_maps[vi];
    SosCertificate::Value val;
    val.name = dv.name;
    val.kind = dv.kind;
    switch (vm.kind) {
      case SosVarKind::GramPolynomial: {
        val.gram_basis = vm.basis;
        val.gram = sol.block_values[static_cast<size_t>(vm.block)];
        val.poly = gram_to_poly(prog.universe(), vm.basis, val.gram);
        break;
      }
      case SosVarKind::FreePolynomial: {
        Polynomial p(prog.universe());
        for (size_t k = 0; k < vm.basis.size(); ++k)
          p.add_term(vm.basis[k], sol.free_values(vm.free_indices[k]));
        val.poly = p;
        break;
      }
      case SosVarKind::ScalarFree:
        val.scalar = sol.free_values(vm.free_indices[0]);
        val.poly = Polynomial::constant(prog.universe(), val.scalar);
        break;
      case SosVarKind::ScalarNonneg:
        val.scalar = sol.block_values[static_cast<size_t>(vm.block)](0, 0);
        val.poly = Polynomial::constant(prog.universe(), val.scalar);
        break;
    }
    cert.values.push_back(std::move(val));
  }
  for (const auto& cg : low.constraint_grams) {
    SosCertificate::Gram g;
    g.label = prog.constraints()[static_cast<size_t>(cg.constraint_index)].label;
    g.basis = cg.basis;
    g.Q = sol.block_values[static_cast<size_t>(cg.block)];
    cert.constraint_grams.push_back(std::move(g));
  }
  res.certificate = std::move(cert);
  return res;
}

inline SosResult minimize_scalar(SosProgram prog, int scalar_var,
                                 const SosSolveOptions& opt = {}) {
  prog.minimize({{scalar_var, 1.0}});
  return solve(prog, opt);
}

// ---------------------------------------------------------------------------
// Certificate audit: re-expand every identity symbolically and eigencheck the
// Gram blocks. This is the guard against a lying or sloppy solver.

struct CertCheck {
  double max_coeff_residual = 0.0;
  double min_gram_eigen = 0.0;
  bool ok(double coeff_tol = 1e-6, double psd_tol = 1e-7) const {
    return max_coeff_residual <= coeff_tol && min_gram_eigen >= -psd_tol;
  }
};

inline CertCheck check_certificate(const SosProgram& prog,
                                   const SosCertificate& cert) {
  CertCheck chk;
  chk.min_gram_eigen = std::numeric_limits<double>::infinity();
  auto eig_floor = [&](const Eigen::MatrixXd& Q) {
    if (Q.rows() == 0) return;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Q, Eigen::EigenvaluesOnly);
    chk.min_gram_eigen = std::min(chk.min_gram_eigen, es.eigenvalues().minCoeff());
  };
  for (size_t vi = 0; vi < prog.variables().size(); ++vi) {
    const auto& val = cert.values[vi];
    if (val.kind == SosVarKind::GramPolynomial) eig_floor(val.gram);
    if (val.kind == SosVarKind::ScalarNonneg)
      chk.min_gram_eigen = std::min(chk.min_gram_eigen, val.scalar);
  }
  size_t next_gram = 0;
  for (size_t ci = 0; ci < prog.constraints().size(); ++ci) {
    const auto& con = prog.constraints()[ci];
    Polynomial expanded = con.expr.known();
    for (auto& [vi, mult] : con.expr.terms())
      expanded += mult * cert.values[static_cast<size_t>(vi)].poly;
    if (con.is_sos) {
      const auto& g = cert.constraint_grams.at(next_gram++);
      eig_floor(g.Q);
      expanded -= gram_to_poly(prog.universe(), g.basis, g.Q);
    }
    for (auto& [m, c] : expanded.terms())
      chk.max_coeff_residual = std::max(chk.max_coeff_residual, std::abs(c));
  }
  if (chk.min_gram_eigen == std::numeric_limits<double>::infinity())
    chk.min_gram_eigen = 0.0;
  return chk;
}

// ---------------------------------------------------------------------------
// Positivity on a semialgebraic set.

struct DomainConstraint {
  Polynomial k;        // k >= 0, or k == 0 when is_equality
  bool is_equality = false;
};

struct ProveOptions {
  // Per-constraint multiplier degree; -1 means the default rule: the even
  // ceiling of deg(p) - deg(k_j), capped at 4.
  std::vector<int> multiplier_degrees;
  int degree_cap = 4;
  SosSolveOptions solve;
};

struct ProveResult {
  SosStatus status = SosStatus::Unknown;
  std::optional<SosCertificate> certificate;
  SosProgram program;  // for re-checking the certificate
  std::string message;
};

// Searches sigma_0, sigma_j (SOS) and lambda_j (free) with
//   p = sigma_0 + sum_j sigma_j k_j + sum_j lambda_j h_j
// so feasibility certifies p >= 0 on the set {k_j >= 0, h_j = 0}.
inline ProveResult prove_nonneg_on(const Polynomial& p,
                                   const std::vector<DomainConstraint>& domain,
                                   const ProveOptions& opt = {}) {
  UniverseRef u = p.universe();
  if (!u) throw std::invalid_argument("prove_nonneg_on: polynomial without universe");
  SosProgram prog(u);
  SosExpr expr = prog.lit(p);
  std::vector<VarId> all_vars = p.support();
  for (const auto& d : domain) {
    auto s = d.k.support();
    all_vars.insert(all_vars.end(), s.begin(), s.end());
  }
  std::sort(all_vars.begin(), all_vars.end());
  all_vars.erase(std::unique(all_vars.begin(), all_vars.end()), all_vars.end());

  for (size_t j = 0; j < domain.size(); ++j) {
    int mdeg = -1;
    if (j < opt.multiplier_degrees.size()) mdeg = opt.multiplier_degrees[j];
    if (mdeg < 0)
      mdeg = std::min(opt.degree_cap,
                      detail::even_ceil(p.degree() - domain[j].k.degree()));
    std::string nm = (domain[j].is_equality ? "lambda_" : "sigma_") +
                     std::to_string(j + 1);
    if (domain[j].is_equality) {
      int lam = prog.add_free_poly(all_vars, mdeg, nm);
      expr -= prog.atom(lam) * domain[j].k;
    } else {
      int sig = prog.add_gram_poly(all_vars, mdeg, nm);
      expr -= prog.atom(sig) * domain[j].k;
    }
  }
  prog.require_sos(std::move(expr), "sigma_0");
  SosResult r = solve(prog, opt.solve);
  ProveResult out{r.status, std::move(r.certificate), std::move(prog), r.message};
  return out;
}

// ---------------------------------------------------------------------------
// JSON round-trip for certificates.

inline nlohmann::json to_json(const SosCertificate& cert, const Universe& u) {
  nlohmann::json j;
  j["objective"] = cert.objective;
  j["values"] = nlohmann::json::array();
  for (const auto& v : cert.values) {
    nlohmann::json jv;
    jv["name"] = v.name;
    jv["kind"] = to_string(v.kind);
    jv["poly"] = to_string(v.poly);
    if (v.kind == SosVarKind::GramPolynomial) {
      jv["basis"] = nlohmann::json::array();
      for (const auto& m : v.gram_basis) jv["basis"].push_back(to_string(m, u));
      jv["gram"] = nlohmann::json::array();
      for (Eigen::Index r = 0; r < v.gram.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < v.gram.cols(); ++c) row.push_back(v.gram(r, c));
        jv["gram"].push_back(row);
      }
    }
    if (v.kind == SosVarKind::ScalarFree || v.kind == SosVarKind::ScalarNonneg)
      jv["scalar"] = v.scalar;
    j["values"].push_back(jv);
  }
  j["constraint_grams"] = nlohmann::json::array();
  for (const auto& g : cert.constraint_grams) {
    nlohmann::json jg;
    jg["label"] = g.label;
    jg["basis"] = nlohmann::json::array();
    for (const auto& m : g.basis) jg["basis"].push_back(to_string(m, u));
    jg["gram"] = nlohmann::json::array();
    for (Eigen::Index r = 0; r < g.Q.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index c = 0; c < g.Q.cols(); ++c) row.push_back(g.Q(r, c));
      jg["gram"].push_back(row);
    }
    j["constraint_grams"].push_back(jg);
  }
  return j;
}

inline Monomial monomial_from_text(const std::string& text, UniverseRef u) {
  Polynomial p = parse_polynomial(text, u);
  if (p.num_terms() != 1 || std::abs(p.terms().begin()->second - 1.0) > 1e-12)
    throw std::runtime_error("expected a plain monomial, got '" + text + "'");
  return p.terms().begin()->first;
}

inline SosCertificate certificate_from_json(const nlohmann::json& j,
                                            UniverseRef u) {
  SosCertificate cert;
  cert.objective = j.value("objective", 0.0);
  for (const auto& jv : j.at("values")) {
    SosCertificate::Value v;
    v.name = jv.at("name").get<std::string>();
    std::string kind = jv.at("kind").get<std::string>();
    if (kind == "gram") v.kind = SosVarKind::GramPolynomial;
    else if (kind == "free_poly") v.kind = SosVarKind::FreePolynomial;
    else if (kind == "scalar") v.kind = SosVarKind::ScalarFree;
    else if (kind == "scalar_nonneg") v.kind = SosVarKind::ScalarNonneg;
    else throw std::runtime_error("bad decision-variable kind '" + kind + "'");
    v.poly = parse_polynomial(jv.at("poly").get<std::string>(), u);
    if (jv.contains("scalar")) v.scalar = jv["scalar"].get<double>();
    if (jv.contains("basis")) {
      for (const auto& bs : jv["basis"])
        v.gram_basis.push_back(monomial_from_text(bs.get<std::string>(), u));
      const auto& rows = jv.at("gram");
      v.gram.resize(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(rows.size()));
      for (size_t r = 0; r < rows.size(); ++r)
        for (size_t c = 0; c < rows[r].size(); ++c)
          v.gram(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
              rows[r][c].get<double>();
    }
    cert.values.push_back(std::move(v));
  }
  for (const auto& jg : j.at("constraint_grams")) {
    SosCertificate::Gram g;
    g.label = jg.at("label").get<std::string>();
    for (const auto& bs : jg.at("basis"))
      g.basis.push_back(monomial_from_text(bs.get<std::string>(), u));
    const auto& rows = jg.at("gram");
    g.Q.resize(static_cast<Eigen::Index>(rows.size()),
               static_cast<Eigen::Index>(rows.size()));
    for (size_t r = 0; r < rows.size(); ++r)
      for (size_t c = 0; c < rows[r].size(); ++c)
        g.Q(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
            rows[r][c].get<double>();
    cert.constraint_grams.push_back(std::move(g));
  }
  return cert;
}

}  // namespace vecstab
