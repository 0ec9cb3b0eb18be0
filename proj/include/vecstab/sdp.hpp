#pragma once

// Dense semidefinite programming: problems in equality-standard form with a
// block-diagonal PSD variable plus free scalar variables, solved by an
// infeasible-start primal-dual interior point method (HKM scaling, Mehrotra
// predictor-corrector). Feasibility questions go through a phase-I slack
// minimization whose dual optimum doubles as an infeasibility certificate.
//
// Scale target: blocks up to ~60x60 and a few thousand constraints. The Schur
// complement is formed densely, exploiting constraint sparsity.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vecstab {

// One coefficient of a symmetric block matrix. Entries use row <= col; an
// off-diagonal entry (i,j,v) stands for both A[i][j] and A[j][i].
struct SdpEntry {
  int block = 0;
  int row = 0;
  int col = 0;
  double value = 0.0;
};

struct SdpConstraint {
  std::vector<SdpEntry> mat;                    // PSD-block coefficients
  std::vector<std::pair<int, double>> free_c;   // free-variable coefficients
  double rhs = 0.0;
};

struct SdpObjective {
  std::vector<SdpEntry> mat;
  std::vector<std::pair<int, double>> free_c;
};

enum class SdpSense { Minimize, Feasibility };

struct SdpProblem {
  std::vector<int> block_dims;
  int num_free = 0;
  std::vector<SdpConstraint> constraints;
  SdpObjective objective;
  SdpSense sense = SdpSense::Feasibility;

  void validate() const;
};

enum class SdpStatus { Optimal, Feasible, Infeasible, Unbounded, NumericFailure };

inline const char* to_string(SdpStatus s) {
  switch (s) {
    case SdpStatus::Optimal: return "Optimal";
    case SdpStatus::Feasible: return "Feasible";
    case SdpStatus::Infeasible: return "Infeasible";
    case SdpStatus::Unbounded: return "Unbounded";
    case SdpStatus::NumericFailure: return "NumericFailure";
  }
  return "?";
}

struct SdpSolution {
  SdpStatus status = SdpStatus::NumericFailure;
  std::vector<Eigen::MatrixXd> block_values;  // X
  Eigen::VectorXd free_values;                // u
  std::vector<Eigen::MatrixXd> dual_blocks;   // S (or ray S when Infeasible)
  Eigen::VectorXd y;                          // dual multipliers (or ray)
  double objective = 0.0;
  double primal_residual = 0.0;  // max abs equality violation
  double dual_residual = 0.0;
  double duality_gap = 0.0;
  double ray_residual = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  std::vector<double> trace_mu;  // per-iteration barrier parameter
  std::string message;
};

struct SolverOptions {
  double gap_tol = 1e-7;
  double feas_tol = 1e-7;
  double psd_tol = 1e-7;
  // A stalled iterate whose worst residual still beats this is returned as
  // optimal (flagged in the message) instead of a numeric failure. Degenerate
  // optimal faces routinely stop progress one or two digits short of the
  // target tolerances.
  double accept_tol = 1e-6;
  int max_iterations = 200;
  double step_fraction = 0.98;
  bool verbose = false;
  // Internal: phase-I stops as soon as the slack objective is provably small
  // enough, without waiting for full dual convergence.
  double stop_when_pobj_below = -std::numeric_limits<double>::infinity();
};

struct ResidualReport {
  double primal_residual = 0.0;       // max abs over constraints
  double dual_residual = 0.0;         // max abs over dual equations
  double duality_gap = 0.0;           // |<C,X> + c.u - b.y|
  double complementarity = 0.0;       // <X,S>
  double min_block_eigen = 0.0;       // most negative eigenvalue across X blocks
  bool cholesky_ok = false;           // chol(X + psd_tol I) succeeded everywhere
};

inline void SdpProblem::validate() const {
  const int nb = static_cast<int>(block_dims.size());
  for (int d : block_dims)
    if (d <= 0) throw std::invalid_argument("sdp: block dimension must be positive");
  if (num_free < 0) throw std::invalid_argument("sdp: negative free count");
  auto check_entries = [&](const std::vector<SdpEntry>& es, const char* where) {
    std::map<std::tuple<int, int, int>, int> seen;
    for (const auto& e : es) {
      if (e.block < 0 || e.block >= nb)
        throw std::invalid_argument(std::string("sdp: bad block index in ") + where);
      int d = block_dims[static_cast<size_t>(e.block)];
      if (e.row < 0 || e.col < 0 || e.row >= d || e.col >= d)
        throw std::invalid_argument(std::string("sdp: entry out of range in ") + where);
      if (e.row > e.col)
        throw std::invalid_argument(std::string("sdp: entries must have row <= col in ") + where);
      if (++seen[{e.block, e.row, e.col}] > 1)
        throw std::invalid_argument(std::string("sdp: duplicate entry in ") + where);
    }
  };
  auto check_free = [&](const std::vector<std::pair<int, double>>& fs,
                        const char* where) {
    std::map<int, int> seen;
    for (auto& [k, v] : fs) {
      if (k < 0 || k >= num_free)
        throw std::invalid_argument(std::string("sdp: bad free index in ") + where);
      if (++seen[k] > 1)
        throw std::invalid_argument(std::string("sdp: duplicate free index in ") + where);
    }
  };
  check_entries(objective.mat, "objective");
  check_free(objective.free_c, "objective");
  if (sense == SdpSense::Feasibility &&
      (!objective.mat.empty() || !objective.free_c.empty()))
    throw std::invalid_argument("sdp: feasibility problem with an objective");
  for (size_t p = 0; p < constraints.size(); ++p) {
    check_entries(constraints[p].mat, "constraint");
    check_free(constraints[p].free_c, "constraint");
    if (constraints[p].mat.empty() && constraints[p].free_c.empty())
      throw std::invalid_argument("sdp: constraint touches no variable");
  }
}

namespace detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

struct IpmResult {
  enum class Code { Converged, MaxIterations, Stalled, Unbounded } code;
  std::vector<Eigen::MatrixXd> X, S;
  Eigen::VectorXd y, u;
  double pobj = 0.0, dobj = 0.0;
  double relp = 0.0, reld = 0.0, relgap = 0.0;
  int iterations = 0;
  std::vector<double> trace_mu;
};

// Largest a with M + a*D psd, via lambda_min of L^-1 D L^-T.
inline double psd_step_length(const Eigen::LLT<Eigen::MatrixXd>& llt,
                              const Eigen::MatrixXd& D) {
  const auto& L = llt.matrixL();
  Eigen::MatrixXd R = L.solve(D);
  R = L.solve(R.transpose().eval());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      0.5 * (R + R.transpose()), Eigen::EigenvaluesOnly);
  double lmin = es.eigenvalues().minCoeff();
  if (lmin >= 0) return std::numeric_limits<double>::infinity();
  return -1.0 / lmin;
}

class Ipm {
 public:
  Ipm(const SdpProblem& prob, const SolverOptions& opt)
      : prob_(prob), opt_(opt), nb_(static_cast<int>(prob.block_dims.size())),
        nf_(prob.num_free), m_(static_cast<int>(prob.constraints.size())) {
    N_ = 0;
    for (int d : prob_.block_dims) N_ += d;
    // Row scaling keeps the Schur complement well conditioned and makes
    // statuses invariant to a uniform rescaling of the input rows.
    rowscale_.resize(static_cast<size_t>(m_));
    b_.resize(m_);
    for (int p = 0; p < m_; ++p) {
      const auto& con = prob_.constraints[static_cast<size_t>(p)];
      double nrm2 = 0;
      for (const auto& e : con.mat)
        nrm2 += e.value * e.value * (e.row == e.col ? 1 : 2);
      for (auto& [k, v] : con.free_c) nrm2 += v * v;
      double s = 1.0 / std::max(1e-8, std::sqrt(nrm2));
      rowscale_[static_cast<size_t>(p)] = s;
      b_(p) = con.rhs * s;
    }
    C_.resize(static_cast<size_t>(nb_));
    for (int b = 0; b < nb_; ++b)
      C_[static_cast<size_t>(b)] = Eigen::MatrixXd::Zero(dim(b), dim(b));
    for (const auto& e : prob_.objective.mat) {
      C_[static_cast<size_t>(e.block)](e.row, e.col) = e.value;
      C_[static_cast<size_t>(e.block)](e.col, e.row) = e.value;
    }
    cf_ = Eigen::VectorXd::Zero(nf_);
    for (auto& [k, v] : prob_.objective.free_c) cf_(k) = v;
    // Constraints grouped per block for the Schur assembly.
    by_block_.assign(static_cast<size_t>(nb_), {});
    for (int p = 0; p < m_; ++p)
      for (const auto& e : prob_.constraints[static_cast<size_t>(p)].mat)
        by_block_[static_cast<size_t>(e.block)].push_back(
            {p, e.row, e.col, e.value * rowscale_[static_cast<size_t>(p)]});
    for (auto& v : by_block_)
      std::stable_sort(v.begin(), v.end(),
                       [](const SdpEntry& a, const SdpEntry& b) {
                         return a.block < b.block;  // block field reused as p
                       });
    F_ = Eigen::MatrixXd::Zero(m_, nf_);
    for (int p = 0; p < m_; ++p)
      for (auto& [k, v] : prob_.constraints[static_cast<size_t>(p)].free_c)
        F_(p, k) = v * rowscale_[static_cast<size_t>(p)];
  }

  IpmResult run() {
    IpmResult res;
    init_point();
    double best_err = std::numeric_limits<double>::infinity();
    int no_progress = 0;
    // Best iterate seen so far; handed back on a stall so callers can still
    // accept a nearly-converged point.
    double snap_err = std::numeric_limits<double>::infinity();
    std::vector<Eigen::MatrixXd> snapX, snapS;
    Eigen::VectorXd snapy, snapu;
    double snap_relp = 0, snap_reld = 0, snap_gap = 0, snap_pobj = 0,
           snap_dobj = 0;
    auto bail = [&](IpmResult::Code code) -> IpmResult& {
      if (snap_err < std::max({res.relp, res.reld, res.relgap})) {
        X_ = snapX;
        S_ = snapS;
        y_ = snapy;
        u_ = snapu;
        res.relp = snap_relp;
        res.reld = snap_reld;
        res.relgap = snap_gap;
        res.pobj = snap_pobj;
        res.dobj = snap_dobj;
      }
      res.code = code;
      finish(res);
      return res;
    };
    const double bscale = 1.0 + (b_.size() ? b_.lpNorm<Eigen::Infinity>() : 0.0);
    double cnorm = cf_.size() ? cf_.lpNorm<Eigen::Infinity>() : 0.0;
    for (int b = 0; b < nb_; ++b)
      cnorm = std::max(cnorm, C_[static_cast<size_t>(b)].lpNorm<Eigen::Infinity>());
    const double cscale = 1.0 + cnorm;

    for (int iter = 0; iter < opt_.max_iterations; ++iter) {
      res.iterations = iter + 1;
      // Residuals.
      Eigen::VectorXd rp = b_ - apply_A() - F_ * u_;
      std::vector<Eigen::MatrixXd> Rd(static_cast<size_t>(nb_));
      for (int b = 0; b < nb_; ++b)
        Rd[static_cast<size_t>(b)] =
            C_[static_cast<size_t>(b)] - S_[static_cast<size_t>(b)] - adjoint_A(b);
      Eigen::VectorXd rf = cf_ - F_.transpose() * y_;
      double mu = 0;
      for (int b = 0; b < nb_; ++b)
        mu += X_[static_cast<size_t>(b)].cwiseProduct(S_[static_cast<size_t>(b)]).sum();
      double comp = mu;
      mu /= N_;
      res.trace_mu.push_back(mu);

      double pobj = cf_.dot(u_), dobj = b_.dot(y_);
      for (int b = 0; b < nb_; ++b)
        pobj += C_[static_cast<size_t>(b)].cwiseProduct(X_[static_cast<size_t>(b)]).sum();
      double relp = rp.lpNorm<Eigen::Infinity>() / bscale;
      double reld = rf.size() ? rf.lpNorm<Eigen::Infinity>() : 0.0;
      for (int b = 0; b < nb_; ++b)
        reld = std::max(reld, Rd[static_cast<size_t>(b)].lpNorm<Eigen::Infinity>());
      reld /= cscale;
      double relgap = std::abs(pobj - dobj) / (1.0 + std::abs(pobj) + std::abs(dobj));

      res.relp = relp; res.reld = reld; res.relgap = relgap;
      res.pobj = pobj; res.dobj = dobj;
      if (opt_.verbose)
        std::fprintf(stderr, "  it %3d  mu %9.2e  relp %9.2e  reld %9.2e  gap %9.2e\n",
                     iter, mu, relp, reld, relgap);

      if (relp <= opt_.feas_tol && reld <= opt_.feas_tol && relgap <= opt_.gap_tol) {
        res.code = IpmResult::Code::Converged;
        finish(res);
        return res;
      }
      if (relp <= opt_.feas_tol && pobj <= opt_.stop_when_pobj_below) {
        res.code = IpmResult::Code::Converged;
        finish(res);
        return res;
      }
      if (relp <= opt_.feas_tol && pobj < -1e9 * cscale) {
        res.code = IpmResult::Code::Unbounded;
        finish(res);
        return res;
      }
      double err = std::max({relp, reld, relgap});
      if (err < snap_err) {
        snap_err = err;
        snapX = X_;
        snapS = S_;
        snapy = y_;
        snapu = u_;
        snap_relp = relp;
        snap_reld = reld;
        snap_gap = relgap;
        snap_pobj = pobj;
        snap_dobj = dobj;
      }
      if (err < 0.9 * best_err) {
        best_err = err;
        no_progress = 0;
      } else if (++no_progress > 25) {
        return bail(IpmResult::Code::Stalled);
      }

      // Factor the current iterate.
      std::vector<Eigen::LLT<Eigen::MatrixXd>> lltX(static_cast<size_t>(nb_)),
          lltS(static_cast<size_t>(nb_));
      std::vector<Eigen::MatrixXd> Sinv(static_cast<size_t>(nb_));
      bool factor_ok = true;
      for (int b = 0; b < nb_; ++b) {
        lltX[static_cast<size_t>(b)].compute(X_[static_cast<size_t>(b)]);
        lltS[static_cast<size_t>(b)].compute(S_[static_cast<size_t>(b)]);
        if (lltX[static_cast<size_t>(b)].info() != Eigen::Success ||
            lltS[static_cast<size_t>(b)].info() != Eigen::Success) {
          factor_ok = false;
          break;
        }
        Sinv[static_cast<size_t>(b)] = lltS[static_cast<size_t>(b)].solve(
            Eigen::MatrixXd::Identity(dim(b), dim(b)));
      }
      if (!factor_ok) {
        return bail(IpmResult::Code::Stalled);
      }

      Eigen::MatrixXd M = assemble_schur(Sinv);
      Eigen::LLT<Eigen::MatrixXd> lltM;
      Eigen::LLT<Eigen::MatrixXd> lltG;
      Eigen::PartialPivLU<Eigen::MatrixXd> luK;
      Eigen::MatrixXd K0;  // unregularized saddle matrix, kept for refinement
      bool use_kkt = false;
      lltM.compute(M);
      bool m_clean = lltM.info() == Eigen::Success;
      if (nf_ > 0) {
        // Free variables make the direction system a saddle problem. The
        // elimination through M^-1 is the accurate route while M is cleanly
        // positive definite; when it is not (no PSD entries beyond the
        // phase-1 slack, say), factor the joint system instead. There the
        // quasi-definite regularizers are scaled per diagonal block and two
        // refinement passes remove their bias.
        bool elim_ok = false;
        if (m_clean) {
          Eigen::MatrixXd G = F_.transpose() * lltM.solve(F_);
          G.diagonal().array() +=
              1e-13 * (1.0 + G.diagonal().cwiseAbs().maxCoeff());
          lltG.compute(G);
          elim_ok = lltG.info() == Eigen::Success;
        }
        if (!elim_ok) {
          use_kkt = true;
          K0.setZero(m_ + nf_, m_ + nf_);
          K0.topLeftCorner(m_, m_) = M;
          K0.topRightCorner(m_, nf_) = F_;
          K0.bottomLeftCorner(nf_, m_) = F_.transpose();
          Eigen::MatrixXd Kreg = K0;
          Kreg.diagonal().head(m_).array() +=
              1e-12 * (1.0 + M.diagonal().cwiseAbs().maxCoeff());
          Kreg.diagonal().tail(nf_).array() -=
              1e-12 * (1.0 + F_.cwiseAbs().maxCoeff());
          luK.compute(Kreg);
        }
      } else if (!m_clean && !factor_schur(M, lltM)) {
        return bail(IpmResult::Code::Stalled);
      }

      bool dir_ok = true;
      auto solve_direction = [&](const std::vector<Eigen::MatrixXd>& Zc,
                                 std::vector<Eigen::MatrixXd>& dX,
                                 std::vector<Eigen::MatrixXd>& dS,
                                 Eigen::VectorXd& dy, Eigen::VectorXd& du) {
        // h_p = rp_p - <A_p, Zc> + <A_p, X Rd Sinv>
        Eigen::VectorXd h = rp;
        for (int b = 0; b < nb_; ++b) {
          Eigen::MatrixXd T = X_[static_cast<size_t>(b)] *
                              Rd[static_cast<size_t>(b)] *
                              Sinv[static_cast<size_t>(b)];
          subtract_inner(b, Zc[static_cast<size_t>(b)], h);
          add_inner(b, T, h);
        }
        if (nf_ > 0 && !use_kkt) {
          Eigen::VectorXd t = lltM.solve(h);
          du = lltG.solve(F_.transpose() * t - rf);
          dy = lltM.solve(h - F_ * du);
          if (!dy.allFinite() || !du.allFinite()) dir_ok = false;
        } else if (nf_ > 0) {
          Eigen::VectorXd rhs(m_ + nf_);
          rhs.head(m_) = h;
          rhs.tail(nf_) = rf;
          Eigen::VectorXd z = luK.solve(rhs);
          z += luK.solve(rhs - K0 * z);
          z += luK.solve(rhs - K0 * z);
          if (!z.allFinite()) dir_ok = false;
          dy = z.head(m_);
          du = z.tail(nf_);
        } else {
          du.resize(0);
          dy = lltM.solve(h);
          if (!dy.allFinite()) dir_ok = false;
        }
        dS.resize(static_cast<size_t>(nb_));
        dX.resize(static_cast<size_t>(nb_));
        for (int b = 0; b < nb_; ++b) {
          Eigen::MatrixXd dSb = Rd[static_cast<size_t>(b)] - adjoint_dy(b, dy);
          Eigen::MatrixXd dXb = Zc[static_cast<size_t>(b)] -
                                X_[static_cast<size_t>(b)] * dSb * Sinv[static_cast<size_t>(b)];
          dX[static_cast<size_t>(b)] = 0.5 * (dXb + dXb.transpose());
          dS[static_cast<size_t>(b)] = dSb;
        }
      };

      // Predictor (affine scaling).
      std::vector<Eigen::MatrixXd> Zc(static_cast<size_t>(nb_));
      for (int b = 0; b < nb_; ++b) Zc[static_cast<size_t>(b)] = -X_[static_cast<size_t>(b)];
      std::vector<Eigen::MatrixXd> dXa, dSa;
      Eigen::VectorXd dya, dua;
      solve_direction(Zc, dXa, dSa, dya, dua);
      if (!dir_ok) {
        return bail(IpmResult::Code::Stalled);
      }
      double ap_aff = 1.0, ad_aff = 1.0;
      for (int b = 0; b < nb_; ++b) {
        ap_aff = std::min(ap_aff, psd_step_length(lltX[static_cast<size_t>(b)],
                                                  dXa[static_cast<size_t>(b)]));
        ad_aff = std::min(ad_aff, psd_step_length(lltS[static_cast<size_t>(b)],
                                                  dSa[static_cast<size_t>(b)]));
      }
      double mu_aff = 0;
      for (int b = 0; b < nb_; ++b)
        mu_aff += (X_[static_cast<size_t>(b)] + ap_aff * dXa[static_cast<size_t>(b)])
                      .cwiseProduct(S_[static_cast<size_t>(b)] +
                                    ad_aff * dSa[static_cast<size_t>(b)])
                      .sum();
      mu_aff = std::max(mu_aff / N_, 0.0);
      double sigma = std::pow(mu_aff / std::max(mu, 1e-300), 3.0);
      sigma = std::clamp(sigma, 1e-8, 1.0);

      // Corrector.
      for (int b = 0; b < nb_; ++b)
        Zc[static_cast<size_t>(b)] =
            sigma * mu * Sinv[static_cast<size_t>(b)] - X_[static_cast<size_t>(b)] -
            dXa[static_cast<size_t>(b)] * dSa[static_cast<size_t>(b)] *
                Sinv[static_cast<size_t>(b)];
      std::vector<Eigen::MatrixXd> dX, dS;
      Eigen::VectorXd dy, du;
      solve_direction(Zc, dX, dS, dy, du);
      auto step_pair = [&](const std::vector<Eigen::MatrixXd>& gX,
                           const std::vector<Eigen::MatrixXd>& gS) {
        double a_p = 1.0, a_d = 1.0;
        for (int b = 0; b < nb_; ++b) {
          a_p = std::min(a_p, opt_.step_fraction *
                                  psd_step_length(lltX[static_cast<size_t>(b)],
                                                  gX[static_cast<size_t>(b)]));
          a_d = std::min(a_d, opt_.step_fraction *
                                  psd_step_length(lltS[static_cast<size_t>(b)],
                                                  gS[static_cast<size_t>(b)]));
        }
        return std::pair<double, double>{std::min(a_p, 1.0), std::min(a_d, 1.0)};
      };
      auto mu_after = [&](const std::vector<Eigen::MatrixXd>& gX,
                          const std::vector<Eigen::MatrixXd>& gS, double a_p,
                          double a_d) {
        double t = 0;
        for (int b = 0; b < nb_; ++b)
          t += (X_[static_cast<size_t>(b)] + a_p * gX[static_cast<size_t>(b)])
                   .cwiseProduct(S_[static_cast<size_t>(b)] +
                                 a_d * gS[static_cast<size_t>(b)])
                   .sum();
        return t / N_;
      };
      auto [ap, ad] = step_pair(dX, dS);
      // The second-order term can overshoot badly near the cone boundary;
      // retreat to a plain centering direction when the predicted mu blows
      // up, and damp the step if even that is not enough.
      if (mu_after(dX, dS, ap, ad) > 5.0 * mu) {
        double sig2 = std::max(sigma, 0.5);
        for (int b = 0; b < nb_; ++b)
          Zc[static_cast<size_t>(b)] =
              sig2 * mu * Sinv[static_cast<size_t>(b)] - X_[static_cast<size_t>(b)];
        solve_direction(Zc, dX, dS, dy, du);
        std::tie(ap, ad) = step_pair(dX, dS);
      }
      for (int damp = 0; damp < 30 && mu_after(dX, dS, ap, ad) > 5.0 * mu;
           ++damp) {
        ap *= 0.5;
        ad *= 0.5;
      }
      if (!dir_ok) {
        return bail(IpmResult::Code::Stalled);
      }
      if (ap < 1e-10 && ad < 1e-10) {
        return bail(IpmResult::Code::Stalled);
      }
      for (int b = 0; b < nb_; ++b) {
        X_[static_cast<size_t>(b)] += ap * dX[static_cast<size_t>(b)];
        S_[static_cast<size_t>(b)] += ad * dS[static_cast<size_t>(b)];
        // Exact symmetry keeps the Cholesky factors honest.
        X_[static_cast<size_t>(b)] =
            0.5 * (X_[static_cast<size_t>(b)] + X_[static_cast<size_t>(b)].transpose().eval());
        S_[static_cast<size_t>(b)] =
            0.5 * (S_[static_cast<size_t>(b)] + S_[static_cast<size_t>(b)].transpose().eval());
      }
      y_ += ad * dy;
      if (nf_ > 0) u_ += ap * du;
      (void)comp;
    }
    return bail(IpmResult::Code::MaxIterations);
  }

 private:
  int dim(int b) const { return prob_.block_dims[static_cast<size_t>(b)]; }

  void init_point() {
    double amax = 0, bmax = b_.size() ? b_.cwiseAbs().maxCoeff() : 0.0;
    for (int b = 0; b < nb_; ++b)
      for (const auto& e : by_block_[static_cast<size_t>(b)])
        amax = std::max(amax, std::abs(e.value));
    double cmax = 0;
    for (int b = 0; b < nb_; ++b)
      cmax = std::max(cmax, C_[static_cast<size_t>(b)].cwiseAbs().maxCoeff());
    double xi_p = std::max(10.0, 5.0 * bmax / (1.0 + amax));
    double xi_d = std::max(10.0, std::sqrt(1.0 + std::max(cmax, amax)));
    X_.resize(static_cast<size_t>(nb_));
    S_.resize(static_cast<size_t>(nb_));
    for (int b = 0; b < nb_; ++b) {
      X_[static_cast<size_t>(b)] = xi_p * Eigen::MatrixXd::Identity(dim(b), dim(b));
      S_[static_cast<size_t>(b)] = xi_d * Eigen::MatrixXd::Identity(dim(b), dim(b));
    }
    if (start_X_) X_ = *start_X_;
    y_ = Eigen::VectorXd::Zero(m_);
    u_ = Eigen::VectorXd::Zero(nf_);
  }

 public:
  // Strictly feasible primal start, when the caller can construct one (the
  // phase-1 problem always can: identity blocks with unit slack).
  void set_start(std::vector<Eigen::MatrixXd> X0) { start_X_ = std::move(X0); }

 private:

  Eigen::VectorXd apply_A() const {
    Eigen::VectorXd r = Eigen::VectorXd::Zero(m_);
    for (int b = 0; b < nb_; ++b)
      for (const auto& e : by_block_[static_cast<size_t>(b)]) {
        double x = X_[static_cast<size_t>(b)](e.row, e.col);
        r(e.block) += e.value * x * (e.row == e.col ? 1.0 : 2.0);
      }
    return r;
  }

  // sum_p y_p A_{p,b} as a dense matrix (scaled coefficients).
  Eigen::MatrixXd adjoint_dy(int b, const Eigen::VectorXd& w) const {
    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(dim(b), dim(b));
    for (const auto& e : by_block_[static_cast<size_t>(b)]) {
      double v = e.value * w(e.block);
      R(e.row, e.col) += v;
      if (e.row != e.col) R(e.col, e.row) += v;
    }
    return R;
  }
  Eigen::MatrixXd adjoint_A(int b) const { return adjoint_dy(b, y_); }

  void add_inner(int b, const Eigen::MatrixXd& T, Eigen::VectorXd& h) const {
    // h_p += <A_{p,b}, sym(T)> using the entry list.
    for (const auto& e : by_block_[static_cast<size_t>(b)]) {
      double v = e.row == e.col ? T(e.row, e.col)
                                : T(e.row, e.col) + T(e.col, e.row);
      h(e.block) += e.value * v;
    }
  }
  void subtract_inner(int b, const Eigen::MatrixXd& T, Eigen::VectorXd& h) const {
    for (const auto& e : by_block_[static_cast<size_t>(b)]) {
      double v = e.row == e.col ? T(e.row, e.col)
                                : T(e.row, e.col) + T(e.col, e.row);
      h(e.block) -= e.value * v;
    }
  }

  // M_pq = sum_b <A_{p,b}, X_b A_{q,b} Sinv_b>, symmetric positive definite.
  Eigen::MatrixXd assemble_schur(const std::vector<Eigen::MatrixXd>& Sinv) const {
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(m_, m_);
    for (int b = 0; b < nb_; ++b) {
      const auto& entries = by_block_[static_cast<size_t>(b)];
      if (entries.empty()) continue;
      const Eigen::MatrixXd& X = X_[static_cast<size_t>(b)];
      const Eigen::MatrixXd& Si = Sinv[static_cast<size_t>(b)];
      // Walk constraints in order of first appearance.
      size_t lo = 0;
      Eigen::MatrixXd T(dim(b), dim(b));
      while (lo < entries.size()) {
        size_t hi = lo;
        int q = entries[lo].block;
        while (hi < entries.size() && entries[hi].block == q) ++hi;
        T.setZero();
        for (size_t k = lo; k < hi; ++k) {
          const auto& e = entries[k];
          T.noalias() += e.value * X.col(e.row) * Si.row(e.col);
          if (e.row != e.col)
            T.noalias() += e.value * X.col(e.col) * Si.row(e.row);
        }
        // Inner products against every constraint in this block.
        for (const auto& e : entries) {
          double v = e.row == e.col ? T(e.row, e.col)
                                    : T(e.row, e.col) + T(e.col, e.row);
          M(e.block, q) += e.value * v;
        }
        lo = hi;
      }
    }
    // The HKM Schur complement is symmetric in exact arithmetic; enforce it.
    M = 0.5 * (M + M.transpose().eval());
    return M;
  }

  bool factor_schur(Eigen::MatrixXd& M, Eigen::LLT<Eigen::MatrixXd>& llt) const {
    double shift = 0.0;
    double base = M.diagonal().cwiseAbs().maxCoeff();
    for (int attempt = 0; attempt < 6; ++attempt) {
      llt.compute(M);
      if (llt.info() == Eigen::Success) return true;
      shift = shift == 0.0 ? 1e-14 * (1.0 + base) : shift * 100;
      M.diagonal().array() += shift;
    }
    return false;
  }

  void finish(IpmResult& res) {
    res.X = X_;
    res.S = S_;
    res.u = u_;
    // Return multipliers in the original (unscaled) row convention.
    res.y = y_;
    for (int p = 0; p < m_; ++p) res.y(p) *= rowscale_[static_cast<size_t>(p)];
  }

  const SdpProblem& prob_;
  SolverOptions opt_;
  int nb_, nf_, m_, N_ = 0;
  std::vector<double> rowscale_;
  Eigen::VectorXd b_, cf_;
  std::vector<Eigen::MatrixXd> C_;
  // Entry lists per block; SdpEntry::block is reused to hold the constraint
  // index, value carries the row scaling.
  std::vector<std::vector<SdpEntry>> by_block_;
  Eigen::MatrixXd F_;
  std::vector<Eigen::MatrixXd> X_, S_;
  Eigen::VectorXd y_, u_;
  std::optional<std::vector<Eigen::MatrixXd>> start_X_;
};

// Phase-I companion problem: minimize a slack tau >= 0 added along the initial
// residual direction. tau* = 0 iff the original equality system meets the PSD
// cone; at a positive optimum the dual multipliers form an improving ray
// proving infeasibility.
inline SdpProblem make_phase1(const SdpProblem& prob) {
  SdpProblem p1;
  p1.block_dims = prob.block_dims;
  p1.block_dims.push_back(1);  // tau
  const int tau_block = static_cast<int>(p1.block_dims.size()) - 1;
  p1.num_free = prob.num_free;
  p1.sense = SdpSense::Minimize;
  p1.objective.mat.push_back({tau_block, 0, 0, 1.0});
  p1.constraints = prob.constraints;
  for (auto& con : p1.constraints) {
    // r_p = b_p - <A_p, I>: residual of the identity starting point.
    double r = con.rhs;
    for (const auto& e : con.mat)
      if (e.row == e.col) r -= e.value;
    if (std::abs(r) > 0) con.mat.push_back({tau_block, 0, 0, r});
  }
  return p1;
}

}  // namespace detail

inline ResidualReport verify(const SdpProblem& prob, const SdpSolution& sol,
                             double psd_tol = 1e-7) {
  ResidualReport rep;
  const int nb = static_cast<int>(prob.block_dims.size());
  rep.min_block_eigen = std::numeric_limits<double>::infinity();
  rep.cholesky_ok = true;
  for (int b = 0; b < nb; ++b) {
    const Eigen::MatrixXd& X = sol.block_values[static_cast<size_t>(b)];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X, Eigen::EigenvaluesOnly);
    rep.min_block_eigen = std::min(rep.min_block_eigen, es.eigenvalues().minCoeff());
    Eigen::MatrixXd shifted =
        X + psd_tol * Eigen::MatrixXd::Identity(X.rows(), X.cols());
    if (Eigen::LLT<Eigen::MatrixXd>(shifted).info() != Eigen::Success)
      rep.cholesky_ok = false;
  }
  for (const auto& con : prob.constraints) {
    double lhs = 0;
    for (const auto& e : con.mat) {
      double x = sol.block_values[static_cast<size_t>(e.block)](e.row, e.col);
      lhs += e.value * x * (e.row == e.col ? 1.0 : 2.0);
    }
    for (auto& [k, v] : con.free_c) lhs += v * sol.free_values(k);
    rep.primal_residual = std::max(rep.primal_residual, std::abs(lhs - con.rhs));
  }
  double pobj = 0;
  for (const auto& e : prob.objective.mat) {
    double x = sol.block_values[static_cast<size_t>(e.block)](e.row, e.col);
    pobj += e.value * x * (e.row == e.col ? 1.0 : 2.0);
  }
  for (auto& [k, v] : prob.objective.free_c) pobj += v * sol.free_values(k);
  if (sol.y.size() == static_cast<Eigen::Index>(prob.constraints.size()) &&
      !sol.dual_blocks.empty()) {
    double dobj = 0;
    for (size_t p = 0; p < prob.constraints.size(); ++p)
      dobj += sol.y(static_cast<Eigen::Index>(p)) * prob.constraints[p].rhs;
    rep.duality_gap = std::abs(pobj - dobj);
    for (int b = 0; b < nb; ++b) {
      int d = prob.block_dims[static_cast<size_t>(b)];
      Eigen::MatrixXd R = Eigen::MatrixXd::Zero(d, d);
      for (const auto& e : prob.objective.mat)
        if (e.block == b) {
          R(e.row, e.col) += e.value;
          if (e.row != e.col) R(e.col, e.row) += e.value;
        }
      for (size_t p = 0; p < prob.constraints.size(); ++p)
        for (const auto& e : prob.constraints[p].mat)
          if (e.block == b) {
            double v = e.value * sol.y(static_cast<Eigen::Index>(p));
            R(e.row, e.col) -= v;
            if (e.row != e.col) R(e.col, e.row) -= v;
          }
      R -= sol.dual_blocks[static_cast<size_t>(b)];
      rep.dual_residual = std::max(rep.dual_residual, R.cwiseAbs().maxCoeff());
      rep.complementarity +=
          sol.block_values[static_cast<size_t>(b)]
              .cwiseProduct(sol.dual_blocks[static_cast<size_t>(b)])
              .sum();
    }
    Eigen::VectorXd rf = Eigen::VectorXd::Zero(prob.num_free);
    for (auto& [k, v] : prob.objective.free_c) rf(k) = v;
    for (size_t p = 0; p < prob.constraints.size(); ++p)
      for (auto& [k, v] : prob.constraints[p].free_c)
        rf(k) -= v * sol.y(static_cast<Eigen::Index>(p));
    if (rf.size())
      rep.dual_residual = std::max(rep.dual_residual, rf.lpNorm<Eigen::Infinity>());
  }
  return rep;
}

namespace detail {

// Quality of (y, S) as a primal-infeasibility ray: want A^T(y) + S = 0,
// S psd, b.y > 0. Returns the worst violation after normalizing by |y|.
inline double ray_residual(const SdpProblem& prob, const Eigen::VectorXd& y) {
  double ynorm = y.lpNorm<Eigen::Infinity>();
  if (!(ynorm > 0)) return std::numeric_limits<double>::infinity();
  double worst = 0;
  for (size_t b = 0; b < prob.block_dims.size(); ++b) {
    int d = prob.block_dims[b];
    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(d, d);
    for (size_t p = 0; p < prob.constraints.size(); ++p)
      for (const auto& e : prob.constraints[p].mat)
        if (e.block == static_cast<int>(b)) {
          double v = e.value * y(static_cast<Eigen::Index>(p));
          R(e.row, e.col) += v;
          if (e.row != e.col) R(e.col, e.row) += v;
        }
    // Need sum_p y_p A_p negative semidefinite: penalize positive eigenvalues.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(R, Eigen::EigenvaluesOnly);
    worst = std::max(worst, es.eigenvalues().maxCoeff());
  }
  Eigen::VectorXd af = Eigen::VectorXd::Zero(prob.num_free);
  for (size_t p = 0; p < prob.constraints.size(); ++p)
    for (auto& [k, v] : prob.constraints[p].free_c)
      af(k) += v * y(static_cast<Eigen::Index>(p));
  if (af.size()) worst = std::max(worst, af.lpNorm<Eigen::Infinity>());
  double by = 0;
  for (size_t p = 0; p < prob.constraints.size(); ++p)
    by += y(static_cast<Eigen::Index>(p)) * prob.constraints[p].rhs;
  if (by <= 0) return std::numeric_limits<double>::infinity();
  return worst / ynorm;
}

}  // namespace detail

// Entry point. Feasibility problems run phase I only; minimization runs
// phase I to settle feasibility, then the actual objective.
inline SdpSolution solve(const SdpProblem& prob, const SolverOptions& opt = {}) {
  prob.validate();
  SdpSolution sol;
  const size_t nb = prob.block_dims.size();

  SdpProblem p1 = detail::make_phase1(prob);
  // Phase I decides sign questions about the optimal slack, so its gap target
  // is tighter than the caller's and it may bail out early once the slack is
  // comfortably below the feasibility tolerance.
  SolverOptions opt1 = opt;
  opt1.gap_tol = std::min(opt.gap_tol, opt.feas_tol) * 1e-3;
  opt1.stop_when_pobj_below = 0.01 * opt.feas_tol;
  detail::Ipm ipm1(p1, opt1);
  {
    // X = identity, slack = 1 satisfies the phase-1 constraints exactly.
    std::vector<Eigen::MatrixXd> X0;
    for (int d : p1.block_dims)
      X0.push_back(Eigen::MatrixXd::Identity(d, d));
    ipm1.set_start(std::move(X0));
  }
  detail::IpmResult r1 = ipm1.run();
  sol.iterations = r1.iterations;
  sol.trace_mu = r1.trace_mu;
  double tau = r1.X.back()(0, 0);

  const double infeas_threshold = 1e-5;
  double r1_err = std::max({r1.relp, r1.reld, r1.relgap});
  bool r1_solved = r1.code == detail::IpmResult::Code::Converged ||
                   ((r1.code == detail::IpmResult::Code::Stalled ||
                     r1.code == detail::IpmResult::Code::MaxIterations) &&
                    r1_err <= opt.accept_tol);
  auto fill_primal = [&](const detail::IpmResult& r) {
    sol.block_values.assign(r.X.begin(), r.X.begin() + static_cast<long>(nb));
    sol.dual_blocks.assign(r.S.begin(), r.S.begin() + static_cast<long>(nb));
    sol.free_values = r.u;
    sol.y = r.y.head(static_cast<Eigen::Index>(prob.constraints.size()));
    ResidualReport rep = verify(prob, sol, opt.psd_tol);
    sol.primal_residual = rep.primal_residual;
    sol.dual_residual = rep.dual_residual;
    sol.duality_gap = rep.duality_gap;
  };

  if (r1_solved && tau < opt.feas_tol) {
    if (prob.sense == SdpSense::Feasibility) {
      fill_primal(r1);
      sol.status = SdpStatus::Feasible;
      sol.objective = 0.0;
      sol.message = "phase-1 slack " + detail::sci(tau);
      return sol;
    }
  } else if (tau > infeas_threshold) {
    // The slack stayed genuinely positive: the dual multipliers certify
    // primal infeasibility. The ray is validated independently, so it can be
    // trusted even when the iteration itself stalled short of convergence.
    Eigen::VectorXd yray = r1.y.head(static_cast<Eigen::Index>(prob.constraints.size()));
    double rres = detail::ray_residual(prob, yray);
    if (rres < 1e-6) {
      sol.status = SdpStatus::Infeasible;
      sol.y = yray;
      sol.dual_blocks.assign(r1.S.begin(), r1.S.begin() + static_cast<long>(nb));
      sol.ray_residual = rres;
      sol.objective = 0.0;
      sol.message = "phase-1 slack " + detail::sci(tau);
      return sol;
    }
    sol.status = SdpStatus::NumericFailure;
    sol.message = r1_solved
                      ? "phase-1 reports slack " + detail::sci(tau) +
                            " but the infeasibility ray did not validate"
                      : "phase-1 inconclusive (slack " + detail::sci(tau) + ")";
    return sol;
  } else {
    sol.status = SdpStatus::NumericFailure;
    sol.message = "phase-1 inconclusive (slack " + detail::sci(tau) + ")";
    return sol;
  }

  // Feasible minimization: solve the real problem.
  detail::Ipm ipm2(prob, opt);
  detail::IpmResult r2 = ipm2.run();
  sol.iterations += r2.iterations;
  sol.trace_mu.insert(sol.trace_mu.end(), r2.trace_mu.begin(), r2.trace_mu.end());
  double r2_err = std::max({r2.relp, r2.reld, r2.relgap});
  bool accept_stall =
      (r2.code == detail::IpmResult::Code::Stalled ||
       r2.code == detail::IpmResult::Code::MaxIterations) &&
      r2_err <= opt.accept_tol;
  if (r2.code == detail::IpmResult::Code::Converged || accept_stall) {
    fill_primal(r2);
    sol.status = SdpStatus::Optimal;
    double pobj = 0;
    for (const auto& e : prob.objective.mat) {
      double x = sol.block_values[static_cast<size_t>(e.block)](e.row, e.col);
      pobj += e.value * x * (e.row == e.col ? 1.0 : 2.0);
    }
    for (auto& [k, v] : prob.objective.free_c) pobj += v * sol.free_values(k);
    sol.objective = pobj;
    if (accept_stall) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "converged to reduced accuracy (err %.2e)",
                    r2_err);
      sol.message = buf;
    }
    return sol;
  }
  if (r2.code == detail::IpmResult::Code::Unbounded) {
    sol.status = SdpStatus::Unbounded;
    sol.message = "objective diverges on a feasible sequence";
    return sol;
  }
  sol.status = SdpStatus::NumericFailure;
  sol.message = "phase-2 iteration did not converge";
  return sol;
}

// ---------------------------------------------------------------------------
// Sparse text round-trip. 0-based indices, 17 significant digits.

inline std::string write_sdpa_sparse(const SdpProblem& prob) {
  std::string out;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out += "blocks " + std::to_string(prob.block_dims.size()) + "\n";
  for (size_t i = 0; i < prob.block_dims.size(); ++i)
    out += (i ? " " : "") + std::to_string(prob.block_dims[i]);
  out += "\nfree " + std::to_string(prob.num_free) + "\n";
  out += "constraints " + std::to_string(prob.constraints.size()) + "\n";
  out += std::string("sense ") +
         (prob.sense == SdpSense::Minimize ? "minimize" : "feasibility") + "\n";
  for (const auto& e : prob.objective.mat)
    out += "obj " + std::to_string(e.block) + " " + std::to_string(e.row) + " " +
           std::to_string(e.col) + " " + num(e.value) + "\n";
  for (auto& [k, v] : prob.objective.free_c)
    out += "objf " + std::to_string(k) + " " + num(v) + "\n";
  for (size_t p = 0; p < prob.constraints.size(); ++p) {
    const auto& con = prob.constraints[p];
    for (const auto& e : con.mat)
      out += "con " + std::to_string(p) + " " + std::to_string(e.block) + " " +
             std::to_string(e.row) + " " + std::to_string(e.col) + " " +
             num(e.value) + "\n";
    for (auto& [k, v] : con.free_c)
      out += "conf " + std::to_string(p) + " " + std::to_string(k) + " " +
             num(v) + "\n";
    out += "rhs " + std::to_string(p) + " " + num(con.rhs) + "\n";
  }
  return out;
}

inline SdpProblem read_sdpa_sparse(const std::string& text) {
  SdpProblem prob;
  std::istringstream in(text);
  std::string tok;
  auto expect = [&](const char* want) {
    if (!(in >> tok) || tok != want)
      throw std::runtime_error(std::string("sdpa: expected '") + want +
                               "', got '" + tok + "'");
  };
  size_t nb = 0, m = 0;
  expect("blocks");
  in >> nb;
  prob.block_dims.resize(nb);
  for (size_t i = 0; i < nb; ++i) in >> prob.block_dims[i];
  expect("free");
  in >> prob.num_free;
  expect("constraints");
  in >> m;
  prob.constraints.resize(m);
  expect("sense");
  in >> tok;
  if (tok == "minimize")
    prob.sense = SdpSense::Minimize;
  else if (tok == "feasibility")
    prob.sense = SdpSense::Feasibility;
  else
    throw std::runtime_error("sdpa: bad sense '" + tok + "'");
  while (in >> tok) {
    if (tok == "obj") {
      SdpEntry e;
      in >> e.block >> e.row >> e.col >> e.value;
      prob.objective.mat.push_back(e);
    } else if (tok == "objf") {
      int k; double v;
      in >> k >> v;
      prob.objective.free_c.push_back({k, v});
    } else if (tok == "con") {
      size_t p; SdpEntry e;
      in >> p >> e.block >> e.row >> e.col >> e.value;
      if (p >= m) throw std::runtime_error("sdpa: constraint index out of range");
      prob.constraints[p].mat.push_back(e);
    } else if (tok == "conf") {
      size_t p; int k; double v;
      in >> p >> k >> v;
      if (p >= m) throw std::runtime_error("sdpa: constraint index out of range");
      prob.constraints[p].free_c.push_back({k, v});
    } else if (tok == "rhs") {
      size_t p; double v;
      in >> p >> v;
      if (p >= m) throw std::runtime_error("sdpa: constraint index out of range");
      prob.constraints[p].rhs = v;
    } else {
      throw std::runtime_error("sdpa: unknown record '" + tok + "'");
    }
    if (!in && !in.eof()) throw std::runtime_error("sdpa: malformed numeric field");
  }
  prob.validate();
  return prob;
}

}  // namespace vecstab
