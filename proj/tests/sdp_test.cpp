#include "vecstab/sdp.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <random>

using namespace vecstab;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Independent KKT audit: recompute every optimality condition from the raw
// problem data, without touching solver internals.
struct KktResiduals {
  double primal;  // max |<A_p,X> + a_p.u - b_p|
  double dual;    // max |C - sum y A - S| entry, and free-var rows
  double comp;    // <X, S>
  double xmin, smin;
};

KktResiduals kkt_oracle(const SdpProblem& prob, const SdpSolution& sol) {
  KktResiduals r{0, 0, 0, 1e300, 1e300};
  for (const auto& con : prob.constraints) {
    double lhs = 0;
    for (const auto& e : con.mat)
      lhs += e.value * sol.block_values[(size_t)e.block](e.row, e.col) *
             (e.row == e.col ? 1.0 : 2.0);
    for (auto& [k, v] : con.free_c) lhs += v * sol.free_values(k);
    r.primal = std::max(r.primal, std::abs(lhs - con.rhs));
  }
  for (size_t b = 0; b < prob.block_dims.size(); ++b) {
    int d = prob.block_dims[b];
    MatrixXd R = MatrixXd::Zero(d, d);
    for (const auto& e : prob.objective.mat)
      if (e.block == (int)b) {
        R(e.row, e.col) += e.value;
        if (e.row != e.col) R(e.col, e.row) += e.value;
      }
    for (size_t p = 0; p < prob.constraints.size(); ++p)
      for (const auto& e : prob.constraints[p].mat)
        if (e.block == (int)b) {
          R(e.row, e.col) -= e.value * sol.y((Eigen::Index)p);
          if (e.row != e.col) R(e.col, e.row) -= e.value * sol.y((Eigen::Index)p);
        }
    R -= sol.dual_blocks[b];
    r.dual = std::max(r.dual, R.cwiseAbs().maxCoeff());
    r.comp += sol.block_values[b].cwiseProduct(sol.dual_blocks[b]).sum();
    Eigen::SelfAdjointEigenSolver<MatrixXd> ex(sol.block_values[b],
                                               Eigen::EigenvaluesOnly);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(sol.dual_blocks[b],
                                               Eigen::EigenvaluesOnly);
    r.xmin = std::min(r.xmin, ex.eigenvalues().minCoeff());
    r.smin = std::min(r.smin, es.eigenvalues().minCoeff());
  }
  VectorXd rf = VectorXd::Zero(prob.num_free);
  for (auto& [k, v] : prob.objective.free_c) rf(k) = v;
  for (size_t p = 0; p < prob.constraints.size(); ++p)
    for (auto& [k, v] : prob.constraints[p].free_c)
      rf(k) -= v * sol.y((Eigen::Index)p);
  if (rf.size()) r.dual = std::max(r.dual, rf.lpNorm<Eigen::Infinity>());
  return r;
}

// Strictly feasible random problem: draw an interior primal-dual pair and
// back out b and C so that pair is feasible for the constructed data.
SdpProblem random_strictly_feasible(std::mt19937_64& rng, int seed_tag) {
  (void)seed_tag;
  std::uniform_int_distribution<int> dim_d(2, 5), nfree_d(0, 3), ncon_d(4, 9);
  std::uniform_real_distribution<double> val(-2.0, 2.0);
  SdpProblem prob;
  int nb = 2;
  for (int b = 0; b < nb; ++b) prob.block_dims.push_back(dim_d(rng));
  prob.num_free = nfree_d(rng);
  prob.sense = SdpSense::Minimize;
  int m = ncon_d(rng);

  std::vector<MatrixXd> Xstar, Sstar;
  for (int d : prob.block_dims) {
    MatrixXd A = MatrixXd::NullaryExpr(d, d, [&] { return val(rng); });
    Xstar.push_back(A * A.transpose() + MatrixXd::Identity(d, d));
    MatrixXd B = MatrixXd::NullaryExpr(d, d, [&] { return val(rng); });
    Sstar.push_back(B * B.transpose() + MatrixXd::Identity(d, d));
  }
  VectorXd ustar = VectorXd::NullaryExpr(prob.num_free, [&] { return val(rng); });
  VectorXd ystar = VectorXd::NullaryExpr(m, [&] { return val(rng); });

  for (int p = 0; p < m; ++p) {
    SdpConstraint con;
    for (int b = 0; b < nb; ++b) {
      int d = prob.block_dims[(size_t)b];
      std::uniform_int_distribution<int> idx(0, d - 1);
      for (int k = 0; k < 3; ++k) {
        int i = idx(rng), j = idx(rng);
        if (i > j) std::swap(i, j);
        bool dup = false;
        for (auto& e : con.mat)
          if (e.block == b && e.row == i && e.col == j) dup = true;
        if (!dup) con.mat.push_back({b, i, j, val(rng)});
      }
    }
    for (int k = 0; k < prob.num_free; ++k)
      if (val(rng) > 0) con.free_c.push_back({k, val(rng)});
    double lhs = 0;
    for (auto& e : con.mat)
      lhs += e.value * Xstar[(size_t)e.block](e.row, e.col) *
             (e.row == e.col ? 1.0 : 2.0);
    for (auto& [k, v] : con.free_c) lhs += v * ustar(k);
    con.rhs = lhs;  // X*, u* is primal strictly feasible by construction
    prob.constraints.push_back(con);
  }
  // C := sum_p y*_p A_p + S*  => y*, S* is dual strictly feasible.
  for (int b = 0; b < nb; ++b) {
    int d = prob.block_dims[(size_t)b];
    MatrixXd Cb = Sstar[(size_t)b];
    for (int p = 0; p < m; ++p)
      for (auto& e : prob.constraints[(size_t)p].mat)
        if (e.block == b) {
          Cb(e.row, e.col) += e.value * ystar(p);
          if (e.row != e.col) Cb(e.col, e.row) += e.value * ystar(p);
        }
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j)
        if (Cb(i, j) != 0.0) prob.objective.mat.push_back({b, i, j, Cb(i, j)});
  }
  // Free-variable dual feasibility: c_f = A_f^T y*.
  VectorXd cfree = VectorXd::Zero(prob.num_free);
  for (int p = 0; p < m; ++p)
    for (auto& [k, v] : prob.constraints[(size_t)p].free_c)
      cfree(k) += v * ystar(p);
  for (int k = 0; k < prob.num_free; ++k)
    if (cfree(k) != 0.0) prob.objective.free_c.push_back({k, cfree(k)});
  return prob;
}

SdpProblem trace_example() {
  // minimize <diag(1,2), X>  s.t.  tr X = 1, X psd.
  SdpProblem prob;
  prob.block_dims = {2};
  prob.sense = SdpSense::Minimize;
  prob.objective.mat = {{0, 0, 0, 1.0}, {0, 1, 1, 2.0}};
  SdpConstraint tr;
  tr.mat = {{0, 0, 0, 1.0}, {0, 1, 1, 1.0}};
  tr.rhs = 1.0;
  prob.constraints.push_back(tr);
  return prob;
}

}  // namespace

TEST_CASE("trace example reaches the analytic optimum") {
  SdpProblem prob = trace_example();
  SdpSolution sol = solve(prob);
  REQUIRE(sol.status == SdpStatus::Optimal);
  CHECK(sol.objective == Catch::Approx(1.0).margin(1e-6));
  CHECK(sol.block_values[0](0, 0) == Catch::Approx(1.0).margin(1e-5));
  CHECK(sol.block_values[0](1, 1) == Catch::Approx(0.0).margin(1e-5));
  ResidualReport rep = verify(prob, sol);
  CHECK(rep.primal_residual <= 1e-7);
  CHECK(rep.cholesky_ok);
}

TEST_CASE("psd cone makes X11 = -1 infeasible") {
  SdpProblem prob;
  prob.block_dims = {2};
  prob.sense = SdpSense::Feasibility;
  SdpConstraint con;
  con.mat = {{0, 0, 0, 1.0}};
  con.rhs = -1.0;
  prob.constraints.push_back(con);
  SdpSolution sol = solve(prob);
  REQUIRE(sol.status == SdpStatus::Infeasible);
  // The returned ray must certify infeasibility on its own terms.
  REQUIRE(sol.y.size() == 1);
  double by = sol.y(0) * -1.0;
  CHECK(by > 0);
  CHECK(sol.ray_residual <= 1e-6);
}

TEST_CASE("feasibility with interior is reported Feasible") {
  // tr X = 3 with a 2x2 block: plenty of interior.
  SdpProblem prob;
  prob.block_dims = {2};
  prob.sense = SdpSense::Feasibility;
  SdpConstraint con;
  con.mat = {{0, 0, 0, 1.0}, {0, 1, 1, 1.0}};
  con.rhs = 3.0;
  prob.constraints.push_back(con);
  SdpSolution sol = solve(prob);
  REQUIRE(sol.status == SdpStatus::Feasible);
  CHECK(sol.primal_residual <= 1e-6);
  ResidualReport rep = verify(prob, sol);
  CHECK(rep.min_block_eigen >= -1e-9);
}

TEST_CASE("random strictly feasible problems satisfy KKT at the solution") {
  std::mt19937_64 rng(123456789);
  SolverOptions opt;
  opt.gap_tol = 1e-9;
  opt.feas_tol = 1e-9;
  for (int trial = 0; trial < 10; ++trial) {
    SdpProblem prob = random_strictly_feasible(rng, trial);
    SdpSolution sol = solve(prob, opt);
    INFO("trial " << trial << " status " << to_string(sol.status));
    REQUIRE(sol.status == SdpStatus::Optimal);
    KktResiduals r = kkt_oracle(prob, sol);
    CHECK(r.primal <= 1e-6);
    CHECK(r.dual <= 1e-6);
    CHECK(r.comp <= 1e-5);
    CHECK(r.xmin >= -1e-9);
    CHECK(r.smin >= -1e-9);
  }
}

TEST_CASE("identical inputs give bitwise-identical runs") {
  std::mt19937_64 rng(555);
  SdpProblem prob = random_strictly_feasible(rng, 0);
  SdpSolution a = solve(prob);
  SdpSolution b = solve(prob);
  REQUIRE(a.status == b.status);
  REQUIRE(a.iterations == b.iterations);
  REQUIRE(a.trace_mu.size() == b.trace_mu.size());
  for (size_t i = 0; i < a.trace_mu.size(); ++i)
    CHECK(a.trace_mu[i] == b.trace_mu[i]);  // exact, not approximate
  for (size_t blk = 0; blk < a.block_values.size(); ++blk)
    CHECK((a.block_values[blk] - b.block_values[blk]).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.objective == b.objective);
}

TEST_CASE("status is invariant under scaling all rows by 10") {
  std::mt19937_64 rng(777);
  for (int trial = 0; trial < 3; ++trial) {
    SdpProblem prob = random_strictly_feasible(rng, trial);
    SdpProblem scaled = prob;
    for (auto& con : scaled.constraints) {
      for (auto& e : con.mat) e.value *= 10.0;
      for (auto& [k, v] : con.free_c) v *= 10.0;
      con.rhs *= 10.0;
    }
    SdpSolution s0 = solve(prob);
    SdpSolution s1 = solve(scaled);
    CHECK(s0.status == s1.status);
    CHECK(s0.objective == Catch::Approx(s1.objective).margin(1e-5).epsilon(1e-6));
  }
  // Same for an infeasible problem.
  SdpProblem prob;
  prob.block_dims = {2};
  prob.sense = SdpSense::Feasibility;
  SdpConstraint con;
  con.mat = {{0, 0, 0, 10.0}};
  con.rhs = -10.0;
  prob.constraints.push_back(con);
  CHECK(solve(prob).status == SdpStatus::Infeasible);
}

TEST_CASE("sdpa sparse text round-trips exactly") {
  std::mt19937_64 rng(2024);
  SdpProblem prob = random_strictly_feasible(rng, 0);
  std::string text = write_sdpa_sparse(prob);
  SdpProblem back = read_sdpa_sparse(text);
  REQUIRE(back.block_dims == prob.block_dims);
  REQUIRE(back.num_free == prob.num_free);
  REQUIRE(back.constraints.size() == prob.constraints.size());
  // 17 significant digits round-trip doubles exactly, so re-export matches
  // byte for byte.
  CHECK(write_sdpa_sparse(back) == text);
  // And the round-tripped problem solves to the same objective.
  SdpSolution s0 = solve(prob);
  SdpSolution s1 = solve(back);
  CHECK(s0.status == s1.status);
  CHECK(s0.objective == s1.objective);
}

TEST_CASE("sdpa import rejects malformed input") {
  CHECK_THROWS_AS(read_sdpa_sparse("bogus 3\n"), std::runtime_error);
  CHECK_THROWS_AS(read_sdpa_sparse("blocks 1\n2\nfree 0\nconstraints 1\n"
                                   "sense minimize\ncon 5 0 0 0 1.0\n"),
                  std::runtime_error);
}

TEST_CASE("problem validation catches structural errors") {
  SdpProblem prob;
  prob.block_dims = {2};
  SdpConstraint con;
  con.mat = {{0, 1, 0, 1.0}};  // row > col
  con.rhs = 1.0;
  prob.constraints.push_back(con);
  CHECK_THROWS_AS(prob.validate(), std::invalid_argument);
  prob.constraints[0].mat = {{0, 0, 1, 1.0}, {0, 0, 1, 2.0}};  // duplicate
  CHECK_THROWS_AS(prob.validate(), std::invalid_argument);
  prob.constraints[0].mat = {{1, 0, 0, 1.0}};  // bad block
  CHECK_THROWS_AS(prob.validate(), std::invalid_argument);
  prob.constraints[0].mat.clear();  // empty row
  CHECK_THROWS_AS(prob.validate(), std::invalid_argument);
}

TEST_CASE("solver tolerances are honored at tighter settings") {
  SolverOptions opt;
  opt.gap_tol = 1e-9;
  opt.feas_tol = 1e-9;
  SdpProblem prob = trace_example();
  SdpSolution sol = solve(prob, opt);
  REQUIRE(sol.status == SdpStatus::Optimal);
  KktResiduals r = kkt_oracle(prob, sol);
  CHECK(r.primal <= 1e-8);
  CHECK(std::abs(sol.objective - 1.0) <= 1e-7);
}
