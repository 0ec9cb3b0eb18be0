#include "vecstab/poly.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <random>

using namespace vecstab;

namespace {

// Deterministic random polynomial over the given vars.
Polynomial random_poly(UniverseRef u, std::span<const VarId> vars, int max_deg,
                       std::mt19937_64& rng) {
  std::uniform_int_distribution<int> nterms(1, 6);
  std::uniform_int_distribution<int> expd(0, max_deg);
  std::uniform_real_distribution<double> coeff(-3.0, 3.0);
  Polynomial p(u);
  int n = nterms(rng);
  for (int t = 0; t < n; ++t) {
    std::vector<std::pair<int32_t, int32_t>> e;
    int budget = max_deg;
    for (VarId v : vars) {
      int k = expd(rng) % (budget + 1);
      budget -= k;
      if (k > 0) e.push_back({v.index, k});
    }
    p.add_term(Monomial::from_exponents(std::move(e)), coeff(rng));
  }
  return p;
}

double max_abs_coeff(const Polynomial& p) {
  double m = 0;
  for (auto& [mono, c] : p.terms()) m = std::max(m, std::abs(c));
  return m;
}

}  // namespace

TEST_CASE("monomial ordering is graded with x before y") {
  auto u = make_universe({"x", "y"});
  VarId x = *u->find("x"), y = *u->find("y");
  std::vector<VarId> vars{x, y};
  auto basis = monomial_basis(vars, 2);
  REQUIRE(basis.size() == 6);
  CHECK(to_string(basis[0], *u) == "1");
  CHECK(to_string(basis[1], *u) == "x");
  CHECK(to_string(basis[2], *u) == "y");
  CHECK(to_string(basis[3], *u) == "x^2");
  CHECK(to_string(basis[4], *u) == "x*y");
  CHECK(to_string(basis[5], *u) == "y^2");
}

TEST_CASE("monomial basis count matches binomial coefficient") {
  auto u = make_universe({"a", "b", "c"});
  std::vector<VarId> vars{*u->find("a"), *u->find("b"), *u->find("c")};
  // C(4+3,3) monomials of degree <= 4 in 3 variables.
  CHECK(monomial_basis(vars, 4).size() == 35);
  // min_degree trims the low end: degree in [1,2] over 3 vars -> 3 + 6.
  CHECK(monomial_basis(vars, 2, 1).size() == 9);
  auto strict = monomial_basis(vars, 2, 2);
  CHECK(strict.size() == 6);
  for (auto& m : strict) CHECK(m.degree() == 2);
}

TEST_CASE("ring axioms hold on random polynomials") {
  auto u = make_universe({"x", "y", "z"});
  std::vector<VarId> vars{*u->find("x"), *u->find("y"), *u->find("z")};
  std::mt19937_64 rng(20240817);
  for (int trial = 0; trial < 50; ++trial) {
    Polynomial p = random_poly(u, vars, 3, rng);
    Polynomial q = random_poly(u, vars, 3, rng);
    Polynomial r = random_poly(u, vars, 3, rng);
    double scale = std::max({1.0, max_abs_coeff(p), max_abs_coeff(q),
                             max_abs_coeff(r)});
    auto close = [&](const Polynomial& a, const Polynomial& b) {
      Polynomial d = a - b;
      return max_abs_coeff(d) <= 1e-10 * scale * scale * scale;
    };
    CHECK(close(p + q, q + p));
    CHECK(close((p + q) + r, p + (q + r)));
    CHECK(close(p * q, q * p));
    CHECK(close((p * q) * r, p * (q * r)));
    CHECK(close(p * (q + r), p * q + p * r));
    CHECK((p - p).is_zero());
    CHECK(close(p * Polynomial::constant(u, 1.0), p));
    CHECK((p * Polynomial::constant(u, 0.0)).is_zero());
  }
}

TEST_CASE("evaluation is a ring homomorphism") {
  auto u = make_universe({"x", "y", "z"});
  std::vector<VarId> vars{*u->find("x"), *u->find("y"), *u->find("z")};
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> pt(-2.0, 2.0);
  for (int trial = 0; trial < 25; ++trial) {
    Polynomial p = random_poly(u, vars, 3, rng);
    Polynomial q = random_poly(u, vars, 3, rng);
    std::vector<double> x{pt(rng), pt(rng), pt(rng)};
    double pp = p.eval(x), qq = q.eval(x);
    CHECK((p + q).eval(x) == Catch::Approx(pp + qq).margin(1e-9));
    CHECK((p * q).eval(x) == Catch::Approx(pp * qq).margin(1e-8).epsilon(1e-10));
  }
}

TEST_CASE("map-based evaluation rejects missing assignments") {
  auto u = make_universe({"x", "y"});
  Polynomial p = parse_polynomial("x*y + y^2", u);
  std::unordered_map<int32_t, double> full{{0, 2.0}, {1, 3.0}};
  CHECK(p.evaluate(full) == Catch::Approx(15.0));
  std::unordered_map<int32_t, double> partial{{0, 2.0}};
  CHECK_THROWS_AS(p.evaluate(partial), std::invalid_argument);
}

TEST_CASE("gradient matches central differences") {
  auto u = make_universe({"x", "y", "z"});
  std::vector<VarId> vars{*u->find("x"), *u->find("y"), *u->find("z")};
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> pt(-1.5, 1.5);
  const double h = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    Polynomial p = random_poly(u, vars, 4, rng);
    auto g = gradient(p, vars);
    std::vector<double> x{pt(rng), pt(rng), pt(rng)};
    for (size_t k = 0; k < vars.size(); ++k) {
      std::vector<double> xp = x, xm = x;
      xp[k] += h;
      xm[k] -= h;
      double fd = (p.eval(xp) - p.eval(xm)) / (2 * h);
      CHECK(g[k].eval(x) == Catch::Approx(fd).margin(1e-6));
    }
  }
}

TEST_CASE("lie derivative matches dV/dt along integrated trajectories") {
  auto u = make_universe({"x", "y"});
  VarId x = *u->find("x"), y = *u->find("y");
  std::vector<VarId> vars{x, y};
  // A damped nonlinear oscillator and a generic quartic V.
  std::vector<Polynomial> f{parse_polynomial("y", u),
                            parse_polynomial("-x - 0.5*y - 0.3*x^3", u)};
  Polynomial V = parse_polynomial("x^2 + 0.5*y^2 + 0.1*x^4 + 0.05*x*y", u);
  Polynomial LV = lie_derivative(V, f, vars);

  // Oracle: independent RK4 stepper written right here, then a central
  // difference of V along the flow.
  auto deriv = [&](const std::vector<double>& s) {
    return std::vector<double>{f[0].eval(s), f[1].eval(s)};
  };
  auto rk4_step = [&](std::vector<double> s, double dt) {
    auto add = [](std::vector<double> a, const std::vector<double>& b,
                  double w) {
      for (size_t i = 0; i < a.size(); ++i) a[i] += w * b[i];
      return a;
    };
    auto k1 = deriv(s);
    auto k2 = deriv(add(s, k1, dt / 2));
    auto k3 = deriv(add(s, k2, dt / 2));
    auto k4 = deriv(add(s, k3, dt));
    for (size_t i = 0; i < s.size(); ++i)
      s[i] += dt / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
    return s;
  };

  std::vector<double> state{0.8, -0.4};
  const double h = 1e-5;
  for (int step = 0; step < 40; ++step) {
    auto fwd = rk4_step(state, h);
    auto bwd = rk4_step(state, -h);
    double dv_dt = (V.eval(fwd) - V.eval(bwd)) / (2 * h);
    CHECK(LV.eval(state) == Catch::Approx(dv_dt).margin(1e-6));
    state = rk4_step(state, 0.05);
  }
}

TEST_CASE("printing is canonical and parsing round-trips") {
  auto u = make_universe({"x1", "x2"});
  Polynomial p = parse_polynomial("3.5*x1^2*x2 - 1.0", u);
  CHECK(to_string(p) == "3.5*x1^2*x2 - 1");
  CHECK(parse_polynomial(to_string(p), u) == p);

  Polynomial q = parse_polynomial("-x2 + x1 + 0.25", u);
  CHECK(to_string(q) == "x1 - x2 + 0.25");
  CHECK(parse_polynomial(to_string(q), u) == q);

  Polynomial r = parse_polynomial("1e-3*x1 + 2.5e2", u);
  CHECK(to_string(r) == "0.001*x1 + 250");

  CHECK(to_string(Polynomial(u)) == "0");

  std::mt19937_64 rng(4242);
  std::vector<VarId> vars{*u->find("x1"), *u->find("x2")};
  for (int trial = 0; trial < 30; ++trial) {
    Polynomial s = random_poly(u, vars, 5, rng);
    CHECK(parse_polynomial(to_string(s), u) == s);
  }
}

TEST_CASE("parse errors carry a column position") {
  auto u = make_universe({"x"});
  try {
    parse_polynomial("x + w^2", u);
    FAIL("expected parse error");
  } catch (const PolyParseError& e) {
    CHECK(e.column() == 5);
    CHECK(std::string(e.what()).find("unknown variable") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_polynomial("", u), PolyParseError);
  CHECK_THROWS_AS(parse_polynomial("x ^", u), PolyParseError);
  CHECK_THROWS_AS(parse_polynomial("2 x", u), PolyParseError);
  CHECK_THROWS_AS(parse_polynomial("x + + 1", u), PolyParseError);
}

TEST_CASE("near-zero coefficients are dropped at normalization") {
  auto u = make_universe({"x"});
  Polynomial p = parse_polynomial("x^2 + 0.5", u);
  Polynomial q = parse_polynomial("x^2 + 0.5 - 1e-13*x", u);
  CHECK(p == q);
  Polynomial tiny = Polynomial::constant(u, 1e-13);
  CHECK(tiny.is_zero());
  CHECK((p - p).is_zero());
}

TEST_CASE("cross-universe operations are rejected") {
  auto u1 = make_universe({"x"});
  auto u2 = make_universe({"x"});
  Polynomial p = parse_polynomial("x + 1", u1);
  Polynomial q = parse_polynomial("x + 1", u2);
  CHECK_THROWS_AS(p + q, std::invalid_argument);
  CHECK_THROWS_AS(p * q, std::invalid_argument);
  std::vector<VarId> vars{*u1->find("x")};
  std::vector<Polynomial> fq{q};
  CHECK_THROWS_AS(lie_derivative(p, fq, vars), std::invalid_argument);
}

TEST_CASE("substitution performs equilibrium-style shifts") {
  auto u = make_universe({"x", "y"});
  VarId x = *u->find("x");
  Polynomial p = parse_polynomial("x^2 + y", u);
  Polynomial shifted = p.substitute(x, parse_polynomial("x + 1", u));
  CHECK(shifted == parse_polynomial("x^2 + 2*x + y + 1", u));
  // Setting variables to zero kills every term containing them.
  std::vector<VarId> kill{*u->find("y")};
  CHECK(parse_polynomial("x*y + y^2 + x", u).set_vars_zero(kill) ==
        parse_polynomial("x", u));
}

TEST_CASE("compiled evaluation agrees with the symbolic form") {
  auto u = make_universe({"x", "y", "z"});
  std::vector<VarId> vars{*u->find("x"), *u->find("y"), *u->find("z")};
  std::mt19937_64 rng(31337);
  std::uniform_real_distribution<double> pt(-2.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    Polynomial p = random_poly(u, vars, 5, rng);
    CompiledPoly cp(p);
    for (int k = 0; k < 5; ++k) {
      std::vector<double> x{pt(rng), pt(rng), pt(rng)};
      CHECK(cp.eval(x.data()) == Catch::Approx(p.eval(x)).margin(1e-12));
    }
  }
}

TEST_CASE("degree bookkeeping") {
  auto u = make_universe({"x", "y"});
  Polynomial p = parse_polynomial("x^3*y + x^2 + 2", u);
  CHECK(p.degree() == 4);
  CHECK(p.lowest_degree() == 0);
  CHECK(parse_polynomial("x^2 + x^4", u).lowest_degree() == 2);
  CHECK(Polynomial(u).degree() == -1);
}
