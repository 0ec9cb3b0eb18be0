#include "vecstab/model.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>

using namespace vecstab;

namespace {

double max_abs_coeff(const Polynomial& p) {
  double m = 0;
  for (auto& [mono, c] : p.terms()) m = std::max(m, std::abs(c));
  return m;
}

// Rebuilds the oscillator network in its original coordinates (cubic
// limit-cycle dynamics around (eq_i, 0), linear-in-state coupling plus a
// constant offset) and moves the equilibrium to the origin by substitution.
// This is the identity the generator's closed-form coefficients must satisfy.
std::vector<Polynomial> shifted_totals_oracle(
    const Network& net, const VdpParams& prm,
    const std::map<int, std::vector<int>>& topo) {
  UniverseRef u = net.universe;
  auto var = [&](int i, int comp) {
    return *u->find("x" + std::to_string(i) + "_" + std::to_string(comp));
  };
  std::map<int, double> eq;
  for (const auto& [i, ni] : topo) {
    double sum_c = 0, sum_b1t = 0;
    for (int j : ni) {
      if (j == i) continue;
      sum_c += prm.c.at({i, j});
      sum_b1t += prm.beta1_tilde.at({i, j});
    }
    eq[i] = sum_c / (1.0 - sum_b1t);
  }
  std::vector<Polynomial> totals;
  for (const auto& [i, ni] : topo) {
    Polynomial x1 = Polynomial::variable(u, var(i, 1));
    Polynomial x2 = Polynomial::variable(u, var(i, 2));
    Polynomial total = prm.mu.at(i) * x2 * (Polynomial::constant(u, 1.0) - x1 * x1) - x1;
    for (int j : ni) {
      if (j == i) continue;
      Polynomial y2 = Polynomial::variable(u, var(j, 2));
      total += Polynomial::constant(u, prm.c.at({i, j})) +
               prm.beta1_tilde.at({i, j}) * (x1 - y2) +
               prm.beta2.at({i, j}) * y2 * x1;
    }
    // Move every first component to the shifted frame.
    for (const auto& [k, nk] : topo) {
      Polynomial shifted =
          Polynomial::variable(u, var(k, 1)) + Polynomial::constant(u, eq.at(k));
      total = total.substitute(var(k, 1), shifted);
    }
    totals.push_back(total);
  }
  return totals;
}

}  // namespace

TEST_CASE("benchmark topology wires twenty directed influences") {
  VdpParams prm;
  Network net = generate_vdp_network(1, prm);

  CHECK(net.subsystems.size() == 9);
  CHECK(net.interactions.size() == 20);
  std::map<int, size_t> want{{1, 4}, {2, 3}, {3, 3}, {4, 3}, {5, 3},
                             {6, 3}, {7, 4}, {8, 3}, {9, 3}};
  for (auto& [i, n] : want) CHECK(net.neighborhoods.at(i).size() == n);

  // Neighborhood variables of subsystem 1 span {1, 2, 5, 9}.
  auto vars = net.neighborhood_vars(1);
  REQUIRE(vars.size() == 8);
  for (int i : {1, 2, 5, 9}) {
    CHECK(std::count(vars.begin(), vars.end(),
                     *net.universe->find("x" + std::to_string(i) + "_1")) == 1);
  }

  auto rep = validate(net);
  for (auto& v : rep.violations) INFO(v);
  CHECK(rep.ok);

  // coupling_sum folds the per-edge terms.
  auto g1 = net.coupling_sum(1);
  Polynomial direct(net.universe);
  for (const Interaction* e : net.interactions_to(1)) direct += e->g[1];
  CHECK(max_abs_coeff(g1[1] - direct) == 0.0);
  CHECK(g1[0].is_zero());
}

TEST_CASE("same seed reproduces the same file, different seeds differ") {
  VdpParams p1, p1b, p2;
  Network a = generate_vdp_network(1, p1);
  Network b = generate_vdp_network(1, p1b);
  Network c = generate_vdp_network(2, p2);

  CHECK(to_json(a).dump(2) == to_json(b).dump(2));
  CHECK(p1.mu == p1b.mu);
  CHECK(p1.c == p1b.c);
  CHECK(to_json(a).dump(2) != to_json(c).dump(2));
}

TEST_CASE("edge draws do not depend on the rest of the topology") {
  auto full = default_vdp_topology();
  auto trimmed = full;
  trimmed[7] = {7, 4, 8};  // drop the influence of 9 on 7

  VdpParams pf, pt;
  generate_vdp_network(7, pf, full);
  generate_vdp_network(7, pt, trimmed);

  CHECK(pf.mu.at(7) == pt.mu.at(7));
  CHECK(pf.c.at({7, 4}) == pt.c.at({7, 4}));
  CHECK(pf.beta2.at({7, 8}) == pt.beta2.at({7, 8}));
  CHECK(pf.c.at({2, 1}) == pt.c.at({2, 1}));
  CHECK(pf.beta1_tilde.at({9, 1}) == pt.beta1_tilde.at({9, 1}));
  // Derived constants for 7 legitimately change with its neighborhood.
  CHECK(pf.c3.at(7) != pt.c3.at(7));
}

TEST_CASE("drift vanishes at the origin and coupling vanishes with the neighbor") {
  VdpParams prm;
  Network net = generate_vdp_network(1, prm);

  std::unordered_map<int32_t, double> zero;
  for (int k = 0; k < net.universe->size(); ++k) zero[k] = 0.0;

  for (const auto& s : net.subsystems)
    for (const auto& p : s.f) {
      CHECK(p.coefficient(Monomial{}) == 0.0);
      CHECK(std::abs(p.evaluate(zero)) <= 1e-12);
    }
  for (const auto& e : net.interactions) {
    const auto& from_vars = net.subsystem(e.from).state_vars;
    for (const auto& p : e.g) CHECK(p.set_vars_zero(from_vars).is_zero());
    // Numeric spot check: own state nonzero, neighbor at rest.
    std::unordered_map<int32_t, double> pt = zero;
    for (VarId v : net.subsystem(e.to).state_vars) pt[v.index] = 0.7;
    for (VarId v : from_vars) pt[v.index] = 0.0;
    for (const auto& p : e.g) CHECK(std::abs(p.evaluate(pt)) <= 1e-12);
  }
}

TEST_CASE("shifting the textbook oscillator reproduces the generated network") {
  auto topo = default_vdp_topology();
  VdpParams prm;
  Network net = generate_vdp_network(3, prm, topo);

  auto oracle = shifted_totals_oracle(net, prm, topo);
  size_t idx = 0;
  for (const auto& [i, ni] : topo) {
    Polynomial got = net.subsystem(i).f[1] + net.coupling_sum(i)[1];
    Polynomial diff = got - oracle[idx++];
    INFO("subsystem " << i);
    CHECK(max_abs_coeff(diff) <= 1e-12);
    // First components are plain integrators on both sides.
    Polynomial x2 = Polynomial::variable(
        net.universe, *net.universe->find("x" + std::to_string(i) + "_2"));
    CHECK(max_abs_coeff(net.subsystem(i).f[0] + net.coupling_sum(i)[0] - x2) == 0.0);
  }
}

TEST_CASE("hand-picked parameters give the expected coefficients") {
  std::map<int, std::vector<int>> topo{{1, {1, 2}}, {2, {2, 1}}};
  VdpParams prm;
  prm.mu[1] = -2.0;
  prm.mu[2] = -1.5;
  prm.c[{1, 2}] = 0.1;
  prm.beta1_tilde[{1, 2}] = 0.05;
  prm.beta2[{1, 2}] = 0.08;
  prm.c[{2, 1}] = -0.2;
  prm.beta1_tilde[{2, 1}] = -0.1;
  prm.beta2[{2, 1}] = 0.04;

  Network net = build_vdp_network(prm, topo);

  // Worked by hand: eq_1 = 0.1/0.95, eq_2 = -0.2/1.1.
  CHECK_THAT(prm.c2.at(1), Catch::Matchers::WithinAbs(0.21052631578947368, 1e-15));
  CHECK_THAT(prm.c1.at(1), Catch::Matchers::WithinAbs(0.9889196675900277, 1e-15));
  CHECK_THAT(prm.c3.at(1), Catch::Matchers::WithinAbs(0.95, 1e-15));
  CHECK_THAT(prm.beta1.at({1, 2}),
             Catch::Matchers::WithinAbs(-0.04157894736842105, 1e-15));
  CHECK_THAT(prm.c2.at(2), Catch::Matchers::WithinAbs(-0.36363636363636365, 1e-15));
  CHECK_THAT(prm.c1.at(2), Catch::Matchers::WithinAbs(0.9669421487603306, 1e-15));
  CHECK_THAT(prm.c3.at(2), Catch::Matchers::WithinAbs(1.1, 1e-15));
  CHECK_THAT(prm.beta1.at({2, 1}),
             Catch::Matchers::WithinAbs(0.09272727272727273, 1e-15));

  UniverseRef u = net.universe;
  VarId x11 = *u->find("x1_1"), x12 = *u->find("x1_2"), x22 = *u->find("x2_2");
  const Polynomial& f2 = net.subsystem(1).f[1];
  CHECK_THAT(f2.coefficient(Monomial::from_exponents({{x12.index, 1}})),
             Catch::Matchers::WithinAbs(-1.9778393351800554, 1e-12));
  CHECK_THAT(f2.coefficient(Monomial::from_exponents({{x11.index, 1}, {x12.index, 1}})),
             Catch::Matchers::WithinAbs(0.42105263157894735, 1e-12));
  CHECK_THAT(f2.coefficient(Monomial::from_exponents({{x11.index, 2}, {x12.index, 1}})),
             Catch::Matchers::WithinAbs(2.0, 1e-15));
  CHECK_THAT(f2.coefficient(Monomial::from_exponents({{x11.index, 1}})),
             Catch::Matchers::WithinAbs(-0.95, 1e-15));

  const Interaction* e12 = net.interactions_to(1).at(0);
  CHECK(e12->from == 2);
  CHECK(e12->g[0].is_zero());
  CHECK_THAT(e12->g[1].coefficient(Monomial::from_exponents({{x22.index, 1}})),
             Catch::Matchers::WithinAbs(-0.04157894736842105, 1e-15));
  CHECK_THAT(
      e12->g[1].coefficient(Monomial::from_exponents({{x11.index, 1}, {x22.index, 1}})),
      Catch::Matchers::WithinAbs(0.08, 1e-15));

  CHECK(validate(net).ok);
}

TEST_CASE("tampered networks are reported") {
  VdpParams prm;
  Network net = generate_vdp_network(1, prm);

  SECTION("constant term in a coupling polynomial") {
    Network bad = net;
    bad.interactions[0].g[1] += Polynomial::constant(bad.universe, 0.01);
    auto rep = validate(bad);
    CHECK_FALSE(rep.ok);
    bool mentioned = false;
    for (auto& v : rep.violations)
      mentioned = mentioned || v.find("does not vanish") != std::string::npos;
    CHECK(mentioned);
  }

  SECTION("positive oscillator gain destroys local stability") {
    std::map<int, std::vector<int>> topo{{1, {1, 2}}, {2, {2, 1}}};
    VdpParams p;
    p.mu[1] = 1.0;  // wrong sign
    p.mu[2] = -1.5;
    p.c[{1, 2}] = 0.0;
    p.beta1_tilde[{1, 2}] = 0.0;
    p.beta2[{1, 2}] = 0.05;
    p.c[{2, 1}] = 0.0;
    p.beta1_tilde[{2, 1}] = 0.0;
    p.beta2[{2, 1}] = 0.05;
    Network bad = build_vdp_network(p, topo);
    auto rep = validate(bad);
    CHECK_FALSE(rep.ok);
    bool mentioned = false;
    for (auto& v : rep.violations)
      mentioned = mentioned || v.find("Hurwitz") != std::string::npos;
    CHECK(mentioned);
  }

  SECTION("stored neighborhood out of sync") {
    Network bad = net;
    bad.neighborhoods[1] = {1, 2};  // drops 5 and 9
    auto rep = validate(bad);
    CHECK_FALSE(rep.ok);
  }
}

TEST_CASE("zero coupling draw degenerates to the classic oscillator") {
  std::map<int, std::vector<int>> topo{{1, {1, 2}}, {2, {2, 1}}};
  VdpParams p;
  p.mu[1] = -2.0;
  p.mu[2] = -1.0;
  for (auto key : {std::pair<int, int>{1, 2}, std::pair<int, int>{2, 1}}) {
    p.c[key] = 0.0;
    p.beta1_tilde[key] = 0.0;
    p.beta2[key] = 0.0;
  }
  Network net = build_vdp_network(p, topo);
  CHECK(p.c1.at(1) == 1.0);
  CHECK(p.c2.at(1) == 0.0);
  CHECK(p.c3.at(1) == 1.0);
  for (const auto& e : net.interactions)
    for (const auto& g : e.g) CHECK(g.is_zero());
  // Silent edges do not count as influences, so every neighborhood collapses
  // to the subsystem itself, both freshly built and after a round trip.
  CHECK(net.neighborhoods.at(1) == std::vector<int>{1});
  CHECK(validate(net).ok);
  Network loaded = network_from_json(to_json(net));
  CHECK(loaded.neighborhoods.at(1) == std::vector<int>{1});
  CHECK(validate(loaded).ok);
}

TEST_CASE("files round trip without losing coefficients") {
  VdpParams prm;
  Network net = generate_vdp_network(5, prm);

  // The loader builds its own universe, so compare through the canonical
  // printer; shortest round-trip decimals make this exact.
  Network back = network_from_json(to_json(net));
  REQUIRE(back.subsystems.size() == net.subsystems.size());
  for (size_t s = 0; s < net.subsystems.size(); ++s)
    for (size_t c = 0; c < net.subsystems[s].f.size(); ++c)
      CHECK(to_string(net.subsystems[s].f[c]) == to_string(back.subsystems[s].f[c]));
  REQUIRE(back.interactions.size() == net.interactions.size());
  for (size_t e = 0; e < net.interactions.size(); ++e)
    for (size_t c = 0; c < net.interactions[e].g.size(); ++c)
      CHECK(to_string(net.interactions[e].g[c]) == to_string(back.interactions[e].g[c]));
  CHECK(back.neighborhoods == net.neighborhoods);

  std::string path = "model_roundtrip_tmp.json";
  save_network(net, path);
  Network from_file = load_network(path);
  CHECK(to_json(from_file).dump() == to_json(net).dump());
  std::remove(path.c_str());
}

TEST_CASE("a hand-written file loads into the expected network") {
  const char* text = R"({
    "variables": ["u1", "u2", "w1", "w2"],
    "subsystems": [
      {"id": 1, "state_vars": ["u1", "u2"], "f": ["u2", "-u1 - 0.5*u2"]},
      {"id": 2, "state_vars": ["w1", "w2"], "f": ["w2", "-2*w1 - w2"]}
    ],
    "interactions": [
      {"to": 1, "from": 2, "g": ["0", "0.1*w2"]}
    ]
  })";
  Network net = network_from_json(nlohmann::json::parse(text));

  REQUIRE(net.subsystems.size() == 2);
  CHECK(net.neighborhoods.at(1) == std::vector<int>{1, 2});
  CHECK(net.neighborhoods.at(2) == std::vector<int>{2});
  VarId u1 = *net.universe->find("u1");
  CHECK(net.subsystem(1).f[1].coefficient(Monomial::from_exponents({{u1.index, 1}})) ==
        -1.0);
  REQUIRE(net.interactions.size() == 1);
  CHECK(net.interactions[0].g[0].is_zero());
  auto rep = validate(net);
  for (auto& v : rep.violations) INFO(v);
  CHECK(rep.ok);
}

TEST_CASE("malformed files fail with a located error") {
  nlohmann::json good = nlohmann::json::parse(R"({
    "variables": ["u1", "u2"],
    "subsystems": [
      {"id": 1, "state_vars": ["u1", "u2"], "f": ["u2", "-u1"]}
    ],
    "interactions": []
  })");

  SECTION("unknown variable inside a polynomial") {
    nlohmann::json bad = good;
    bad["subsystems"][0]["f"][1] = "-u1 + q";
    try {
      network_from_json(bad);
      FAIL("expected a parse error");
    } catch (const std::runtime_error& e) {
      std::string msg = e.what();
      CHECK(msg.find("unknown variable 'q'") != std::string::npos);
      CHECK(msg.find("subsystem 1") != std::string::npos);
      CHECK(msg.find("f[1]") != std::string::npos);
    }
  }

  SECTION("unknown state variable name") {
    nlohmann::json bad = good;
    bad["subsystems"][0]["state_vars"][1] = "v9";
    CHECK_THROWS_WITH(network_from_json(bad),
                      Catch::Matchers::ContainsSubstring("unknown state variable"));
  }

  SECTION("broken json text") {
    CHECK_THROWS(nlohmann::json::parse(std::string("{\"variables\": [")));
  }
}

TEST_CASE("overlapping blocks are representable") {
  UniverseRef u = make_universe({"a", "s", "b"});
  Network net;
  net.universe = u;
  Subsystem s1;
  s1.id = 1;
  s1.state_vars = {*u->find("a"), *u->find("s")};
  s1.f = {Polynomial::variable(u, *u->find("s")),
          -1.0 * Polynomial::variable(u, *u->find("a")) -
              Polynomial::variable(u, *u->find("s"))};
  Subsystem s2;
  s2.id = 2;
  s2.state_vars = {*u->find("s"), *u->find("b")};
  s2.f = {-1.0 * Polynomial::variable(u, *u->find("s")),
          -1.0 * Polynomial::variable(u, *u->find("b"))};
  net.subsystems = {s1, s2};
  net.neighborhoods = {{1, {1}}, {2, {2}}};

  auto rep = validate(net);
  for (auto& v : rep.violations) INFO(v);
  CHECK(rep.ok);
  auto vars1 = net.neighborhood_vars(1);
  auto vars2 = net.neighborhood_vars(2);
  CHECK(std::count(vars1.begin(), vars1.end(), *u->find("s")) == 1);
  CHECK(std::count(vars2.begin(), vars2.end(), *u->find("s")) == 1);
}
