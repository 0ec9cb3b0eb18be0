#pragma once

// Interconnected polynomial systems: subsystems x_i' = f_i(x_i) + sum_j
// g_ij(x_i, x_j), plus the randomized 9-oscillator Van der Pol benchmark
// generator. Networks are immutable after construction and safe to share.

#include "vecstab/poly.hpp"

#include <json.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace vecstab {

struct Subsystem {
  int id = 0;
  std::vector<VarId> state_vars;
  std::vector<Polynomial> f;  // one component per state variable
};

struct Interaction {
  int to = 0;    // subsystem i receiving the influence
  int from = 0;  // neighbor j
  std::vector<Polynomial> g;  // same component count as subsystem `to`
};

struct Network {
  UniverseRef universe;
  std::vector<Subsystem> subsystems;                // sorted by id
  std::vector<Interaction> interactions;
  std::map<int, std::vector<int>> neighborhoods;    // i -> N_i, i included

  const Subsystem& subsystem(int id) const {
    for (const auto& s : subsystems)
      if (s.id == id) return s;
    throw std::out_of_range("network: no subsystem with id " + std::to_string(id));
  }
  std::vector<const Interaction*> interactions_to(int id) const {
    std::vector<const Interaction*> out;
    for (const auto& e : interactions)
      if (e.to == id) out.push_back(&e);
    return out;
  }
  // Total coupling g_i = sum_{j in N_i \ {i}} g_ij, assembled on demand.
  std::vector<Polynomial> coupling_sum(int id) const {
    const Subsystem& s = subsystem(id);
    std::vector<Polynomial> g(s.f.size(), Polynomial(universe));
    for (const auto& e : interactions)
      if (e.to == id)
        for (size_t c = 0; c < g.size(); ++c) g[c] += e.g[c];
    return g;
  }
  // Union of the state variables of all members of N_i, sorted.
  std::vector<VarId> neighborhood_vars(int id) const {
    std::vector<VarId> vars;
    for (int j : neighborhoods.at(id)) {
      const auto& sv = subsystem(j).state_vars;
      vars.insert(vars.end(), sv.begin(), sv.end());
    }
    std::sort(vars.begin(), vars.end());
    vars.erase(std::unique(vars.begin(), vars.end()), vars.end());
    return vars;
  }
};

// ---------------------------------------------------------------------------
// Deterministic draws. Streams are derived from (seed, purpose words) so each
// subsystem and each directed edge gets parameters independent of iteration
// order; bumping the version constant invalidates all stored draws at once.

inline constexpr std::uint64_t kVdpPrngVersion = 1;

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}
}  // namespace

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t state) : state_(state) {}

  static SplitMix64 stream(std::uint64_t seed,
                           std::initializer_list<std::uint64_t> words) {
    std::uint64_t s = detail::mix64(seed ^ (kVdpPrngVersion * 0xA24BAED4963EE407ull));
    for (std::uint64_t w : words)
      s = detail::mix64(s ^ (w * 0x9E3779B97F4A7C15ull + 0xD6E8FEB86659FD93ull));
    return SplitMix64(s);
  }

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    return detail::mix64(z);
  }
  double uniform(double lo, double hi) {
    double u = static_cast<double>(next() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
  }

 private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Van der Pol benchmark

struct VdpParams {
  std::uint64_t seed = 0;
  std::map<int, double> mu;                         // [-3, -1]
  std::map<std::pair<int, int>, double> c;          // [-0.2, 0.2], key (i, j)
  std::map<std::pair<int, int>, double> beta1_tilde;  // [-0.1, 0.1]
  std::map<std::pair<int, int>, double> beta2;        // [-0.1, 0.1]
  // Derived coefficients of the shifted form, kept for reporting.
  std::map<int, double> c1, c2, c3;
  std::map<std::pair<int, int>, double> beta1;
};

// N_i = {i} plus the sources of nonzero couplings into i, in interaction
// list order. The interaction list is the source of truth everywhere.
inline void derive_neighborhoods(Network& net) {
  net.neighborhoods.clear();
  for (const auto& s : net.subsystems) {
    std::vector<int> ni{s.id};
    for (const auto& e : net.interactions) {
      if (e.to != s.id) continue;
      bool nonzero = false;
      for (const auto& p : e.g) nonzero = nonzero || !p.is_zero();
      if (nonzero && std::find(ni.begin(), ni.end(), e.from) == ni.end())
        ni.push_back(e.from);
    }
    net.neighborhoods[s.id] = std::move(ni);
  }
}

inline std::map<int, std::vector<int>> default_vdp_topology() {
  return {
      {1, {1, 2, 5, 9}}, {2, {2, 1, 3}}, {3, {3, 2, 8}},
      {4, {4, 6, 7}},    {5, {5, 1, 6}}, {6, {6, 4, 5}},
      {7, {7, 4, 8, 9}}, {8, {8, 3, 7}}, {9, {9, 1, 7}},
  };
}

// Fills in the derived coefficients of `params` and emits the shifted
// network. Callers normally go through generate_vdp_network; this entry
// exists so tests can pin exact parameter values.
inline Network build_vdp_network(VdpParams& params,
                                 const std::map<int, std::vector<int>>& topology) {
  std::vector<std::string> names;
  for (const auto& [i, ni] : topology) {
    names.push_back("x" + std::to_string(i) + "_1");
    names.push_back("x" + std::to_string(i) + "_2");
  }
  UniverseRef u = make_universe(names);

  Network net;
  net.universe = u;

  auto var = [&](int i, int comp) {
    return Polynomial::variable(
        u, *u->find("x" + std::to_string(i) + "_" + std::to_string(comp)));
  };

  for (const auto& [i, ni] : topology) {
    if (std::find(ni.begin(), ni.end(), i) == ni.end())
      throw std::invalid_argument("vdp topology: N_" + std::to_string(i) +
                                  " must contain " + std::to_string(i));
    double sum_c = 0, sum_b1t = 0;
    for (int j : ni) {
      if (j == i) continue;
      sum_c += params.c.at({i, j});
      sum_b1t += params.beta1_tilde.at({i, j});
    }
    double den = 1.0 - sum_b1t;
    if (std::abs(den) < 1e-6)
      throw std::invalid_argument(
          "vdp parameters: equilibrium denominator vanishes for subsystem " +
          std::to_string(i));
    double shift = sum_c / den;  // first component of the old equilibrium
    double c2 = 2.0 * shift;
    double c1 = 1.0 - (0.5 * c2) * (0.5 * c2);
    params.c2[i] = c2;
    params.c1[i] = c1;
    double c3 = 1.0;
    for (int j : ni) {
      if (j == i) continue;
      double b1 = 0.5 * params.beta2.at({i, j}) * c2 - params.beta1_tilde.at({i, j});
      params.beta1[{i, j}] = b1;
      c3 -= 0.5 * params.beta2.at({i, j}) * c2 - b1;
    }
    params.c3[i] = c3;

    Subsystem s;
    s.id = i;
    s.state_vars = {*u->find("x" + std::to_string(i) + "_1"),
                    *u->find("x" + std::to_string(i) + "_2")};
    Polynomial x1 = var(i, 1), x2 = var(i, 2);
    s.f.push_back(x2);
    s.f.push_back(params.mu.at(i) * x2 *
                      (Polynomial::constant(u, c1) - c2 * x1 - x1 * x1) -
                  c3 * x1);
    net.subsystems.push_back(std::move(s));
  }

  for (const auto& [i, ni] : topology)
    for (int j : ni) {
      if (j == i) continue;
      Interaction e;
      e.to = i;
      e.from = j;
      Polynomial xj2 = var(j, 2), xi1 = var(i, 1);
      e.g.push_back(Polynomial(u));
      e.g.push_back(params.beta1.at({i, j}) * xj2 +
                    params.beta2.at({i, j}) * xj2 * xi1);
      net.interactions.push_back(std::move(e));
    }
  derive_neighborhoods(net);
  return net;
}

inline Network generate_vdp_network(std::uint64_t seed, VdpParams& params_out,
                                    const std::map<int, std::vector<int>>& topology =
                                        default_vdp_topology()) {
  VdpParams params;
  params.seed = seed;
  constexpr std::uint64_t kTagSubsystem = 1, kTagEdge = 2;
  for (const auto& [i, ni] : topology) {
    SplitMix64 gi = SplitMix64::stream(seed, {kTagSubsystem, std::uint64_t(i)});
    params.mu[i] = gi.uniform(-3.0, -1.0);
    // The equilibrium denominator 1 - sum beta1_tilde stays >= 0.7 for the
    // benchmark topology; redraw with a bumped attempt word if a custom
    // topology ever drives it near zero.
    for (std::uint64_t attempt = 0; attempt < 100; ++attempt) {
      double sum_b1t = 0;
      for (int j : ni) {
        if (j == i) continue;
        SplitMix64 ge = SplitMix64::stream(
            seed, {kTagEdge, std::uint64_t(i), std::uint64_t(j), attempt});
        params.c[{i, j}] = ge.uniform(-0.2, 0.2);
        params.beta1_tilde[{i, j}] = ge.uniform(-0.1, 0.1);
        params.beta2[{i, j}] = ge.uniform(-0.1, 0.1);
        sum_b1t += params.beta1_tilde[{i, j}];
      }
      if (std::abs(1.0 - sum_b1t) >= 1e-6) break;
      if (attempt == 99)
        throw std::runtime_error(
            "vdp generator: could not draw a usable equilibrium denominator");
    }
  }
  Network net = build_vdp_network(params, topology);
  params_out = std::move(params);
  return net;
}

// ---------------------------------------------------------------------------
// Validation

// Linearization of the isolated drift at the origin of the subsystem's
// own coordinates.
inline Eigen::MatrixXd origin_jacobian(const Subsystem& s) {
  int n = static_cast<int>(s.state_vars.size());
  Eigen::MatrixXd J(n, n);
  std::unordered_map<std::int32_t, double> origin;
  for (VarId v : s.state_vars) origin[v.index] = 0.0;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      J(r, c) = s.f[static_cast<size_t>(r)]
                    .derivative(s.state_vars[static_cast<size_t>(c)])
                    .evaluate(origin);
  return J;
}

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> violations;
  void fail(std::string msg) {
    ok = false;
    violations.push_back(std::move(msg));
  }
};

inline ValidationReport validate(const Network& net) {
  ValidationReport rep;
  for (const auto& s : net.subsystems) {
    std::string tag = "subsystem " + std::to_string(s.id);
    if (s.f.size() != s.state_vars.size())
      rep.fail(tag + ": " + std::to_string(s.f.size()) + " components for " +
               std::to_string(s.state_vars.size()) + " state variables");
    for (size_t c = 0; c < s.f.size(); ++c) {
      if (std::abs(s.f[c].coefficient(Monomial{})) > kCoeffZeroTol)
        rep.fail(tag + ": f[" + std::to_string(c) + "] has a constant term");
      for (VarId v : s.f[c].support())
        if (std::find(s.state_vars.begin(), s.state_vars.end(), v) ==
            s.state_vars.end())
          rep.fail(tag + ": f[" + std::to_string(c) + "] uses foreign variable " +
                   net.universe->name(v));
    }
    // Quadratic LF synthesis needs the isolated linearization stable.
    Eigen::EigenSolver<Eigen::MatrixXd> es(origin_jacobian(s));
    double maxre = es.eigenvalues().real().maxCoeff();
    if (!(maxre < 0))
      rep.fail(tag + ": isolated Jacobian is not Hurwitz (max Re " +
               std::to_string(maxre) + ")");
  }
  for (const auto& e : net.interactions) {
    std::string tag = "interaction " + std::to_string(e.to) + "<-" +
                      std::to_string(e.from);
    const Subsystem *si = nullptr, *sj = nullptr;
    for (const auto& s : net.subsystems) {
      if (s.id == e.to) si = &s;
      if (s.id == e.from) sj = &s;
    }
    if (!si || !sj) {
      rep.fail(tag + ": references a missing subsystem");
      continue;
    }
    if (e.g.size() != si->f.size())
      rep.fail(tag + ": component count differs from subsystem " +
               std::to_string(e.to));
    for (size_t c = 0; c < e.g.size(); ++c) {
      Polynomial at_zero = e.g[c].set_vars_zero(sj->state_vars);
      if (!at_zero.is_zero())
        rep.fail(tag + ": g[" + std::to_string(c) +
                 "] does not vanish when the neighbor state is zero");
      for (VarId v : e.g[c].support()) {
        bool in_i = std::find(si->state_vars.begin(), si->state_vars.end(), v) !=
                    si->state_vars.end();
        bool in_j = std::find(sj->state_vars.begin(), sj->state_vars.end(), v) !=
                    sj->state_vars.end();
        if (!in_i && !in_j)
          rep.fail(tag + ": g[" + std::to_string(c) + "] uses foreign variable " +
                   net.universe->name(v));
      }
    }
  }
  // Neighborhoods must match the interaction list: N_i = {i} + sources of
  // nonzero g_ij.
  for (const auto& s : net.subsystems) {
    std::set<int> derived{s.id};
    for (const auto& e : net.interactions) {
      if (e.to != s.id) continue;
      bool nonzero = false;
      for (const auto& p : e.g) nonzero = nonzero || !p.is_zero();
      if (nonzero) derived.insert(e.from);
    }
    auto it = net.neighborhoods.find(s.id);
    if (it == net.neighborhoods.end()) {
      rep.fail("subsystem " + std::to_string(s.id) + ": no stored neighborhood");
      continue;
    }
    std::set<int> stored(it->second.begin(), it->second.end());
    if (stored != derived)
      rep.fail("subsystem " + std::to_string(s.id) +
               ": stored neighborhood disagrees with the interaction list");
  }
  return rep;
}

// ---------------------------------------------------------------------------
// JSON round trip

inline nlohmann::json to_json(const Network& net) {
  nlohmann::json j;
  j["variables"] = nlohmann::json::array();
  for (int k = 0; k < net.universe->size(); ++k)
    j["variables"].push_back(net.universe->name(VarId{k}));
  j["subsystems"] = nlohmann::json::array();
  for (const auto& s : net.subsystems) {
    nlohmann::json js;
    js["id"] = s.id;
    js["state_vars"] = nlohmann::json::array();
    for (VarId v : s.state_vars) js["state_vars"].push_back(net.universe->name(v));
    js["f"] = nlohmann::json::array();
    for (const auto& p : s.f) js["f"].push_back(to_string(p));
    j["subsystems"].push_back(js);
  }
  j["interactions"] = nlohmann::json::array();
  for (const auto& e : net.interactions) {
    nlohmann::json je;
    je["to"] = e.to;
    je["from"] = e.from;
    je["g"] = nlohmann::json::array();
    for (const auto& p : e.g) je["g"].push_back(to_string(p));
    j["interactions"].push_back(je);
  }
  return j;
}

inline Network network_from_json(const nlohmann::json& j) {
  std::vector<std::string> names;
  for (const auto& n : j.at("variables")) names.push_back(n.get<std::string>());
  UniverseRef u = make_universe(names);
  Network net;
  net.universe = u;
  auto parse_in = [&](const std::string& text, const std::string& where) {
    try {
      return parse_polynomial(text, u);
    } catch (const PolyParseError& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
  };
  for (const auto& js : j.at("subsystems")) {
    Subsystem s;
    s.id = js.at("id").get<int>();
    for (const auto& n : js.at("state_vars")) {
      auto v = u->find(n.get<std::string>());
      if (!v)
        throw std::runtime_error("subsystem " + std::to_string(s.id) +
                                 ": unknown state variable '" +
                                 n.get<std::string>() + "'");
      s.state_vars.push_back(*v);
    }
    int c = 0;
    for (const auto& t : js.at("f"))
      s.f.push_back(parse_in(t.get<std::string>(),
                             "subsystem " + std::to_string(s.id) + ", f[" +
                                 std::to_string(c++) + "]"));
    net.subsystems.push_back(std::move(s));
  }
  std::sort(net.subsystems.begin(), net.subsystems.end(),
            [](const Subsystem& a, const Subsystem& b) { return a.id < b.id; });
  for (const auto& je : j.at("interactions")) {
    Interaction e;
    e.to = je.at("to").get<int>();
    e.from = je.at("from").get<int>();
    int c = 0;
    for (const auto& t : je.at("g"))
      e.g.push_back(parse_in(t.get<std::string>(),
                             "interaction " + std::to_string(e.to) + "<-" +
                                 std::to_string(e.from) + ", g[" +
                                 std::to_string(c++) + "]"));
    net.interactions.push_back(std::move(e));
  }
  derive_neighborhoods(net);
  return net;
}

inline void save_network(const Network& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << to_json(net).dump(2) << "\n";
}

inline Network load_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in);
  return network_from_json(j);
}

}  // namespace vecstab
