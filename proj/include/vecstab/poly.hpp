#pragma once

// Sparse multivariate polynomials over a shared variable universe, with the
// calculus pieces (gradients, Lie derivatives) and monomial bases needed by
// the sum-of-squares layers above this one.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace vecstab {

inline constexpr double kCoeffZeroTol = 1e-12;

struct VarId {
  int32_t index = -1;
  friend bool operator==(VarId a, VarId b) { return a.index == b.index; }
  friend bool operator!=(VarId a, VarId b) { return a.index != b.index; }
  friend bool operator<(VarId a, VarId b) { return a.index < b.index; }
};

// Owns the variable names. Polynomials hold a shared_ptr to their universe and
// refuse to mix with polynomials from a different one; identity is pointer
// identity, not name equality.
class Universe {
 public:
  VarId add(const std::string& name) {
    if (name.empty()) throw std::invalid_argument("variable name is empty");
    auto it = by_name_.find(name);
    if (it != by_name_.end())
      throw std::invalid_argument("duplicate variable name: " + name);
    VarId id{static_cast<int32_t>(names_.size())};
    by_name_.emplace(name, id.index);
    names_.push_back(name);
    return id;
  }

  std::optional<VarId> find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return std::nullopt;
    return VarId{it->second};
  }

  const std::string& name(VarId v) const {
    if (v.index < 0 || v.index >= static_cast<int32_t>(names_.size()))
      throw std::out_of_range("VarId outside universe");
    return names_[static_cast<size_t>(v.index)];
  }

  int size() const { return static_cast<int>(names_.size()); }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int32_t> by_name_;
};

using UniverseRef = std::shared_ptr<Universe>;

inline UniverseRef make_universe(const std::vector<std::string>& names = {}) {
  auto u = std::make_shared<Universe>();
  for (const auto& n : names) u->add(n);
  return u;
}

// Exponent vector, stored sparse and sorted by variable index.
class Monomial {
 public:
  Monomial() = default;

  static Monomial variable(VarId v, int exp = 1) {
    Monomial m;
    if (exp < 0) throw std::invalid_argument("negative exponent");
    if (exp > 0) m.exps_.push_back({v.index, exp});
    return m;
  }

  static Monomial from_exponents(std::vector<std::pair<int32_t, int32_t>> e) {
    Monomial m;
    std::sort(e.begin(), e.end());
    for (auto& [v, k] : e) {
      if (k < 0) throw std::invalid_argument("negative exponent");
      if (k == 0) continue;
      if (!m.exps_.empty() && m.exps_.back().first == v)
        throw std::invalid_argument("repeated variable in exponent list");
      m.exps_.push_back({v, k});
    }
    return m;
  }

  int degree() const {
    int d = 0;
    for (auto& [v, k] : exps_) d += k;
    return d;
  }

  int degree_in(VarId v) const {
    for (auto& [w, k] : exps_)
      if (w == v.index) return k;
    return 0;
  }

  bool is_one() const { return exps_.empty(); }

  Monomial operator*(const Monomial& o) const {
    Monomial r;
    size_t i = 0, j = 0;
    while (i < exps_.size() || j < o.exps_.size()) {
      if (j == o.exps_.size() ||
          (i < exps_.size() && exps_[i].first < o.exps_[j].first)) {
        r.exps_.push_back(exps_[i++]);
      } else if (i == exps_.size() || o.exps_[j].first < exps_[i].first) {
        r.exps_.push_back(o.exps_[j++]);
      } else {
        r.exps_.push_back({exps_[i].first, exps_[i].second + o.exps_[j].second});
        ++i, ++j;
      }
    }
    return r;
  }

  const std::vector<std::pair<int32_t, int32_t>>& exponents() const {
    return exps_;
  }

  friend bool operator==(const Monomial& a, const Monomial& b) {
    return a.exps_ == b.exps_;
  }

 private:
  std::vector<std::pair<int32_t, int32_t>> exps_;
};

// Graded order: lower total degree first; within a degree class the monomial
// with the higher exponent on the earliest differing variable comes first, so
// a degree-2 basis in {x, y} reads x^2, x*y, y^2.
struct MonoLess {
  bool operator()(const Monomial& a, const Monomial& b) const {
    int da = a.degree(), db = b.degree();
    if (da != db) return da < db;
    const auto& ea = a.exponents();
    const auto& eb = b.exponents();
    size_t i = 0, j = 0;
    while (i < ea.size() && j < eb.size()) {
      if (ea[i].first != eb[j].first) {
        // The one holding the earlier variable has a positive exponent there.
        return ea[i].first < eb[j].first ? ea[i].second > 0 : !(eb[j].second > 0);
      }
      if (ea[i].second != eb[j].second) return ea[i].second > eb[j].second;
      ++i, ++j;
    }
    return i < ea.size();
  }
};

class PolyParseError : public std::runtime_error {
 public:
  PolyParseError(const std::string& msg, int column)
      : std::runtime_error(msg + " (column " + std::to_string(column) + ")"),
        column_(column) {}
  int column() const { return column_; }

 private:
  int column_;
};

namespace detail {
// Shortest round-trip decimal form; byte-stable given IEEE doubles.
inline std::string double_str(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}
inline double int_pow(double x, int k) {
  double r = 1.0;
  while (k-- > 0) r *= x;
  return r;
}
}  // namespace detail

class Polynomial {
 public:
  using TermMap = std::map<Monomial, double, MonoLess>;

  Polynomial() = default;
  explicit Polynomial(UniverseRef u) : u_(std::move(u)) {}

  static Polynomial constant(UniverseRef u, double c) {
    Polynomial p(std::move(u));
    if (std::abs(c) > kCoeffZeroTol) p.terms_[Monomial{}] = c;
    return p;
  }

  static Polynomial variable(UniverseRef u, VarId v) {
    if (v.index < 0 || v.index >= u->size())
      throw std::invalid_argument("variable outside universe");
    Polynomial p(std::move(u));
    p.terms_[Monomial::variable(v)] = 1.0;
    return p;
  }

  static Polynomial term(UniverseRef u, double c, const Monomial& m) {
    Polynomial p(std::move(u));
    if (std::abs(c) > kCoeffZeroTol) p.terms_[m] = c;
    return p;
  }

  const UniverseRef& universe() const { return u_; }
  const TermMap& terms() const { return terms_; }
  bool is_zero() const { return terms_.empty(); }
  int num_terms() const { return static_cast<int>(terms_.size()); }

  // -1 for the zero polynomial.
  int degree() const {
    int d = -1;
    for (auto& [m, c] : terms_) d = std::max(d, m.degree());
    return d;
  }

  int lowest_degree() const {
    if (terms_.empty()) return -1;
    return terms_.begin()->first.degree();  // map is graded-ascending
  }

  double coefficient(const Monomial& m) const {
    auto it = terms_.find(m);
    return it == terms_.end() ? 0.0 : it->second;
  }

  void add_term(const Monomial& m, double c) {
    auto [it, fresh] = terms_.emplace(m, c);
    if (!fresh) it->second += c;
    if (std::abs(it->second) <= kCoeffZeroTol) terms_.erase(it);
  }

  Polynomial& operator+=(const Polynomial& o) {
    check_universe(o);
    if (!u_) u_ = o.u_;
    for (auto& [m, c] : o.terms_) add_term(m, c);
    return *this;
  }

  Polynomial& operator-=(const Polynomial& o) {
    check_universe(o);
    if (!u_) u_ = o.u_;
    for (auto& [m, c] : o.terms_) add_term(m, -c);
    return *this;
  }

  Polynomial& operator*=(double s) {
    if (std::abs(s) <= kCoeffZeroTol) {
      terms_.clear();
      return *this;
    }
    for (auto it = terms_.begin(); it != terms_.end();) {
      it->second *= s;
      if (std::abs(it->second) <= kCoeffZeroTol)
        it = terms_.erase(it);
      else
        ++it;
    }
    return *this;
  }

  friend Polynomial operator+(Polynomial a, const Polynomial& b) { return a += b; }
  friend Polynomial operator-(Polynomial a, const Polynomial& b) { return a -= b; }
  friend Polynomial operator*(Polynomial a, double s) { return a *= s; }
  friend Polynomial operator*(double s, Polynomial a) { return a *= s; }
  friend Polynomial operator-(Polynomial a) { return a *= -1.0; }

  friend Polynomial operator*(const Polynomial& a, const Polynomial& b) {
    a.check_universe(b);
    Polynomial r(a.u_ ? a.u_ : b.u_);
    for (auto& [ma, ca] : a.terms_)
      for (auto& [mb, cb] : b.terms_) r.add_term(ma * mb, ca * cb);
    return r;
  }

  friend bool operator==(const Polynomial& a, const Polynomial& b) {
    return a.terms_ == b.terms_;
  }

  double evaluate(const std::unordered_map<int32_t, double>& assignment) const {
    double r = 0.0;
    for (auto& [m, c] : terms_) {
      double t = c;
      for (auto& [v, k] : m.exponents()) {
        auto it = assignment.find(v);
        if (it == assignment.end())
          throw std::invalid_argument("missing assignment for variable index " +
                                      std::to_string(v));
        t *= detail::int_pow(it->second, k);
      }
      r += t;
    }
    return r;
  }

  // Dense evaluation by universe index; x must cover every variable used.
  double eval(std::span<const double> x) const {
    double r = 0.0;
    for (auto& [m, c] : terms_) {
      double t = c;
      for (auto& [v, k] : m.exponents()) {
        if (static_cast<size_t>(v) >= x.size())
          throw std::invalid_argument("evaluation point too short");
        t *= detail::int_pow(x[static_cast<size_t>(v)], k);
      }
      r += t;
    }
    return r;
  }

  Polynomial derivative(VarId v) const {
    Polynomial r(u_);
    for (auto& [m, c] : terms_) {
      int k = m.degree_in(v);
      if (k == 0) continue;
      std::vector<std::pair<int32_t, int32_t>> e;
      for (auto& [w, kw] : m.exponents())
        if (w != v.index)
          e.push_back({w, kw});
        else if (kw > 1)
          e.push_back({w, kw - 1});
      r.add_term(Monomial::from_exponents(std::move(e)), c * k);
    }
    return r;
  }

  // Replace v by an arbitrary polynomial (used for equilibrium shifts).
  Polynomial substitute(VarId v, const Polynomial& repl) const {
    check_universe(repl);
    Polynomial r(u_);
    int max_k = 0;
    for (auto& [m, c] : terms_) max_k = std::max(max_k, m.degree_in(v));
    std::vector<Polynomial> powers;
    powers.push_back(Polynomial::constant(u_, 1.0));
    for (int k = 1; k <= max_k; ++k) powers.push_back(powers.back() * repl);
    for (auto& [m, c] : terms_) {
      int k = m.degree_in(v);
      std::vector<std::pair<int32_t, int32_t>> e;
      for (auto& [w, kw] : m.exponents())
        if (w != v.index) e.push_back({w, kw});
      Polynomial rest = Polynomial::term(u_, c, Monomial::from_exponents(std::move(e)));
      r += rest * powers[static_cast<size_t>(k)];
    }
    return r;
  }

  Polynomial set_vars_zero(std::span<const VarId> vars) const {
    Polynomial r(u_);
    for (auto& [m, c] : terms_) {
      bool dead = false;
      for (VarId v : vars)
        if (m.degree_in(v) > 0) { dead = true; break; }
      if (!dead) r.add_term(m, c);
    }
    return r;
  }

  std::vector<VarId> support() const {
    std::vector<int32_t> seen;
    for (auto& [m, c] : terms_)
      for (auto& [v, k] : m.exponents()) seen.push_back(v);
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    std::vector<VarId> r;
    for (auto v : seen) r.push_back(VarId{v});
    return r;
  }

  void check_universe(const Polynomial& o) const {
    if (u_ && o.u_ && u_ != o.u_)
      throw std::invalid_argument("polynomials from different universes");
  }

 private:
  UniverseRef u_;
  TermMap terms_;
};

inline std::vector<Polynomial> gradient(const Polynomial& p,
                                        std::span<const VarId> vars) {
  std::vector<Polynomial> g;
  g.reserve(vars.size());
  for (VarId v : vars) g.push_back(p.derivative(v));
  return g;
}

// dV/dt along x' = f: sum_k dV/dx_k * f_k.
inline Polynomial lie_derivative(const Polynomial& V,
                                 std::span<const Polynomial> f,
                                 std::span<const VarId> vars) {
  if (f.size() != vars.size())
    throw std::invalid_argument("lie_derivative: |f| != |vars|");
  Polynomial r(V.universe());
  for (size_t k = 0; k < vars.size(); ++k) {
    V.check_universe(f[k]);
    r += V.derivative(vars[k]) * f[k];
  }
  return r;
}

// All monomials over `vars` with min_degree <= total degree <= max_degree,
// in the canonical graded order.
inline std::vector<Monomial> monomial_basis(std::span<const VarId> vars,
                                            int max_degree,
                                            int min_degree = 0) {
  if (max_degree < 0 || min_degree < 0 || min_degree > max_degree)
    throw std::invalid_argument("monomial_basis: bad degree bounds");
  for (size_t i = 0; i + 1 < vars.size(); ++i)
    if (!(vars[i] < vars[i + 1]))
      throw std::invalid_argument("monomial_basis: vars must be sorted, unique");
  std::vector<Monomial> out;
  std::vector<std::pair<int32_t, int32_t>> cur;
  // Enumerate exponent vectors recursively; order fixed by a final sort.
  auto rec = [&](auto&& self, size_t i, int remaining) -> void {
    if (i == vars.size()) {
      Monomial m = Monomial::from_exponents(cur);
      if (m.degree() >= min_degree) out.push_back(std::move(m));
      return;
    }
    for (int k = 0; k <= remaining; ++k) {
      if (k > 0) cur.push_back({vars[i].index, k});
      self(self, i + 1, remaining - k);
      if (k > 0) cur.pop_back();
    }
  };
  rec(rec, 0, max_degree);
  std::sort(out.begin(), out.end(), MonoLess{});
  return out;
}

inline std::string to_string(const Monomial& m, const Universe& u) {
  if (m.is_one()) return "1";
  std::string s;
  for (auto& [v, k] : m.exponents()) {
    if (!s.empty()) s += "*";
    s += u.name(VarId{v});
    if (k > 1) s += "^" + std::to_string(k);
  }
  return s;
}

// Canonical printing: descending degree, basis order within a degree class.
// Round-trips through parse_polynomial exactly.
inline std::string to_string(const Polynomial& p) {
  if (p.is_zero()) return "0";
  const Universe& u = *p.universe();
  std::vector<std::pair<Monomial, double>> terms(p.terms().begin(),
                                                 p.terms().end());
  std::stable_sort(terms.begin(), terms.end(),
                   [](const auto& a, const auto& b) {
                     int da = a.first.degree(), db = b.first.degree();
                     if (da != db) return da > db;
                     return MonoLess{}(a.first, b.first);
                   });
  std::string s;
  bool first = true;
  for (auto& [m, c] : terms) {
    double a = std::abs(c);
    bool neg = c < 0;
    if (first) {
      if (neg) s += "-";
      first = false;
    } else {
      s += neg ? " - " : " + ";
    }
    if (m.is_one()) {
      s += detail::double_str(a);
    } else if (a == 1.0) {
      s += to_string(m, u);
    } else {
      s += detail::double_str(a) + "*" + to_string(m, u);
    }
  }
  return s;
}

// Grammar: poly := [+|-] term (('+'|'-') term)* ; term := factor ('*' factor)* ;
// factor := number | ident ('^' uint)?. Numbers may use scientific notation.
inline Polynomial parse_polynomial(const std::string& text, UniverseRef u) {
  size_t pos = 0;
  auto col = [&] { return static_cast<int>(pos) + 1; };
  auto skip_ws = [&] {
    while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t')) ++pos;
  };
  auto parse_number = [&]() -> double {
    size_t start = pos;
    while (pos < text.size() &&
           (std::isdigit(static_cast<unsigned char>(text[pos])) ||
            text[pos] == '.'))
      ++pos;
    if (pos < text.size() && (text[pos] == 'e' || text[pos] == 'E')) {
      ++pos;
      if (pos < text.size() && (text[pos] == '+' || text[pos] == '-')) ++pos;
      while (pos < text.size() &&
             std::isdigit(static_cast<unsigned char>(text[pos])))
        ++pos;
    }
    double v = 0;
    auto res = std::from_chars(text.data() + start, text.data() + pos, v);
    if (res.ec != std::errc{} || res.ptr != text.data() + pos)
      throw PolyParseError("malformed number", static_cast<int>(start) + 1);
    return v;
  };
  auto parse_ident = [&]() -> std::string {
    size_t start = pos;
    while (pos < text.size() &&
           (std::isalnum(static_cast<unsigned char>(text[pos])) ||
            text[pos] == '_'))
      ++pos;
    return text.substr(start, pos - start);
  };

  Polynomial result(u);
  skip_ws();
  if (pos == text.size()) throw PolyParseError("empty polynomial", col());
  bool first_term = true;
  while (true) {
    skip_ws();
    if (pos == text.size()) break;
    double sign = 1.0;
    if (text[pos] == '+' || text[pos] == '-') {
      sign = text[pos] == '-' ? -1.0 : 1.0;
      ++pos;
      skip_ws();
    } else if (!first_term) {
      throw PolyParseError("expected '+' or '-' between terms", col());
    }
    first_term = false;
    double coeff = sign;
    Monomial mono;
    bool saw_factor = false;
    while (true) {
      skip_ws();
      if (pos >= text.size()) break;
      char c = text[pos];
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
        coeff *= parse_number();
        saw_factor = true;
      } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        int id_col = col();
        std::string name = parse_ident();
        auto v = u->find(name);
        if (!v) throw PolyParseError("unknown variable '" + name + "'", id_col);
        int exp = 1;
        skip_ws();
        if (pos < text.size() && text[pos] == '^') {
          ++pos;
          skip_ws();
          if (pos >= text.size() ||
              !std::isdigit(static_cast<unsigned char>(text[pos])))
            throw PolyParseError("expected exponent after '^'", col());
          size_t start = pos;
          while (pos < text.size() &&
                 std::isdigit(static_cast<unsigned char>(text[pos])))
            ++pos;
          exp = std::stoi(text.substr(start, pos - start));
        }
        mono = mono * Monomial::variable(*v, exp);
        saw_factor = true;
      } else {
        throw PolyParseError(std::string("unexpected character '") + c + "'",
                             col());
      }
      skip_ws();
      if (pos < text.size() && text[pos] == '*') {
        ++pos;
        continue;
      }
      break;
    }
    if (!saw_factor) throw PolyParseError("empty term", col());
    result.add_term(mono, coeff);
    skip_ws();
    if (pos < text.size() && text[pos] != '+' && text[pos] != '-')
      throw PolyParseError("expected '+' or '-' between terms", col());
  }
  return result;
}

// Flat-array form for tight evaluation loops (simulation spends its time here).
class CompiledPoly {
 public:
  CompiledPoly() = default;
  explicit CompiledPoly(const Polynomial& p) {
    for (auto& [m, c] : p.terms()) {
      coeffs_.push_back(c);
      offsets_.push_back(static_cast<int>(factors_.size()));
      for (auto& [v, k] : m.exponents()) factors_.push_back({v, k});
    }
    offsets_.push_back(static_cast<int>(factors_.size()));
  }

  double eval(const double* x) const {
    double r = 0.0;
    for (size_t t = 0; t < coeffs_.size(); ++t) {
      double term = coeffs_[t];
      for (int f = offsets_[t]; f < offsets_[t + 1]; ++f) {
        double base = x[factors_[static_cast<size_t>(f)].first];
        int k = factors_[static_cast<size_t>(f)].second;
        while (k-- > 0) term *= base;
      }
      r += term;
    }
    return r;
  }

 private:
  std::vector<double> coeffs_;
  std::vector<int> offsets_;
  std::vector<std::pair<int32_t, int32_t>> factors_;
};

}  // namespace vecstab
