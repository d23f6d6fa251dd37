#include "denoise/dataio.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace denoise {

namespace {

const std::array<const char*, 119> kSymbols = {
    "?",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al",
    "Si", "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co",
    "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb",
    "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs",
    "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm",
    "Yb", "Lu", "Hf", "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi",
    "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg",
    "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

bool parse_double(const std::string& tok, double* out) {
  try {
    std::size_t pos = 0;
    *out = std::stod(tok, &pos);
    return pos == tok.size();
  } catch (...) {
    return false;
  }
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

[[noreturn]] void parse_fail(std::size_t lineno, const std::string& what) {
  throw IoError("xyz parse error at line " + std::to_string(lineno) + ": " + what);
}

}  // namespace

int element_number(const std::string& symbol) {
  for (int z = 1; z <= 118; ++z)
    if (symbol == kSymbols[static_cast<std::size_t>(z)]) return z;
  throw IoError("unknown element symbol '" + symbol + "'");
}

const std::string& element_symbol(int z) {
  if (z < 1 || z > 118)
    throw ContractViolation("atomic number " + std::to_string(z) + " outside [1,118]");
  static std::array<std::string, 119> cache = [] {
    std::array<std::string, 119> c;
    for (std::size_t i = 0; i < kSymbols.size(); ++i) c[i] = kSymbols[i];
    return c;
  }();
  return cache[static_cast<std::size_t>(z)];
}

void validate_structure(const Structure& s) {
  const int n = s.n_atoms();
  if (n < 1) throw ContractViolation("structure must contain at least one atom");
  if (static_cast<int>(s.positions.size()) != 3 * n)
    throw ContractViolation("positions size " + std::to_string(s.positions.size()) +
                            " != 3 * " + std::to_string(n));
  for (int z : s.atomic_numbers)
    if (z < 1 || z > 118)
      throw ContractViolation("atomic number " + std::to_string(z) + " outside [1,118]");
  for (double v : s.positions)
    if (!std::isfinite(v)) throw ContractViolation("non-finite coordinate");
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double* a = s.pos(i);
      const double* b = s.pos(j);
      if (a[0] == b[0] && a[1] == b[1] && a[2] == b[2])
        throw ContractViolation("atoms " + std::to_string(i) + " and " + std::to_string(j) +
                                " share identical coordinates");
    }
  if (s.pair_positions) {
    if (s.pair_positions->size() != s.positions.size())
      throw ContractViolation("paired frame has different atom count");
    for (double v : *s.pair_positions)
      if (!std::isfinite(v)) throw ContractViolation("non-finite paired coordinate");
  }
}

Dataset parse_xyz(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      if (!cur.empty() && cur.back() == '\r') cur.pop_back();
      lines.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) {
    if (cur.back() == '\r') cur.pop_back();
    lines.push_back(cur);
  }

  Dataset out;
  std::size_t i = 0;
  while (i < lines.size()) {
    if (split_ws(lines[i]).empty()) {  // blank padding between frames
      ++i;
      continue;
    }
    const std::size_t count_line = i + 1;
    auto toks = split_ws(lines[i]);
    double count_val = 0.0;
    if (toks.size() != 1 || !parse_double(toks[0], &count_val) ||
        count_val != std::floor(count_val) || count_val < 1)
      parse_fail(count_line, "expected a positive atom count, got '" + lines[i] + "'");
    const int n = static_cast<int>(count_val);
    ++i;
    if (i >= lines.size()) parse_fail(count_line, "missing comment line after atom count");

    Structure s;
    for (const auto& tok : split_ws(lines[i])) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos || eq == 0) continue;
      double v = 0.0;
      if (parse_double(tok.substr(eq + 1), &v)) s.labels[tok.substr(0, eq)] = v;
    }
    ++i;

    for (int a = 0; a < n; ++a, ++i) {
      if (i >= lines.size())
        parse_fail(lines.size(), "frame declared " + std::to_string(n) + " atoms but file ended");
      auto row = split_ws(lines[i]);
      if (row.size() < 4)
        parse_fail(i + 1, "expected 'Symbol x y z', got '" + lines[i] + "'");
      int z = 0;
      try {
        z = element_number(row[0]);
      } catch (const IoError& e) {
        parse_fail(i + 1, e.what());
      }
      s.atomic_numbers.push_back(z);
      for (int c = 0; c < 3; ++c) {
        double v = 0.0;
        if (!parse_double(row[static_cast<std::size_t>(1 + c)], &v))
          parse_fail(i + 1,
                     "non-numeric coordinate '" + row[static_cast<std::size_t>(1 + c)] + "'");
        s.positions.push_back(v);
      }
    }
    validate_structure(s);
    out.push_back(std::move(s));
  }
  return out;
}

std::string write_xyz(const Dataset& data) {
  std::ostringstream os;
  for (const Structure& s : data) {
    os << s.n_atoms() << '\n';
    bool first = true;
    for (const auto& [k, v] : s.labels) {
      if (!first) os << ' ';
      os << k << '=' << fmt17(v);
      first = false;
    }
    os << '\n';
    for (int i = 0; i < s.n_atoms(); ++i) {
      const double* p = s.pos(i);
      os << element_symbol(s.atomic_numbers[static_cast<std::size_t>(i)]) << ' ' << fmt17(p[0])
         << ' ' << fmt17(p[1]) << ' ' << fmt17(p[2]) << '\n';
    }
  }
  return os.str();
}

Dataset load_xyz_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_xyz(ss.str());
}

void save_xyz_file(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << write_xyz(data);
  if (!out) throw IoError("write failed for '" + path + "'");
}

DatasetSplit make_split(int n, double train_fraction, double valid_fraction, std::uint64_t seed) {
  if (n < 1) throw ContractViolation("make_split: empty dataset");
  if (train_fraction < 0 || valid_fraction < 0 || train_fraction + valid_fraction > 1.0)
    throw ContractViolation("make_split: bad fractions");
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  RandomStream rng(derive_seed(seed, 0x5b17));
  rng.shuffle(idx);
  DatasetSplit split;
  split.seed = seed;
  split.train_fraction = train_fraction;
  split.valid_fraction = valid_fraction;
  const int n_train = static_cast<int>(std::llround(train_fraction * n));
  const int n_valid = static_cast<int>(std::llround(valid_fraction * n));
  split.train.assign(idx.begin(), idx.begin() + n_train);
  split.valid.assign(idx.begin() + n_train, idx.begin() + n_train + n_valid);
  split.test.assign(idx.begin() + n_train + n_valid, idx.end());
  return split;
}

double element_coverage(const Dataset& upstream, const Dataset& downstream) {
  if (upstream.empty()) throw ContractViolation("element_coverage: empty upstream dataset");
  if (downstream.empty()) throw ContractViolation("element_coverage: empty downstream dataset");
  std::set<int> up, down;
  for (const auto& s : upstream) up.insert(s.atomic_numbers.begin(), s.atomic_numbers.end());
  for (const auto& s : downstream) down.insert(s.atomic_numbers.begin(), s.atomic_numbers.end());
  int covered = 0;
  for (int z : down) covered += up.count(z) ? 1 : 0;
  return static_cast<double>(covered) / static_cast<double>(down.size());
}

std::map<int, int> element_counts(const Dataset& data) {
  std::map<int, int> counts;
  for (const auto& s : data)
    for (int z : s.atomic_numbers) counts[z]++;
  return counts;
}

// --- synthetic dataset -------------------------------------------------------

namespace {

// Per-element surrogate parameters, indexed by atomic number. Pair minimum
// sits at (r_i + r_j)/2, so typical bond lengths are near 2.0.
struct ElementParams {
  double radius;
  double well;
  double charge;
};

ElementParams surrogate_params(int z) {
  switch (z) {
    case 1: return {1.70, 0.60, 0.40};   // H
    case 6: return {2.00, 1.00, -0.10};  // C
    case 7: return {1.95, 0.90, -0.30};  // N
    case 8: return {1.90, 0.85, -0.50};  // O
    case 9: return {1.80, 0.70, -0.60};  // F
    default:
      return {2.00, 1.00, 0.0};  // other elements are legal; carbon-like
  }
}

constexpr double kSixthRootOfTwo = 1.122462048309373;  // 2^(1/6)

void pair_params(int zi, int zj, double* sigma, double* eps) {
  const ElementParams a = surrogate_params(zi);
  const ElementParams b = surrogate_params(zj);
  const double rstar = 0.5 * (a.radius + b.radius);
  *sigma = rstar / kSixthRootOfTwo;
  *eps = std::sqrt(a.well * b.well);
}

double energy_and_forces(const std::vector<int>& z, const std::vector<double>& x,
                         std::vector<double>* forces) {
  const int n = static_cast<int>(z.size());
  if (forces) forces->assign(x.size(), 0.0);
  double e = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      double sigma, eps;
      pair_params(z[static_cast<std::size_t>(i)], z[static_cast<std::size_t>(j)], &sigma, &eps);
      const double dx = x[3 * static_cast<std::size_t>(j)] - x[3 * static_cast<std::size_t>(i)];
      const double dy =
          x[3 * static_cast<std::size_t>(j) + 1] - x[3 * static_cast<std::size_t>(i) + 1];
      const double dz =
          x[3 * static_cast<std::size_t>(j) + 2] - x[3 * static_cast<std::size_t>(i) + 2];
      const double r2 = dx * dx + dy * dy + dz * dz;
      const double s2 = sigma * sigma / r2;
      const double s6 = s2 * s2 * s2;
      const double s12 = s6 * s6;
      e += 4.0 * eps * (s12 - s6);
      if (forces) {
        const double coef = 4.0 * eps * (12.0 * s12 - 6.0 * s6) / r2;
        const double fx = coef * dx, fy = coef * dy, fz = coef * dz;
        (*forces)[3 * static_cast<std::size_t>(j)] += fx;
        (*forces)[3 * static_cast<std::size_t>(j) + 1] += fy;
        (*forces)[3 * static_cast<std::size_t>(j) + 2] += fz;
        (*forces)[3 * static_cast<std::size_t>(i)] -= fx;
        (*forces)[3 * static_cast<std::size_t>(i) + 1] -= fy;
        (*forces)[3 * static_cast<std::size_t>(i) + 2] -= fz;
      }
    }
  }
  return e;
}

double mean_force_norm_raw(const std::vector<int>& z, const std::vector<double>& x) {
  std::vector<double> f;
  energy_and_forces(z, x, &f);
  double s = 0.0;
  const int n = static_cast<int>(z.size());
  for (int i = 0; i < n; ++i)
    s += std::sqrt(
        f[3 * static_cast<std::size_t>(i)] * f[3 * static_cast<std::size_t>(i)] +
        f[3 * static_cast<std::size_t>(i) + 1] * f[3 * static_cast<std::size_t>(i) + 1] +
        f[3 * static_cast<std::size_t>(i) + 2] * f[3 * static_cast<std::size_t>(i) + 2]);
  return s / n;
}

// Gradient descent with backtracking line search and a displacement cap.
bool relax(const std::vector<int>& z, std::vector<double>* x, double tol, int max_iters) {
  double step = 0.05;
  double e = energy_and_forces(z, *x, nullptr);
  std::vector<double> f;
  for (int it = 0; it < max_iters; ++it) {
    energy_and_forces(z, *x, &f);
    double fmax = 0.0, fsum = 0.0;
    const int n = static_cast<int>(z.size());
    for (int i = 0; i < n; ++i) {
      const double fn = std::sqrt(
          f[3 * static_cast<std::size_t>(i)] * f[3 * static_cast<std::size_t>(i)] +
          f[3 * static_cast<std::size_t>(i) + 1] * f[3 * static_cast<std::size_t>(i) + 1] +
          f[3 * static_cast<std::size_t>(i) + 2] * f[3 * static_cast<std::size_t>(i) + 2]);
      fmax = std::max(fmax, fn);
      fsum += fn;
    }
    if (fsum / n < tol) return true;

    double trial_step = std::min(step, 0.2 / std::max(fmax, 1e-12));
    bool accepted = false;
    for (int bt = 0; bt < 40; ++bt) {
      std::vector<double> xn(*x);
      for (std::size_t k = 0; k < xn.size(); ++k) xn[k] += trial_step * f[k];
      const double en = energy_and_forces(z, xn, nullptr);
      if (en < e) {
        *x = std::move(xn);
        e = en;
        step = trial_step * 1.5;
        accepted = true;
        break;
      }
      trial_step *= 0.5;
    }
    if (!accepted) return fsum / n < tol;
  }
  return mean_force_norm_raw(z, *x) < tol;
}

Structure generate_one(std::uint64_t seed, const SyntheticOptions& opt) {
  RandomStream rng(seed);
  const int span = opt.max_atoms - opt.min_atoms + 1;

  for (int attempt = 0; attempt < 64; ++attempt) {
    const int n = opt.min_atoms + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(span)));

    static const int kZ[5] = {1, 6, 7, 8, 9};
    static const double kW[5] = {0.35, 0.30, 0.15, 0.12, 0.08};
    std::vector<int> z(static_cast<std::size_t>(n));
    for (auto& zi : z) {
      double u = rng.uniform(), acc = 0.0;
      zi = kZ[4];
      for (int c = 0; c < 5; ++c) {
        acc += kW[c];
        if (u < acc) {
          zi = kZ[c];
          break;
        }
      }
    }

    // sequential placement in a box, rejecting overlaps
    const double box = 1.4 * std::cbrt(static_cast<double>(n));
    std::vector<double> x;
    x.reserve(3 * static_cast<std::size_t>(n));
    bool placed_all = true;
    for (int i = 0; i < n && placed_all; ++i) {
      bool ok = false;
      for (int tries = 0; tries < 200 && !ok; ++tries) {
        const double px = rng.uniform(-box, box);
        const double py = rng.uniform(-box, box);
        const double pz = rng.uniform(-box, box);
        ok = true;
        for (int j = 0; j < i; ++j) {
          const double dx = px - x[3 * static_cast<std::size_t>(j)];
          const double dy = py - x[3 * static_cast<std::size_t>(j) + 1];
          const double dz = pz - x[3 * static_cast<std::size_t>(j) + 2];
          if (dx * dx + dy * dy + dz * dz < 1.69) {  // min separation 1.3
            ok = false;
            break;
          }
        }
        if (ok) {
          x.push_back(px);
          x.push_back(py);
          x.push_back(pz);
        }
      }
      placed_all = ok;
    }
    if (!placed_all) continue;

    std::vector<double> start = x;
    if (!relax(z, &x, opt.force_tolerance, 20000)) continue;

    Structure s;
    s.atomic_numbers = std::move(z);
    s.positions = std::move(x);
    // center at the origin: the surrogate is translation invariant
    double cx = 0, cy = 0, cz = 0;
    for (int i = 0; i < n; ++i) {
      cx += s.positions[3 * static_cast<std::size_t>(i)];
      cy += s.positions[3 * static_cast<std::size_t>(i) + 1];
      cz += s.positions[3 * static_cast<std::size_t>(i) + 2];
    }
    cx /= n;
    cy /= n;
    cz /= n;
    std::vector<double> pair(start.size());
    for (int i = 0; i < n; ++i) {
      s.positions[3 * static_cast<std::size_t>(i)] -= cx;
      s.positions[3 * static_cast<std::size_t>(i) + 1] -= cy;
      s.positions[3 * static_cast<std::size_t>(i) + 2] -= cz;
      pair[3 * static_cast<std::size_t>(i)] = start[3 * static_cast<std::size_t>(i)] - cx;
      pair[3 * static_cast<std::size_t>(i) + 1] = start[3 * static_cast<std::size_t>(i) + 1] - cy;
      pair[3 * static_cast<std::size_t>(i) + 2] = start[3 * static_cast<std::size_t>(i) + 2] - cz;
    }
    // keep the unrelaxed start as the paired frame for interpolation tasks
    s.pair_positions = std::move(pair);

    s.labels["surrogate_energy"] = surrogate_energy(s);
    double mx = 0, my = 0, mz = 0;
    for (int i = 0; i < n; ++i) {
      const double q = surrogate_params(s.atomic_numbers[static_cast<std::size_t>(i)]).charge;
      mx += q * s.positions[3 * static_cast<std::size_t>(i)];
      my += q * s.positions[3 * static_cast<std::size_t>(i) + 1];
      mz += q * s.positions[3 * static_cast<std::size_t>(i) + 2];
    }
    s.labels["dipole"] = std::sqrt(mx * mx + my * my + mz * mz);
    validate_structure(s);
    return s;
  }
  throw ContractViolation("synthetic generator failed to converge a structure (seed " +
                          std::to_string(seed) + ")");
}

}  // namespace

double surrogate_energy(const Structure& s) {
  return energy_and_forces(s.atomic_numbers, s.positions, nullptr);
}

std::vector<double> surrogate_forces(const Structure& s) {
  std::vector<double> f;
  energy_and_forces(s.atomic_numbers, s.positions, &f);
  return f;
}

double mean_force_norm(const Structure& s) {
  return mean_force_norm_raw(s.atomic_numbers, s.positions);
}

Dataset make_synthetic_dataset(int n, std::uint64_t seed, const SyntheticOptions& opt) {
  if (n < 1) throw ContractViolation("make_synthetic_dataset: n must be >= 1");
  Dataset out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(generate_one(derive_seed(seed, static_cast<std::uint64_t>(i), 0xda7a), opt));
  return out;
}

}  // namespace denoise
