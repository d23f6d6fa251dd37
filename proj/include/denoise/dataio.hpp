#pragma once
// Molecular structure datasets: extended-XYZ ingestion, splits, element
// statistics, and the bundled synthetic dataset of surrogate-equilibrium
// clusters.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "denoise/common.hpp"

namespace denoise {

// One molecular structure: atomic numbers plus 3D positions (row-major
// |S| x 3), optional scalar labels, and an optional paired second frame
// (e.g. the relaxed counterpart of a trajectory endpoint).
struct Structure {
  std::vector<int> atomic_numbers;
  std::vector<double> positions;  // 3 * n_atoms
  std::map<std::string, double> labels;
  std::optional<std::vector<double>> pair_positions;

  int n_atoms() const { return static_cast<int>(atomic_numbers.size()); }
  const double* pos(int i) const { return positions.data() + 3 * static_cast<std::size_t>(i); }
};

// Throws ContractViolation if the structure breaks an invariant: empty,
// atom/position count mismatch, non-finite or duplicated coordinates,
// atomic numbers outside [1,118], or an inconsistent paired frame.
void validate_structure(const Structure& s);

using Dataset = std::vector<Structure>;

// Element symbol <-> atomic number (1..118).
int element_number(const std::string& symbol);       // throws IoError if unknown
const std::string& element_symbol(int atomic_number);  // throws ContractViolation

// Extended-XYZ: count line, comment line (key=value pairs with numeric
// values become labels), then `Symbol x y z` rows; repeats until EOF.
// Errors name the offending 1-based line number.
Dataset parse_xyz(const std::string& text);
std::string write_xyz(const Dataset& data);  // coordinates at 17 significant digits
Dataset load_xyz_file(const std::string& path);
void save_xyz_file(const Dataset& data, const std::string& path);

struct DatasetSplit {
  std::vector<int> train, valid, test;
  std::uint64_t seed = 0;
  double train_fraction = 0.0, valid_fraction = 0.0;
};

// Deterministic shuffled partition of [0, n). train/valid fractions in
// [0,1] with train+valid <= 1; the remainder is test.
DatasetSplit make_split(int n, double train_fraction, double valid_fraction, std::uint64_t seed);

// |elements(downstream) ∩ elements(upstream)| / |elements(downstream)|.
double element_coverage(const Dataset& upstream, const Dataset& downstream);

std::map<int, int> element_counts(const Dataset& data);

// --- synthetic dataset -----------------------------------------------------
//
// Clusters of 4-16 atoms from {H,C,N,O,F} relaxed to local minima of a
// pairwise Lennard-Jones-style surrogate (typical bond length ~2.0).
// Labels: surrogate_energy and dipole (norm of a fixed-charge moment).

struct SyntheticOptions {
  int min_atoms = 4;
  int max_atoms = 16;
  double force_tolerance = 1e-4;  // mean per-atom force norm at convergence
};

Dataset make_synthetic_dataset(int n, std::uint64_t seed, const SyntheticOptions& opt = {});

// Surrogate energy and forces (-dE/dx) used by the generator; exposed so
// tests can verify the emitted structures are converged minima.
double surrogate_energy(const Structure& s);
std::vector<double> surrogate_forces(const Structure& s);
double mean_force_norm(const Structure& s);

}  // namespace denoise
