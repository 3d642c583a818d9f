#pragma once

#include <random>
#include <string>

#include "fixtures.hpp"
#include "lorex/atoms.hpp"
#include "lorex/data.hpp"

namespace lorex::testing {

/// Random tabular data: two numeric columns and one 7-way categorical,
/// giving 6 + 6 + 7 atoms plus NULL = 20 atoms when thresholds are distinct.
inline Dataset random_tabular(const TempDir& dir, std::size_t rows, std::uint64_t seed, int classes = 2) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> num(0, 99), cat(0, 6), label(0, classes - 1);
  std::string csv = "u,v,c,y\n";
  for (std::size_t i = 0; i < rows; ++i)
    csv += std::to_string(num(rng)) + "," + std::to_string(num(rng)) + ",k" + std::to_string(cat(rng)) + ",y" +
           std::to_string(label(rng)) + "\n";
  TabularConfig c;
  c.path = dir.write("random_" + std::to_string(seed) + ".csv", csv);
  c.label = "y";
  c.numeric = {"u", "v"};
  c.categorical = {"c"};
  return load_tabular(c, {1.0, 0.0}, seed);
}

/// Naive per-instance coverage count.
inline std::vector<std::size_t> naive_counts(const AtomPool& pool, const Dataset& ds, std::span<const int> ids) {
  std::vector<std::size_t> n_y(ds.num_classes(), 0);
  for (std::size_t j = 0; j < ds.train_size(); ++j) {
    const auto& x = ds.train(j);
    bool ok = true;
    for (int a : ids) ok = ok && pool.satisfies(a, x);
    if (ok) ++n_y[static_cast<std::size_t>(x.label)];
  }
  return n_y;
}

}  // namespace lorex::testing
