// Random problem generators shared by the unit and acceptance tests.
#pragma once

#include <vector>

#include "psh3d/psh3d.hpp"

namespace fixtures {

using namespace psh3d;

struct Instance {
  std::vector<Voxel> voxels;
  std::vector<std::int32_t> batch;
  HashConfig cfg;
  std::int64_t capacity = 0;
};

// Voxels drawn from a mix of uniform noise and dense blobs, so that both
// easy and heavily contended buckets occur. Already non-negative.
inline std::vector<Voxel> random_voxels(Rng& rng, std::size_t n, std::int64_t extent) {
  std::vector<Voxel> v(n);
  const std::size_t blobs = 1 + rng.below(4);
  std::vector<Voxel> centre(blobs);
  for (auto& c : centre)
    for (auto& x : c) x = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(extent)));
  for (auto& p : v) {
    if (rng.uniform() < 0.5) {
      for (auto& x : p) x = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(extent)));
    } else {
      const auto& c = centre[rng.below(blobs)];
      for (int a = 0; a < 3; ++a)
        p[a] = std::clamp<std::int64_t>(c[a] + static_cast<std::int64_t>(rng.normal() * 2.0), 0, extent - 1);
    }
  }
  return v;
}

inline Instance random_instance(Rng& rng, std::size_t n, HashKind kind, std::uint32_t K, std::int64_t S,
                                std::size_t batches = 1) {
  Instance in;
  const std::int64_t extent = 1 + static_cast<std::int64_t>(rng.below(600));
  in.voxels = random_voxels(rng, n, extent);
  in.batch.resize(n);
  for (std::size_t i = 0; i < n; ++i) in.batch[i] = static_cast<std::int32_t>(i * batches / n);
  in.cfg = HashConfig{kind, K, 1, 10};
  if (is_div(kind)) in.cfg.divisor = auto_divisor(in.voxels, in.cfg);
  in.capacity = S;
  return in;
}

inline MatrixD random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  MatrixD m(rows, cols);
  for (auto& x : m.values()) x = scale * rng.normal();
  return m;
}

}  // namespace fixtures
