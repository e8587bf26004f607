// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "peftlab/quant4.hpp"

namespace peftlab::testing {

// Scalar block-wise round trip: double arithmetic, brute-force nearest code.
inline std::vector<double> reference_roundtrip(std::span<const float> x, std::size_t block,
                                               const quant::Codebook& cb) {
  std::vector<double> out(x.size());
  for (std::size_t lo = 0; lo < x.size(); lo += block) {
    const std::size_t hi = std::min(x.size(), lo + block);
    double m = 0.0;
    for (std::size_t i = lo; i < hi; ++i) m = std::max(m, std::fabs(double(x[i])));
    for (std::size_t i = lo; i < hi; ++i) {
      if (m == 0.0) {
        out[i] = 0.0;
        continue;
      }
      const double v = double(static_cast<float>(x[i] / static_cast<float>(m)));
      std::size_t best = 0;
      for (std::size_t c = 1; c < 16; ++c) {
        if (std::fabs(v - cb.values[c]) < std::fabs(v - cb.values[best])) best = c;
      }
      out[i] = double(cb.values[best]) * m;
    }
  }
  return out;
}

}  // namespace peftlab::testing
