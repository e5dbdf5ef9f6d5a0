// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "stmoe/model.hpp"

namespace stmoe {

struct Probe {
  double p = 0.0;
  int rank = 1;  // 1 + number of strictly greater logits
};

// Final LN + LM head + softmax on one residual state.
Vec probe_distribution(std::span<const double> h, const Model& model);
Probe probe_state(std::span<const double> h, const Model& model, int target);

struct LensPoint {
  int layer = 0;
  int hop = 0;
  bool after = false;
  double p = 0.0;
  int rank = 1;
};

struct LensCurve {
  int target = 0;
  std::vector<LensPoint> points;  // ordered by (layer, hop, before < after)
};

// Probes the last prompt position before and after every hop.
LensCurve lens_trace(std::span<const int> prompt, int target, const Model& model, const RoutingControls& controls = {});

}  // namespace stmoe
