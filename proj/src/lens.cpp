// SPDX-License-Identifier: Apache-2.0
#include "stmoe/lens.hpp"

namespace stmoe {

Vec probe_distribution(std::span<const double> h, const Model& model) {
  std::vector<float> hf(h.begin(), h.end());
  const auto logits = model.head_logits(hf);
  Vec l(logits.begin(), logits.end());
  return softmax_temp<double>(l, 1.0);
}

Probe probe_state(std::span<const double> h, const Model& model, int target) {
  if (target < 0 || target >= model.config().vocab_size) throw Error(Errc::OutOfVocab, "probe target");
  std::vector<float> hf(h.begin(), h.end());
  const auto logits = model.head_logits(hf);
  Vec l(logits.begin(), logits.end());
  const auto p = softmax_temp<double>(l, 1.0);
  int rank = 1;
  for (float x : logits) rank += x > logits[static_cast<std::size_t>(target)] ? 1 : 0;
  return {p[static_cast<std::size_t>(target)], rank};
}

LensCurve lens_trace(std::span<const int> prompt, int target, const Model& model, const RoutingControls& controls) {
  const auto res = model.forward(prompt, controls, TraceLevel::Snapshots);
  const auto& snaps = res.trace.snapshots.back();
  LensCurve curve;
  curve.target = target;
  const int hops = model.config().hops;
  for (int l = 0; l < model.config().n_layers; ++l) {
    const auto& s = snaps[static_cast<std::size_t>(l)];
    for (int j = 0; j < hops; ++j) {
      for (int after = 0; after < 2; ++after) {
        const auto pr = probe_state(s[static_cast<std::size_t>(j + after)], model, target);
        curve.points.push_back({l, j, after == 1, pr.p, pr.rank});
      }
    }
  }
  return curve;
}

}  // namespace stmoe
