// SPDX-License-Identifier: Apache-2.0
//
// Semantic-trajectory MoE language model: pre-LN causal attention blocks
// whose feed-forward sublayer is a cosine-routed bank of rank-1 experts
// applied over several re-routing hops.
//
// Within block l the MoE state starts at u0 = LN2(x); hop j routes from
// u_j, adds delta_j, and the block writes x + sum_j delta_j back to the
// residual stream. The residual view of hop j is therefore x + accum_j,
// which is what the lens probes.
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "stmoe/core_math.hpp"

namespace stmoe {

enum class RouterMode { Cosine, Linear };

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int n_layers = 2;
  int vocab_size = 1024;
  int d_space = 16;
  int n_experts = 64;  // M
  int top_k = 4;       // K
  double tau = 30.0;
  int hops = 3;  // H
  RouterMode router = RouterMode::Cosine;
  int max_seq = 64;
  bool tie_embeddings = true;
  double init_std = 0.02;

  void validate() const;
  [[nodiscard]] int head_dim() const { return d_model / n_heads; }

  static ModelConfig desk(int vocab_size);
  static ModelConfig marathon(int vocab_size);
  // d_model=16, 2 layers, M=8, K=2, H=2, vocab 50: the gradient-check config.
  static ModelConfig tiny();
};

std::string router_mode_name(RouterMode mode);
RouterMode parse_router_mode(const std::string& name);

// Row-major parameter tensor.
template <class T>
struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<T> data;

  [[nodiscard]] std::size_t size() const { return data.size(); }
  std::span<T> row(std::size_t r) {
    const auto w = static_cast<std::size_t>(shape.back());
    return {data.data() + r * w, w};
  }
  [[nodiscard]] std::span<const T> row(std::size_t r) const {
    const auto w = static_cast<std::size_t>(shape.back());
    return {data.data() + r * w, w};
  }
};

// Read-only view of one layer's experts and routing maps.
template <class T>
struct ExpertBank {
  int n_experts = 0;
  int d_model = 0;
  int d_space = 0;
  std::span<const T> proj_in;    // [d_model x d_space], shared across hops
  std::span<const T> centroids;  // [M x d_space]
  std::span<const T> w_down;     // [M x d_model], read directions
  std::span<const T> w_up;       // [M x d_model], write directions
  std::span<const T> router;     // [d_model x M], linear mode only

  [[nodiscard]] std::span<const T> centroid(int e) const {
    return centroids.subspan(static_cast<std::size_t>(e * d_space), static_cast<std::size_t>(d_space));
  }
  [[nodiscard]] std::span<const T> down(int e) const {
    return w_down.subspan(static_cast<std::size_t>(e * d_model), static_cast<std::size_t>(d_model));
  }
  [[nodiscard]] std::span<const T> up(int e) const {
    return w_up.subspan(static_cast<std::size_t>(e * d_model), static_cast<std::size_t>(d_model));
  }
};

template <class T>
struct LayerParams {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> wq, wk, wv, wo;  // [d_in x d_out]
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> proj_in, centroids, w_down, w_up, router;
};

template <class T>
struct ModelParams {
  Tensor<T> tok_emb;  // [V x d]
  Tensor<T> pos_emb;  // [S x d]
  std::vector<LayerParams<T>> layers;
  Tensor<T> lnf_g, lnf_b;
  Tensor<T> head;  // [V x d], empty when embeddings are tied

  // Every tensor in a fixed order (the checkpoint and optimizer order).
  std::vector<Tensor<T>*> tensors();
  std::vector<const Tensor<T>*> tensors() const;
  void zero();
};

template <class T>
ModelParams<T> make_params(const ModelConfig& cfg);

// Per-call inference controls. Never stored on the model.
struct SteerTarget {
  int layer = 0;
  Vec direction;  // d_space, normally a unit centroid
  double lambda = 0.0;
};

struct RoutingControls {
  std::vector<SteerTarget> steer;
  std::map<int, std::set<int>> suppress;
  std::map<int, std::set<int>> knockout;
  std::map<int, std::map<int, Vec>> surgery;  // layer -> expert -> replacement W_up
  std::map<int, std::map<int, double>> linear_bias;
  bool steer_last_position_only = false;

  [[nodiscard]] bool empty() const;
  void validate(const ModelConfig& cfg) const;
};

struct HopRecord {
  Vec pos;
  std::vector<int> expert_ids;
  Vec weights;
};

// trace.hops[token][layer][hop]; residual snapshots (when requested) hold
// x + accum before hop 0 and after each hop: snapshots[token][layer][j], j in [0, H].
struct RoutingTrace {
  std::vector<std::vector<std::vector<HopRecord>>> hops;
  std::vector<std::vector<std::vector<Vec>>> snapshots;

  [[nodiscard]] bool uses_expert(int layer, int expert) const;
};

enum class TraceLevel { None, Routing, Snapshots };

template <class T>
struct ForwardResult {
  std::vector<T> logits;  // [len x V]
  RoutingTrace trace;
  std::vector<std::vector<T>> final_residual;  // per position, pre final-LN
};

// ---------------------------------------------------------------------------
// Routing building blocks. Shared by the forward pass and the tests.

template <class T>
std::vector<T> compute_position(std::span<const T> h, const ExpertBank<T>& bank);

// normalize(pos + lambda * c_target)
template <class T>
std::vector<T> apply_steering(std::span<const T> pos, std::span<const T> c_target, double lambda);

template <class T>
HopRecord select_experts(std::span<const T> pos, const ExpertBank<T>& bank, const ModelConfig& cfg,
                         const RoutingControls& controls, int layer);

template <class T>
HopRecord linear_select(std::span<const T> h, const ExpertBank<T>& bank, const ModelConfig& cfg,
                        const RoutingControls& controls, int layer);

template <class T>
std::vector<T> expert_delta(std::span<const T> h, const HopRecord& rec, const ExpertBank<T>& bank,
                            const RoutingControls& controls, int layer);

template <class T>
struct MoeLayerResult {
  std::vector<T> h_out;
  std::vector<HopRecord> records;
};

// Multi-hop MoE on one token state (already layer-normed).
template <class T>
MoeLayerResult<T> moe_layer(std::span<const T> h, const ExpertBank<T>& bank, const ModelConfig& cfg,
                            const RoutingControls& controls, int layer);

double nll_loss(std::span<const double> logits, std::span<const int> targets, int vocab);

template <class T>
class BasicModel {
 public:
  BasicModel(const ModelConfig& cfg, std::uint64_t seed);
  BasicModel(const ModelConfig& cfg, ModelParams<T> params);

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] const ModelParams<T>& params() const { return params_; }
  ModelParams<T>& params() { return params_; }

  [[nodiscard]] ExpertBank<T> bank(int layer) const;
  [[nodiscard]] std::span<const T> unembedding() const;  // [V x d]

  [[nodiscard]] ForwardResult<T> forward(std::span<const int> tokens, const RoutingControls& controls = {},
                                         TraceLevel trace = TraceLevel::Routing) const;

  // Causal self-attention sublayer of one block (LN1, QKV, heads, Wo), no
  // residual add. Input/output are [len x d].
  [[nodiscard]] std::vector<T> attention_block(std::span<const T> states, int layer) const;

  // Final LN + LM head on a single residual state.
  [[nodiscard]] std::vector<T> head_logits(std::span<const T> h) const;

  // Summed token NLL of targets (loss scaled by `scale` before backprop) with
  // gradients accumulated into `grad`. Routing uses no controls.
  double loss_and_grad(std::span<const int> inputs, std::span<const int> targets, ModelParams<T>& grad,
                       double scale) const;

  // Mean next-token NLL without gradients.
  [[nodiscard]] double mean_nll(std::span<const int> inputs, std::span<const int> targets) const;

  // Re-project every centroid row to unit length.
  void renormalize_centroids();

  template <class U>
  [[nodiscard]] BasicModel<U> cast() const;

 private:
  struct Cache;
  void check_tokens(std::span<const int> tokens) const;
  std::vector<T> run(std::span<const int> tokens, const RoutingControls& controls, TraceLevel level,
                     RoutingTrace* trace, Cache* cache, std::vector<std::vector<T>>* final_residual) const;

  ModelConfig cfg_;
  ModelParams<T> params_;
};

using Model = BasicModel<float>;

}  // namespace stmoe
