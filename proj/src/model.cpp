// SPDX-License-Identifier: Apache-2.0
#include "stmoe/model.hpp"

#include <algorithm>
#include <cmath>

#include "stmoe/kernels.hpp"

namespace stmoe {

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw Error(Errc::Config, "ModelConfig: " + what);
  };
  need(d_model >= 1 && n_heads >= 1 && n_layers >= 1 && vocab_size >= 1, "counts must be >= 1");
  need(d_space >= 1 && n_experts >= 1 && top_k >= 1 && hops >= 1 && max_seq >= 1, "counts must be >= 1");
  need(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  need(top_k <= n_experts, "K must not exceed M");
  need(d_space <= d_model, "d_space must not exceed d_model");
  need(tau >= 0.0 && std::isfinite(tau), "tau must be finite and >= 0");
  need(init_std > 0.0, "init_std must be positive");
}

ModelConfig ModelConfig::desk(int vocab_size) {
  ModelConfig c;
  c.d_model = 128;
  c.n_heads = 4;
  c.n_layers = 2;
  c.vocab_size = vocab_size;
  c.d_space = 16;
  c.n_experts = 64;
  c.top_k = 4;
  c.tau = 30.0;
  c.hops = 3;
  c.max_seq = 64;
  return c;
}

ModelConfig ModelConfig::marathon(int vocab_size) {
  ModelConfig c;
  c.d_model = 1024;
  c.n_heads = 16;
  c.n_layers = 8;
  c.vocab_size = vocab_size;
  c.d_space = 64;
  c.n_experts = 1024;
  c.top_k = 4;
  c.tau = 30.0;
  c.hops = 3;
  c.max_seq = 512;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.vocab_size = 50;
  c.d_space = 4;
  c.n_experts = 8;
  c.top_k = 2;
  c.tau = 30.0;
  c.hops = 2;
  c.max_seq = 8;
  c.init_std = 0.1;
  return c;
}

std::string router_mode_name(RouterMode mode) { return mode == RouterMode::Cosine ? "cosine" : "linear"; }

RouterMode parse_router_mode(const std::string& name) {
  if (name == "cosine") return RouterMode::Cosine;
  if (name == "linear") return RouterMode::Linear;
  throw Error(Errc::Config, "unknown router mode '" + name + "'");
}

// ---------------------------------------------------------------------------
// Params

template <class T>
std::vector<Tensor<T>*> ModelParams<T>::tensors() {
  std::vector<Tensor<T>*> out{&tok_emb, &pos_emb};
  for (auto& l : layers) {
    for (auto* t : {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b, &l.proj_in, &l.centroids,
                    &l.w_down, &l.w_up, &l.router}) {
      out.push_back(t);
    }
  }
  out.push_back(&lnf_g);
  out.push_back(&lnf_b);
  out.push_back(&head);
  return out;
}

template <class T>
std::vector<const Tensor<T>*> ModelParams<T>::tensors() const {
  auto mut = const_cast<ModelParams<T>*>(this)->tensors();
  return {mut.begin(), mut.end()};
}

template <class T>
void ModelParams<T>::zero() {
  for (auto* t : tensors()) std::fill(t->data.begin(), t->data.end(), T(0));
}

namespace {

template <class T>
Tensor<T> make_tensor(std::string name, std::vector<int> shape) {
  std::size_t n = 1;
  for (const int s : shape) n *= static_cast<std::size_t>(s);
  if (shape.empty()) n = 0;
  return Tensor<T>{std::move(name), std::move(shape), std::vector<T>(n, T(0))};
}

}  // namespace

template <class T>
ModelParams<T> make_params(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  ModelParams<T> p;
  p.tok_emb = make_tensor<T>("tok_emb", {cfg.vocab_size, d});
  p.pos_emb = make_tensor<T>("pos_emb", {cfg.max_seq, d});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    LayerParams<T> lp;
    lp.ln1_g = make_tensor<T>(pre + "ln1_g", {d});
    lp.ln1_b = make_tensor<T>(pre + "ln1_b", {d});
    lp.wq = make_tensor<T>(pre + "wq", {d, d});
    lp.wk = make_tensor<T>(pre + "wk", {d, d});
    lp.wv = make_tensor<T>(pre + "wv", {d, d});
    lp.wo = make_tensor<T>(pre + "wo", {d, d});
    lp.ln2_g = make_tensor<T>(pre + "ln2_g", {d});
    lp.ln2_b = make_tensor<T>(pre + "ln2_b", {d});
    lp.proj_in = make_tensor<T>(pre + "proj_in", {d, cfg.d_space});
    lp.centroids = make_tensor<T>(pre + "centroids", {cfg.n_experts, cfg.d_space});
    lp.w_down = make_tensor<T>(pre + "w_down", {cfg.n_experts, d});
    lp.w_up = make_tensor<T>(pre + "w_up", {cfg.n_experts, d});
    if (cfg.router == RouterMode::Linear)
      lp.router = make_tensor<T>(pre + "router", {d, cfg.n_experts});
    else
      lp.router = make_tensor<T>(pre + "router", {});
    p.layers.push_back(std::move(lp));
  }
  p.lnf_g = make_tensor<T>("lnf_g", {d});
  p.lnf_b = make_tensor<T>("lnf_b", {d});
  p.head = cfg.tie_embeddings ? make_tensor<T>("head", {}) : make_tensor<T>("head", {cfg.vocab_size, d});
  return p;
}

// ---------------------------------------------------------------------------
// Controls and traces

bool RoutingControls::empty() const {
  return steer.empty() && suppress.empty() && knockout.empty() && surgery.empty() && linear_bias.empty();
}

void RoutingControls::validate(const ModelConfig& cfg) const {
  auto check_layer = [&](int l) {
    if (l < 0 || l >= cfg.n_layers) throw Error(Errc::BadIndex, "controls: layer " + std::to_string(l));
  };
  auto check_expert = [&](int e) {
    if (e < 0 || e >= cfg.n_experts) throw Error(Errc::BadIndex, "controls: expert " + std::to_string(e));
  };
  for (const auto& s : steer) {
    check_layer(s.layer);
    if (static_cast<int>(s.direction.size()) != cfg.d_space)
      throw Error(Errc::ShapeMismatch, "controls: steering direction must have d_space entries");
    if (!std::isfinite(s.lambda)) throw Error(Errc::OutOfRange, "controls: steering strength must be finite");
  }
  for (const auto* m : {&suppress, &knockout}) {
    for (const auto& [l, set] : *m) {
      check_layer(l);
      for (const int e : set) check_expert(e);
    }
  }
  for (const auto& [l, set] : suppress) {
    if (cfg.n_experts - static_cast<int>(set.size()) < cfg.top_k)
      throw Error(Errc::InsufficientCandidates, "controls: suppression leaves fewer than K experts");
  }
  for (const auto& [l, m] : surgery) {
    check_layer(l);
    for (const auto& [e, v] : m) {
      check_expert(e);
      if (static_cast<int>(v.size()) != cfg.d_model) throw Error(Errc::ShapeMismatch, "controls: surgery vector");
      for (const double x : v)
        if (!std::isfinite(x)) throw Error(Errc::OutOfRange, "controls: surgery vector not finite");
    }
  }
  for (const auto& [l, m] : linear_bias) {
    check_layer(l);
    for (const auto& [e, b] : m) {
      check_expert(e);
      (void)b;
    }
  }
}

bool RoutingTrace::uses_expert(int layer, int expert) const {
  for (const auto& tok : hops) {
    for (const auto& rec : tok[static_cast<std::size_t>(layer)]) {
      if (std::find(rec.expert_ids.begin(), rec.expert_ids.end(), expert) != rec.expert_ids.end()) return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Routing internals

namespace {

template <class T>
struct HopScratch {
  std::vector<T> raw;        // d_space (cosine) or M logits (linear)
  std::vector<T> pos;        // d_space, after steering
  std::vector<T> all_scores; // M
  std::vector<char> blocked; // M
};

template <class T>
void project(std::span<const T> h, std::span<const T> proj_in, int d_model, int d_space, std::span<T> out) {
  kernels::serial::matmul<T>(h, proj_in, out, 1, static_cast<std::size_t>(d_model),
                             static_cast<std::size_t>(d_space));
}

template <class T>
void normalize_inplace(std::span<T> v, const char* what) {
  const T n = norm2<T>(v);
  if (!(static_cast<double>(n) > kNormEps)) throw Error(Errc::NearZeroNorm, what);
  for (auto& x : v) x /= n;
}

template <class T>
std::span<const char> blocked_mask(const RoutingControls& controls, int layer, int n_experts,
                                   std::vector<char>& buf) {
  const auto it = controls.suppress.find(layer);
  if (it == controls.suppress.end() || it->second.empty()) return {};
  buf.assign(static_cast<std::size_t>(n_experts), 0);
  for (const int e : it->second) buf[static_cast<std::size_t>(e)] = 1;
  return buf;
}

template <class T>
bool has_steer(const RoutingControls& controls, int layer) {
  for (const auto& s : controls.steer)
    if (s.layer == layer && s.lambda != 0.0) return true;
  return false;
}

// Cosine routing for one hop. `pos_out` receives the routed (steered)
// position; `pre_norm` the norm of proj_in(h).
template <class T>
void route_cosine(std::span<const T> h, const ExpertBank<T>& bank, std::span<const T> centroid_norms,
                  const ModelConfig& cfg, const RoutingControls& controls, int layer, bool steer_here,
                  HopScratch<T>& s, T& pre_norm, int* ids, T* sims, T* weights) {
  const auto ds = static_cast<std::size_t>(bank.d_space);
  s.raw.resize(ds);
  s.pos.resize(ds);
  project<T>(h, bank.proj_in, bank.d_model, bank.d_space, s.raw);
  pre_norm = norm2<T>(s.raw);
  if (!(static_cast<double>(pre_norm) > kNormEps))
    throw Error(Errc::NearZeroNorm, "compute_position: degenerate token state");
  for (std::size_t i = 0; i < ds; ++i) s.pos[i] = s.raw[i] / pre_norm;
  if (steer_here) {
    for (const auto& st : controls.steer) {
      if (st.layer != layer) continue;
      for (std::size_t i = 0; i < ds; ++i) s.pos[i] += static_cast<T>(st.lambda * st.direction[i]);
    }
    normalize_inplace<T>(s.pos, "apply_steering: position cancelled");
  }
  const auto m = static_cast<std::size_t>(bank.n_experts);
  s.all_scores.resize(m);
  for (std::size_t e = 0; e < m; ++e) {
    s.all_scores[e] = dot<T>(s.pos, bank.centroid(static_cast<int>(e))) / centroid_norms[e];
  }
  const auto blocked = blocked_mask<T>(controls, layer, bank.n_experts, s.blocked);
  const auto sel = top_k<T>(s.all_scores, cfg.top_k, blocked);
  std::vector<T> sel_scores(sel.size());
  for (std::size_t i = 0; i < sel.size(); ++i) {
    ids[i] = sel[i];
    sel_scores[i] = s.all_scores[static_cast<std::size_t>(sel[i])];
    sims[i] = sel_scores[i];
  }
  const auto w = softmax_temp<T>(sel_scores, cfg.tau);
  std::copy(w.begin(), w.end(), weights);
}

template <class T>
void route_linear(std::span<const T> h, const ExpertBank<T>& bank, const ModelConfig& cfg,
                  const RoutingControls& controls, int layer, HopScratch<T>& s, int* ids, T* logits_sel,
                  T* weights) {
  const auto m = static_cast<std::size_t>(bank.n_experts);
  s.all_scores.resize(m);
  kernels::serial::matmul<T>(h, bank.router, s.all_scores, 1, static_cast<std::size_t>(bank.d_model), m);
  if (const auto it = controls.linear_bias.find(layer); it != controls.linear_bias.end()) {
    for (const auto& [e, b] : it->second) s.all_scores[static_cast<std::size_t>(e)] += static_cast<T>(b);
  }
  const auto blocked = blocked_mask<T>(controls, layer, bank.n_experts, s.blocked);
  const auto sel = top_k<T>(s.all_scores, cfg.top_k, blocked);
  std::vector<T> sel_scores(sel.size());
  for (std::size_t i = 0; i < sel.size(); ++i) {
    ids[i] = sel[i];
    sel_scores[i] = s.all_scores[static_cast<std::size_t>(sel[i])];
    logits_sel[i] = sel_scores[i];
  }
  const auto w = softmax_temp<T>(sel_scores, 1.0);
  std::copy(w.begin(), w.end(), weights);
  // Diagnostic position: the normalised leading d_space logits.
  const auto ds = static_cast<std::size_t>(bank.d_space);
  s.pos.assign(s.all_scores.begin(), s.all_scores.begin() + static_cast<std::ptrdiff_t>(std::min(ds, m)));
  s.pos.resize(ds, T(0));
  const T n = norm2<T>(s.pos);
  if (static_cast<double>(n) > kNormEps) {
    for (auto& x : s.pos) x /= n;
  } else {
    std::fill(s.pos.begin(), s.pos.end(), T(0));
    s.pos[0] = T(1);
  }
}

// delta += sum_i w_i * up_i * silu(down_i . h); z receives the pre-activations.
template <class T>
void apply_experts(std::span<const T> h, const int* ids, const T* weights, int k, const ExpertBank<T>& bank,
                   const RoutingControls& controls, int layer, std::span<T> delta, T* z) {
  const std::set<int>* knocked = nullptr;
  if (const auto it = controls.knockout.find(layer); it != controls.knockout.end()) knocked = &it->second;
  const std::map<int, Vec>* surg = nullptr;
  if (const auto it = controls.surgery.find(layer); it != controls.surgery.end()) surg = &it->second;
  const auto d = static_cast<std::size_t>(bank.d_model);
  for (int i = 0; i < k; ++i) {
    const int e = ids[i];
    const T zi = dot<T>(h, bank.down(e));
    if (z) z[i] = zi;
    if (knocked && knocked->count(e)) continue;
    const T coef = weights[i] * silu(zi);
    if (surg) {
      if (const auto it = surg->find(e); it != surg->end()) {
        for (std::size_t j = 0; j < d; ++j) delta[j] += coef * static_cast<T>(it->second[j]);
        continue;
      }
    }
    const auto up = bank.up(e);
#pragma omp simd
    for (std::size_t j = 0; j < d; ++j) delta[j] += coef * up[j];
  }
}

template <class T>
std::vector<T> centroid_norms(const ExpertBank<T>& bank) {
  std::vector<T> out(static_cast<std::size_t>(bank.n_experts));
  for (int e = 0; e < bank.n_experts; ++e) {
    const T n = norm2<T>(bank.centroid(e));
    if (!(static_cast<double>(n) > kNormEps)) throw Error(Errc::NearZeroNorm, "centroid " + std::to_string(e));
    out[static_cast<std::size_t>(e)] = n;
  }
  return out;
}

template <class T>
HopRecord make_record(std::span<const T> pos, const int* ids, const T* w, int k) {
  HopRecord rec;
  rec.pos.assign(pos.begin(), pos.end());
  rec.expert_ids.assign(ids, ids + k);
  rec.weights.assign(w, w + k);
  return rec;
}

// Row-wise layer norm: y = xhat * g + b, with xhat and rstd cached.
template <class T>
void layer_norm_rows(std::span<const T> x, std::span<const T> g, std::span<const T> b, std::size_t n,
                     std::size_t d, std::span<T> xhat, std::span<T> rstd, std::span<T> y) {
  constexpr double kEps = 1e-5;
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.data() + r * d;
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kEps));
    rstd[r] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const T xh = (xr[i] - mean) * rs;
      xhat[r * d + i] = xh;
      y[r * d + i] = xh * g[i] + b[i];
    }
  }
}

template <class T>
void layer_norm_rows_backward(std::span<const T> dy, std::span<const T> xhat, std::span<const T> rstd,
                              std::span<const T> g, std::size_t n, std::size_t d, std::span<T> dx,
                              std::span<T> dg, std::span<T> db) {
  std::vector<T> dxh(d);
  for (std::size_t r = 0; r < n; ++r) {
    const T* dyr = dy.data() + r * d;
    const T* xr = xhat.data() + r * d;
    T mean_dxh = 0, mean_dxh_x = 0;
    for (std::size_t i = 0; i < d; ++i) {
      dg[i] += dyr[i] * xr[i];
      db[i] += dyr[i];
      dxh[i] = dyr[i] * g[i];
      mean_dxh += dxh[i];
      mean_dxh_x += dxh[i] * xr[i];
    }
    mean_dxh /= static_cast<T>(d);
    mean_dxh_x /= static_cast<T>(d);
    for (std::size_t i = 0; i < d; ++i) dx[r * d + i] += rstd[r] * (dxh[i] - mean_dxh - xr[i] * mean_dxh_x);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Public routing building blocks

template <class T>
std::vector<T> compute_position(std::span<const T> h, const ExpertBank<T>& bank) {
  std::vector<T> raw(static_cast<std::size_t>(bank.d_space));
  project<T>(h, bank.proj_in, bank.d_model, bank.d_space, raw);
  return l2_normalize<T>(raw);
}

template <class T>
std::vector<T> apply_steering(std::span<const T> pos, std::span<const T> c_target, double lambda) {
  if (pos.size() != c_target.size()) throw Error(Errc::LengthMismatch, "apply_steering");
  if (lambda < 0.0) throw Error(Errc::OutOfRange, "apply_steering: lambda < 0");
  std::vector<T> out(pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i) out[i] = pos[i] + static_cast<T>(lambda) * c_target[i];
  normalize_inplace<T>(out, "apply_steering: position cancelled");
  return out;
}

template <class T>
HopRecord select_experts(std::span<const T> pos, const ExpertBank<T>& bank, const ModelConfig& cfg,
                         const RoutingControls& controls, int layer) {
  std::vector<T> p(pos.begin(), pos.end());
  if (has_steer<T>(controls, layer)) {
    for (const auto& st : controls.steer) {
      if (st.layer != layer) continue;
      for (std::size_t i = 0; i < p.size(); ++i) p[i] += static_cast<T>(st.lambda * st.direction[i]);
    }
    normalize_inplace<T>(p, "apply_steering: position cancelled");
  }
  const auto cn = centroid_norms(bank);
  std::vector<T> scores(static_cast<std::size_t>(bank.n_experts));
  for (int e = 0; e < bank.n_experts; ++e)
    scores[static_cast<std::size_t>(e)] = dot<T>(p, bank.centroid(e)) / cn[static_cast<std::size_t>(e)];
  std::vector<char> buf;
  const auto blocked = blocked_mask<T>(controls, layer, bank.n_experts, buf);
  const auto sel = top_k<T>(scores, cfg.top_k, blocked);
  std::vector<T> sel_scores;
  for (const int e : sel) sel_scores.push_back(scores[static_cast<std::size_t>(e)]);
  const auto w = softmax_temp<T>(sel_scores, cfg.tau);
  return make_record<T>(p, sel.data(), w.data(), cfg.top_k);
}

template <class T>
HopRecord linear_select(std::span<const T> h, const ExpertBank<T>& bank, const ModelConfig& cfg,
                        const RoutingControls& controls, int layer) {
  HopScratch<T> s;
  std::vector<int> ids(static_cast<std::size_t>(cfg.top_k));
  std::vector<T> logits(ids.size()), w(ids.size());
  route_linear<T>(h, bank, cfg, controls, layer, s, ids.data(), logits.data(), w.data());
  return make_record<T>(s.pos, ids.data(), w.data(), cfg.top_k);
}

template <class T>
std::vector<T> expert_delta(std::span<const T> h, const HopRecord& rec, const ExpertBank<T>& bank,
                            const RoutingControls& controls, int layer) {
  std::vector<T> delta(static_cast<std::size_t>(bank.d_model), T(0));
  std::vector<T> w(rec.weights.begin(), rec.weights.end());
  for (const int e : rec.expert_ids)
    if (e < 0 || e >= bank.n_experts) throw Error(Errc::BadIndex, "expert_delta: expert id");
  apply_experts<T>(h, rec.expert_ids.data(), w.data(), static_cast<int>(rec.expert_ids.size()), bank, controls,
                   layer, delta, nullptr);
  return delta;
}

template <class T>
MoeLayerResult<T> moe_layer(std::span<const T> h, const ExpertBank<T>& bank, const ModelConfig& cfg,
                            const RoutingControls& controls, int layer) {
  MoeLayerResult<T> out;
  std::vector<T> state(h.begin(), h.end());
  std::vector<T> accum(h.size(), T(0));
  for (int hop = 0; hop < cfg.hops; ++hop) {
    HopRecord rec;
    if (cfg.router == RouterMode::Cosine) {
      const auto pos = compute_position<T>(state, bank);
      rec = select_experts<T>(pos, bank, cfg, controls, layer);
    } else {
      rec = linear_select<T>(state, bank, cfg, controls, layer);
    }
    const auto delta = expert_delta<T>(state, rec, bank, controls, layer);
    for (std::size_t i = 0; i < state.size(); ++i) {
      accum[i] += delta[i];
      state[i] = h[i] + accum[i];
    }
    out.records.push_back(std::move(rec));
  }
  out.h_out = std::move(state);
  return out;
}

double nll_loss(std::span<const double> logits, std::span<const int> targets, int vocab) {
  const auto v = static_cast<std::size_t>(vocab);
  if (logits.size() != targets.size() * v) throw Error(Errc::LengthMismatch, "nll_loss: logits/targets");
  if (targets.empty()) throw Error(Errc::EmptyInput, "nll_loss");
  double total = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const double* row = logits.data() + t * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t i = 0; i < v; ++i) z += std::exp(row[i] - mx);
    if (targets[t] < 0 || targets[t] >= vocab) throw Error(Errc::OutOfVocab, "nll_loss target");
    total += (std::log(z) + mx) - row[targets[t]];
  }
  return total / static_cast<double>(targets.size());
}

// ---------------------------------------------------------------------------
// Model

template <class T>
struct BasicModel<T>::Cache {
  struct Hop {
    std::vector<T> u;      // [n x d] routing state
    std::vector<T> pnorm;  // [n]
    std::vector<T> pos;    // [n x ds]
    std::vector<int> ids;  // [n x K]
    std::vector<T> w;      // [n x K]
    std::vector<T> z;      // [n x K]
  };
  struct Layer {
    std::vector<T> x_in, xhat1, rstd1, a, q, k, v, probs, o, x1, xhat2, rstd2;
    std::vector<Hop> hops;
    std::vector<T> cnorm;
  };
  std::vector<Layer> layers;
  std::vector<T> x_final, xhatf, rstdf, y;
};

template <class T>
BasicModel<T>::BasicModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(make_params<T>(cfg)) {
  Rng rng(seed);
  const double d = cfg.d_model;
  auto fill_normal = [&](Tensor<T>& t, double std) {
    for (auto& x : t.data) x = static_cast<T>(rng.normal() * std);
  };
  auto fill_const = [](Tensor<T>& t, T v) { std::fill(t.data.begin(), t.data.end(), v); };
  fill_normal(params_.tok_emb, cfg.init_std);
  fill_normal(params_.pos_emb, cfg.init_std);
  for (auto& l : params_.layers) {
    fill_const(l.ln1_g, T(1));
    fill_const(l.ln2_g, T(1));
    fill_normal(l.wq, 1.0 / std::sqrt(d));
    fill_normal(l.wk, 1.0 / std::sqrt(d));
    fill_normal(l.wv, 1.0 / std::sqrt(d));
    fill_normal(l.wo, cfg.init_std / std::sqrt(2.0 * cfg.n_layers));
    fill_normal(l.proj_in, 1.0 / std::sqrt(d));
    fill_normal(l.centroids, 1.0);
    fill_normal(l.w_down, 1.0 / std::sqrt(d));
    fill_normal(l.w_up, cfg.init_std);
    fill_normal(l.router, 1.0 / std::sqrt(d));
  }
  fill_const(params_.lnf_g, T(1));
  fill_normal(params_.head, cfg.init_std);
  renormalize_centroids();
}

template <class T>
BasicModel<T>::BasicModel(const ModelConfig& cfg, ModelParams<T> params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  const auto expected = make_params<T>(cfg_);
  const auto want = expected.tensors();
  const auto have = std::as_const(params_).tensors();
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i]->shape != have[i]->shape || want[i]->data.size() != have[i]->data.size())
      throw Error(Errc::ShapeMismatch, "tensor " + want[i]->name + " does not match config");
  }
}

template <class T>
ExpertBank<T> BasicModel<T>::bank(int layer) const {
  if (layer < 0 || layer >= cfg_.n_layers) throw Error(Errc::BadIndex, "bank: layer");
  const auto& l = params_.layers[static_cast<std::size_t>(layer)];
  return ExpertBank<T>{cfg_.n_experts, cfg_.d_model, cfg_.d_space, l.proj_in.data, l.centroids.data,
                       l.w_down.data,  l.w_up.data,  l.router.data};
}

template <class T>
std::span<const T> BasicModel<T>::unembedding() const {
  return cfg_.tie_embeddings ? std::span<const T>(params_.tok_emb.data) : std::span<const T>(params_.head.data);
}

template <class T>
void BasicModel<T>::renormalize_centroids() {
  const auto ds = static_cast<std::size_t>(cfg_.d_space);
  for (auto& l : params_.layers) {
    for (int e = 0; e < cfg_.n_experts; ++e) {
      auto row = l.centroids.row(static_cast<std::size_t>(e));
      const T n = norm2<T>(std::span<const T>(row.data(), ds));
      if (static_cast<double>(n) > kNormEps)
        for (auto& x : row) x /= n;
    }
  }
}

template <class T>
void BasicModel<T>::check_tokens(std::span<const int> tokens) const {
  if (tokens.empty()) throw Error(Errc::EmptyInput, "forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg_.max_seq)
    throw Error(Errc::SequenceTooLong, "forward: length " + std::to_string(tokens.size()) + " > max_seq " +
                                           std::to_string(cfg_.max_seq));
  for (const int t : tokens)
    if (t < 0 || t >= cfg_.vocab_size) throw Error(Errc::OutOfVocab, "forward: token id " + std::to_string(t));
}

template <class T>
std::vector<T> BasicModel<T>::attention_block(std::span<const T> states, int layer) const {
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const std::size_t n = states.size() / d;
  if (states.size() != n * d || n == 0) throw Error(Errc::ShapeMismatch, "attention_block: states");
  const auto& lp = params_.layers.at(static_cast<std::size_t>(layer));
  std::vector<T> xhat(n * d), rstd(n), a(n * d), q(n * d), k(n * d), v(n * d), o(n * d, T(0)), out(n * d);
  layer_norm_rows<T>(states, lp.ln1_g.data, lp.ln1_b.data, n, d, xhat, rstd, a);
  kernels::matmul<T>(a, lp.wq.data, q, n, d, d);
  kernels::matmul<T>(a, lp.wk.data, k, n, d, d);
  kernels::matmul<T>(a, lp.wv.data, v, n, d, d);
  const auto dh = static_cast<std::size_t>(cfg_.head_dim());
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> p(n);
  for (std::size_t hd = 0; hd < static_cast<std::size_t>(cfg_.n_heads); ++hd) {
    const std::size_t off = hd * dh;
    for (std::size_t t = 0; t < n; ++t) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t s = 0; s <= t; ++s) {
        p[s] = dot<T>({q.data() + t * d + off, dh}, {k.data() + s * d + off, dh}) * scale;
        mx = std::max(mx, p[s]);
      }
      T sum = 0;
      for (std::size_t s = 0; s <= t; ++s) {
        p[s] = std::exp(p[s] - mx);
        sum += p[s];
      }
      for (std::size_t s = 0; s <= t; ++s) {
        const T ps = p[s] / sum;
        for (std::size_t i = 0; i < dh; ++i) o[t * d + off + i] += ps * v[s * d + off + i];
      }
    }
  }
  kernels::matmul<T>(o, lp.wo.data, out, n, d, d);
  return out;
}

template <class T>
std::vector<T> BasicModel<T>::head_logits(std::span<const T> h) const {
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const auto vsz = static_cast<std::size_t>(cfg_.vocab_size);
  if (h.size() != d) throw Error(Errc::ShapeMismatch, "head_logits: state width");
  std::vector<T> xhat(d), rstd(1), y(d), logits(vsz);
  layer_norm_rows<T>(h, params_.lnf_g.data, params_.lnf_b.data, 1, d, xhat, rstd, y);
  kernels::matmul_bt<T>(y, unembedding(), logits, 1, d, vsz);
  return logits;
}

template <class T>
std::vector<T> BasicModel<T>::run(std::span<const int> tokens, const RoutingControls& controls, TraceLevel level,
                                  RoutingTrace* trace, Cache* cache,
                                  std::vector<std::vector<T>>* final_residual) const {
  check_tokens(tokens);
  if (!controls.empty()) controls.validate(cfg_);
  const auto n = tokens.size();
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const auto ds = static_cast<std::size_t>(cfg_.d_space);
  const auto kk = static_cast<std::size_t>(cfg_.top_k);
  const auto vsz = static_cast<std::size_t>(cfg_.vocab_size);
  const auto dh = static_cast<std::size_t>(cfg_.head_dim());
  const auto nh = static_cast<std::size_t>(cfg_.n_heads);
  const auto n_layers = static_cast<std::size_t>(cfg_.n_layers);
  const auto n_hops = static_cast<std::size_t>(cfg_.hops);

  std::vector<T> x(n * d);
  for (std::size_t t = 0; t < n; ++t) {
    const auto te = params_.tok_emb.row(static_cast<std::size_t>(tokens[t]));
    const auto pe = params_.pos_emb.row(t);
    for (std::size_t i = 0; i < d; ++i) x[t * d + i] = te[i] + pe[i];
  }

  if (trace && level != TraceLevel::None) {
    trace->hops.assign(n, std::vector<std::vector<HopRecord>>(n_layers));
    if (level == TraceLevel::Snapshots) trace->snapshots.assign(n, std::vector<std::vector<Vec>>(n_layers));
  }
  if (cache) cache->layers.resize(n_layers);

  std::vector<T> xhat(n * d), rstd(n), a(n * d), q(n * d), k(n * d), v(n * d), o(n * d), attn(n * d);
  std::vector<T> probs;
  std::vector<T> u0(n * d), state(n * d), accum(n * d);
  HopScratch<T> scratch;
  std::vector<int> ids(kk);
  std::vector<T> sims(kk), w(kk), z(kk), delta(d);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& lp = params_.layers[l];
    typename Cache::Layer* lc = cache ? &cache->layers[l] : nullptr;
    if (lc) lc->x_in = x;

    // attention sublayer
    layer_norm_rows<T>(x, lp.ln1_g.data, lp.ln1_b.data, n, d, xhat, rstd, a);
    kernels::matmul<T>(a, lp.wq.data, q, n, d, d);
    kernels::matmul<T>(a, lp.wk.data, k, n, d, d);
    kernels::matmul<T>(a, lp.wv.data, v, n, d, d);
    probs.assign(nh * n * n, T(0));
    std::fill(o.begin(), o.end(), T(0));
    for (std::size_t hd = 0; hd < nh; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t t = 0; t < n; ++t) {
        T* pr = probs.data() + (hd * n + t) * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          pr[s] = dot<T>({q.data() + t * d + off, dh}, {k.data() + s * d + off, dh}) * scale;
          mx = std::max(mx, pr[s]);
        }
        T sum = 0;
        for (std::size_t s = 0; s <= t; ++s) {
          pr[s] = std::exp(pr[s] - mx);
          sum += pr[s];
        }
        for (std::size_t s = 0; s <= t; ++s) {
          pr[s] /= sum;
          for (std::size_t i = 0; i < dh; ++i) o[t * d + off + i] += pr[s] * v[s * d + off + i];
        }
      }
    }
    kernels::matmul<T>(o, lp.wo.data, attn, n, d, d);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += attn[i];
    if (lc) {
      lc->xhat1 = xhat;
      lc->rstd1 = rstd;
      lc->a = a;
      lc->q = q;
      lc->k = k;
      lc->v = v;
      lc->probs = probs;
      lc->o = o;
      lc->x1 = x;
    }

    // routed sublayer
    layer_norm_rows<T>(x, lp.ln2_g.data, lp.ln2_b.data, n, d, xhat, rstd, u0);
    if (lc) {
      lc->xhat2 = xhat;
      lc->rstd2 = rstd;
      lc->hops.resize(n_hops);
    }
    const ExpertBank<T> bk = bank(static_cast<int>(l));
    std::vector<T> cnorm;
    if (cfg_.router == RouterMode::Cosine) cnorm = centroid_norms(bk);
    if (lc) lc->cnorm = cnorm;
    const bool steer_layer = has_steer<T>(controls, static_cast<int>(l));
    state = u0;
    std::fill(accum.begin(), accum.end(), T(0));

    for (std::size_t j = 0; j < n_hops; ++j) {
      typename Cache::Hop* hc = lc ? &lc->hops[j] : nullptr;
      if (hc) {
        hc->u = state;
        hc->pnorm.resize(n);
        hc->pos.resize(n * ds);
        hc->ids.resize(n * kk);
        hc->w.resize(n * kk);
        hc->z.resize(n * kk);
      }
      for (std::size_t t = 0; t < n; ++t) {
        const std::span<const T> ut(state.data() + t * d, d);
        if (trace && level == TraceLevel::Snapshots) {
          Vec snap(d);
          for (std::size_t i = 0; i < d; ++i) snap[i] = static_cast<double>(x[t * d + i] + accum[t * d + i]);
          trace->snapshots[t][l].push_back(std::move(snap));
        }
        T pre_norm = T(1);
        if (cfg_.router == RouterMode::Cosine) {
          const bool steer_here = steer_layer && (!controls.steer_last_position_only || t + 1 == n);
          route_cosine<T>(ut, bk, cnorm, cfg_, controls, static_cast<int>(l), steer_here, scratch, pre_norm,
                          ids.data(), sims.data(), w.data());
        } else {
          route_linear<T>(ut, bk, cfg_, controls, static_cast<int>(l), scratch, ids.data(), sims.data(), w.data());
        }
        std::fill(delta.begin(), delta.end(), T(0));
        apply_experts<T>(ut, ids.data(), w.data(), cfg_.top_k, bk, controls, static_cast<int>(l), delta, z.data());
        for (std::size_t i = 0; i < d; ++i) accum[t * d + i] += delta[i];
        if (hc) {
          hc->pnorm[t] = pre_norm;
          std::copy(scratch.pos.begin(), scratch.pos.end(), hc->pos.begin() + static_cast<std::ptrdiff_t>(t * ds));
          for (std::size_t i = 0; i < kk; ++i) {
            hc->ids[t * kk + i] = ids[i];
            hc->w[t * kk + i] = w[i];
            hc->z[t * kk + i] = z[i];
          }
        }
        if (trace && level != TraceLevel::None) {
          trace->hops[t][l].push_back(make_record<T>(scratch.pos, ids.data(), w.data(), cfg_.top_k));
        }
      }
      // Hop j+1 routes from the state after every token's hop-j update.
      for (std::size_t i = 0; i < n * d; ++i) state[i] = u0[i] + accum[i];
    }
    for (std::size_t i = 0; i < n * d; ++i) x[i] += accum[i];
    if (trace && level == TraceLevel::Snapshots) {
      // last snapshot is the post-layer residual
      for (std::size_t t = 0; t < n; ++t) {
        Vec snap(d);
        for (std::size_t i = 0; i < d; ++i) snap[i] = static_cast<double>(x[t * d + i]);
        trace->snapshots[t][l].push_back(std::move(snap));
      }
    }
  }

  if (final_residual) {
    final_residual->assign(n, std::vector<T>(d));
    for (std::size_t t = 0; t < n; ++t)
      std::copy(x.begin() + static_cast<std::ptrdiff_t>(t * d), x.begin() + static_cast<std::ptrdiff_t>((t + 1) * d),
                (*final_residual)[t].begin());
  }
  std::vector<T> y(n * d);
  layer_norm_rows<T>(x, params_.lnf_g.data, params_.lnf_b.data, n, d, xhat, rstd, y);
  std::vector<T> logits(n * vsz);
  kernels::matmul_bt<T>(y, unembedding(), logits, n, d, vsz);
  if (cache) {
    cache->x_final = x;
    cache->xhatf = xhat;
    cache->rstdf = rstd;
    cache->y = std::move(y);
  }
  return logits;
}

template <class T>
ForwardResult<T> BasicModel<T>::forward(std::span<const int> tokens, const RoutingControls& controls,
                                        TraceLevel trace) const {
  ForwardResult<T> res;
  res.logits = run(tokens, controls, trace, &res.trace, nullptr, &res.final_residual);
  return res;
}

template <class T>
double BasicModel<T>::mean_nll(std::span<const int> inputs, std::span<const int> targets) const {
  if (inputs.size() != targets.size()) throw Error(Errc::LengthMismatch, "mean_nll: inputs/targets");
  const auto logits = run(inputs, {}, TraceLevel::None, nullptr, nullptr, nullptr);
  const auto vsz = static_cast<std::size_t>(cfg_.vocab_size);
  double total = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const T* row = logits.data() + t * vsz;
    const double mx = static_cast<double>(*std::max_element(row, row + vsz));
    double zsum = 0.0;
    for (std::size_t i = 0; i < vsz; ++i) zsum += std::exp(static_cast<double>(row[i]) - mx);
    if (targets[t] < 0 || targets[t] >= cfg_.vocab_size) throw Error(Errc::OutOfVocab, "mean_nll target");
    total += std::log(zsum) + mx - static_cast<double>(row[targets[t]]);
  }
  return total / static_cast<double>(targets.size());
}

template <class T>
double BasicModel<T>::loss_and_grad(std::span<const int> inputs, std::span<const int> targets, ModelParams<T>& grad,
                                    double scale_d) const {
  if (inputs.size() != targets.size()) throw Error(Errc::LengthMismatch, "loss_and_grad: inputs/targets");
  Cache cache;
  const auto logits = run(inputs, {}, TraceLevel::None, nullptr, &cache, nullptr);
  const auto n = inputs.size();
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const auto ds = static_cast<std::size_t>(cfg_.d_space);
  const auto kk = static_cast<std::size_t>(cfg_.top_k);
  const auto vsz = static_cast<std::size_t>(cfg_.vocab_size);
  const auto dh = static_cast<std::size_t>(cfg_.head_dim());
  const auto nh = static_cast<std::size_t>(cfg_.n_heads);
  const T scale = static_cast<T>(scale_d);

  // softmax cross-entropy
  double loss = 0.0;
  std::vector<T> dlogits(n * vsz);
  for (std::size_t t = 0; t < n; ++t) {
    const T* row = logits.data() + t * vsz;
    T* drow = dlogits.data() + t * vsz;
    const T mx = *std::max_element(row, row + vsz);
    double zsum = 0.0;
    for (std::size_t i = 0; i < vsz; ++i) zsum += std::exp(static_cast<double>(row[i] - mx));
    const auto tgt = static_cast<std::size_t>(targets[t]);
    if (targets[t] < 0 || targets[t] >= cfg_.vocab_size) throw Error(Errc::OutOfVocab, "loss target");
    loss += std::log(zsum) - static_cast<double>(row[tgt] - mx);
    for (std::size_t i = 0; i < vsz; ++i)
      drow[i] = static_cast<T>(std::exp(static_cast<double>(row[i] - mx)) / zsum) * scale;
    drow[tgt] -= scale;
  }

  // head and final LN
  std::vector<T> dy(n * d, T(0)), dx(n * d, T(0));
  kernels::matmul<T>(dlogits, unembedding(), dy, n, vsz, d);
  auto& head_grad = cfg_.tie_embeddings ? grad.tok_emb.data : grad.head.data;
  kernels::matmul_at_acc<T>(dlogits, cache.y, head_grad, n, vsz, d);
  layer_norm_rows_backward<T>(dy, cache.xhatf, cache.rstdf, params_.lnf_g.data, n, d, dx, grad.lnf_g.data,
                              grad.lnf_b.data);

  std::vector<T> du0(n * d), dnext(n * d), gdelta(d), dtmp(n * d), dattn(n * d), d_o(n * d);
  std::vector<T> dq(n * d), dk(n * d), dv(n * d), da(n * d), dpos(ds), dp(ds), dpr(n);
  const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

  for (std::size_t li = static_cast<std::size_t>(cfg_.n_layers); li-- > 0;) {
    const auto& lp = params_.layers[li];
    auto& lg = grad.layers[li];
    const auto& lc = cache.layers[li];
    const ExpertBank<T> bk = bank(static_cast<int>(li));

    // routed sublayer: x2 = x1 + sum_j delta_j(u_j), u_{j+1} = u_j + delta_j
    std::fill(dnext.begin(), dnext.end(), T(0));
    for (std::size_t j = cfg_.hops; j-- > 0;) {
      const auto& hc = lc.hops[j];
      std::fill(dtmp.begin(), dtmp.end(), T(0));
      for (std::size_t t = 0; t < n; ++t) {
        const T* ut = hc.u.data() + t * d;
        T* dut = dtmp.data() + t * d;
        for (std::size_t i = 0; i < d; ++i) gdelta[i] = dx[t * d + i] + dnext[t * d + i];
        std::vector<T> dw(kk);
        for (std::size_t s = 0; s < kk; ++s) {
          const int e = hc.ids[t * kk + s];
          const T we = hc.w[t * kk + s];
          const T ze = hc.z[t * kk + s];
          const T ge = silu(ze);
          const auto up = bk.up(e);
          const T up_dot = dot<T>(up, std::span<const T>(gdelta));
          T* dup = lg.w_up.data.data() + static_cast<std::size_t>(e) * d;
          for (std::size_t i = 0; i < d; ++i) dup[i] += we * ge * gdelta[i];
          dw[s] = ge * up_dot;
          const T dz = we * up_dot * silu_grad(ze);
          T* ddown = lg.w_down.data.data() + static_cast<std::size_t>(e) * d;
          const auto down = bk.down(e);
          for (std::size_t i = 0; i < d; ++i) {
            ddown[i] += dz * ut[i];
            dut[i] += dz * down[i];
          }
        }
        // softmax over the selected scores
        T wdw = 0;
        for (std::size_t s = 0; s < kk; ++s) wdw += hc.w[t * kk + s] * dw[s];
        if (cfg_.router == RouterMode::Cosine) {
          const T tau = static_cast<T>(cfg_.tau);
          const T* pos = hc.pos.data() + t * ds;
          std::fill(dpos.begin(), dpos.end(), T(0));
          for (std::size_t s = 0; s < kk; ++s) {
            const int e = hc.ids[t * kk + s];
            const T dsim = tau * hc.w[t * kk + s] * (dw[s] - wdw);
            const T cn = lc.cnorm[static_cast<std::size_t>(e)];
            const auto c = bk.centroid(e);
            T chat_dot = 0;
            for (std::size_t i = 0; i < ds; ++i) {
              dpos[i] += dsim * c[i] / cn;
              chat_dot += (c[i] / cn) * pos[i];
            }
            T* dc = lg.centroids.data.data() + static_cast<std::size_t>(e) * ds;
            // d/dc of pos . c/|c| = (pos - chat (chat . pos)) / |c|
            for (std::size_t i = 0; i < ds; ++i) dc[i] += dsim * (pos[i] - (c[i] / cn) * chat_dot) / cn;
          }
          T pd = 0;
          for (std::size_t i = 0; i < ds; ++i) pd += pos[i] * dpos[i];
          const T pn = hc.pnorm[t];
          for (std::size_t i = 0; i < ds; ++i) dp[i] = (dpos[i] - pos[i] * pd) / pn;
          // raw = u . proj_in  (proj_in is [d x ds])
          for (std::size_t i = 0; i < d; ++i) {
            T* gp = lg.proj_in.data.data() + i * ds;
            const T* pw = lp.proj_in.data.data() + i * ds;
            T acc = 0;
            for (std::size_t s2 = 0; s2 < ds; ++s2) {
              gp[s2] += ut[i] * dp[s2];
              acc += pw[s2] * dp[s2];
            }
            dut[i] += acc;
          }
        } else {
          const auto m = static_cast<std::size_t>(cfg_.n_experts);
          for (std::size_t s = 0; s < kk; ++s) {
            const auto e = static_cast<std::size_t>(hc.ids[t * kk + s]);
            const T dlog = hc.w[t * kk + s] * (dw[s] - wdw);
            for (std::size_t i = 0; i < d; ++i) {
              lg.router.data[i * m + e] += ut[i] * dlog;
              dut[i] += lp.router.data[i * m + e] * dlog;
            }
          }
        }
      }
      // u_j feeds hop j and (identity) the later state
      for (std::size_t i = 0; i < n * d; ++i) dnext[i] += dtmp[i];
    }
    // dnext now holds dL/du0
    layer_norm_rows_backward<T>(dnext, lc.xhat2, lc.rstd2, lp.ln2_g.data, n, d, dx, lg.ln2_g.data, lg.ln2_b.data);

    // attention sublayer: x1 = x_in + o . Wo
    kernels::matmul_at_acc<T>(lc.o, dx, lg.wo.data, n, d, d);
    kernels::matmul_bt<T>(dx, lp.wo.data, d_o, n, d, d);
    std::fill(dq.begin(), dq.end(), T(0));
    std::fill(dk.begin(), dk.end(), T(0));
    std::fill(dv.begin(), dv.end(), T(0));
    for (std::size_t hd = 0; hd < nh; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t t = 0; t < n; ++t) {
        const T* pr = lc.probs.data() + (hd * n + t) * n;
        const T* dot_row = d_o.data() + t * d + off;
        T pdp = 0;
        for (std::size_t s = 0; s <= t; ++s) {
          T acc = 0;
          for (std::size_t i = 0; i < dh; ++i) {
            acc += dot_row[i] * lc.v[s * d + off + i];
            dv[s * d + off + i] += pr[s] * dot_row[i];
          }
          dpr[s] = acc;
          pdp += pr[s] * acc;
        }
        for (std::size_t s = 0; s <= t; ++s) {
          const T dsc = pr[s] * (dpr[s] - pdp) * att_scale;
          for (std::size_t i = 0; i < dh; ++i) {
            dq[t * d + off + i] += dsc * lc.k[s * d + off + i];
            dk[s * d + off + i] += dsc * lc.q[t * d + off + i];
          }
        }
      }
    }
    kernels::matmul_at_acc<T>(lc.a, dq, lg.wq.data, n, d, d);
    kernels::matmul_at_acc<T>(lc.a, dk, lg.wk.data, n, d, d);
    kernels::matmul_at_acc<T>(lc.a, dv, lg.wv.data, n, d, d);
    kernels::matmul_bt<T>(dq, lp.wq.data, da, n, d, d);
    kernels::matmul_bt<T>(dk, lp.wk.data, da, n, d, d, true);
    kernels::matmul_bt<T>(dv, lp.wv.data, da, n, d, d, true);
    layer_norm_rows_backward<T>(da, lc.xhat1, lc.rstd1, lp.ln1_g.data, n, d, dx, lg.ln1_g.data, lg.ln1_b.data);
  }

  for (std::size_t t = 0; t < n; ++t) {
    T* te = grad.tok_emb.data.data() + static_cast<std::size_t>(inputs[t]) * d;
    T* pe = grad.pos_emb.data.data() + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      te[i] += dx[t * d + i];
      pe[i] += dx[t * d + i];
    }
  }
  return loss;
}

template <class T>
template <class U>
BasicModel<U> BasicModel<T>::cast() const {
  ModelParams<U> p = make_params<U>(cfg_);
  const auto src = params_.tensors();
  const auto dst = p.tensors();
  for (std::size_t i = 0; i < src.size(); ++i)
    for (std::size_t j = 0; j < src[i]->data.size(); ++j) dst[i]->data[j] = static_cast<U>(src[i]->data[j]);
  return BasicModel<U>(cfg_, std::move(p));
}

#define STMOE_MODEL_INSTANTIATE(T)                                                                             \
  template struct ModelParams<T>;                                                                              \
  template ModelParams<T> make_params<T>(const ModelConfig&);                                                  \
  template std::vector<T> compute_position<T>(std::span<const T>, const ExpertBank<T>&);                       \
  template std::vector<T> apply_steering<T>(std::span<const T>, std::span<const T>, double);                   \
  template HopRecord select_experts<T>(std::span<const T>, const ExpertBank<T>&, const ModelConfig&,           \
                                       const RoutingControls&, int);                                           \
  template HopRecord linear_select<T>(std::span<const T>, const ExpertBank<T>&, const ModelConfig&,            \
                                      const RoutingControls&, int);                                            \
  template std::vector<T> expert_delta<T>(std::span<const T>, const HopRecord&, const ExpertBank<T>&,          \
                                          const RoutingControls&, int);                                        \
  template MoeLayerResult<T> moe_layer<T>(std::span<const T>, const ExpertBank<T>&, const ModelConfig&,        \
                                          const RoutingControls&, int);                                        \
  template class BasicModel<T>;

STMOE_MODEL_INSTANTIATE(float)
STMOE_MODEL_INSTANTIATE(double)

template BasicModel<double> BasicModel<float>::cast<double>() const;
template BasicModel<float> BasicModel<double>::cast<float>() const;
template BasicModel<float> BasicModel<float>::cast<float>() const;
template BasicModel<double> BasicModel<double>::cast<double>() const;

#undef STMOE_MODEL_INSTANTIATE

}  // namespace stmoe
