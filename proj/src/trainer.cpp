// SPDX-License-Identifier: Apache-2.0
#include "stmoe/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace stmoe {

void TrainConfig::validate() const {
  if (batch_size <= 0 || seq_len <= 0 || total_steps <= 0 || eval_interval <= 0)
    throw Error(Errc::Config, "train: batch_size, seq_len, total_steps and eval_interval must be positive");
  if (!(lr >= 0.0) || warmup_steps < 0) throw Error(Errc::Config, "train: lr and warmup_steps must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0))
    throw Error(Errc::Config, "train: invalid Adam hyperparameters");
  if (!(weight_decay >= 0.0) || !(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0))
    throw Error(Errc::Config, "train: invalid weight_decay or min_lr_ratio");
}

std::vector<Example> make_windows(const std::vector<std::vector<int>>& docs, int seq_len) {
  std::size_t total = 0;
  for (const auto& d : docs) total += d.size();
  if (seq_len <= 0) throw Error(Errc::Config, "seq_len must be positive");
  if (total < static_cast<std::size_t>(seq_len) + 1)
    throw Error(Errc::EmptyInput, "corpus shorter than one sequence");
  std::vector<Example> out;
  const auto L = static_cast<std::size_t>(seq_len);
  for (const auto& d : docs) {
    if (d.size() < 2) continue;
    for (std::size_t s = 0; s + 1 < d.size(); s += L) {
      const std::size_t len = std::min(L, d.size() - 1 - s);
      Example ex;
      ex.input.assign(d.begin() + static_cast<long>(s), d.begin() + static_cast<long>(s + len));
      ex.target.assign(d.begin() + static_cast<long>(s + 1), d.begin() + static_cast<long>(s + len + 1));
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<Batch> make_batches(const std::vector<std::vector<int>>& docs, const TrainConfig& cfg, std::uint64_t seed) {
  auto windows = make_windows(docs, cfg.seq_len);
  Rng rng(seed);
  rng.shuffle(windows.begin(), windows.end());
  std::vector<Batch> out;
  for (std::size_t i = 0; i < windows.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
    const auto end = std::min(windows.size(), i + static_cast<std::size_t>(cfg.batch_size));
    out.emplace_back(std::make_move_iterator(windows.begin() + static_cast<long>(i)),
                     std::make_move_iterator(windows.begin() + static_cast<long>(end)));
  }
  return out;
}

BatchStream::BatchStream(std::vector<std::vector<int>> docs, TrainConfig cfg, std::uint64_t seed)
    : docs_(std::move(docs)), cfg_(cfg), seed_(seed) {
  (void)make_windows(docs_, cfg_.seq_len);
}

const Batch& BatchStream::next() {
  if (pos_ >= batches_.size()) {
    ++epoch_;
    batches_ = make_batches(docs_, cfg_, derive_seed(seed_, "epoch" + std::to_string(epoch_)));
    pos_ = 0;
  }
  return batches_[pos_++];
}

AdamState AdamState::for_model(const Model& model) {
  AdamState s;
  for (const auto* t : model.params().tensors()) {
    s.m.emplace_back(t->data.size(), 0.0f);
    s.v.emplace_back(t->data.size(), 0.0f);
  }
  return s;
}

double lr_at(const TrainConfig& cfg, std::int64_t step) {
  if (step < cfg.warmup_steps) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  const double span = std::max<double>(1.0, cfg.total_steps - cfg.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

namespace {

bool decays(const std::string& name) {
  return name.find("ln") == std::string::npos && name.find("centroids") == std::string::npos &&
         name.find("emb") == std::string::npos;
}

}  // namespace

StepResult train_step(Model& model, std::span<const Example> batch, AdamState& state, const TrainConfig& cfg) {
  if (batch.empty()) throw Error(Errc::EmptyInput, "train_step: empty batch");
  std::size_t n_tok = 0;
  for (const auto& ex : batch) n_tok += ex.input.size();
  const double scale = 1.0 / static_cast<double>(n_tok);

  ModelParams<float> grad = make_params<float>(model.config());
  grad.zero();
  double loss = 0.0;
  for (const auto& ex : batch) loss += model.loss_and_grad(ex.input, ex.target, grad, scale);
  loss *= scale;
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "loss " << loss << " at step " << state.step;
    throw Error(Errc::NonFiniteLoss, msg.str());
  }

  auto gt = grad.tensors();
  double sq = 0.0;
  for (const auto* t : gt)
    for (float g : t->data) sq += static_cast<double>(g) * g;
  const double gnorm = std::sqrt(sq);
  if (!std::isfinite(gnorm)) throw Error(Errc::NonFiniteLoss, "gradient norm is not finite at step " + std::to_string(state.step));
  const double clip = (cfg.grad_clip > 0 && gnorm > cfg.grad_clip) ? cfg.grad_clip / gnorm : 1.0;

  auto pt = model.params().tensors();
  if (state.m.size() != pt.size()) throw Error(Errc::ShapeMismatch, "optimizer state does not match model");
  const double lr = lr_at(cfg, state.step);
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  for (std::size_t i = 0; i < pt.size(); ++i) {
    auto& p = pt[i]->data;
    const auto& g = gt[i]->data;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const float wd = decays(pt[i]->name) ? static_cast<float>(lr * cfg.weight_decay) : 0.0f;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const float gj = static_cast<float>(g[j] * clip);
      m[j] = b1 * m[j] + (1.0f - b1) * gj;
      v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
      const double mh = m[j] / bc1, vh = v[j] / bc2;
      p[j] = static_cast<float>(p[j] - lr * mh / (std::sqrt(vh) + cfg.eps)) - wd * p[j];
    }
  }
  if (lr > 0.0) model.renormalize_centroids();
  return {loss, lr, gnorm};
}

double evaluate_ppl(const Model& model, const std::vector<std::vector<int>>& docs, int seq_len) {
  std::vector<Example> windows;
  try {
    windows = make_windows(docs, seq_len);
  } catch (const Error&) {
    throw Error(Errc::EmptyInput, "evaluate_ppl: empty eval set");
  }
  if (windows.empty()) throw Error(Errc::EmptyInput, "evaluate_ppl: empty eval set");
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& w : windows) {
    total += model.mean_nll(w.input, w.target) * static_cast<double>(w.input.size());
    n += w.input.size();
  }
  return std::exp(total / static_cast<double>(n));
}

double unigram_ppl(const std::vector<std::vector<int>>& train, const std::vector<std::vector<int>>& valid,
                   int vocab_size) {
  Vec counts(static_cast<std::size_t>(vocab_size), 1.0);  // add-one smoothing
  double total = vocab_size;
  for (const auto& d : train)
    for (int t : d) {
      counts[static_cast<std::size_t>(t)] += 1.0;
      total += 1.0;
    }
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& d : valid)
    for (std::size_t i = 1; i < d.size(); ++i) {
      nll -= std::log(counts[static_cast<std::size_t>(d[i])] / total);
      ++n;
    }
  if (n == 0) throw Error(Errc::EmptyInput, "unigram_ppl: empty eval set");
  return std::exp(nll / static_cast<double>(n));
}

MetricsLog::MetricsLog(const std::filesystem::path& path) : path_(path) {
  std::ofstream out(path_, std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot write " + path_.string());
  out << "step,loss,lr,ppl\n";
}

void MetricsLog::append(const MetricsRow& row) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw Error(Errc::Io, "cannot append to " + path_.string());
  out << row.step << ',' << std::setprecision(9) << row.loss << ',' << row.lr << ',';
  if (row.ppl >= 0) out << row.ppl;
  out << '\n';
}

TrainResult train(Model& model, const std::vector<std::vector<int>>& train_docs,
                  const std::vector<std::vector<int>>& valid_docs, const TrainConfig& cfg,
                  const std::function<void(const MetricsRow&)>& on_row) {
  cfg.validate();
  BatchStream stream(train_docs, cfg, derive_seed(cfg.seed, "batches"));
  AdamState state = AdamState::for_model(model);
  TrainResult res;
  for (int s = 0; s < cfg.total_steps; ++s) {
    const auto& batch = stream.next();
    const auto r = train_step(model, batch, state, cfg);
    MetricsRow row{state.step, r.loss, r.lr, -1.0};
    if (state.step % cfg.eval_interval == 0 || s + 1 == cfg.total_steps)
      row.ppl = evaluate_ppl(model, valid_docs, cfg.seq_len);
    res.rows.push_back(row);
    if (on_row) on_row(row);
  }
  res.final_ppl = res.rows.back().ppl;
  return res;
}

Vec smooth(std::span<const double> values, int window) {
  Vec out(values.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= static_cast<std::size_t>(window)) acc -= values[i - static_cast<std::size_t>(window)];
    out[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window)));
  }
  return out;
}

}  // namespace stmoe
