// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "stmoe/model.hpp"

namespace stmoe {

struct TrainConfig {
  int batch_size = 8;
  int seq_len = 64;
  double lr = 3e-3;
  double min_lr_ratio = 0.1;
  int warmup_steps = 100;
  int total_steps = 2000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  int eval_interval = 250;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Example {
  std::vector<int> input;
  std::vector<int> target;  // target[t] = input[t + 1] in the source stream
};

using Batch = std::vector<Example>;

// Non-overlapping windows of at most seq_len tokens inside each document.
// The final window of a document may be shorter.
std::vector<Example> make_windows(const std::vector<std::vector<int>>& docs, int seq_len);

// One epoch of windows in a seeded order, grouped into batches.
std::vector<Batch> make_batches(const std::vector<std::vector<int>>& docs, const TrainConfig& cfg, std::uint64_t seed);

// Endless batch stream; epoch e is shuffled with derive_seed(seed, "epoch<e>").
class BatchStream {
 public:
  BatchStream(std::vector<std::vector<int>> docs, TrainConfig cfg, std::uint64_t seed);
  const Batch& next();
  [[nodiscard]] int epoch() const { return epoch_; }

 private:
  std::vector<std::vector<int>> docs_;
  TrainConfig cfg_;
  std::uint64_t seed_;
  std::vector<Batch> batches_;
  std::size_t pos_ = 0;
  int epoch_ = -1;
};

struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::int64_t step = 0;

  static AdamState for_model(const Model& model);
};

double lr_at(const TrainConfig& cfg, std::int64_t step);

struct StepResult {
  double loss = 0.0;  // mean token NLL of the batch
  double lr = 0.0;
  double grad_norm = 0.0;
};

// One AdamW update; renormalizes centroids afterwards. Throws NonFiniteLoss.
StepResult train_step(Model& model, std::span<const Example> batch, AdamState& state, const TrainConfig& cfg);

// exp(mean NLL) over all windows of the held-out documents.
double evaluate_ppl(const Model& model, const std::vector<std::vector<int>>& docs, int seq_len);

// Perplexity of an add-one smoothed unigram model of the training docs on the
// held-out next-token targets.
double unigram_ppl(const std::vector<std::vector<int>>& train, const std::vector<std::vector<int>>& valid, int vocab_size);

struct MetricsRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double ppl = -1.0;  // negative when not evaluated at this step
};

// Append-only CSV: step,loss,lr,ppl
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path);
  void append(const MetricsRow& row);

 private:
  std::filesystem::path path_;
};

struct TrainResult {
  std::vector<MetricsRow> rows;  // one per step
  double final_ppl = 0.0;
};

// Full run: total_steps updates from a seeded stream, evaluating every
// eval_interval steps and at the end.
TrainResult train(Model& model, const std::vector<std::vector<int>>& train_docs,
                  const std::vector<std::vector<int>>& valid_docs, const TrainConfig& cfg,
                  const std::function<void(const MetricsRow&)>& on_row = {});

// Moving average over `window` steps (shorter at the start).
Vec smooth(std::span<const double> values, int window);

}  // namespace stmoe
