// SPDX-License-Identifier: Apache-2.0
//
// Inference-time interventions as non-destructive views (a model reference
// plus routing controls) and the harness measuring their effect on the
// next-token distribution.
#pragma once

#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "stmoe/model.hpp"

namespace stmoe {

class ModelView {
 public:
  ModelView(const Model& model) : model_(&model) {}  // NOLINT: implicit by design
  ModelView(const Model& model, RoutingControls controls) : model_(&model), controls_(std::move(controls)) {}

  [[nodiscard]] const Model& model() const { return *model_; }
  [[nodiscard]] const RoutingControls& controls() const { return controls_; }
  RoutingControls& controls() { return controls_; }

  [[nodiscard]] ForwardResult<float> forward(std::span<const int> tokens, TraceLevel trace = TraceLevel::Routing) const {
    return model_->forward(tokens, controls_, trace);
  }

 private:
  const Model* model_;
  RoutingControls controls_;
};

ModelView apply_knockout(ModelView view, int layer, int expert);
ModelView apply_suppression(ModelView view, int layer, const std::set<int>& experts);
ModelView apply_surgery(ModelView view, int layer, int expert, const Vec& replacement);
// Cosine router: steer positions toward the expert's centroid. Linear
// router: add lambda to the expert's routing logit.
ModelView apply_steer(ModelView view, int layer, int expert, double lambda);

// The n experts nearest to `expert` in routing space (centroid cosine),
// starting with `expert` itself; ties to the lower index.
std::set<int> suppression_cluster(const Model& model, int layer, int expert, int n);

// Fraction of routing records in `layer` that include `expert`.
double selection_frequency(const ModelView& view, int layer, int expert, const std::vector<std::vector<int>>& prompts);

double category_mass(std::span<const double> dist, const std::vector<int>& category);

struct InterventionSpec {
  enum class Variant { Knockout, Suppress, Steer, Surgery, Compose };
  Variant variant = Variant::Steer;
  int layer = 0;
  std::vector<int> experts;
  int cluster_size = 0;          // suppress: expand experts[0] to its nearest neighbours
  double lambda = 0.0;           // steer
  std::vector<double> lambdas;   // steer: dose-response grid when non-empty
  Vec replacement;               // surgery
  std::optional<std::pair<int, int>> replacement_from;  // surgery: copy another expert's W_up
  std::vector<InterventionSpec> parts;                  // compose: exactly two steer specs
  std::string category_b;                               // compose: second category name
  bool last_position_only = false;

  void validate(const ModelConfig& cfg, const std::string& path = "spec") const;
};

std::string variant_name(InterventionSpec::Variant v);
// Errors name the offending field, e.g. "spec.parts[1].lambda".
InterventionSpec parse_spec(const nlohmann::json& j, const std::string& path = "spec");

// Applies a non-compose spec (steer uses `lambda`).
ModelView apply_spec(ModelView view, const InterventionSpec& spec);

struct PromptRow {
  int prompt_id = 0;
  double base_mass = 0.0;
  double mod_mass = 0.0;
  double delta_pct = 0.0;
  bool flagged = false;  // base mass below 1e-8, delta_pct undefined
  double kl = 0.0;       // KL(base || modified)
  double nll_delta = 0.0;
};

struct ReportAggregate {
  double median_delta_pct = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  double percent_positive = 0.0;
  double mean_kl = 0.0;
  int n_flagged = 0;
};

struct ExperimentReport {
  std::vector<PromptRow> rows;
  ReportAggregate aggregate;
};

ReportAggregate aggregate_rows(const std::vector<PromptRow>& rows);

// Baseline is the view's model without controls.
ExperimentReport run_experiment(const ModelView& modified, const std::vector<std::vector<int>>& prompts,
                                const std::vector<int>& category);

struct DosePoint {
  double lambda = 0.0;
  double mean_centroid_cos = 0.0;  // cos(steered pos, target centroid), averaged over tokens at hop 0
  double selection_frequency = 0.0;
  ExperimentReport report;
};

std::vector<DosePoint> dose_response(const Model& model, int layer, int expert, const std::vector<double>& lambdas,
                                     const std::vector<std::vector<int>>& prompts, const std::vector<int>& category);

struct CompositionReport {
  bool same_layer = false;
  // [condition][category]: condition 0 none, 1 A, 2 B, 3 A+B; category 0 = A's, 1 = B's
  std::vector<std::vector<ExperimentReport>> reports;
  double solo_a = 0.0, solo_b = 0.0;        // median dP% of A on catA, B on catB
  double composed_a = 0.0, composed_b = 0.0;
  double crosstalk_ab = 0.0, crosstalk_ba = 0.0;  // A on catB, B on catA
  double interference_a = 0.0, interference_b = 0.0;

  [[nodiscard]] static const char* condition_name(int c);
};

CompositionReport compose(const Model& model, const InterventionSpec& a, const InterventionSpec& b,
                          const std::vector<std::vector<int>>& prompts, const std::vector<int>& cat_a,
                          const std::vector<int>& cat_b);

struct RwRow {
  int layer = 0;
  int expert = 0;
  double cos = 0.0;
  bool zero_norm = false;
};

struct RwReport {
  std::vector<RwRow> rows;
  double mean = 0.0;
  double frac_below_02 = 0.0;  // |cos| < 0.2
  double frac_above_08 = 0.0;  // |cos| > 0.8
  int n_zero_norm = 0;
  std::vector<int> histogram;  // 20 bins over [-1, 1]
};

RwReport read_write_cosine(const Model& model);

std::string report_csv(const ExperimentReport& r, const std::vector<std::string>& prompts = {});
nlohmann::json aggregate_json(const ReportAggregate& a);
nlohmann::json composition_json(const CompositionReport& c);
std::string rw_csv(const RwReport& r);
nlohmann::json rw_json(const RwReport& r);

}  // namespace stmoe
