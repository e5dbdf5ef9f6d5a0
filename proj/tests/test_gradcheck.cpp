// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "stmoe/model.hpp"

using namespace stmoe;

namespace {

const std::vector<int> kInputs{3, 17, 42, 8, 8, 1, 29};
const std::vector<int> kTargets{17, 42, 8, 8, 1, 29, 5};

// Central differences on every entry of every tensor, in double.
std::vector<Vec> numeric_grad(BasicModel<double>& m) {
  std::vector<Vec> out;
  for (auto* t : m.params().tensors()) {
    Vec g(t->data.size());
    for (std::size_t i = 0; i < t->data.size(); ++i) {
      const double orig = t->data[i];
      const double h = 1e-6;
      t->data[i] = orig + h;
      const double up = m.mean_nll(kInputs, kTargets);
      t->data[i] = orig - h;
      const double dn = m.mean_nll(kInputs, kTargets);
      t->data[i] = orig;
      g[i] = (up - dn) / (2 * h) * static_cast<double>(kInputs.size());
    }
    out.push_back(std::move(g));
  }
  return out;
}

template <class T>
double rel_err(const std::vector<T>& a, const Vec& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double x = static_cast<double>(a[i]);
    diff += (x - b[i]) * (x - b[i]);
    na += x * x;
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
  return std::sqrt(diff) / denom;
}

void check_mode(RouterMode mode) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.router = mode;
  BasicModel<double> md(cfg, 21);
  const auto fd = numeric_grad(md);

  ModelParams<double> gd = make_params<double>(cfg);
  gd.zero();
  const double loss = md.loss_and_grad(kInputs, kTargets, gd, 1.0);
  CHECK(loss == doctest::Approx(md.mean_nll(kInputs, kTargets) * static_cast<double>(kInputs.size())).epsilon(1e-12));
  const auto td = gd.tensors();
  for (std::size_t i = 0; i < td.size(); ++i) {
    INFO(td[i]->name);
    CHECK(rel_err(td[i]->data, fd[i]) < 1e-5);
  }

  const BasicModel<float> mf = md.cast<float>();
  ModelParams<float> gf = make_params<float>(cfg);
  gf.zero();
  mf.loss_and_grad(kInputs, kTargets, gf, 1.0);
  const auto tf = gf.tensors();
  for (std::size_t i = 0; i < tf.size(); ++i) {
    INFO(tf[i]->name);
    CHECK(rel_err(tf[i]->data, fd[i]) < 1e-3);
  }
}

}  // namespace

TEST_CASE("analytic gradient matches finite differences, cosine router") { check_mode(RouterMode::Cosine); }

TEST_CASE("analytic gradient matches finite differences, linear router") { check_mode(RouterMode::Linear); }

TEST_CASE("gradient scale is linear and accumulates") {
  const ModelConfig cfg = ModelConfig::tiny();
  BasicModel<double> m(cfg, 4);
  ModelParams<double> g0 = make_params<double>(cfg), g1 = make_params<double>(cfg), g2 = make_params<double>(cfg);
  g0.zero();
  g1.zero();
  g2.zero();
  m.loss_and_grad(kInputs, kTargets, g0, 0.0);
  m.loss_and_grad(kInputs, kTargets, g1, 1.0);
  m.loss_and_grad(kInputs, kTargets, g2, 1.0);
  m.loss_and_grad(kInputs, kTargets, g2, 1.0);
  const auto t0 = g0.tensors(), t1 = g1.tensors(), t2 = g2.tensors();
  for (std::size_t i = 0; i < t0.size(); ++i)
    for (std::size_t j = 0; j < t0[i]->data.size(); ++j) {
      CHECK(t0[i]->data[j] == 0.0);
      CHECK(t2[i]->data[j] == doctest::Approx(2 * t1[i]->data[j]).epsilon(1e-12));
    }
}
