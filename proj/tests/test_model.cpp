// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "stmoe/model.hpp"

using namespace stmoe;

namespace {

using DModel = BasicModel<double>;

Vec randn(Rng& rng, std::size_t n, double s = 1.0) {
  Vec v(n);
  for (auto& x : v) x = rng.normal() * s;
  return v;
}

Vec unit(Rng& rng, std::size_t n) { return l2_normalize<double>(randn(rng, n)); }

struct OwnedBank {
  int m, d, ds;
  Vec proj_in, centroids, down, up, router;
  ExpertBank<double> view() const { return {m, d, ds, proj_in, centroids, down, up, router}; }
};

OwnedBank random_bank(Rng& rng, int m, int d, int ds) {
  OwnedBank b{m, d, ds, randn(rng, static_cast<std::size_t>(d * ds)), {}, randn(rng, static_cast<std::size_t>(m * d)),
              randn(rng, static_cast<std::size_t>(m * d)), randn(rng, static_cast<std::size_t>(d * m))};
  for (int e = 0; e < m; ++e) {
    const auto c = unit(rng, static_cast<std::size_t>(ds));
    b.centroids.insert(b.centroids.end(), c.begin(), c.end());
  }
  return b;
}

ModelConfig small_cfg(int m = 8, int k = 2, int hops = 2) {
  ModelConfig c = ModelConfig::tiny();
  c.n_experts = m;
  c.top_k = k;
  c.hops = hops;
  return c;
}

// Layer-by-layer forward written from the math with core_math primitives.
std::vector<Vec> oracle_forward(const DModel& model, const std::vector<int>& toks) {
  const auto& cfg = model.config();
  const auto& P = model.params();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model), n = toks.size();
  std::vector<Vec> x(n, Vec(d));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; ++i)
      x[t][i] = P.tok_emb.data[static_cast<std::size_t>(toks[t]) * d + i] + P.pos_emb.data[t * d + i];
  const std::size_t nh = static_cast<std::size_t>(cfg.n_heads), dh = d / nh;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lp = P.layers[static_cast<std::size_t>(l)];
    std::vector<Vec> a(n), q(n, Vec(d, 0)), k(n, Vec(d, 0)), v(n, Vec(d, 0));
    for (std::size_t t = 0; t < n; ++t) {
      a[t] = layer_norm(x[t], lp.ln1_g.data, lp.ln1_b.data);
      for (std::size_t o = 0; o < d; ++o)
        for (std::size_t i = 0; i < d; ++i) {
          q[t][o] += a[t][i] * lp.wq.data[i * d + o];
          k[t][o] += a[t][i] * lp.wk.data[i * d + o];
          v[t][o] += a[t][i] * lp.wv.data[i * d + o];
        }
    }
    for (std::size_t t = 0; t < n; ++t) {
      Vec att(d, 0);
      for (std::size_t h = 0; h < nh; ++h) {
        Vec sc(t + 1);
        for (std::size_t s = 0; s <= t; ++s) {
          double acc = 0;
          for (std::size_t i = 0; i < dh; ++i) acc += q[t][h * dh + i] * k[s][h * dh + i];
          sc[s] = acc / std::sqrt(static_cast<double>(dh));
        }
        const auto p = softmax_temp<double>(sc, 1.0);
        for (std::size_t s = 0; s <= t; ++s)
          for (std::size_t i = 0; i < dh; ++i) att[h * dh + i] += p[s] * v[s][h * dh + i];
      }
      Vec out(d, 0);
      for (std::size_t o = 0; o < d; ++o)
        for (std::size_t i = 0; i < d; ++i) out[o] += att[i] * lp.wo.data[i * d + o];
      for (std::size_t i = 0; i < d; ++i) x[t][i] += out[i];
    }
    const auto bank = model.bank(l);
    for (std::size_t t = 0; t < n; ++t) {
      const Vec u0 = layer_norm(x[t], lp.ln2_g.data, lp.ln2_b.data);
      Vec u = u0, acc(d, 0);
      for (int hop = 0; hop < cfg.hops; ++hop) {
        Vec raw(static_cast<std::size_t>(cfg.d_space), 0);
        for (std::size_t s = 0; s < raw.size(); ++s)
          for (std::size_t i = 0; i < d; ++i) raw[s] += u[i] * lp.proj_in.data[i * raw.size() + s];
        const Vec pos = l2_normalize<double>(raw);
        Vec sims(static_cast<std::size_t>(cfg.n_experts));
        for (int e = 0; e < cfg.n_experts; ++e) sims[static_cast<std::size_t>(e)] = cosine_sim<double>(pos, bank.centroid(e));
        const auto sel = oracle::topk_by_full_sort(sims, cfg.top_k, {});
        Vec ss;
        for (int e : sel) ss.push_back(sims[static_cast<std::size_t>(e)]);
        const auto w = softmax_temp<double>(ss, cfg.tau);
        for (std::size_t i = 0; i < sel.size(); ++i) {
          const auto dn = bank.down(sel[i]);
          const auto up = bank.up(sel[i]);
          double z = 0;
          for (std::size_t j = 0; j < d; ++j) z += dn[j] * u[j];
          for (std::size_t j = 0; j < d; ++j) acc[j] += w[i] * silu(z) * up[j];
        }
        for (std::size_t j = 0; j < d; ++j) u[j] = u0[j] + acc[j];
      }
      for (std::size_t j = 0; j < d; ++j) x[t][j] += acc[j];
    }
  }
  std::vector<Vec> logits(n, Vec(static_cast<std::size_t>(cfg.vocab_size), 0));
  for (std::size_t t = 0; t < n; ++t) {
    const Vec y = layer_norm(x[t], P.lnf_g.data, P.lnf_b.data);
    for (int vv = 0; vv < cfg.vocab_size; ++vv)
      for (std::size_t i = 0; i < d; ++i) logits[t][static_cast<std::size_t>(vv)] += y[i] * P.tok_emb.data[static_cast<std::size_t>(vv) * d + i];
  }
  return logits;
}

}  // namespace

TEST_CASE("compute_position") {
  Rng rng(1);
  OwnedBank b = random_bank(rng, 4, 4, 4);
  b.proj_in.assign(16, 0.0);
  for (int i = 0; i < 4; ++i) b.proj_in[static_cast<std::size_t>(i * 4 + i)] = 1.0;
  const Vec h = unit(rng, 4);
  const auto pos = compute_position<double>(h, b.view());
  for (std::size_t i = 0; i < 4; ++i) CHECK(pos[i] == doctest::Approx(h[i]).epsilon(1e-14));

  OwnedBank r = random_bank(rng, 4, 10, 3);
  const Vec h2 = randn(rng, 10);
  Vec h5 = h2;
  for (auto& x : h5) x *= 5;
  const auto p1 = compute_position<double>(h2, r.view());
  const auto p5 = compute_position<double>(h5, r.view());
  Vec raw(3, 0);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < 10; ++i) raw[s] += h2[i] * r.proj_in[i * 3 + s];
  const auto two_step = l2_normalize<double>(raw);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(p1[i] == doctest::Approx(p5[i]).epsilon(1e-12));
    CHECK(p1[i] == doctest::Approx(two_step[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(compute_position<double>(Vec(10, 0.0), r.view()), Error);
}

TEST_CASE("apply_steering geometry") {
  Rng rng(2);
  const Vec pos = unit(rng, 6);
  const Vec c = unit(rng, 6);
  CHECK(apply_steering<double>(pos, c, 0.0) == l2_normalize<double>(pos));
  // perpendicular pos, huge lambda
  Vec perp{1, 0, 0}, target{0, 1, 0};
  const auto s = apply_steering<double>(perp, target, 1000.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::fabs(s[i] - target[i]) < 0.01);
  // cos to target is monotone in lambda
  for (int trial = 0; trial < 200; ++trial) {
    const Vec p = unit(rng, 8), t = unit(rng, 8);
    double prev = -2;
    for (double lam : {0.0, 0.25, 0.5, 1.0, 2.0}) {
      const double cs = cosine_sim<double>(apply_steering<double>(p, t, lam), t);
      CHECK(cs >= prev - 1e-12);
      prev = cs;
    }
  }
  Vec neg = c;
  for (auto& x : neg) x = -x;
  CHECK_THROWS_AS(apply_steering<double>(neg, c, 1.0), Error);
}

TEST_CASE("select_experts") {
  Rng rng(3);
  const ModelConfig cfg = small_cfg(8, 4);
  OwnedBank same = random_bank(rng, 8, 16, 4);
  const Vec c0 = unit(rng, 4);
  same.centroids.clear();
  for (int e = 0; e < 8; ++e) same.centroids.insert(same.centroids.end(), c0.begin(), c0.end());
  const auto rec = select_experts<double>(unit(rng, 4), same.view(), cfg, {}, 0);
  CHECK(rec.expert_ids == std::vector<int>{0, 1, 2, 3});
  for (double w : rec.weights) CHECK(w == doctest::Approx(0.25));

  for (int trial = 0; trial < 200; ++trial) {
    const OwnedBank b = random_bank(rng, 8, 16, 4);
    const Vec pos = unit(rng, 4);
    Vec sims(8);
    for (int e = 0; e < 8; ++e) sims[static_cast<std::size_t>(e)] = cosine_sim<double>(pos, b.view().centroid(e));
    const auto expect = oracle::topk_by_full_sort(sims, 4, {});
    const auto got = select_experts<double>(pos, b.view(), cfg, {}, 0);
    CHECK(got.expert_ids == expect);
    Vec sel;
    for (int e : expect) sel.push_back(sims[static_cast<std::size_t>(e)]);
    double z = 0;
    for (double s : sel) z += std::exp(cfg.tau * (s - sel[0]));
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(got.weights[i] == doctest::Approx(std::exp(cfg.tau * (sel[i] - sel[0])) / z).epsilon(1e-12));

    RoutingControls ctl;
    ctl.suppress[0] = {expect[0]};
    const auto sup = select_experts<double>(pos, b.view(), cfg, ctl, 0);
    CHECK(std::find(sup.expert_ids.begin(), sup.expert_ids.end(), expect[0]) == sup.expert_ids.end());
  }
  RoutingControls too_many;
  too_many.suppress[0] = {0, 1, 2, 3, 4};
  CHECK_THROWS_AS(select_experts<double>(unit(rng, 4), random_bank(rng, 8, 16, 4).view(), cfg, too_many, 0), Error);
}

TEST_CASE("linear_select") {
  Rng rng(4);
  ModelConfig cfg = small_cfg(8, 3);
  cfg.router = RouterMode::Linear;
  for (int trial = 0; trial < 100; ++trial) {
    const OwnedBank b = random_bank(rng, 8, 16, 4);
    const Vec h = randn(rng, 16);
    const auto base = linear_select<double>(h, b.view(), cfg, {}, 0);
    RoutingControls zero;
    zero.linear_bias[0][2] = 0.0;
    CHECK(linear_select<double>(h, b.view(), cfg, zero, 0).expert_ids == base.expert_ids);

    RoutingControls big;
    big.linear_bias[0][5] = 1e6;
    CHECK(linear_select<double>(h, b.view(), cfg, big, 0).expert_ids[0] == 5);

    RoutingControls bias;
    Vec bvals(8);
    for (int e = 0; e < 8; ++e) {
      bvals[static_cast<std::size_t>(e)] = rng.normal();
      bias.linear_bias[0][e] = bvals[static_cast<std::size_t>(e)];
    }
    Vec logits(8, 0);
    for (std::size_t e = 0; e < 8; ++e) {
      for (std::size_t i = 0; i < 16; ++i) logits[e] += h[i] * b.router[i * 8 + e];
      logits[e] += bvals[e];
    }
    const auto expect = oracle::topk_by_full_sort(logits, 3, {});
    const auto got = linear_select<double>(h, b.view(), cfg, bias, 0);
    CHECK(got.expert_ids == expect);
    double z = 0;
    for (int e : expect) z += std::exp(logits[static_cast<std::size_t>(e)]);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(got.weights[i] == doctest::Approx(std::exp(logits[static_cast<std::size_t>(expect[i])]) / z).epsilon(1e-12));
  }
}

TEST_CASE("expert_delta") {
  Rng rng(5);
  const OwnedBank b = random_bank(rng, 8, 16, 4);
  const Vec h = randn(rng, 16);
  HopRecord rec{unit(rng, 4), {2, 6}, {0.7, 0.3}};
  RoutingControls ko;
  ko.knockout[0] = {2, 6};
  for (double x : expert_delta<double>(h, rec, b.view(), ko, 0)) CHECK(x == 0.0);

  // W_down . h = 0 gives zero output
  OwnedBank ortho = b;
  HopRecord single{unit(rng, 4), {1}, {1.0}};
  Vec hz(16, 0.0);
  hz[0] = 1.0;
  for (std::size_t i = 0; i < 16; ++i) ortho.down[16 + i] = i == 0 ? 0.0 : ortho.down[16 + i];
  for (double x : expert_delta<double>(hz, single, ortho.view(), {}, 0)) CHECK(x == 0.0);

  // term-by-term expansion
  const auto got = expert_delta<double>(h, rec, b.view(), {}, 0);
  for (std::size_t j = 0; j < 16; ++j) {
    double expect = 0;
    for (std::size_t i = 0; i < 2; ++i) {
      const int e = rec.expert_ids[i];
      double z = 0;
      for (std::size_t q = 0; q < 16; ++q) z += b.down[static_cast<std::size_t>(e) * 16 + q] * h[q];
      expect += rec.weights[i] * (z / (1 + std::exp(-z))) * b.up[static_cast<std::size_t>(e) * 16 + j];
    }
    CHECK(std::fabs(got[j] - expect) < 1e-6);
  }

  // rank-1: the contribution of one expert is parallel to its write vector,
  // or to the surgery replacement
  RoutingControls surg;
  surg.surgery[0][6] = randn(rng, 16);
  HopRecord only6{rec.pos, {6}, {1.0}};
  const auto ds = expert_delta<double>(h, only6, b.view(), surg, 0);
  const double cs = cosine_sim<double>(ds, surg.surgery[0][6]);
  CHECK(std::fabs(std::fabs(cs) - 1.0) < 1e-12);
}

TEST_CASE("moe_layer hops") {
  Rng rng(6);
  const OwnedBank b = random_bank(rng, 8, 16, 4);
  const Vec h = randn(rng, 16);
  ModelConfig one = small_cfg(8, 2, 1);
  const auto r1 = moe_layer<double>(h, b.view(), one, {}, 0);
  REQUIRE(r1.records.size() == 1);
  const auto pos = compute_position<double>(h, b.view());
  const auto rec = select_experts<double>(pos, b.view(), one, {}, 0);
  const auto delta = expert_delta<double>(h, rec, b.view(), {}, 0);
  for (std::size_t i = 0; i < 16; ++i) CHECK(r1.h_out[i] == h[i] + delta[i]);

  ModelConfig two = small_cfg(8, 2, 2);
  RoutingControls all;
  for (int e = 0; e < 8; ++e) all.knockout[0].insert(e);
  const auto rk = moe_layer<double>(h, b.view(), two, all, 0);
  CHECK(rk.records[0].pos == rk.records[1].pos);

  const auto r2 = moe_layer<double>(h, b.view(), two, {}, 0);
  const auto d0 = expert_delta<double>(h, r2.records[0], b.view(), {}, 0);
  Vec h1 = h;
  for (std::size_t i = 0; i < 16; ++i) h1[i] += d0[i];
  const auto p1 = compute_position<double>(h1, b.view());
  for (std::size_t i = 0; i < 4; ++i) CHECK(r2.records[1].pos[i] == doctest::Approx(p1[i]).epsilon(1e-12));
}

TEST_CASE("attention is causal and matches a manual computation") {
  ModelConfig cfg = ModelConfig::tiny();
  DModel m(cfg, 3);
  Rng rng(7);
  const std::size_t d = 16;
  Vec states = randn(rng, 4 * d);
  const auto base = m.attention_block(states, 0);
  Vec perturbed = states;
  for (std::size_t i = 2 * d; i < 4 * d; ++i) perturbed[i] += 1.0;
  const auto moved = m.attention_block(perturbed, 0);
  for (std::size_t i = 0; i < 2 * d; ++i) CHECK(base[i] == moved[i]);

  const auto single = m.attention_block(std::span<const double>(states.data(), d), 0);
  for (double x : single) CHECK(std::isfinite(x));

  // 3 tokens, 1 head
  ModelConfig c1 = cfg;
  c1.n_heads = 1;
  c1.d_model = 4;
  c1.d_space = 2;
  DModel m1(c1, 9);
  const Vec s3 = randn(rng, 12);
  const auto got = m1.attention_block(s3, 0);
  const auto& lp = m1.params().layers[0];
  std::vector<Vec> q(3, Vec(4, 0)), k(3, Vec(4, 0)), v(3, Vec(4, 0));
  for (std::size_t t = 0; t < 3; ++t) {
    const Vec a = layer_norm(Vec(s3.begin() + static_cast<long>(t * 4), s3.begin() + static_cast<long>(t * 4 + 4)),
                             lp.ln1_g.data, lp.ln1_b.data);
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < 4; ++i) {
        q[t][o] += a[i] * lp.wq.data[i * 4 + o];
        k[t][o] += a[i] * lp.wk.data[i * 4 + o];
        v[t][o] += a[i] * lp.wv.data[i * 4 + o];
      }
  }
  for (std::size_t t = 0; t < 3; ++t) {
    Vec sc;
    for (std::size_t s = 0; s <= t; ++s) {
      double acc = 0;
      for (std::size_t i = 0; i < 4; ++i) acc += q[t][i] * k[s][i];
      sc.push_back(acc / 2.0);
    }
    const auto p = softmax_temp<double>(sc, 1.0);
    Vec ctx(4, 0);
    for (std::size_t s = 0; s <= t; ++s)
      for (std::size_t i = 0; i < 4; ++i) ctx[i] += p[s] * v[s][i];
    for (std::size_t o = 0; o < 4; ++o) {
      double out = 0;
      for (std::size_t i = 0; i < 4; ++i) out += ctx[i] * lp.wo.data[i * 4 + o];
      CHECK(got[t * 4 + o] == doctest::Approx(out).epsilon(1e-12));
    }
  }
}

TEST_CASE("forward: determinism, selectivity and stepwise replay") {
  const ModelConfig cfg = ModelConfig::tiny();
  DModel m(cfg, 11);
  const std::vector<int> toks{3, 17, 42, 8, 8, 1};
  const auto a = m.forward(toks);
  const auto b = m.forward(toks);
  CHECK(a.logits == b.logits);

  // an expert absent from every record
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int e = 0; e < cfg.n_experts; ++e) {
      if (a.trace.uses_expert(l, e)) continue;
      RoutingControls ko;
      ko.knockout[l] = {e};
      CHECK(m.forward(toks, ko).logits == a.logits);
    }
  }

  const auto expect = oracle_forward(m, toks);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  for (std::size_t t = 0; t < toks.size(); ++t)
    for (std::size_t i = 0; i < v; ++i) CHECK(a.logits[t * v + i] == doctest::Approx(expect[t][i]).epsilon(1e-9));

  // trace shape and invariants
  REQUIRE(a.trace.hops.size() == toks.size());
  for (const auto& tok : a.trace.hops) {
    REQUIRE(tok.size() == static_cast<std::size_t>(cfg.n_layers));
    for (const auto& layer : tok) {
      REQUIRE(layer.size() == static_cast<std::size_t>(cfg.hops));
      for (const auto& rec : layer) {
        CHECK(std::set<int>(rec.expert_ids.begin(), rec.expert_ids.end()).size() == static_cast<std::size_t>(cfg.top_k));
        double s = 0;
        for (double w : rec.weights) s += w;
        CHECK(std::fabs(s - 1.0) < 1e-5);
        CHECK(std::fabs(norm2<double>(rec.pos) - 1.0) < 1e-6);
      }
    }
  }

  CHECK_THROWS_AS((void)m.forward(std::vector<int>{1, 99}), Error);
  CHECK_THROWS_AS((void)m.forward(std::vector<int>(20, 1)), Error);
}

TEST_CASE("nll_loss") {
  const int v = 7;
  const Vec uniform(3 * v, 0.25);
  CHECK(nll_loss(uniform, std::vector<int>{0, 3, 6}, v) == doctest::Approx(std::log(7.0)).epsilon(1e-14));
  Vec sharp(2 * v, 0.0);
  sharp[2] = 60;
  sharp[v + 5] = 60;
  CHECK(nll_loss(sharp, std::vector<int>{2, 5}, v) < 1e-20 + 1e-24 * 0 + 1e-12);
  // three tokens by hand
  const Vec l3{1, 2, 0, 0, 0, 3, -1, 0.5, 0.5};
  const double e1 = std::log(std::exp(1) + std::exp(2) + 1) - 2;
  const double e2 = std::log(2 + std::exp(3)) - 0;
  const double e3 = std::log(std::exp(-1) + 2 * std::exp(0.5)) - 0.5;
  CHECK(nll_loss(l3, std::vector<int>{1, 0, 2}, 3) == doctest::Approx((e1 + e2 + e3) / 3).epsilon(1e-14));
  CHECK_THROWS_AS(nll_loss(l3, std::vector<int>{1, 0}, 3), Error);
}
