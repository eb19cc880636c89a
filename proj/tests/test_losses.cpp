// Copyright (c) 2026 The casv Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <numbers>

#include "casv/losses.hpp"
#include "casv/rng.hpp"
#include "doctest.h"
#include "grad_check.hpp"

using namespace casv;
using nn::Tensor;
using casv::testing::random_tensor;

namespace {

// Plain softmax cross-entropy of one row.
double ce_row(const std::vector<double>& logits, int y) {
  double z = 0.0;
  for (double l : logits) z += std::exp(l);
  return std::log(z) - logits[static_cast<size_t>(y)];
}

Tensor unit2(double angle) {
  Tensor t({1, 2});
  t.values() = {std::cos(angle), std::sin(angle)};
  return t;
}

double cosine(const Tensor& a, int i, const Tensor& b, int j) {
  double d = 0.0, na = 0.0, nb = 0.0;
  for (int k = 0; k < a.dim(1); ++k) {
    d += a.at(i, k) * b.at(j, k);
    na += a.at(i, k) * a.at(i, k);
    nb += b.at(j, k) * b.at(j, k);
  }
  return d / std::sqrt(na * nb);
}

// Per-element comparison |a - n| <= tol * max(|a|, |n|) + floor.
void check_close(const std::vector<double>& a, const std::vector<double>& n, double tol,
                 double floor = 1e-7) {
  REQUIRE(a.size() == n.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(std::abs(a[i] - n[i]) <= tol * std::max(std::abs(a[i]), std::abs(n[i])) + floor);
  }
}

}  // namespace

TEST_CASE("arcface without margin is softmax over cosines") {
  ArcFaceConfig cfg{1.0, 0.0};
  Tensor w({2, 2});
  w.values() = {1.0, 0.0, std::cos(1.1), std::sin(1.1)};
  const Tensor e = unit2(0.0);
  const auto r = arcface_loss(e, {0}, w, cfg);
  CHECK(r.loss == doctest::Approx(ce_row({1.0, std::cos(1.1)}, 0)).epsilon(1e-12));

  // Random batch against an independent normalised-softmax computation.
  ArcFaceConfig s64{64.0, 0.0};
  const Tensor emb = random_tensor({6, 5}, 1);
  const Tensor cw = random_tensor({4, 5}, 2);
  const std::vector<int> y{0, 3, 1, 2, 2, 0};
  const auto r2 = arcface_loss(emb, y, cw, s64);
  double want = 0.0;
  for (int i = 0; i < 6; ++i) {
    std::vector<double> row;
    for (int j = 0; j < 4; ++j) {
      row.push_back(64.0 * cosine(emb, i, cw, j));
      CHECK(std::abs(r2.logits.at(i, j) - row.back()) < 1e-6);
    }
    want += ce_row(row, y[static_cast<size_t>(i)]);
  }
  CHECK(std::abs(r2.loss - want / 6.0) < 1e-6);
}

TEST_CASE("arcface target logit closed forms") {
  ArcFaceConfig cfg;  // s = 64, m = 0.2
  Tensor w({2, 2});
  w.values() = {1.0, 0.0, 0.0, 1.0};
  std::vector<int> y{0};

  // Embedding exactly on the target weight.
  Tensor logits = arcface_forward(unit2(0.0), w, &y, cfg);
  CHECK(logits.at(0, 0) == doctest::Approx(64.0 * std::cos(0.2)).epsilon(1e-12));

  for (double deg : {60.0, 30.0, 100.0, 150.0}) {
    const double theta = deg * std::numbers::pi / 180.0;
    logits = arcface_forward(unit2(theta), w, &y, cfg);
    CHECK(logits.at(0, 0) == doctest::Approx(64.0 * std::cos(theta + 0.2)).epsilon(1e-9));
    CHECK(logits.at(0, 1) == doctest::Approx(64.0 * std::sin(theta)).epsilon(1e-9));
  }
  // Past pi - m the surrogate cos(theta) - m sin(m) is used.
  const double theta = std::numbers::pi - 0.1;
  logits = arcface_forward(unit2(theta), w, &y, cfg);
  CHECK(logits.at(0, 0) ==
        doctest::Approx(64.0 * (std::cos(theta) - 0.2 * std::sin(0.2))).epsilon(1e-9));
  // Inference: no labels, no margin.
  logits = arcface_forward(unit2(1.0), w, nullptr, cfg);
  CHECK(logits.at(0, 0) == doctest::Approx(64.0 * std::cos(1.0)).epsilon(1e-12));
}

TEST_CASE("arcface loss is non-decreasing in the margin") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor emb = random_tensor({8, 6}, 100 + seed);
    const Tensor cw = random_tensor({5, 6}, 200 + seed);
    std::vector<int> y;
    Rng rng(seed);
    for (int i = 0; i < 8; ++i) y.push_back(static_cast<int>(rng.uniform_index(5)));
    double prev = -1.0;
    for (double m : {0.0, 0.1, 0.2, 0.3}) {
      const double l = arcface_loss(emb, y, cw, ArcFaceConfig{64.0, m}).loss;
      CHECK(l >= prev);
      prev = l;
    }
  }
}

TEST_CASE("arcface gradients match central differences") {
  for (ArcFaceConfig cfg : {ArcFaceConfig{64.0, 0.2}, ArcFaceConfig{4.0, 0.5}}) {
    // The loss is scale-invariant in both arguments; at norm ~40 the third
    // derivative is small enough for a 1e-3 step.
    Tensor emb = random_tensor({3, 4}, 7, 20.0);
    Tensor cw = random_tensor({5, 4}, 8, 20.0);
    const std::vector<int> y{1, 4, 0};
    const auto r = arcface_loss(emb, y, cw, cfg);
    const double h = 1e-3;
    std::vector<double> num, ana;
    for (size_t i = 0; i < emb.size(); ++i) {
      const double o = emb[i];
      emb[i] = o + h;
      const double lp = arcface_loss(emb, y, cw, cfg).loss;
      emb[i] = o - h;
      const double lm = arcface_loss(emb, y, cw, cfg).loss;
      emb[i] = o;
      num.push_back((lp - lm) / (2 * h));
      ana.push_back(r.d_emb[i]);
    }
    for (size_t i = 0; i < cw.size(); ++i) {
      const double o = cw[i];
      cw[i] = o + h;
      const double lp = arcface_loss(emb, y, cw, cfg).loss;
      cw[i] = o - h;
      const double lm = arcface_loss(emb, y, cw, cfg).loss;
      cw[i] = o;
      num.push_back((lp - lm) / (2 * h));
      ana.push_back(r.d_weight[i]);
    }
    check_close(ana, num, 1e-4);
  }
}

TEST_CASE("arcface rejects bad labels and configs") {
  const Tensor emb = random_tensor({2, 3}, 1);
  const Tensor cw = random_tensor({4, 3}, 2);
  CHECK_THROWS_AS(arcface_loss(emb, {0, 4}, cw, {}), std::invalid_argument);
  CHECK_THROWS_AS(arcface_loss(emb, {0}, cw, {}), std::invalid_argument);
  CHECK_THROWS_AS(arcface_loss(emb, {0, 1}, cw, ArcFaceConfig{0.0, 0.2}), std::invalid_argument);
  CHECK_THROWS_AS(arcface_loss(emb, {0, 1}, cw, ArcFaceConfig{64.0, 1.6}), std::invalid_argument);
}

TEST_CASE("arcface logits stay finite on degenerate inputs") {
  Tensor emb({2, 3});
  emb.values() = {0, 0, 0, 1e-300, 0, 0};
  Tensor cw = random_tensor({3, 3}, 4);
  const std::vector<int> y{0, 1};
  const auto r = arcface_loss(emb, y, cw, {});
  for (double v : r.logits.values()) CHECK(std::isfinite(v));
  CHECK(std::isfinite(r.loss));
  // Embedding parallel or antiparallel to its class.
  cw.values() = {1, 0, 0, -1, 0, 0, 0, 1, 0};
  emb.values() = {1, 0, 0, 1, 0, 0};
  const auto r2 = arcface_loss(emb, y, cw, {});
  for (double v : r2.d_emb.values()) CHECK(std::isfinite(v));
}

TEST_CASE("age group loss") {
  SUBCASE("uniform logits give ln 7") {
    Tensor logits({3, 7}, 0.25);
    CHECK(age_group_loss(logits, {0, 3, 6}).loss == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }
  SUBCASE("loss vanishes as the correct logit gap grows") {
    double prev = INFINITY;
    for (double gap : {1.0, 5.0, 20.0, 50.0}) {
      Tensor logits({1, 7});
      logits.at(0, 2) = gap;
      const double l = age_group_loss(logits, {2}).loss;
      CHECK(l < prev);
      prev = l;
    }
    CHECK(prev < 1e-20);
  }
  SUBCASE("random batch matches the hand-rolled oracle and gradient") {
    Tensor logits = random_tensor({5, 7}, 3, 2.0);
    const std::vector<int> y{0, 6, 2, 2, 5};
    const auto r = age_group_loss(logits, y);
    double want = 0.0;
    for (int i = 0; i < 5; ++i) {
      std::vector<double> row(logits.values().begin() + i * 7, logits.values().begin() + i * 7 + 7);
      want += ce_row(row, y[static_cast<size_t>(i)]);
    }
    CHECK(r.loss == doctest::Approx(want / 5).epsilon(1e-12));
    std::vector<double> num;
    for (size_t i = 0; i < logits.size(); ++i) {
      const double o = logits[i];
      logits[i] = o + 1e-3;
      const double lp = age_group_loss(logits, y).loss;
      logits[i] = o - 1e-3;
      const double lm = age_group_loss(logits, y).loss;
      logits[i] = o;
      num.push_back((lp - lm) / 2e-3);
    }
    check_close(r.grad.values(), num, 1e-4);
  }
  SUBCASE("class weights are off unless given") {
    Tensor logits = random_tensor({4, 7}, 5);
    const std::vector<int> y{0, 0, 1, 6};
    const auto plain = age_group_loss(logits, y);
    const auto ones = age_group_loss(logits, y, std::vector<double>(7, 1.0));
    CHECK(plain.loss == doctest::Approx(ones.loss).epsilon(1e-14));
    std::vector<double> w(7, 1.0);
    w[0] = 0.0;
    const auto skip = age_group_loss(logits, y, w);
    std::vector<double> r1(logits.values().begin() + 14, logits.values().begin() + 21);
    std::vector<double> r2(logits.values().begin() + 21, logits.values().begin() + 28);
    CHECK(skip.loss == doctest::Approx((ce_row(r1, 1) + ce_row(r2, 6)) / 2).epsilon(1e-12));
  }
  Tensor logits({1, 7});
  CHECK_THROWS_AS(age_group_loss(logits, {7}), std::invalid_argument);
  CHECK_THROWS_AS(age_group_loss(logits, {-1}), std::invalid_argument);
  CHECK_THROWS_AS(age_group_loss(Tensor({1, 6}), {0}), std::invalid_argument);
}

TEST_CASE("gradient reversal") {
  const Tensor v = random_tensor({1, 6}, 9);
  CHECK(grl_forward(v) == v);

  // Quadratic L(u) = 0.5 u^T A u + b^T u with A symmetric.
  const Tensor a_raw = random_tensor({6, 6}, 10);
  Tensor a({6, 6});
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) a.at(i, j) = a_raw.at(i, j) + a_raw.at(j, i);
  const Tensor b = random_tensor({1, 6}, 11);
  auto loss = [&](const Tensor& u) {
    double s = 0.0;
    for (int i = 0; i < 6; ++i) {
      s += b[static_cast<size_t>(i)] * u[static_cast<size_t>(i)];
      for (int j = 0; j < 6; ++j) s += 0.5 * u[static_cast<size_t>(i)] * a.at(i, j) * u[static_cast<size_t>(j)];
    }
    return s;
  };
  Tensor grad({1, 6});
  for (int i = 0; i < 6; ++i) {
    double s = b[static_cast<size_t>(i)];
    for (int j = 0; j < 6; ++j) s += a.at(i, j) * v[static_cast<size_t>(j)];
    grad[static_cast<size_t>(i)] = s;
  }
  for (double lambda : {0.0, 0.1, 1.0}) {
    const Tensor through = grl_backward(grad, lambda);
    std::vector<double> fd;
    Tensor u = v;
    for (size_t i = 0; i < 6; ++i) {
      const double o = u[i];
      u[i] = o + 1e-3;
      const double lp = loss(grl_forward(u));
      u[i] = o - 1e-3;
      const double lm = loss(grl_forward(u));
      u[i] = o;
      fd.push_back(-lambda * (lp - lm) / 2e-3);
    }
    check_close(through.values(), fd, 1e-4, 0.0);
    if (lambda == 0.0) {
      for (double g : through.values()) CHECK(g == 0.0);
    }
  }
}

TEST_CASE("total loss") {
  const auto b = total_loss(2.0, 1.0, 1.0, LossWeights{0.1, 0.1});
  CHECK(b.l_total == doctest::Approx(2.2).epsilon(1e-15));
  CHECK(b.l_id == 2.0);
  CHECK(b.l_age == 1.0);
  CHECK(b.l_adv == 1.0);
  CHECK(total_loss(3.5, 9.0, 4.0, LossWeights{0.0, 0.0}).l_total == 3.5);

  Rng rng(12);
  for (int i = 0; i < 200; ++i) {
    const double li = rng.uniform(0, 10), la = rng.uniform(0, 10), lv = rng.uniform(0, 10);
    const LossWeights w{rng.uniform(0, 2), rng.uniform(0, 2)};
    CHECK(total_loss(li, la, lv, w).l_total == li + w.lambda_age * la + w.lambda_grl * lv);
    // Linear in each term.
    const double d = total_loss(li, la + 1.0, lv, w).l_total - total_loss(li, la, lv, w).l_total;
    CHECK(d == doctest::Approx(w.lambda_age).epsilon(1e-9));
  }
  CHECK_THROWS_AS(total_loss(NAN, 1, 1, {}), NonFiniteLossError);
  CHECK_THROWS_AS(total_loss(1, INFINITY, 1, {}), NonFiniteLossError);
  CHECK_THROWS_AS(total_loss(1, 1, 1, LossWeights{-0.1, 0.1}), std::invalid_argument);
}

TEST_CASE("arcface head accumulates class-weight gradients") {
  ArcFaceHead head("head", 3, 4, ArcFaceConfig{8.0, 0.3}, 1);
  nn::ParameterList ps;
  head.collect(ps);
  const std::vector<int> y{2, 0};
  Tensor x = random_tensor({2, 4}, 13);
  const auto rep = casv::testing::check_gradients(
      x, [&](const Tensor& t) { return head.forward(t, &y); },
      [&](const Tensor& g) { return head.backward(g); }, ps);
  INFO(rep.where);
  CHECK(rep.worst < 1e-6);
}
