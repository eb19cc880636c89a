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

#include "casv/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "casv/metadata.hpp"
#include "casv/rng.hpp"

namespace casv {

using nn::Tensor;

namespace {

constexpr double kNormFloor = 1e-12;

// Row-wise L2 normalisation of a [R, D] tensor.
void normalize_rows(const Tensor& x, Tensor& unit, std::vector<double>& norms) {
  const int r = x.dim(0), d = x.dim(1);
  unit = Tensor({r, d});
  norms.assign(static_cast<size_t>(r), 0.0);
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += x.at(i, j) * x.at(i, j);
    const double n = std::max(std::sqrt(s), kNormFloor);
    norms[static_cast<size_t>(i)] = n;
    for (int j = 0; j < d; ++j) unit.at(i, j) = x.at(i, j) / n;
  }
}

// Gradient through x -> x / |x| given dL/d(unit).
Tensor normalize_backward(const Tensor& d_unit, const Tensor& unit,
                          const std::vector<double>& norms) {
  const int r = unit.dim(0), d = unit.dim(1);
  Tensor dx({r, d});
  for (int i = 0; i < r; ++i) {
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += d_unit.at(i, j) * unit.at(i, j);
    for (int j = 0; j < d; ++j) {
      dx.at(i, j) = (d_unit.at(i, j) - unit.at(i, j) * dot) / norms[static_cast<size_t>(i)];
    }
  }
  return dx;
}

void check_labels(const std::vector<int>& labels, int n, int k, const char* what) {
  if (static_cast<int>(labels.size()) != n) {
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= k) {
      throw std::invalid_argument(std::string(what) + ": label " + std::to_string(y) +
                                  " out of range [0, " + std::to_string(k) + ")");
    }
  }
}

}  // namespace

void ArcFaceConfig::validate() const {
  if (!(scale > 0.0)) throw std::invalid_argument("arcface scale must be positive");
  if (!(margin >= 0.0 && margin < std::numbers::pi / 2)) {
    throw std::invalid_argument("arcface margin must be in [0, pi/2)");
  }
}

double arcface_target(double c, double margin) {
  c = std::clamp(c, -1.0, 1.0);
  if (c >= -std::cos(margin)) {
    return c * std::cos(margin) - std::sqrt(std::max(1.0 - c * c, 0.0)) * std::sin(margin);
  }
  return c - margin * std::sin(margin);
}

double arcface_target_derivative(double c, double margin) {
  c = std::clamp(c, -1.0, 1.0);
  if (c >= -std::cos(margin)) {
    return std::cos(margin) + c * std::sin(margin) / std::sqrt(std::max(1.0 - c * c, 1e-12));
  }
  return 1.0;
}

Tensor arcface_forward(const Tensor& emb, const Tensor& weight, const std::vector<int>* labels,
                       const ArcFaceConfig& cfg, ArcFaceCache* cache) {
  if (emb.rank() != 2 || weight.rank() != 2 || emb.dim(1) != weight.dim(1)) {
    throw std::invalid_argument("arcface: shape mismatch " + nn::shape_string(emb.shape()) +
                                " vs " + nn::shape_string(weight.shape()));
  }
  const int n = emb.dim(0), k = weight.dim(0), d = emb.dim(1);
  if (labels) check_labels(*labels, n, k, "arcface");
  ArcFaceCache local;
  ArcFaceCache& c = cache ? *cache : local;
  normalize_rows(emb, c.emb_unit, c.emb_norm);
  normalize_rows(weight, c.weight_unit, c.weight_norm);
  c.cosines = Tensor({n, k});
  nn::as_matrix(c.cosines, n, k).noalias() =
      nn::as_matrix(c.emb_unit, n, d) * nn::as_matrix(c.weight_unit, k, d).transpose();
  c.labels = labels ? *labels : std::vector<int>{};
  Tensor logits({n, k});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      const double cs = std::clamp(c.cosines.at(i, j), -1.0, 1.0);
      logits.at(i, j) = cfg.scale * cs;
    }
    if (labels) {
      const int y = (*labels)[static_cast<size_t>(i)];
      logits.at(i, y) = cfg.scale * arcface_target(c.cosines.at(i, y), cfg.margin);
    }
  }
  return logits;
}

void arcface_backward(const Tensor& dlogits, const ArcFaceConfig& cfg, const ArcFaceCache& c,
                      Tensor* d_emb, Tensor* d_weight) {
  const int n = c.cosines.dim(0), k = c.cosines.dim(1), d = c.emb_unit.dim(1);
  Tensor dcos({n, k});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) dcos.at(i, j) = cfg.scale * dlogits.at(i, j);
    if (!c.labels.empty()) {
      const int y = c.labels[static_cast<size_t>(i)];
      dcos.at(i, y) *= arcface_target_derivative(c.cosines.at(i, y), cfg.margin);
    }
  }
  const auto dc = nn::as_matrix(dcos, n, k);
  if (d_emb) {
    Tensor du({n, d});
    nn::as_matrix(du, n, d).noalias() = dc * nn::as_matrix(c.weight_unit, k, d);
    *d_emb = normalize_backward(du, c.emb_unit, c.emb_norm);
  }
  if (d_weight) {
    Tensor dw({k, d});
    nn::as_matrix(dw, k, d).noalias() = dc.transpose() * nn::as_matrix(c.emb_unit, n, d);
    *d_weight = normalize_backward(dw, c.weight_unit, c.weight_norm);
  }
}

CrossEntropyResult cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                 const std::vector<double>& class_weights) {
  if (logits.rank() != 2 || logits.dim(0) == 0) {
    throw std::invalid_argument("cross_entropy: expected non-empty [N, K] logits");
  }
  const int n = logits.dim(0), k = logits.dim(1);
  check_labels(labels, n, k, "cross_entropy");
  if (!class_weights.empty() && static_cast<int>(class_weights.size()) != k) {
    throw std::invalid_argument("cross_entropy: class weight count differs from class count");
  }
  CrossEntropyResult r;
  r.grad = Tensor({n, k});
  double total_w = 0.0;
  std::vector<double> p(static_cast<size_t>(k));
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<size_t>(y)];
    double mx = -INFINITY;
    for (int j = 0; j < k; ++j) mx = std::max(mx, logits.at(i, j));
    double z = 0.0;
    for (int j = 0; j < k; ++j) {
      p[static_cast<size_t>(j)] = std::exp(logits.at(i, j) - mx);
      z += p[static_cast<size_t>(j)];
    }
    r.loss += w * (std::log(z) + mx - logits.at(i, y));
    for (int j = 0; j < k; ++j) {
      r.grad.at(i, j) = w * (p[static_cast<size_t>(j)] / z - (j == y ? 1.0 : 0.0));
    }
    total_w += w;
  }
  if (!(total_w > 0.0)) throw std::invalid_argument("cross_entropy: zero total class weight");
  r.loss /= total_w;
  for (auto& g : r.grad.values()) g /= total_w;
  return r;
}

ArcFaceLossResult arcface_loss(const Tensor& emb, const std::vector<int>& labels,
                               const Tensor& class_weights, const ArcFaceConfig& cfg) {
  cfg.validate();
  ArcFaceCache cache;
  ArcFaceLossResult r;
  r.logits = arcface_forward(emb, class_weights, &labels, cfg, &cache);
  const auto ce = cross_entropy(r.logits, labels);
  r.loss = ce.loss;
  arcface_backward(ce.grad, cfg, cache, &r.d_emb, &r.d_weight);
  return r;
}

CrossEntropyResult age_group_loss(const Tensor& age_logits, const std::vector<int>& y_age,
                                  const std::vector<double>& class_weights) {
  if (age_logits.rank() != 2 || age_logits.dim(1) != AgeGroupId::kCount) {
    throw std::invalid_argument("age_group_loss: expected [N, 7] logits");
  }
  return cross_entropy(age_logits, y_age, class_weights);
}

Tensor grl_backward(const Tensor& grad, double lambda) {
  Tensor out = grad;
  for (auto& v : out.values()) v *= -lambda;
  return out;
}

void LossWeights::validate() const {
  if (!(lambda_age >= 0.0) || !(lambda_grl >= 0.0) || !std::isfinite(lambda_age) ||
      !std::isfinite(lambda_grl)) {
    throw std::invalid_argument("loss weights must be finite and non-negative");
  }
}

LossBreakdown total_loss(double l_id, double l_age, double l_adv, const LossWeights& w) {
  w.validate();
  LossBreakdown b{l_id, l_age, l_adv, l_id + w.lambda_age * l_age + w.lambda_grl * l_adv};
  if (!std::isfinite(l_id) || !std::isfinite(l_age) || !std::isfinite(l_adv) ||
      !std::isfinite(b.l_total)) {
    throw NonFiniteLossError("non-finite loss: L_id=" + std::to_string(l_id) +
                             " L_age=" + std::to_string(l_age) +
                             " L_adv=" + std::to_string(l_adv));
  }
  return b;
}

ArcFaceHead::ArcFaceHead(std::string name, int n_classes, int dim, const ArcFaceConfig& cfg,
                         uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate();
  weight_.name = name + ".weight";
  weight_.value = Tensor({n_classes, dim});
  weight_.grad = Tensor({n_classes, dim});
  Rng rng(derive_seed(seed, weight_.name));
  for (auto& v : weight_.value.values()) v = rng.normal();
}

Tensor ArcFaceHead::forward(const Tensor& emb, const std::vector<int>* labels) {
  return arcface_forward(emb, weight_.value, labels, cfg_, &cache_);
}

Tensor ArcFaceHead::backward(const Tensor& dlogits) {
  Tensor d_emb, d_w;
  arcface_backward(dlogits, cfg_, cache_, &d_emb, &d_w);
  for (size_t i = 0; i < d_w.size(); ++i) weight_.grad[i] += d_w[i];
  return d_emb;
}

}  // namespace casv
