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

#ifndef CASV_LOSSES_HPP_
#define CASV_LOSSES_HPP_

#include <stdexcept>
#include <string>
#include <vector>

#include "casv/nn.hpp"

namespace casv {

/// Raised when a loss term is NaN or infinite.
class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ArcFaceConfig {
  double scale = 64.0;
  double margin = 0.2;  // radians

  void validate() const;
};

/// Margin-adjusted target cosine: cos(theta + m) for theta + m <= pi,
/// otherwise cos(theta) - m sin(m). `c` is clamped to [-1, 1].
double arcface_target(double c, double margin);
/// d arcface_target / dc.
double arcface_target_derivative(double c, double margin);

/// Intermediate values of one ArcFace forward, needed by the backward.
struct ArcFaceCache {
  nn::Tensor emb_unit;     // [N, D]
  nn::Tensor weight_unit;  // [K, D]
  std::vector<double> emb_norm, weight_norm;
  nn::Tensor cosines;      // [N, K]
  std::vector<int> labels;  // empty in inference mode
};

/// Logits s * cos(theta_j), with the target entry replaced by
/// s * arcface_target(cos theta_y) when labels are given.
/// emb: [N, D]; weight: [K, D]; labels: nullptr for inference (no margin).
nn::Tensor arcface_forward(const nn::Tensor& emb, const nn::Tensor& weight,
                           const std::vector<int>* labels, const ArcFaceConfig& cfg,
                           ArcFaceCache* cache = nullptr);
/// Backpropagates dL/dlogits; either output pointer may be null.
void arcface_backward(const nn::Tensor& dlogits, const ArcFaceConfig& cfg,
                      const ArcFaceCache& cache, nn::Tensor* d_emb, nn::Tensor* d_weight);

struct CrossEntropyResult {
  double loss = 0.0;  // batch mean (weighted mean with class weights)
  nn::Tensor grad;    // dL/dlogits
};

/// Softmax cross-entropy over rows of `logits` [N, K]. With non-empty
/// `class_weights` each sample counts w[y]; the loss is sum(w_y ce) / sum(w_y).
CrossEntropyResult cross_entropy(const nn::Tensor& logits, const std::vector<int>& labels,
                                 const std::vector<double>& class_weights = {});

/// Mean ArcFace loss and its gradients w.r.t. embeddings and class weights.
struct ArcFaceLossResult {
  double loss = 0.0;
  nn::Tensor logits, d_emb, d_weight;
};
ArcFaceLossResult arcface_loss(const nn::Tensor& emb, const std::vector<int>& labels,
                               const nn::Tensor& class_weights, const ArcFaceConfig& cfg);

/// Cross-entropy over the seven age groups; labels must lie in 0..6.
CrossEntropyResult age_group_loss(const nn::Tensor& age_logits, const std::vector<int>& y_age,
                                  const std::vector<double>& class_weights = {});

/// Gradient reversal: identity forward, backward multiplies by -lambda.
inline nn::Tensor grl_forward(const nn::Tensor& v) { return v; }
nn::Tensor grl_backward(const nn::Tensor& grad, double lambda);

struct LossWeights {
  double lambda_age = 0.1;
  double lambda_grl = 0.1;

  void validate() const;
};

struct LossBreakdown {
  double l_id = 0.0;
  double l_age = 0.0;
  double l_adv = 0.0;
  double l_total = 0.0;
};

/// l_id + lambda_age l_age + lambda_grl l_adv. Throws NonFiniteLossError if
/// any term or the total is not finite.
LossBreakdown total_loss(double l_id, double l_age, double l_adv, const LossWeights& w);

/// Class-embedding matrix of the ArcFace classifier, [K, D].
class ArcFaceHead {
 public:
  ArcFaceHead() = default;
  ArcFaceHead(std::string name, int n_classes, int dim, const ArcFaceConfig& cfg, uint64_t seed);

  nn::Tensor forward(const nn::Tensor& emb, const std::vector<int>* labels);
  nn::Tensor backward(const nn::Tensor& dlogits);
  void collect(nn::ParameterList& out) { out.push_back(&weight_); }

  nn::Parameter& weight() { return weight_; }
  const ArcFaceConfig& config() const { return cfg_; }
  void set_margin(double m) { cfg_.margin = m; }

 private:
  ArcFaceConfig cfg_;
  nn::Parameter weight_;
  ArcFaceCache cache_;
};

}  // namespace casv

#endif  // CASV_LOSSES_HPP_
