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

// Central finite-difference checks for layers with hand-written backward.

#ifndef CASV_TESTS_GRAD_CHECK_HPP_
#define CASV_TESTS_GRAD_CHECK_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "casv/nn.hpp"
#include "casv/rng.hpp"

namespace casv::testing {

inline nn::Tensor random_tensor(std::vector<int> shape, uint64_t seed, double scale = 1.0) {
  nn::Tensor t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

struct GradReport {
  double worst = 0.0;  // largest relative error over the checked groups
  std::string where;
};

inline double rel_err(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
  return std::sqrt(diff) / denom;
}

/// Checks d(sum(forward(x) * R))/dx and d/dparams against central
/// differences. `backward` receives dL/dy and returns dL/dx (or an empty
/// tensor if the input gradient is not produced). Up to `max_probe` entries
/// of the input and of every trainable parameter are perturbed.
inline GradReport check_gradients(nn::Tensor x,
                                  const std::function<nn::Tensor(const nn::Tensor&)>& forward,
                                  const std::function<nn::Tensor(const nn::Tensor&)>& backward,
                                  const nn::ParameterList& params, double step = 1e-5,
                                  size_t max_probe = 40, uint64_t seed = 99) {
  const nn::Tensor y0 = forward(x);
  const nn::Tensor r = random_tensor(y0.shape(), seed);
  auto loss = [&](const nn::Tensor& in) {
    const nn::Tensor y = forward(in);
    double s = 0.0;
    for (size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };

  for (auto* p : params) p->zero_grad();
  forward(x);
  const nn::Tensor dx = backward(r);
  std::vector<std::vector<double>> analytic_params;
  for (auto* p : params) analytic_params.push_back(p->grad.values());

  GradReport rep;
  Rng pick(seed + 1);
  auto probe_indices = [&](size_t n) {
    std::vector<size_t> idx = pick.sample_without_replacement(n, std::min(n, max_probe));
    return idx;
  };

  if (!dx.empty()) {
    std::vector<double> a, num;
    for (size_t i : probe_indices(x.size())) {
      const double orig = x[i];
      x[i] = orig + step;
      const double lp = loss(x);
      x[i] = orig - step;
      const double lm = loss(x);
      x[i] = orig;
      a.push_back(dx[i]);
      num.push_back((lp - lm) / (2.0 * step));
    }
    const double e = rel_err(a, num);
    if (e > rep.worst) {
      rep.worst = e;
      rep.where = "input";
    }
  }
  for (size_t k = 0; k < params.size(); ++k) {
    nn::Parameter& p = *params[k];
    if (!p.trainable) continue;
    std::vector<double> a, num;
    for (size_t i : probe_indices(p.value.size())) {
      const double orig = p.value[i];
      p.value[i] = orig + step;
      const double lp = loss(x);
      p.value[i] = orig - step;
      const double lm = loss(x);
      p.value[i] = orig;
      a.push_back(analytic_params[k][i]);
      num.push_back((lp - lm) / (2.0 * step));
    }
    const double e = rel_err(a, num);
    if (e > rep.worst) {
      rep.worst = e;
      rep.where = p.name;
    }
  }
  return rep;
}

}  // namespace casv::testing

#endif  // CASV_TESTS_GRAD_CHECK_HPP_
