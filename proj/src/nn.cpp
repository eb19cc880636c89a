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

#include "casv/nn.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "casv/rng.hpp"

namespace casv::nn {

namespace {

size_t product(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

Parameter make_param(std::string name, std::vector<int> shape, bool decay = true) {
  Parameter p;
  p.name = std::move(name);
  p.value = Tensor(shape);
  p.grad = Tensor(shape);
  p.weight_decay = decay;
  return p;
}

void init_normal(Parameter& p, double stddev, uint64_t seed) {
  Rng rng(derive_seed(seed, p.name));
  for (auto& v : p.value.values()) v = stddev * rng.normal();
}

void init_uniform(Parameter& p, double bound, uint64_t seed) {
  Rng rng(derive_seed(seed, p.name));
  for (auto& v : p.value.values()) v = rng.uniform(-bound, bound);
}

void require_rank(const Tensor& x, size_t rank, const char* who) {
  if (x.rank() != rank) {
    throw std::invalid_argument(std::string(who) + ": expected rank " + std::to_string(rank) +
                                " input, got " + shape_string(x.shape()));
  }
}

}  // namespace

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {}

void Tensor::reshape(std::vector<int> shape) {
  if (product(shape) != data_.size()) {
    throw std::invalid_argument("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
  }
  shape_ = std::move(shape);
}

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride,
               int padding, uint64_t seed)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), padding_(padding) {
  weight_ = make_param(name + ".weight", {out_, in_ * kernel_ * kernel_});
  // He initialisation, fan-out mode.
  init_normal(weight_, std::sqrt(2.0 / (out_ * kernel_ * kernel_)), seed);
}

void Conv2d::im2col(const double* x, int h, int w, double* col) const {
  const int ho = out_size(h), wo = out_size(w);
  const size_t plane = static_cast<size_t>(ho) * static_cast<size_t>(wo);
  for (int c = 0; c < in_; ++c) {
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        double* dst = col + static_cast<size_t>((c * kernel_ + ky) * kernel_ + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride_ - padding_ + ky;
          double* row = dst + static_cast<size_t>(oy) * static_cast<size_t>(wo);
          if (iy < 0 || iy >= h) {
            std::fill(row, row + wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<size_t>(c) * h + static_cast<size_t>(iy)) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride_ - padding_ + kx;
            row[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void Conv2d::col2im(const double* col, int h, int w, double* dx) const {
  const int ho = out_size(h), wo = out_size(w);
  const size_t plane = static_cast<size_t>(ho) * static_cast<size_t>(wo);
  for (int c = 0; c < in_; ++c) {
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        const double* src = col + static_cast<size_t>((c * kernel_ + ky) * kernel_ + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride_ - padding_ + ky;
          if (iy < 0 || iy >= h) continue;
          const double* row = src + static_cast<size_t>(oy) * static_cast<size_t>(wo);
          double* dst = dx + (static_cast<size_t>(c) * h + static_cast<size_t>(iy)) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride_ - padding_ + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x) {
  require_rank(x, 4, "Conv2d");
  if (x.dim(1) != in_) throw std::invalid_argument("Conv2d: channel mismatch in " + weight_.name);
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int ho = out_size(h), wo = out_size(w);
  if (ho < 1 || wo < 1) throw std::invalid_argument("Conv2d: input too small");
  input_ = x;
  Tensor y({n, out_, ho, wo});
  const int k = in_ * kernel_ * kernel_;
  const int p = ho * wo;
  std::vector<double> col(static_cast<size_t>(k) * static_cast<size_t>(p));
  const ConstMatrixMap wm(weight_.value.data(), out_, k);
  const size_t in_stride = static_cast<size_t>(in_) * h * w;
  const size_t out_stride = static_cast<size_t>(out_) * p;
  for (int i = 0; i < n; ++i) {
    im2col(x.data() + i * in_stride, h, w, col.data());
    const ConstMatrixMap cm(col.data(), k, p);
    MatrixMap ym(y.data() + i * out_stride, out_, p);
    ym.noalias() = wm * cm;
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out, bool need_input_grad) {
  const int n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
  const int ho = out_size(h), wo = out_size(w);
  const int k = in_ * kernel_ * kernel_;
  const int p = ho * wo;
  Tensor dx;
  if (need_input_grad) dx = Tensor(input_.shape());
  std::vector<double> col(static_cast<size_t>(k) * static_cast<size_t>(p));
  std::vector<double> dcol(need_input_grad ? col.size() : 0);
  const ConstMatrixMap wm(weight_.value.data(), out_, k);
  MatrixMap dw(weight_.grad.data(), out_, k);
  const size_t in_stride = static_cast<size_t>(in_) * h * w;
  const size_t out_stride = static_cast<size_t>(out_) * p;
  for (int i = 0; i < n; ++i) {
    im2col(input_.data() + i * in_stride, h, w, col.data());
    const ConstMatrixMap cm(col.data(), k, p);
    const ConstMatrixMap dy(grad_out.data() + i * out_stride, out_, p);
    dw.noalias() += dy * cm.transpose();
    if (need_input_grad) {
      MatrixMap dc(dcol.data(), k, p);
      dc.noalias() = wm.transpose() * dy;
      col2im(dcol.data(), h, w, dx.data() + i * in_stride);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name, int channels) : channels_(channels) {
  gamma_ = make_param(name + ".gamma", {channels}, false);
  gamma_.value.fill(1.0);
  beta_ = make_param(name + ".beta", {channels}, false);
  running_mean_ = make_param(name + ".running_mean", {channels}, false);
  running_mean_.trainable = false;
  running_var_ = make_param(name + ".running_var", {channels}, false);
  running_var_.trainable = false;
  running_var_.value.fill(1.0);
}

void BatchNorm2d::collect(ParameterList& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

Tensor BatchNorm2d::forward(const Tensor& x) {
  require_rank(x, 4, "BatchNorm2d");
  if (x.dim(1) != channels_) throw std::invalid_argument("BatchNorm2d: channel mismatch");
  const int n = x.dim(0);
  const size_t plane = static_cast<size_t>(x.dim(2)) * static_cast<size_t>(x.dim(3));
  const double m = static_cast<double>(n) * static_cast<double>(plane);
  Tensor y(x.shape());
  xhat_ = Tensor(x.shape());
  inv_std_.assign(static_cast<size_t>(channels_), 0.0);
  for (int c = 0; c < channels_; ++c) {
    double mean, var;
    if (training_) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* p = x.data() + (static_cast<size_t>(i) * channels_ + c) * plane;
        for (size_t j = 0; j < plane; ++j) s += p[j];
      }
      mean = s / m;
      double ss = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* p = x.data() + (static_cast<size_t>(i) * channels_ + c) * plane;
        for (size_t j = 0; j < plane; ++j) ss += (p[j] - mean) * (p[j] - mean);
      }
      var = ss / m;
      running_mean_.value[c] = (1.0 - momentum_) * running_mean_.value[c] + momentum_ * mean;
      const double unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
      running_var_.value[c] = (1.0 - momentum_) * running_var_.value[c] + momentum_ * unbiased;
    } else {
      mean = running_mean_.value[c];
      var = running_var_.value[c];
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[static_cast<size_t>(c)] = inv;
    const double g = gamma_.value[c], b = beta_.value[c];
    for (int i = 0; i < n; ++i) {
      const size_t off = (static_cast<size_t>(i) * channels_ + c) * plane;
      for (size_t j = 0; j < plane; ++j) {
        const double xh = (x[off + j] - mean) * inv;
        xhat_[off + j] = xh;
        y[off + j] = g * xh + b;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  const int n = grad_out.dim(0);
  const size_t plane = static_cast<size_t>(grad_out.dim(2)) * static_cast<size_t>(grad_out.dim(3));
  const double m = static_cast<double>(n) * static_cast<double>(plane);
  Tensor dx(grad_out.shape());
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int i = 0; i < n; ++i) {
      const size_t off = (static_cast<size_t>(i) * channels_ + c) * plane;
      for (size_t j = 0; j < plane; ++j) {
        sum_dy += grad_out[off + j];
        sum_dy_xhat += grad_out[off + j] * xhat_[off + j];
      }
    }
    gamma_.grad[c] += sum_dy_xhat;
    beta_.grad[c] += sum_dy;
    const double g = gamma_.value[c], inv = inv_std_[static_cast<size_t>(c)];
    for (int i = 0; i < n; ++i) {
      const size_t off = (static_cast<size_t>(i) * channels_ + c) * plane;
      for (size_t j = 0; j < plane; ++j) {
        if (training_) {
          dx[off + j] = g * inv / m * (m * grad_out[off + j] - sum_dy - xhat_[off + j] * sum_dy_xhat);
        } else {
          dx[off + j] = g * inv * grad_out[off + j];
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Relu

Tensor Relu::forward(const Tensor& x) {
  Tensor y(x.shape());
  mask_.resize(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    mask_[i] = x[i] > 0.0;
    y[i] = mask_[i] ? x[i] : 0.0;
  }
  return y;
}

Tensor Relu::backward(const Tensor& grad_out) const {
  Tensor dx(grad_out.shape());
  for (size_t i = 0; i < dx.size(); ++i) dx[i] = mask_[i] ? grad_out[i] : 0.0;
  return dx;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::string name, int in_features, int out_features, bool bias, uint64_t seed)
    : in_(in_features), out_(out_features), has_bias_(bias) {
  weight_ = make_param(name + ".weight", {out_, in_});
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
  init_uniform(weight_, bound, seed);
  if (has_bias_) {
    bias_ = make_param(name + ".bias", {out_}, false);
    init_uniform(bias_, bound, seed);
  }
}

void Linear::collect(ParameterList& out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

Tensor Linear::forward(const Tensor& x) {
  require_rank(x, 2, "Linear");
  if (x.dim(1) != in_) {
    throw std::invalid_argument("Linear " + weight_.name + ": expected " + std::to_string(in_) +
                                " features, got " + std::to_string(x.dim(1)));
  }
  input_ = x;
  const int n = x.dim(0);
  Tensor y({n, out_});
  auto ym = as_matrix(y, n, out_);
  ym.noalias() = as_matrix(x, n, in_) * as_matrix(weight_.value, out_, in_).transpose();
  if (has_bias_) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < out_; ++j) y.at(i, j) += bias_.value[static_cast<size_t>(j)];
    }
  }
  return y;
}

Tensor Linear::backward(const Tensor& grad_out) {
  const int n = input_.dim(0);
  const auto dy = as_matrix(grad_out, n, out_);
  as_matrix(weight_.grad, out_, in_).noalias() += dy.transpose() * as_matrix(input_, n, in_);
  if (has_bias_) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < out_; ++j) bias_.grad[static_cast<size_t>(j)] += grad_out.at(i, j);
    }
  }
  Tensor dx({n, in_});
  as_matrix(dx, n, in_).noalias() = dy * as_matrix(weight_.value, out_, in_);
  return dx;
}

// ---------------------------------------------------------------------------
// MlpHead

MlpHead::MlpHead(std::string name, int in_features, int hidden, int out_features, uint64_t seed)
    : fc1_(name + ".fc1", in_features, hidden, true, seed),
      fc2_(name + ".fc2", hidden, out_features, true, seed) {}

Tensor MlpHead::forward(const Tensor& x) { return fc2_.forward(relu_.forward(fc1_.forward(x))); }

Tensor MlpHead::backward(const Tensor& grad_out) {
  return fc1_.backward(relu_.backward(fc2_.backward(grad_out)));
}

void MlpHead::collect(ParameterList& out) {
  fc1_.collect(out);
  fc2_.collect(out);
}

// ---------------------------------------------------------------------------
// BasicBlock

BasicBlock::BasicBlock(std::string name, int in_channels, int out_channels, int stride,
                       uint64_t seed)
    : conv1_(name + ".conv1", in_channels, out_channels, 3, stride, 1, seed),
      conv2_(name + ".conv2", out_channels, out_channels, 3, 1, 1, seed),
      bn1_(name + ".bn1", out_channels),
      bn2_(name + ".bn2", out_channels),
      has_proj_(stride != 1 || in_channels != out_channels) {
  if (has_proj_) {
    proj_ = Conv2d(name + ".shortcut", in_channels, out_channels, 1, stride, 0, seed);
    proj_bn_ = BatchNorm2d(name + ".shortcut_bn", out_channels);
  }
}

Tensor BasicBlock::forward(const Tensor& x) {
  Tensor main = bn2_.forward(conv2_.forward(relu1_.forward(bn1_.forward(conv1_.forward(x)))));
  const Tensor shortcut = has_proj_ ? proj_bn_.forward(proj_.forward(x)) : x;
  for (size_t i = 0; i < main.size(); ++i) main[i] += shortcut[i];
  return relu_out_.forward(main);
}

Tensor BasicBlock::backward(const Tensor& grad_out) {
  const Tensor g = relu_out_.backward(grad_out);
  Tensor dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(g)))));
  if (has_proj_) {
    const Tensor ds = proj_.backward(proj_bn_.backward(g));
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += ds[i];
  } else {
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
  }
  return dx;
}

void BasicBlock::collect(ParameterList& out) {
  conv1_.collect(out);
  bn1_.collect(out);
  conv2_.collect(out);
  bn2_.collect(out);
  if (has_proj_) {
    proj_.collect(out);
    proj_bn_.collect(out);
  }
}

void BasicBlock::set_training(bool t) {
  bn1_.set_training(t);
  bn2_.set_training(t);
  proj_bn_.set_training(t);
}

// ---------------------------------------------------------------------------
// StatsPool

Tensor StatsPool::forward(const Tensor& x) {
  require_rank(x, 4, "StatsPool");
  input_ = x;
  shape_ = x.shape();
  const int n = x.dim(0), c = x.dim(1);
  const size_t m = static_cast<size_t>(x.dim(2)) * static_cast<size_t>(x.dim(3));
  Tensor y({n, 2 * c});
  mean_.assign(static_cast<size_t>(n * c), 0.0);
  std_.assign(static_cast<size_t>(n * c), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double* p = x.data() + (static_cast<size_t>(i) * c + ch) * m;
      double s = 0.0;
      for (size_t j = 0; j < m; ++j) s += p[j];
      const double mean = s / static_cast<double>(m);
      double ss = 0.0;
      for (size_t j = 0; j < m; ++j) ss += (p[j] - mean) * (p[j] - mean);
      const double sd = std::sqrt(ss / static_cast<double>(m) + kVarianceFloor);
      mean_[static_cast<size_t>(i * c + ch)] = mean;
      std_[static_cast<size_t>(i * c + ch)] = sd;
      y.at(i, ch) = mean;
      y.at(i, c + ch) = sd;
    }
  }
  return y;
}

Tensor StatsPool::backward(const Tensor& grad_out) const {
  const int n = shape_[0], c = shape_[1];
  const size_t m = static_cast<size_t>(shape_[2]) * static_cast<size_t>(shape_[3]);
  Tensor dx(shape_);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const size_t off = (static_cast<size_t>(i) * c + ch) * m;
      const double mean = mean_[static_cast<size_t>(i * c + ch)];
      const double sd = std_[static_cast<size_t>(i * c + ch)];
      const double g_mean = grad_out.at(i, ch) / static_cast<double>(m);
      const double g_std = grad_out.at(i, c + ch) / (static_cast<double>(m) * sd);
      for (size_t j = 0; j < m; ++j) dx[off + j] = g_mean + g_std * (input_[off + j] - mean);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// AttentiveStatsPool

AttentiveStatsPool::AttentiveStatsPool(std::string name, int frame_dim, int hidden, uint64_t seed)
    : dim_(frame_dim), hidden_(hidden) {
  w_ = make_param(name + ".attention.weight", {hidden_, dim_});
  b_ = make_param(name + ".attention.bias", {hidden_}, false);
  v_ = make_param(name + ".attention.score", {hidden_});
  init_uniform(w_, 1.0 / std::sqrt(static_cast<double>(dim_)), seed);
  init_uniform(b_, 1.0 / std::sqrt(static_cast<double>(dim_)), seed);
  init_uniform(v_, 1.0 / std::sqrt(static_cast<double>(hidden_)), seed);
}

void AttentiveStatsPool::collect(ParameterList& out) {
  out.push_back(&w_);
  out.push_back(&b_);
  out.push_back(&v_);
}

std::vector<double> AttentiveStatsPool::weighted_stats(const double* frames, int dim,
                                                       int frames_count, const double* weights) {
  std::vector<double> out(static_cast<size_t>(2 * dim));
  for (int d = 0; d < dim; ++d) {
    const double* row = frames + static_cast<size_t>(d) * frames_count;
    double mu = 0.0, sq = 0.0;
    for (int t = 0; t < frames_count; ++t) {
      mu += weights[t] * row[t];
      sq += weights[t] * row[t] * row[t];
    }
    out[static_cast<size_t>(d)] = mu;
    out[static_cast<size_t>(dim + d)] =
        std::sqrt(std::max(sq - mu * mu, 0.0) + StatsPool::kVarianceFloor);
  }
  return out;
}

Tensor AttentiveStatsPool::forward(const Tensor& x) {
  require_rank(x, 4, "AttentiveStatsPool");
  const int n = x.dim(0), t = x.dim(3);
  if (x.dim(1) * x.dim(2) != dim_) {
    throw std::invalid_argument("AttentiveStatsPool: frame dimension mismatch");
  }
  input_ = x;
  input_.reshape({n, dim_, t});
  act_ = Tensor({n, hidden_, t});
  weights_ = Tensor({n, t});
  mean_ = Tensor({n, dim_});
  std_ = Tensor({n, dim_});
  Tensor y({n, 2 * dim_});
  const auto wm = as_matrix(w_.value, hidden_, dim_);
  for (int i = 0; i < n; ++i) {
    const ConstMatrixMap xi(input_.data() + static_cast<size_t>(i) * dim_ * t, dim_, t);
    MatrixMap a(act_.data() + static_cast<size_t>(i) * hidden_ * t, hidden_, t);
    a.noalias() = wm * xi;
    for (int h = 0; h < hidden_; ++h) {
      for (int k = 0; k < t; ++k) a(h, k) = std::tanh(a(h, k) + b_.value[static_cast<size_t>(h)]);
    }
    double* w = weights_.data() + static_cast<size_t>(i) * t;
    double max_e = -INFINITY;
    for (int k = 0; k < t; ++k) {
      double e = 0.0;
      for (int h = 0; h < hidden_; ++h) e += v_.value[static_cast<size_t>(h)] * a(h, k);
      w[k] = e;
      max_e = std::max(max_e, e);
    }
    double z = 0.0;
    for (int k = 0; k < t; ++k) {
      w[k] = std::exp(w[k] - max_e);
      z += w[k];
    }
    for (int k = 0; k < t; ++k) w[k] /= z;
    const auto stats = weighted_stats(xi.data(), dim_, t, w);
    for (int d = 0; d < dim_; ++d) {
      mean_.at(i, d) = stats[static_cast<size_t>(d)];
      std_.at(i, d) = stats[static_cast<size_t>(dim_ + d)];
      y.at(i, d) = stats[static_cast<size_t>(d)];
      y.at(i, dim_ + d) = stats[static_cast<size_t>(dim_ + d)];
    }
  }
  return y;
}

Tensor AttentiveStatsPool::backward(const Tensor& grad_out) {
  const int n = input_.dim(0), t = input_.dim(2);
  Tensor dx({n, dim_, t});
  const auto wm = as_matrix(w_.value, hidden_, dim_);
  auto dwm = as_matrix(w_.grad, hidden_, dim_);
  std::vector<double> g(static_cast<size_t>(dim_)), ds2(static_cast<size_t>(dim_));
  std::vector<double> dweight(static_cast<size_t>(t)), de(static_cast<size_t>(t));
  RowMatrix dz(hidden_, t);
  for (int i = 0; i < n; ++i) {
    const ConstMatrixMap xi(input_.data() + static_cast<size_t>(i) * dim_ * t, dim_, t);
    const ConstMatrixMap a(act_.data() + static_cast<size_t>(i) * hidden_ * t, hidden_, t);
    MatrixMap dxi(dx.data() + static_cast<size_t>(i) * dim_ * t, dim_, t);
    const double* w = weights_.data() + static_cast<size_t>(i) * t;

    // sigma = sqrt(s2 + floor), s2 = sum_t w x^2 - mu^2
    for (int d = 0; d < dim_; ++d) {
      ds2[static_cast<size_t>(d)] = grad_out.at(i, dim_ + d) / (2.0 * std_.at(i, d));
      g[static_cast<size_t>(d)] = grad_out.at(i, d) - 2.0 * ds2[static_cast<size_t>(d)] * mean_.at(i, d);
    }
    std::fill(dweight.begin(), dweight.end(), 0.0);
    for (int d = 0; d < dim_; ++d) {
      const double gd = g[static_cast<size_t>(d)], sd = ds2[static_cast<size_t>(d)];
      for (int k = 0; k < t; ++k) {
        const double xv = xi(d, k);
        dxi(d, k) = w[k] * (gd + 2.0 * sd * xv);
        dweight[static_cast<size_t>(k)] += gd * xv + sd * xv * xv;
      }
    }
    // softmax
    double dot = 0.0;
    for (int k = 0; k < t; ++k) dot += w[k] * dweight[static_cast<size_t>(k)];
    for (int k = 0; k < t; ++k) de[static_cast<size_t>(k)] = w[k] * (dweight[static_cast<size_t>(k)] - dot);
    // e = v^T a ; a = tanh(W x + b)
    for (int h = 0; h < hidden_; ++h) {
      const double vh = v_.value[static_cast<size_t>(h)];
      double gv = 0.0, gb = 0.0;
      for (int k = 0; k < t; ++k) {
        gv += a(h, k) * de[static_cast<size_t>(k)];
        const double dzk = vh * de[static_cast<size_t>(k)] * (1.0 - a(h, k) * a(h, k));
        dz(h, k) = dzk;
        gb += dzk;
      }
      v_.grad[static_cast<size_t>(h)] += gv;
      b_.grad[static_cast<size_t>(h)] += gb;
    }
    dwm.noalias() += dz * xi.transpose();
    dxi.noalias() += wm.transpose() * dz;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ResNetTrunk

ResNetTrunk::ResNetTrunk(std::string name, const TrunkConfig& cfg, uint64_t seed) : cfg_(cfg) {
  if (cfg_.widths.empty() || cfg_.widths.size() != cfg_.blocks.size()) {
    throw std::invalid_argument("trunk: widths and blocks must be non-empty and equally long");
  }
  stem_ = Conv2d(name + ".stem", 1, cfg_.widths[0], 3, 1, 1, seed);
  stem_bn_ = BatchNorm2d(name + ".stem_bn", cfg_.widths[0]);
  int in = cfg_.widths[0];
  for (size_t s = 0; s < cfg_.widths.size(); ++s) {
    if (cfg_.blocks[s] < 1) throw std::invalid_argument("trunk: every stage needs a block");
    for (int b = 0; b < cfg_.blocks[s]; ++b) {
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      blocks_.emplace_back(name + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b),
                           in, cfg_.widths[s], stride, seed);
      in = cfg_.widths[s];
    }
  }
}

int ResNetTrunk::out_size(int in) const {
  for (size_t s = 1; s < cfg_.widths.size(); ++s) in = (in - 1) / 2 + 1;
  return in;
}

Tensor ResNetTrunk::forward(const Tensor& x) {
  Tensor h = stem_relu_.forward(stem_bn_.forward(stem_.forward(x)));
  for (auto& b : blocks_) h = b.forward(h);
  return h;
}

void ResNetTrunk::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) g = it->backward(g);
  stem_.backward(stem_bn_.backward(stem_relu_.backward(g)), false);
}

void ResNetTrunk::collect(ParameterList& out) {
  stem_.collect(out);
  stem_bn_.collect(out);
  for (auto& b : blocks_) b.collect(out);
}

void ResNetTrunk::set_training(bool t) {
  stem_bn_.set_training(t);
  for (auto& b : blocks_) b.set_training(t);
}

}  // namespace casv::nn
