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

// Dense tensors and layers with hand-written backward passes.
//
// Every layer caches what it needs during forward() and consumes the cache
// in backward(), which returns the gradient w.r.t. the layer input and
// accumulates parameter gradients into Parameter::grad. A layer therefore
// supports one outstanding forward at a time.

#ifndef CASV_NN_HPP_
#define CASV_NN_HPP_

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace casv::nn {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);

  const std::vector<int>& shape() const { return shape_; }
  int dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }
  /// Row-major 2-D access.
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * static_cast<size_t>(shape_[1]) + static_cast<size_t>(c)]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * static_cast<size_t>(shape_[1]) + static_cast<size_t>(c)]; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(std::vector<int> shape);
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool operator==(const Tensor&) const = default;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<int>& shape);

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline MatrixMap as_matrix(Tensor& t, int rows, int cols) { return MatrixMap(t.data(), rows, cols); }
inline ConstMatrixMap as_matrix(const Tensor& t, int rows, int cols) {
  return ConstMatrixMap(t.data(), rows, cols);
}

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;     // false for running statistics
  bool weight_decay = true;  // off for biases and normalisation affine terms

  void zero_grad() { grad.fill(0.0); }
};

using ParameterList = std::vector<Parameter*>;

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding,
         uint64_t seed);

  /// [N, C_in, H, W] -> [N, C_out, H', W'].
  Tensor forward(const Tensor& x);
  /// Returns an empty tensor when `need_input_grad` is false.
  Tensor backward(const Tensor& grad_out, bool need_input_grad = true);
  void collect(ParameterList& out) { out.push_back(&weight_); }

  int out_size(int in) const { return (in + 2 * padding_ - kernel_) / stride_ + 1; }
  Parameter& weight() { return weight_; }

 private:
  void im2col(const double* x, int h, int w, double* col) const;
  void col2im(const double* col, int h, int w, double* dx) const;

  int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, padding_ = 0;
  Parameter weight_;  // [C_out, C_in * k * k]
  Tensor input_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void collect(ParameterList& out);
  void set_training(bool t) { training_ = t; }

 private:
  int channels_ = 0;
  bool training_ = true;
  double eps_ = 1e-5;
  double momentum_ = 0.1;
  Parameter gamma_, beta_, running_mean_, running_var_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

class Relu {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  std::vector<bool> mask_;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in_features, int out_features, bool bias, uint64_t seed);

  /// [N, in] -> [N, out].
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void collect(ParameterList& out);

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_ = 0, out_ = 0;
  bool has_bias_ = false;
  Parameter weight_;  // [out, in]
  Parameter bias_;    // [out]
  Tensor input_;
};

/// Linear -> ReLU -> Linear.
class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(std::string name, int in_features, int hidden, int out_features, uint64_t seed);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void collect(ParameterList& out);

 private:
  Linear fc1_, fc2_;
  Relu relu_;
};

/// conv3x3 -> BN -> ReLU -> conv3x3 -> BN, plus identity or 1x1 projection
/// shortcut, then ReLU.
class BasicBlock {
 public:
  BasicBlock(std::string name, int in_channels, int out_channels, int stride, uint64_t seed);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void collect(ParameterList& out);
  void set_training(bool t);

 private:
  Conv2d conv1_, conv2_, proj_;
  BatchNorm2d bn1_, bn2_, proj_bn_;
  Relu relu1_, relu_out_;
  bool has_proj_ = false;
};

/// Global statistics pooling: per-channel mean and standard deviation over
/// frequency and time. [N, C, F, T] -> [N, 2C] laid out [means | stds].
class StatsPool {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

  static constexpr double kVarianceFloor = 1e-10;

 private:
  Tensor input_;
  std::vector<double> mean_, std_;
  std::vector<int> shape_;
};

/// Attentive statistics pooling over time. Each frame is the flattened
/// channel x frequency column h_t (dimension D = C F); its score is
/// v^T tanh(W h_t + b), softmax-normalised over time. Output is the
/// attention-weighted mean and standard deviation: [N, C, F, T] -> [N, 2D].
class AttentiveStatsPool {
 public:
  AttentiveStatsPool() = default;
  AttentiveStatsPool(std::string name, int frame_dim, int hidden, uint64_t seed);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void collect(ParameterList& out);

  /// Attention weights of the last forward, [N, T].
  const Tensor& attention() const { return weights_; }
  Parameter& score_vector() { return v_; }

  /// Weighted mean and std of the columns of `frames` ([D, T], row-major)
  /// under `weights` ([T]); returns [2D].
  static std::vector<double> weighted_stats(const double* frames, int dim, int frames_count,
                                            const double* weights);

 private:
  int dim_ = 0, hidden_ = 0;
  Parameter w_, b_, v_;  // [hidden, D], [hidden], [hidden]
  Tensor input_;         // [N, D, T]
  Tensor act_;           // tanh activations [N, hidden, T]
  Tensor weights_;       // [N, T]
  Tensor mean_, std_;    // [N, D]
};

/// Layer widths and depths. Strides: 1 for the first stage, 2 afterwards.
struct TrunkConfig {
  std::vector<int> widths{32, 64, 128, 256};
  std::vector<int> blocks{3, 4, 6, 3};
};

class ResNetTrunk {
 public:
  ResNetTrunk() = default;
  ResNetTrunk(std::string name, const TrunkConfig& cfg, uint64_t seed);

  /// [N, 1, F, T] -> [N, C, F', T'].
  Tensor forward(const Tensor& x);
  void backward(const Tensor& grad_out);
  void collect(ParameterList& out);
  void set_training(bool t);

  int out_channels() const { return cfg_.widths.back(); }
  /// Output length along one axis for an input length.
  int out_size(int in) const;

 private:
  TrunkConfig cfg_;
  Conv2d stem_;
  BatchNorm2d stem_bn_;
  Relu stem_relu_;
  std::vector<BasicBlock> blocks_;
};

}  // namespace casv::nn

#endif  // CASV_NN_HPP_
