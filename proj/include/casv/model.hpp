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

// Speaker embedding network: a ResNet trunk shared by a statistics-pooling
// branch that yields the full embedding z and an attentive age branch that
// yields z_age. The identity embedding is z_id = z - z_age.

#ifndef CASV_MODEL_HPP_
#define CASV_MODEL_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "casv/features.hpp"
#include "casv/losses.hpp"
#include "casv/nn.hpp"

namespace casv {

/// Model families compared in the ablation:
///   baseline-softmax  z, softmax identity head
///   baseline-arcface  z, ArcFace identity head
///   grl               baseline-arcface + adversarial age head on GRL(z)
///   age-residual      z_age = FC(z), age head on z_age, ArcFace on z_id
///   are               z_age from the attentive branch, age head, ArcFace on z_id
///   adal              are + adversarial age head on GRL(z_id)
enum class ModelVariant { kBaselineSoftmax, kBaselineArcface, kGrl, kAgeResidual, kAre, kAdal };

std::string_view to_string(ModelVariant v);
ModelVariant parse_variant(std::string_view s);
std::vector<ModelVariant> all_variants();

/// z_age is defined (z_id differs from z).
bool has_age_branch(ModelVariant v);
/// z_age comes from the attentive extractor.
bool has_attentive_branch(ModelVariant v);
bool has_adversary(ModelVariant v);
bool uses_arcface(ModelVariant v);

enum class EmbeddingKind { kZ, kZId, kZAge };
std::string_view to_string(EmbeddingKind k);
EmbeddingKind parse_embedding_kind(std::string_view s);

struct ModelConfig {
  ModelVariant variant = ModelVariant::kAdal;
  nn::TrunkConfig trunk;
  int n_mels = 80;
  int embedding_dim = 128;
  int n_speakers = 1;
  int n_age_groups = 7;
  ArcFaceConfig arcface;
  int asp_hidden = 128;   // attention bottleneck
  int head_hidden = 128;  // age / adversarial FC-ReLU-FC width
  uint64_t seed = 0;

  static constexpr int kMinFrames = 16;

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  bool operator==(const ModelConfig& o) const { return to_json() == o.to_json(); }
};

/// Rows are utterances; each tensor is [N, embedding_dim]. For variants
/// without an age branch z_age is zero and z_id equals z.
struct EmbeddingBatch {
  nn::Tensor z, z_age, z_id;
};

/// Empty tensors for heads the variant does not have.
struct HeadOutputs {
  nn::Tensor id_logits;   // [N, n_speakers]
  nn::Tensor age_logits;  // [N, 7], from z_age
  nn::Tensor adv_logits;  // [N, 7], from GRL(z_id) (GRL(z) for the grl variant)
};

/// dL/dlogits for each head, already multiplied by the loss weights. Empty
/// tensors contribute nothing.
struct HeadGrads {
  nn::Tensor id, age, adv;
};

/// Stacks equally long feature matrices into [N, 1, n_mels, T].
nn::Tensor features_to_batch(const std::vector<const FeatureMatrix*>& feats);

class SpeakerModel {
 public:
  explicit SpeakerModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  /// [N, 1, F, T] -> [N, C, F/8, T/8]. Throws FeatureError below
  /// ModelConfig::kMinFrames frames.
  nn::Tensor trunk_forward(const nn::Tensor& feats);
  /// [N, C, F', T'] -> [N, 2C] (per-channel mean | std).
  nn::Tensor gsp_pool(const nn::Tensor& x);
  /// [N, C, F', T'] -> z_age [N, E]. Only for attentive variants.
  nn::Tensor are_extract(const nn::Tensor& x);
  /// One trunk pass shared by both branches.
  EmbeddingBatch embed(const nn::Tensor& feats);
  /// With labels the ArcFace margin is applied; nullptr means inference.
  HeadOutputs heads_forward(const EmbeddingBatch& e, const std::vector<int>* id_labels);
  /// Backpropagates through the heads, branches and trunk of the most recent
  /// embed() + heads_forward() pair, accumulating parameter gradients.
  void backward(const HeadGrads& g);

  /// Inference-mode embedding of one utterance. Requesting z_id or z_age from
  /// a variant without an age branch throws std::invalid_argument.
  std::vector<double> extract_embedding(const FeatureMatrix& feats, EmbeddingKind which);
  /// Mean of the embeddings of consecutive, near-equal windows of about
  /// `chunk_frames` frames.
  std::vector<double> extract_embedding_chunked(const FeatureMatrix& feats, int chunk_frames,
                                                EmbeddingKind which);
  /// z_id when the variant has an age branch, else z.
  EmbeddingKind default_embedding() const;

  nn::ParameterList parameters();
  void set_training(bool t);
  bool training() const { return training_; }
  void zero_grad();

  /// Attention weights [N, T'] of the last attentive forward.
  const nn::Tensor& attention() const { return asp_.attention(); }
  /// Final projection of the age branch (attentive or residual).
  nn::Linear& age_projection();

 private:
  ModelConfig cfg_;
  bool training_ = true;
  nn::ResNetTrunk trunk_;
  nn::StatsPool gsp_;
  nn::Linear emb_fc_;
  nn::AttentiveStatsPool asp_;
  nn::Linear are_fc_;
  nn::Linear residual_fc_;
  nn::Linear softmax_head_;
  ArcFaceHead arcface_head_;
  nn::MlpHead age_head_;
  nn::MlpHead adv_head_;
  std::vector<int> map_shape_;  // trunk output shape of the last forward
};

/// Everything needed to resume or evaluate a run.
struct Checkpoint {
  ModelConfig config;
  int64_t step = 0;
  int epoch = 0;
  std::map<std::string, nn::Tensor> parameters;  // by hierarchical name
  std::map<std::string, nn::Tensor> optimizer;   // e.g. momentum buffers
};

Checkpoint capture_checkpoint(SpeakerModel& model, int64_t step, int epoch);
/// Copies parameter tensors into the model; names and shapes must match.
void restore_parameters(SpeakerModel& model, const Checkpoint& ck);

/// Binary container: "CASVCKPT", u32 version, u64 header length, JSON header
/// (config, step, epoch, tensor index), then little-endian float64 payload.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace casv

#endif  // CASV_MODEL_HPP_
