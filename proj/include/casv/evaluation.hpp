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

// Cosine trial scoring, EER / minDCF, and a linear age probe.

#ifndef CASV_EVALUATION_HPP_
#define CASV_EVALUATION_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "casv/features.hpp"
#include "casv/model.hpp"
#include "casv/protocol.hpp"
#include "casv/training.hpp"

namespace casv {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// dot(a, b) / (|a| |b|). Throws std::invalid_argument on a size mismatch or
/// a zero-norm vector.
double cosine_score(const std::vector<double>& a, const std::vector<double>& b);

struct ScoreSet {
  std::vector<double> scores;
  std::vector<bool> is_target;

  void add(double score, bool target) {
    scores.push_back(score);
    is_target.push_back(target);
  }
  size_t n_target() const;
  size_t n_nontarget() const;
};

/// One threshold of the sweep. Accept when score >= threshold.
struct OperatingPoint {
  double threshold = 0.0;
  double p_miss = 0.0;
  double p_fa = 0.0;
};

/// Thresholds below the lowest score, at midpoints between consecutive
/// distinct scores, and above the highest score; p_miss non-decreasing.
std::vector<OperatingPoint> operating_points(const ScoreSet& s);

struct EerResult {
  double eer = 0.0;  // percent
  double threshold = 0.0;
};

/// Rate where p_miss = p_fa, linearly interpolated between the two adjacent
/// operating points that bracket the crossing.
EerResult compute_eer(const ScoreSet& s);

struct DcfParams {
  double p_target = 0.01;
  double c_fa = 1.0;
  double c_miss = 1.0;
};

struct DcfResult {
  double min_dcf = 0.0;
  double threshold = 0.0;
};

/// Normalized cost of accepting scores >= threshold.
double normalized_dcf(const ScoreSet& s, double threshold, const DcfParams& p = {});
DcfResult compute_min_dcf(const ScoreSet& s, const DcfParams& p = {});

struct EvalResult {
  double eer = 0.0;  // percent
  double eer_threshold = 0.0;
  double min_dcf = 0.0;
  double dcf_threshold = 0.0;
  DcfParams dcf;
  std::string protocol;
  std::string checkpoint_id;
  size_t n_target = 0;
  size_t n_nontarget = 0;
};

EvalResult evaluate_scores(const ScoreSet& s, const DcfParams& p = {});

/// Source of utterance embeddings for trial scoring.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  /// Throws EvaluationError when the key has no embedding.
  virtual const std::vector<double>& get(const UtteranceKey& key) = 0;
};

/// Precomputed embeddings; text form is one `<key> v1 ... vD` line each.
class EmbeddingStore : public EmbeddingProvider {
 public:
  void put(const UtteranceKey& key, std::vector<double> v);
  bool contains(const UtteranceKey& key) const { return map_.count(key) != 0; }
  const std::vector<double>& get(const UtteranceKey& key) override;
  size_t size() const { return map_.size(); }
  size_t dim() const { return map_.empty() ? 0 : map_.begin()->second.size(); }
  const std::map<UtteranceKey, std::vector<double>>& entries() const { return map_; }

  void save(const std::filesystem::path& path) const;
  static EmbeddingStore load(const std::filesystem::path& path);

 private:
  std::map<UtteranceKey, std::vector<double>> map_;
};

/// Embeds utterances with a model on first request and caches by key.
class ModelEmbedder : public EmbeddingProvider {
 public:
  /// `chunk_frames` > 0 embeds long inputs chunk-wise (mean of chunks).
  ModelEmbedder(SpeakerModel& model, const AudioSource& audio, LogMelOptions features,
                EmbeddingKind kind, int chunk_frames = 0);
  ~ModelEmbedder() override;

  const std::vector<double>& get(const UtteranceKey& key) override;
  const EmbeddingStore& cache() const { return cache_; }
  size_t computed() const { return computed_; }

 private:
  SpeakerModel& model_;
  const AudioSource& audio_;
  std::unique_ptr<LogMelExtractor> extractor_;
  EmbeddingKind kind_;
  int chunk_frames_;
  EmbeddingStore cache_;
  size_t computed_ = 0;
};

/// Scores every trial with cosine similarity. `scores`, when given,
/// receives one score per trial in input order. The first trial side
/// without an embedding is reported by key.
EvalResult evaluate_protocol(const std::vector<Trial>& trials, EmbeddingProvider& embeddings,
                             const std::string& protocol_name = "",
                             const std::string& checkpoint_id = "",
                             std::vector<double>* scores = nullptr, const DcfParams& p = {});

/// `<label> <enroll> <test> <score>` per line, label 1 = target.
void write_scores(const std::vector<Trial>& trials, const std::vector<double>& scores,
                  const std::filesystem::path& path);
/// `key=value` lines.
void write_result(const EvalResult& r, const std::filesystem::path& path);
std::map<std::string, std::string> read_kv_file(const std::filesystem::path& path);
/// `threshold p_miss p_fa` per line.
void write_operating_points(const ScoreSet& s, const std::filesystem::path& path);

struct ProbeOptions {
  double train_fraction = 0.8;
  /// Inverse L2 strength: the objective is sum of cross-entropies plus
  /// 0.5 / c * |W|^2 (bias unpenalized).
  double c = 1.0;
  int max_iterations = 2000;
  double tolerance = 1e-7;  // gradient infinity norm
};

struct ProbeResult {
  double accuracy = 0.0;          // held-out, in [0, 1]
  double majority_rate = 0.0;     // held-out rate of the train-majority group
  size_t n_train = 0;
  size_t n_test = 0;
  int iterations = 0;
  uint64_t split_seed = 0;
};

/// Multinomial logistic regression from standardized embeddings to age
/// groups, trained on a stratified split and scored on the remainder.
ProbeResult age_probe(const std::vector<std::vector<double>>& embeddings,
                      const std::vector<int>& age_groups, uint64_t split_seed,
                      const ProbeOptions& options = {});

}  // namespace casv

#endif  // CASV_EVALUATION_HPP_
