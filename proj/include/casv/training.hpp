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

#ifndef CASV_TRAINING_HPP_
#define CASV_TRAINING_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "casv/features.hpp"
#include "casv/losses.hpp"
#include "casv/metadata.hpp"
#include "casv/model.hpp"

namespace casv {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double base_lr = 0.1;
  double warmup_epochs = 2.0;
  int decay_step = 10;  // epochs
  double decay_factor = 0.1;
  double stop_lr = 1e-5;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 128;
  double chunk_seconds = 2.0;
  uint64_t seed = 0;
  /// Hard cap on epochs; 0 means run until the stop rule fires.
  int max_epochs = 0;
  LossWeights loss_weights;
  /// Reweight the age loss by inverse group frequency (off by default).
  bool age_class_weights = false;
  /// Speed-perturbed copies become new speaker classes (off by default).
  bool relabel_speed = false;
  AugmentationConfig augmentation = no_augmentation();
  LogMelOptions features;
  /// Write a checkpoint at the end of every epoch.
  bool checkpoint_every_epoch = true;

  static AugmentationConfig no_augmentation();
  void validate() const;
};

/// Linear warm-up from 0 to base_lr over warmup_epochs, then
/// base_lr * decay_factor^floor((epoch - warmup) / decay_step).
double lr_at(double epoch, const TrainConfig& cfg);

/// True once the scheduled rate has dropped below stop_lr (with a relative
/// tolerance of 1e-9 so that rates equal to stop_lr up to rounding do not
/// stop training).
bool below_stop_lr(double lr, const TrainConfig& cfg);

/// Number of whole epochs run: the first integer epoch whose rate is below
/// stop_lr, capped by max_epochs when set.
int scheduled_epochs(const TrainConfig& cfg);

struct TrainingItem {
  UtteranceKey key;
  int y_id = 0;   // contiguous speaker index
  int y_age = 0;  // age group of the segment age
};

struct TrainingSet {
  std::vector<TrainingItem> items;
  std::vector<std::string> speakers;  // index -> speaker_id
};

/// Speakers are indexed in sorted order of their ids.
TrainingSet make_training_set(const MetadataTable& table, const SegmentAgeTable& segages);

/// Uniform sampling without replacement: one permutation per epoch, cut into
/// full batches (a trailing partial batch is dropped; it is covered by the
/// permutation but not trained on).
class BatchSampler {
 public:
  BatchSampler(size_t n_items, int batch_size, uint64_t seed);

  std::vector<size_t> permutation(int epoch) const;
  std::vector<std::vector<size_t>> batches(int epoch) const;
  size_t batches_per_epoch() const { return n_ / static_cast<size_t>(batch_size_); }

 private:
  size_t n_;
  int batch_size_;
  uint64_t seed_;
};

struct TrainingSample {
  FeatureMatrix features;
  int y_id = 0;
  AgeGroupId y_age;
};

/// Supplies utterance audio by key.
class AudioSource {
 public:
  virtual ~AudioSource() = default;
  virtual Waveform load(const UtteranceKey& key) const = 0;
};

/// Reads <root>/<speaker>/<segment>/<utterance>.wav.
class DirectoryAudioSource : public AudioSource {
 public:
  explicit DirectoryAudioSource(std::filesystem::path root) : root_(std::move(root)) {}
  Waveform load(const UtteranceKey& key) const override;

 private:
  std::filesystem::path root_;
};

class MemoryAudioSource : public AudioSource {
 public:
  explicit MemoryAudioSource(const std::map<UtteranceKey, Waveform>* audio) : audio_(audio) {}
  Waveform load(const UtteranceKey& key) const override;

 private:
  const std::map<UtteranceKey, Waveform>* audio_;
};

/// Crops, augments and featurises one item. Deterministic in `sample_seed`.
TrainingSample make_training_sample(const TrainingItem& item, const AudioSource& audio,
                                    const TrainConfig& cfg, const AugmentationCorpora& corpora,
                                    const LogMelExtractor& extractor, uint64_t sample_seed,
                                    int n_speakers);

/// SGD with momentum and decoupled-from-bias weight decay:
///   v <- mu v + (g + wd w);  w <- w - lr v.
class Sgd {
 public:
  Sgd(nn::ParameterList params, double momentum, double weight_decay);

  void step(double lr);
  std::map<std::string, nn::Tensor> state() const;
  void load_state(const std::map<std::string, nn::Tensor>& state);

 private:
  nn::ParameterList params_;
  double momentum_, weight_decay_;
  std::vector<nn::Tensor> velocity_;
};

/// One optimisation step's forward, loss and backward (no parameter update).
LossBreakdown compute_step_gradients(SpeakerModel& model, const std::vector<TrainingSample>& batch,
                                     const TrainConfig& cfg,
                                     const std::vector<double>& age_weights = {});

struct EpochSummary {
  int epoch = 0;
  double mean_total = 0.0;
  double mean_id = 0.0;
  double lr_end = 0.0;
};

struct TrainResult {
  std::vector<LossBreakdown> steps;
  std::vector<double> step_lr;
  std::vector<EpochSummary> epochs;
  int64_t total_steps = 0;
  std::filesystem::path last_checkpoint;
};

class Trainer {
 public:
  /// `model` must have n_speakers equal to the label space of `data` (times
  /// the speed-factor count when relabel_speed is on).
  Trainer(SpeakerModel& model, const TrainingSet& data, const AudioSource& audio, TrainConfig cfg,
          AugmentationCorpora corpora = {});

  /// Trains; writes metrics.csv and per-epoch checkpoints into `out_dir`
  /// when it is non-empty. `on_epoch` is called after each epoch.
  TrainResult run(const std::filesystem::path& out_dir,
                  const std::function<void(const EpochSummary&)>& on_epoch = {});

 private:
  SpeakerModel& model_;
  const TrainingSet& data_;
  const AudioSource& audio_;
  TrainConfig cfg_;
  AugmentationCorpora corpora_;
};

/// Label-space size implied by a training set and config.
int label_space(const TrainingSet& data, const TrainConfig& cfg);

}  // namespace casv

#endif  // CASV_TRAINING_HPP_
