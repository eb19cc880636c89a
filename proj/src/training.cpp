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

#include "casv/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "casv/rng.hpp"
#include "casv/text_util.hpp"

namespace casv {

using nn::Tensor;

AugmentationConfig TrainConfig::no_augmentation() {
  AugmentationConfig a;
  a.p_noise = a.p_reverb = a.p_gain = a.p_speed = 0.0;
  return a;
}

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
  if (!(warmup_epochs >= 0.0)) throw std::invalid_argument("warmup_epochs must be >= 0");
  if (decay_step < 1) throw std::invalid_argument("decay_step must be >= 1");
  if (!(decay_factor > 0.0 && decay_factor < 1.0)) {
    throw std::invalid_argument("decay_factor must be in (0, 1)");
  }
  if (!(stop_lr > 0.0 && stop_lr < base_lr)) {
    throw std::invalid_argument("stop_lr must be positive and below base_lr");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(chunk_seconds > 0.0)) throw std::invalid_argument("chunk_seconds must be positive");
  if (max_epochs < 0) throw std::invalid_argument("max_epochs must be >= 0");
  loss_weights.validate();
  augmentation.validate();
}

double lr_at(double epoch, const TrainConfig& cfg) {
  if (!(epoch >= 0.0)) throw std::invalid_argument("lr_at: epoch must be >= 0");
  if (epoch < cfg.warmup_epochs) return cfg.base_lr * epoch / cfg.warmup_epochs;
  const double k = std::floor((epoch - cfg.warmup_epochs) / cfg.decay_step);
  return cfg.base_lr * std::pow(cfg.decay_factor, k);
}

bool below_stop_lr(double lr, const TrainConfig& cfg) {
  return lr < cfg.stop_lr * (1.0 - 1e-9);
}

int scheduled_epochs(const TrainConfig& cfg) {
  cfg.validate();
  // Warm-up epochs have rates below stop_lr only at the very start; the rule
  // applies after warm-up.
  int e = static_cast<int>(std::ceil(cfg.warmup_epochs));
  while (!below_stop_lr(lr_at(e, cfg), cfg)) {
    ++e;
    if (cfg.max_epochs > 0 && e >= cfg.max_epochs) break;
  }
  return cfg.max_epochs > 0 ? std::min(e, cfg.max_epochs) : e;
}

TrainingSet make_training_set(const MetadataTable& table, const SegmentAgeTable& segages) {
  if (table.empty()) throw std::invalid_argument("training set: empty metadata table");
  std::set<std::string> ids;
  for (const auto& r : table) ids.insert(r.key.speaker_id);
  TrainingSet s;
  s.speakers.assign(ids.begin(), ids.end());
  std::map<std::string, int> index;
  for (size_t i = 0; i < s.speakers.size(); ++i) index[s.speakers[i]] = static_cast<int>(i);
  for (const auto& r : table) {
    s.items.push_back({r.key, index.at(r.key.speaker_id), assign_age_group(segages.age(r.key)).index});
  }
  return s;
}

BatchSampler::BatchSampler(size_t n_items, int batch_size, uint64_t seed)
    : n_(n_items), batch_size_(batch_size), seed_(seed) {
  if (n_items == 0) throw std::invalid_argument("batch sampler: no items");
  if (batch_size < 1) throw std::invalid_argument("batch sampler: batch size must be >= 1");
}

std::vector<size_t> BatchSampler::permutation(int epoch) const {
  std::vector<size_t> p(n_);
  for (size_t i = 0; i < n_; ++i) p[i] = i;
  Rng rng(derive_seed(seed_, static_cast<uint64_t>(epoch)));
  rng.shuffle(p);
  return p;
}

std::vector<std::vector<size_t>> BatchSampler::batches(int epoch) const {
  const auto p = permutation(epoch);
  std::vector<std::vector<size_t>> out;
  const size_t b = static_cast<size_t>(batch_size_);
  for (size_t i = 0; i + b <= p.size(); i += b) out.emplace_back(p.begin() + i, p.begin() + i + b);
  return out;
}

Waveform DirectoryAudioSource::load(const UtteranceKey& key) const {
  return read_wav(root_ / key.path());
}

Waveform MemoryAudioSource::load(const UtteranceKey& key) const {
  const auto it = audio_->find(key);
  if (it == audio_->end()) throw FeatureError("no audio for " + key.str());
  return it->second;
}

int label_space(const TrainingSet& data, const TrainConfig& cfg) {
  const int n = static_cast<int>(data.speakers.size());
  return cfg.relabel_speed ? n * static_cast<int>(cfg.augmentation.speed_factors.size()) : n;
}

TrainingSample make_training_sample(const TrainingItem& item, const AudioSource& audio,
                                    const TrainConfig& cfg, const AugmentationCorpora& corpora,
                                    const LogMelExtractor& extractor, uint64_t sample_seed,
                                    int n_speakers) {
  Waveform w = audio.load(item.key);
  TrainingSample s;
  s.y_id = item.y_id;
  s.y_age = AgeGroupId{item.y_age};
  if (!cfg.augmentation.disabled()) {
    AugmentationConfig aug = cfg.augmentation;
    if (cfg.relabel_speed) {
      // Speed is drawn here so the chosen factor can select the label copy.
      Rng rng(derive_seed(sample_seed, "speed"));
      const auto& factors = aug.speed_factors;
      size_t idx = static_cast<size_t>(
          std::find(factors.begin(), factors.end(), 1.0) - factors.begin());
      if (rng.bernoulli(aug.p_speed)) idx = rng.uniform_index(factors.size());
      if (factors[idx] != 1.0) w = change_speed(w, factors[idx]);
      s.y_id = item.y_id + n_speakers * static_cast<int>(idx);
      aug.p_speed = 0.0;
    }
    w = augment(w, aug, corpora, derive_seed(sample_seed, "augment"));
  }
  w = sample_training_chunk(w, cfg.chunk_seconds, derive_seed(sample_seed, "crop"));
  s.features = extractor.compute(w);
  return s;
}

Sgd::Sgd(nn::ParameterList params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (auto* p : params_) velocity_.emplace_back(p->value.shape());
}

void Sgd::step(double lr) {
  for (size_t k = 0; k < params_.size(); ++k) {
    nn::Parameter& p = *params_[k];
    if (!p.trainable) continue;
    Tensor& v = velocity_[k];
    const double wd = p.weight_decay ? weight_decay_ : 0.0;
    for (size_t i = 0; i < p.value.size(); ++i) {
      v[i] = momentum_ * v[i] + p.grad[i] + wd * p.value[i];
      p.value[i] -= lr * v[i];
    }
  }
}

std::map<std::string, Tensor> Sgd::state() const {
  std::map<std::string, Tensor> s;
  for (size_t k = 0; k < params_.size(); ++k) {
    if (params_[k]->trainable) s["momentum/" + params_[k]->name] = velocity_[k];
  }
  return s;
}

void Sgd::load_state(const std::map<std::string, Tensor>& state) {
  for (size_t k = 0; k < params_.size(); ++k) {
    const auto it = state.find("momentum/" + params_[k]->name);
    if (it == state.end()) continue;
    if (!it->second.same_shape(velocity_[k])) {
      throw std::runtime_error("optimizer state shape mismatch for " + params_[k]->name);
    }
    velocity_[k] = it->second;
  }
}

LossBreakdown compute_step_gradients(SpeakerModel& model, const std::vector<TrainingSample>& batch,
                                     const TrainConfig& cfg,
                                     const std::vector<double>& age_weights) {
  std::vector<const FeatureMatrix*> feats;
  std::vector<int> y_id, y_age;
  for (const auto& s : batch) {
    feats.push_back(&s.features);
    y_id.push_back(s.y_id);
    y_age.push_back(s.y_age.index);
  }
  const auto variant = model.config().variant;
  const auto e = model.embed(features_to_batch(feats));
  const auto h = model.heads_forward(e, &y_id);
  const auto id = cross_entropy(h.id_logits, y_id);
  HeadGrads g;
  g.id = id.grad;
  double l_age = 0.0, l_adv = 0.0;
  if (has_age_branch(variant)) {
    auto a = age_group_loss(h.age_logits, y_age, age_weights);
    l_age = a.loss;
    for (auto& v : a.grad.values()) v *= cfg.loss_weights.lambda_age;
    g.age = std::move(a.grad);
  }
  if (has_adversary(variant)) {
    auto d = age_group_loss(h.adv_logits, y_age);
    l_adv = d.loss;
    for (auto& v : d.grad.values()) v *= cfg.loss_weights.lambda_grl;
    g.adv = std::move(d.grad);
  }
  const LossBreakdown b = total_loss(id.loss, l_age, l_adv, cfg.loss_weights);
  model.backward(g);
  return b;
}

Trainer::Trainer(SpeakerModel& model, const TrainingSet& data, const AudioSource& audio,
                 TrainConfig cfg, AugmentationCorpora corpora)
    : model_(model), data_(data), audio_(audio), cfg_(std::move(cfg)), corpora_(std::move(corpora)) {
  cfg_.validate();
  if (data_.items.empty()) throw std::invalid_argument("trainer: empty training set");
  if (model_.config().n_speakers != label_space(data_, cfg_)) {
    throw std::invalid_argument("trainer: model has " + std::to_string(model_.config().n_speakers) +
                                " speaker classes, data needs " +
                                std::to_string(label_space(data_, cfg_)));
  }
}

TrainResult Trainer::run(const std::filesystem::path& out_dir,
                         const std::function<void(const EpochSummary&)>& on_epoch) {
  const int n_epochs = scheduled_epochs(cfg_);
  const BatchSampler sampler(data_.items.size(), cfg_.batch_size, derive_seed(cfg_.seed, "batches"));
  const size_t per_epoch = sampler.batches_per_epoch();
  if (per_epoch == 0) {
    throw TrainingError("training set of " + std::to_string(data_.items.size()) +
                        " utterances is smaller than one batch of " +
                        std::to_string(cfg_.batch_size));
  }
  std::vector<double> age_weights;
  if (cfg_.age_class_weights) {
    std::vector<double> counts(AgeGroupId::kCount, 0.0);
    for (const auto& it : data_.items) counts[static_cast<size_t>(it.y_age)] += 1.0;
    const double present = static_cast<double>(std::count_if(counts.begin(), counts.end(), [](double c) { return c > 0; }));
    age_weights.assign(AgeGroupId::kCount, 1.0);
    for (size_t g = 0; g < counts.size(); ++g) {
      if (counts[g] > 0) {
        age_weights[g] = static_cast<double>(data_.items.size()) / (present * counts[g]);
      }
    }
  }

  std::ofstream metrics;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir / "checkpoints");
    metrics.open(out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw TrainingError("cannot write " + (out_dir / "metrics.csv").string());
    metrics << "step,L_id,L_age,L_adv,L_total,lr\n";
  }

  Sgd opt(model_.parameters(), cfg_.momentum, cfg_.weight_decay);
  const LogMelExtractor extractor(cfg_.features);
  const int n_labels = static_cast<int>(data_.speakers.size());
  model_.set_training(true);
  TrainResult result;
  int64_t step = 0;
  for (int epoch = 0; epoch < n_epochs; ++epoch) {
    const auto batches = sampler.batches(epoch);
    EpochSummary summary;
    summary.epoch = epoch;
    for (size_t b = 0; b < batches.size(); ++b) {
      const double lr = lr_at(epoch + static_cast<double>(b) / static_cast<double>(per_epoch), cfg_);
      std::vector<TrainingSample> samples;
      samples.reserve(batches[b].size());
      for (size_t pos = 0; pos < batches[b].size(); ++pos) {
        const uint64_t s = derive_seed(cfg_.seed, static_cast<uint64_t>(epoch), b, pos);
        samples.push_back(make_training_sample(data_.items[batches[b][pos]], audio_, cfg_, corpora_,
                                               extractor, s, n_labels));
      }
      model_.zero_grad();
      LossBreakdown loss;
      try {
        loss = compute_step_gradients(model_, samples, cfg_, age_weights);
      } catch (const NonFiniteLossError& e) {
        if (!out_dir.empty()) {
          std::ofstream(out_dir / "train.log", std::ios::app)
              << "aborted at step " << step << ": " << e.what() << "\n";
        }
        throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what());
      }
      opt.step(lr);
      if (metrics.is_open()) {
        metrics << step << ',' << format_double(loss.l_id) << ',' << format_double(loss.l_age) << ','
                << format_double(loss.l_adv) << ',' << format_double(loss.l_total) << ','
                << format_double(lr) << '\n';
      }
      result.steps.push_back(loss);
      result.step_lr.push_back(lr);
      summary.mean_total += loss.l_total;
      summary.mean_id += loss.l_id;
      summary.lr_end = lr;
      ++step;
    }
    summary.mean_total /= static_cast<double>(batches.size());
    summary.mean_id /= static_cast<double>(batches.size());
    result.epochs.push_back(summary);
    if (!out_dir.empty() && (cfg_.checkpoint_every_epoch || epoch + 1 == n_epochs)) {
      auto ck = capture_checkpoint(model_, step, epoch + 1);
      ck.optimizer = opt.state();
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch + 1);
      result.last_checkpoint = out_dir / "checkpoints" / name;
      save_checkpoint(ck, result.last_checkpoint);
    }
    if (on_epoch) on_epoch(summary);
  }
  if (metrics.is_open()) metrics.flush();
  result.total_steps = step;
  model_.set_training(false);
  return result;
}

}  // namespace casv
