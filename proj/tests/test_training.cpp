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

#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "casv/synth.hpp"
#include "test_util.hpp"

namespace casv {
namespace {

ToyCorpusOptions tiny_corpus_options(uint64_t seed, int n_speakers = 4, int utts = 3) {
  ToyCorpusOptions o;
  o.seed = seed;
  o.n_speakers = n_speakers;
  o.utterances_per_segment = utts;
  o.voice.utterance_seconds = 0.6;
  return o;
}

ModelConfig tiny_model(ModelVariant v, int n_speakers, uint64_t seed) {
  ModelConfig c;
  c.variant = v;
  c.trunk = {{4, 8}, {1, 1}};
  c.n_mels = 16;
  c.embedding_dim = 16;
  c.asp_hidden = 8;
  c.head_hidden = 8;
  c.n_speakers = n_speakers;
  c.seed = seed;
  return c;
}

TrainConfig tiny_train_config(uint64_t seed) {
  TrainConfig t;
  t.batch_size = 4;
  t.chunk_seconds = 0.3;
  t.features.n_mels = 16;
  t.seed = seed;
  t.max_epochs = 2;
  return t;
}

struct Fixture {
  ToyCorpus corpus;
  SegmentAgeTable segages;
  TrainingSet data;
  MemoryAudioSource audio;

  explicit Fixture(const ToyCorpusOptions& o)
      : corpus(synthesize_toy_corpus(o)),
        segages(compute_segment_ages(corpus.table)),
        data(make_training_set(corpus.table, segages)),
        audio(&corpus.audio) {}
};

// Independent age binning: decades 21-30, 31-40, ... with open ends.
int oracle_age_group(double age) {
  const int y = static_cast<int>(age);
  if (y <= 20) return 0;
  if (y >= 71) return 6;
  for (int g = 1; g <= 5; ++g) {
    if (y >= 10 * g + 11 && y <= 10 * g + 20) return g;
  }
  return -1;
}

}  // namespace

TEST_CASE("learning rate schedule values") {
  const TrainConfig cfg;
  CHECK(lr_at(0.0, cfg) == 0.0);
  CHECK(lr_at(1.0, cfg) == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(lr_at(2.0, cfg) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(lr_at(11.99, cfg) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(lr_at(12.0, cfg) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(lr_at(22.0, cfg) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(32.0, cfg) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at(42.0, cfg) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK_THROWS_AS(lr_at(-0.5, cfg), std::invalid_argument);
}

TEST_CASE("learning rate is continuous at the end of warm-up and non-increasing after it") {
  const TrainConfig cfg;
  const double eps = 1e-9;
  CHECK(std::abs(lr_at(cfg.warmup_epochs - eps, cfg) - lr_at(cfg.warmup_epochs, cfg)) < 1e-8);
  double prev = lr_at(cfg.warmup_epochs, cfg);
  for (double e = cfg.warmup_epochs; e < 80.0; e += 0.01) {
    const double lr = lr_at(e, cfg);
    CHECK(lr <= prev);
    prev = lr;
  }
  // Warm-up is linear and increasing.
  for (double e = 0.0; e < cfg.warmup_epochs; e += 0.05) {
    CHECK(lr_at(e, cfg) == doctest::Approx(cfg.base_lr * e / cfg.warmup_epochs).epsilon(1e-12));
  }
}

TEST_CASE("training halts once the rate drops below the stop rate") {
  const TrainConfig cfg;
  // Rates at integer epochs: 0.1 (2..11), 1e-2, 1e-3, 1e-4, 1e-5 (42..51), 1e-6 (52).
  CHECK_FALSE(below_stop_lr(lr_at(51.0, cfg), cfg));
  CHECK(below_stop_lr(lr_at(52.0, cfg), cfg));
  CHECK(scheduled_epochs(cfg) == 52);

  // Oracle: walk the closed-form rate until it is below stop_lr.
  TrainConfig other;
  other.decay_step = 3;
  other.decay_factor = 0.5;
  other.stop_lr = 1e-3;
  int e = 2;
  while (0.1 * std::pow(0.5, std::floor((e - 2) / 3.0)) >= 1e-3) ++e;
  CHECK(scheduled_epochs(other) == e);

  other.max_epochs = 5;
  CHECK(scheduled_epochs(other) == 5);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.decay_factor = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.stop_lr = 0.2;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("batch sampler: full batches and per-epoch permutations") {
  const BatchSampler s(37, 8, 5);
  CHECK(s.batches_per_epoch() == 4);
  for (int epoch = 0; epoch < 3; ++epoch) {
    const auto p = s.permutation(epoch);
    std::set<size_t> seen(p.begin(), p.end());
    CHECK(p.size() == 37);
    CHECK(seen.size() == 37);
    CHECK(*seen.rbegin() == 36);
    const auto b = s.batches(epoch);
    CHECK(b.size() == 4);
    for (const auto& batch : b) CHECK(batch.size() == 8);
    // Batches are the leading slices of the permutation.
    for (size_t i = 0; i < b.size(); ++i) {
      for (size_t j = 0; j < 8; ++j) CHECK(b[i][j] == p[i * 8 + j]);
    }
  }
  CHECK(s.permutation(0) != s.permutation(1));
  CHECK(s.permutation(2) == BatchSampler(37, 8, 5).permutation(2));
  CHECK_THROWS_AS(BatchSampler(0, 8, 1), std::invalid_argument);
}

TEST_CASE("training set labels") {
  ToyCorpusOptions o = tiny_corpus_options(3, 6, 2);
  const auto table = toy_metadata(o);
  const auto segages = compute_segment_ages(table);
  const auto set = make_training_set(table, segages);
  REQUIRE(set.items.size() == table.size());
  CHECK(set.speakers.size() == 6);
  CHECK(std::is_sorted(set.speakers.begin(), set.speakers.end()));
  for (size_t i = 0; i < set.items.size(); ++i) {
    const auto& it = set.items[i];
    CHECK(set.speakers[static_cast<size_t>(it.y_id)] == it.key.speaker_id);
    // Segment age of the toy table is the mean of its utterance ages.
    double sum = 0.0;
    int n = 0;
    for (const auto& r : table) {
      if (r.key.speaker_id == it.key.speaker_id && r.key.segment_id == it.key.segment_id) {
        sum += r.age;
        ++n;
      }
    }
    CHECK(it.y_age == oracle_age_group(sum / n));
  }
  CHECK_THROWS_AS(make_training_set({}, segages), std::invalid_argument);
}

TEST_CASE("sgd: zero rate leaves parameters bit-identical; momentum update by hand") {
  Fixture f(tiny_corpus_options(1));
  SpeakerModel model(tiny_model(ModelVariant::kAdal, 4, 1));
  const auto before = capture_checkpoint(model, 0, 0);
  auto params = model.parameters();
  for (auto* p : params) {
    for (auto& g : p->grad.values()) g = 0.25;
  }
  Sgd opt(params, 0.9, 1e-4);
  opt.step(0.0);
  const auto after = capture_checkpoint(model, 0, 0);
  CHECK(before.parameters == after.parameters);

  nn::Parameter w{"w", nn::Tensor({2}), nn::Tensor({2})};
  w.value[0] = 1.0;
  w.value[1] = -2.0;
  w.grad[0] = 0.5;
  w.grad[1] = 0.1;
  Sgd one({&w}, 0.9, 0.01);
  one.step(0.1);
  // v1 = g + wd w0; w1 = w0 - lr v1
  const double v1 = 0.5 + 0.01 * 1.0;
  const double w1 = 1.0 - 0.1 * v1;
  CHECK(w.value[0] == doctest::Approx(w1).epsilon(1e-15));
  one.step(0.1);
  const double v2 = 0.9 * v1 + 0.5 + 0.01 * w1;
  CHECK(w.value[0] == doctest::Approx(w1 - 0.1 * v2).epsilon(1e-15));
  CHECK(one.state().at("momentum/w")[0] == doctest::Approx(v2).epsilon(1e-15));
}

TEST_CASE("training sample is deterministic in its seed") {
  Fixture f(tiny_corpus_options(2));
  TrainConfig cfg = tiny_train_config(2);
  cfg.augmentation.p_gain = 1.0;
  cfg.augmentation.p_speed = 0.5;
  const LogMelExtractor ex(cfg.features);
  const auto a = make_training_sample(f.data.items[0], f.audio, cfg, {}, ex, 11, 4);
  const auto b = make_training_sample(f.data.items[0], f.audio, cfg, {}, ex, 11, 4);
  const auto c = make_training_sample(f.data.items[0], f.audio, cfg, {}, ex, 12, 4);
  CHECK(a.features == b.features);
  CHECK_FALSE(a.features == c.features);
  CHECK(a.features.n_frames == frame_count(static_cast<size_t>(0.3 * 16000)));
  CHECK(a.y_id == f.data.items[0].y_id);

  // With relabelling, the label copy follows the drawn speed factor.
  cfg.relabel_speed = true;
  cfg.augmentation.p_speed = 1.0;
  std::set<int> labels;
  for (uint64_t s = 0; s < 40; ++s) {
    const auto x = make_training_sample(f.data.items[0], f.audio, cfg, {}, ex, s, 4);
    labels.insert(x.y_id);
    CHECK((x.y_id - f.data.items[0].y_id) % 4 == 0);
  }
  CHECK(labels.size() == 3);
}

TEST_CASE("two runs with the same seed write identical metrics") {
  Fixture f(tiny_corpus_options(4));
  testing::TempDir dir;
  const TrainConfig cfg = tiny_train_config(4);
  for (const char* name : {"a", "b"}) {
    SpeakerModel model(tiny_model(ModelVariant::kAdal, 4, 4));
    Trainer(model, f.data, f.audio, cfg).run(dir / name);
  }
  const auto a = testing::read_file(dir / "a" / "metrics.csv");
  const auto b = testing::read_file(dir / "b" / "metrics.csv");
  CHECK(a == b);
  CHECK(a.rfind("step,L_id,L_age,L_adv,L_total,lr\n", 0) == 0);
  // 24 utterances, batch 4: 6 steps per epoch, 2 epochs.
  CHECK(std::count(a.begin(), a.end(), '\n') == 13);

  TrainConfig other = cfg;
  other.seed = 5;
  SpeakerModel model(tiny_model(ModelVariant::kAdal, 4, 4));
  Trainer(model, f.data, f.audio, other).run(dir / "c");
  CHECK(testing::read_file(dir / "c" / "metrics.csv") != a);
}

TEST_CASE("per-epoch checkpoints restore the trained model") {
  Fixture f(tiny_corpus_options(6));
  testing::TempDir dir;
  SpeakerModel model(tiny_model(ModelVariant::kAre, 4, 6));
  const auto r = Trainer(model, f.data, f.audio, tiny_train_config(6)).run(dir.path());
  CHECK(std::filesystem::exists(dir / "checkpoints" / "epoch_001.ckpt"));
  CHECK(r.last_checkpoint == dir / "checkpoints" / "epoch_002.ckpt");
  const auto ck = load_checkpoint(r.last_checkpoint);
  CHECK(ck.epoch == 2);
  CHECK(ck.step == r.total_steps);
  CHECK(!ck.optimizer.empty());
  SpeakerModel copy(ck.config);
  restore_parameters(copy, ck);
  const auto feats = LogMelExtractor(tiny_train_config(6).features).compute(f.corpus.audio.begin()->second);
  CHECK(model.extract_embedding(feats, EmbeddingKind::kZId) ==
        copy.extract_embedding(feats, EmbeddingKind::kZId));
}

TEST_CASE("stop rule ends training after the last epoch at or above stop_lr") {
  Fixture f(tiny_corpus_options(7));
  TrainConfig cfg = tiny_train_config(7);
  cfg.max_epochs = 0;
  cfg.warmup_epochs = 0.0;
  cfg.decay_step = 1;
  cfg.stop_lr = 1e-3;
  SpeakerModel model(tiny_model(ModelVariant::kBaselineArcface, 4, 7));
  const auto r = Trainer(model, f.data, f.audio, cfg).run("");
  CHECK(r.epochs.size() == 3);
  for (double lr : r.step_lr) CHECK_FALSE(below_stop_lr(lr, cfg));
  CHECK(r.step_lr.back() == doctest::Approx(1e-3).epsilon(1e-12));
}

TEST_CASE("zero auxiliary weights: adversarial variant follows the baseline exactly") {
  Fixture f(tiny_corpus_options(8));
  TrainConfig cfg = tiny_train_config(8);
  cfg.loss_weights = {0.0, 0.0};
  SpeakerModel base(tiny_model(ModelVariant::kBaselineArcface, 4, 8));
  SpeakerModel grl(tiny_model(ModelVariant::kGrl, 4, 8));
  const auto rb = Trainer(base, f.data, f.audio, cfg).run("");
  const auto rg = Trainer(grl, f.data, f.audio, cfg).run("");
  REQUIRE(rb.steps.size() == rg.steps.size());
  for (size_t i = 0; i < rb.steps.size(); ++i) {
    CHECK(rb.steps[i].l_id == rg.steps[i].l_id);
    CHECK(rg.steps[i].l_total == rg.steps[i].l_id);
  }
  const auto feats = LogMelExtractor(cfg.features).compute(f.corpus.audio.begin()->second);
  CHECK(base.extract_embedding(feats, EmbeddingKind::kZ) ==
        grl.extract_embedding(feats, EmbeddingKind::kZ));
}

TEST_CASE("zero auxiliary weights: age and adversary heads receive no gradient") {
  Fixture f(tiny_corpus_options(9));
  TrainConfig cfg = tiny_train_config(9);
  cfg.loss_weights = {0.0, 0.0};
  SpeakerModel model(tiny_model(ModelVariant::kAdal, 4, 9));
  model.set_training(true);
  const LogMelExtractor ex(cfg.features);
  std::vector<TrainingSample> batch;
  for (size_t i = 0; i < 4; ++i) {
    batch.push_back(make_training_sample(f.data.items[i * 3], f.audio, cfg, {}, ex, i, 4));
  }
  model.zero_grad();
  const auto loss = compute_step_gradients(model, batch, cfg);
  CHECK(loss.l_total == loss.l_id);
  CHECK(loss.l_age > 0.0);
  CHECK(loss.l_adv > 0.0);
  bool any_id_grad = false;
  for (auto* p : model.parameters()) {
    const bool aux = p->name.rfind("age_head", 0) == 0 || p->name.rfind("adv_head", 0) == 0;
    double norm = 0.0;
    for (double g : p->grad.values()) norm += g * g;
    if (aux && p->trainable) CHECK_MESSAGE(norm == 0.0, p->name);
    if (p->name.rfind("id_head", 0) == 0) any_id_grad = any_id_grad || norm > 0.0;
  }
  CHECK(any_id_grad);
}

TEST_CASE("non-finite loss aborts and names the step") {
  Fixture f(tiny_corpus_options(10));
  testing::TempDir dir;
  SpeakerModel model(tiny_model(ModelVariant::kAdal, 4, 10));
  for (auto* p : model.parameters()) {
    if (p->name.rfind("id_head", 0) == 0) p->value[0] = std::numeric_limits<double>::quiet_NaN();
  }
  try {
    Trainer(model, f.data, f.audio, tiny_train_config(10)).run(dir.path());
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
  CHECK(testing::read_file(dir / "train.log").find("step 0") != std::string::npos);
}

TEST_CASE("trainer rejects a mismatched label space and undersized data") {
  Fixture f(tiny_corpus_options(11));
  SpeakerModel wrong(tiny_model(ModelVariant::kAdal, 5, 11));
  CHECK_THROWS_AS(Trainer(wrong, f.data, f.audio, tiny_train_config(11)), std::invalid_argument);
  SpeakerModel model(tiny_model(ModelVariant::kAdal, 4, 11));
  TrainConfig big = tiny_train_config(11);
  big.batch_size = 100;
  CHECK_THROWS_AS(Trainer(model, f.data, f.audio, big).run(""), TrainingError);
  TrainConfig relabel = tiny_train_config(11);
  relabel.relabel_speed = true;
  CHECK(label_space(f.data, relabel) == 12);
}

TEST_CASE("toy corpus: epoch loss strictly decreases over the first five epochs") {
  const int n_seeds = 20;
  int decreasing = 0;
  for (uint64_t seed = 0; seed < n_seeds; ++seed) {
    ToyCorpusOptions o = tiny_corpus_options(100 + seed, 20, 4);
    o.voice.utterance_seconds = 0.5;
    Fixture f(o);
    TrainConfig cfg = tiny_train_config(seed);
    cfg.batch_size = 16;
    cfg.max_epochs = 5;
    cfg.chunk_seconds = 0.4;
    cfg.base_lr = 0.01;  // the toy learning rate; 0.1 overshoots once warm-up ends
    SpeakerModel model(tiny_model(ModelVariant::kAdal, 20, seed));
    const auto r = Trainer(model, f.data, f.audio, cfg).run("");
    bool ok = true;
    for (size_t e = 1; e < r.epochs.size(); ++e) {
      ok = ok && r.epochs[e].mean_total < r.epochs[e - 1].mean_total;
    }
    decreasing += ok ? 1 : 0;
  }
  MESSAGE("seeds with strictly decreasing loss: " << decreasing << "/" << n_seeds);
  CHECK(decreasing >= 19);
}

}  // namespace casv
