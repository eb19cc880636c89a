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

#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "casv/evaluation.hpp"
#include "casv/protocol.hpp"
#include "casv/text_util.hpp"

namespace casv::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config

namespace {

void check_keys(const json& j, const std::string& section, const std::set<std::string>& keys) {
  if (!j.is_object()) throw ConfigError("config: '" + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) throw ConfigError("config: unknown key '" + section + "." + k + "'");
  }
}

template <typename T>
void read(const json& j, const std::string& section, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value for '" + section + "." + key + "'");
  }
}

void read_path(const json& j, const char* key, fs::path& dst) {
  std::string s;
  read(j, "paths", key, s);
  if (j.contains(key)) dst = s;
}

void read_range(const json& j, const std::string& section, const char* key, double& lo, double& hi) {
  std::vector<double> v;
  read(j, section, key, v);
  if (!j.contains(key)) return;
  if (v.size() != 2) throw ConfigError("config: '" + section + "." + key + "' must be [lo, hi]");
  lo = v[0];
  hi = v[1];
}

}  // namespace

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(j, "<root>",
             {"seed", "paths", "model", "train", "features", "augmentation", "protocol", "evaluate",
              "synth"});
  RunConfig c;
  read(j, "<root>", "seed", c.seed);

  if (j.contains("paths")) {
    const auto& p = j["paths"];
    check_keys(p, "paths",
               {"metadata", "audio_root", "noise_corpus", "rir_corpus", "trials", "embeddings",
                "checkpoint", "output_dir"});
    read_path(p, "metadata", c.paths.metadata);
    read_path(p, "audio_root", c.paths.audio_root);
    read_path(p, "noise_corpus", c.paths.noise_corpus);
    read_path(p, "rir_corpus", c.paths.rir_corpus);
    read_path(p, "trials", c.paths.trials);
    read_path(p, "embeddings", c.paths.embeddings);
    read_path(p, "checkpoint", c.paths.checkpoint);
    read_path(p, "output_dir", c.paths.output_dir);
  }

  if (j.contains("features")) {
    const auto& f = j["features"];
    check_keys(f, "features",
               {"sample_rate", "frame_length", "frame_shift", "n_fft", "n_mels", "low_hz", "high_hz",
                "preemphasis", "mean_normalize"});
    auto& o = c.train.features;
    read(f, "features", "sample_rate", o.sample_rate);
    read(f, "features", "frame_length", o.frame_length);
    read(f, "features", "frame_shift", o.frame_shift);
    read(f, "features", "n_fft", o.n_fft);
    read(f, "features", "n_mels", o.n_mels);
    read(f, "features", "low_hz", o.low_hz);
    read(f, "features", "high_hz", o.high_hz);
    read(f, "features", "preemphasis", o.preemphasis);
    read(f, "features", "mean_normalize", o.mean_normalize);
  }

  if (j.contains("model")) {
    json m = j["model"];
    if (!m.is_object()) throw ConfigError("config: 'model' must be an object");
    if (m.contains("n_mels") && m["n_mels"] != c.train.features.n_mels) {
      throw ConfigError("config: model.n_mels differs from features.n_mels");
    }
    if (m.contains("seed")) throw ConfigError("config: model.seed is set by the top-level seed");
    try {
      c.model = ModelConfig::from_json(m.dump());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  c.model.n_mels = c.train.features.n_mels;

  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, "train",
               {"base_lr", "warmup_epochs", "decay_step", "decay_factor", "stop_lr", "momentum",
                "weight_decay", "batch_size", "chunk_seconds", "max_epochs", "lambda_age",
                "lambda_grl", "age_class_weights", "relabel_speed", "checkpoint_every_epoch"});
    auto& o = c.train;
    read(t, "train", "base_lr", o.base_lr);
    read(t, "train", "warmup_epochs", o.warmup_epochs);
    read(t, "train", "decay_step", o.decay_step);
    read(t, "train", "decay_factor", o.decay_factor);
    read(t, "train", "stop_lr", o.stop_lr);
    read(t, "train", "momentum", o.momentum);
    read(t, "train", "weight_decay", o.weight_decay);
    read(t, "train", "batch_size", o.batch_size);
    read(t, "train", "chunk_seconds", o.chunk_seconds);
    read(t, "train", "max_epochs", o.max_epochs);
    read(t, "train", "lambda_age", o.loss_weights.lambda_age);
    read(t, "train", "lambda_grl", o.loss_weights.lambda_grl);
    read(t, "train", "age_class_weights", o.age_class_weights);
    read(t, "train", "relabel_speed", o.relabel_speed);
    read(t, "train", "checkpoint_every_epoch", o.checkpoint_every_epoch);
  }

  if (j.contains("augmentation")) {
    const auto& a = j["augmentation"];
    check_keys(a, "augmentation",
               {"p_noise", "p_reverb", "p_gain", "p_speed", "speed_factors", "noise_snr",
                "music_snr", "babble_snr", "gain_db"});
    auto& o = c.train.augmentation;
    read(a, "augmentation", "p_noise", o.p_noise);
    read(a, "augmentation", "p_reverb", o.p_reverb);
    read(a, "augmentation", "p_gain", o.p_gain);
    read(a, "augmentation", "p_speed", o.p_speed);
    read(a, "augmentation", "speed_factors", o.speed_factors);
    read_range(a, "augmentation", "noise_snr", o.noise_snr.lo_db, o.noise_snr.hi_db);
    read_range(a, "augmentation", "music_snr", o.music_snr.lo_db, o.music_snr.hi_db);
    read_range(a, "augmentation", "babble_snr", o.babble_snr.lo_db, o.babble_snr.hi_db);
    read_range(a, "augmentation", "gain_db", o.gain_lo_db, o.gain_hi_db);
  }
  c.train.augmentation.noise_corpus_path = c.paths.noise_corpus;
  c.train.augmentation.rir_corpus_path = c.paths.rir_corpus;

  if (j.contains("protocol")) {
    const auto& p = j["protocol"];
    check_keys(p, "protocol",
               {"presets", "positives_per_speaker", "negatives_per_speaker", "min_cohort_size"});
    read(p, "protocol", "presets", c.protocol.presets);
    read(p, "protocol", "positives_per_speaker", c.protocol.positives_per_speaker);
    read(p, "protocol", "min_cohort_size", c.protocol.min_cohort_size);
    if (p.contains("negatives_per_speaker") && !p["negatives_per_speaker"].is_null()) {
      int n = 0;
      read(p, "protocol", "negatives_per_speaker", n);
      c.protocol.negatives_per_speaker = n;
    }
  }

  if (j.contains("evaluate")) {
    const auto& e = j["evaluate"];
    check_keys(e, "evaluate", {"embedding", "chunk_frames"});
    read(e, "evaluate", "embedding", c.evaluate.embedding);
    read(e, "evaluate", "chunk_frames", c.evaluate.chunk_frames);
  }

  if (j.contains("synth")) {
    const auto& s = j["synth"];
    check_keys(s, "synth", {"kind", "toy", "metadata"});
    read(s, "synth", "kind", c.synth.kind);
    if (s.contains("toy")) {
      const auto& t = s["toy"];
      check_keys(t, "synth.toy",
                 {"n_speakers", "utterances_per_segment", "young_min", "young_max", "gap_min",
                  "gap_max", "utterance_seconds", "age_effect", "channel_variation",
                  "speaker_spread"});
      auto& o = c.synth.toy;
      read(t, "synth.toy", "n_speakers", o.n_speakers);
      read(t, "synth.toy", "utterances_per_segment", o.utterances_per_segment);
      read(t, "synth.toy", "young_min", o.young_min);
      read(t, "synth.toy", "young_max", o.young_max);
      read(t, "synth.toy", "gap_min", o.gap_min);
      read(t, "synth.toy", "gap_max", o.gap_max);
      read(t, "synth.toy", "utterance_seconds", o.voice.utterance_seconds);
      read(t, "synth.toy", "age_effect", o.voice.age_effect);
      read(t, "synth.toy", "channel_variation", o.voice.channel_variation);
      read(t, "synth.toy", "speaker_spread", o.voice.speaker_spread);
    }
    if (s.contains("metadata")) {
      const auto& m = s["metadata"];
      check_keys(m, "synth.metadata",
                 {"n_speakers", "segments_per_speaker", "utterances_per_segment", "age_min",
                  "age_max", "wide_span_fraction", "wide_span_years", "utterance_age_jitter",
                  "min_cohort_size"});
      auto& o = c.synth.metadata;
      read(m, "synth.metadata", "n_speakers", o.n_speakers);
      read(m, "synth.metadata", "segments_per_speaker", o.segments_per_speaker);
      read(m, "synth.metadata", "utterances_per_segment", o.utterances_per_segment);
      read(m, "synth.metadata", "age_min", o.age_min);
      read(m, "synth.metadata", "age_max", o.age_max);
      read(m, "synth.metadata", "wide_span_fraction", o.wide_span_fraction);
      read(m, "synth.metadata", "wide_span_years", o.wide_span_years);
      read(m, "synth.metadata", "utterance_age_jitter", o.utterance_age_jitter);
      read(m, "synth.metadata", "min_cohort_size", o.min_cohort_size);
    }
  }
  c.apply_seed(c.seed);
  c.validate();
  return c;
}

std::string RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["paths"] = {{"metadata", paths.metadata.string()},     {"audio_root", paths.audio_root.string()},
                {"noise_corpus", paths.noise_corpus.string()}, {"rir_corpus", paths.rir_corpus.string()},
                {"trials", paths.trials.string()},         {"embeddings", paths.embeddings.string()},
                {"checkpoint", paths.checkpoint.string()}, {"output_dir", paths.output_dir.string()}};
  json m = json::parse(model.to_json());
  m.erase("seed");
  j["model"] = m;
  const auto& f = train.features;
  j["features"] = {{"sample_rate", f.sample_rate}, {"frame_length", f.frame_length},
                   {"frame_shift", f.frame_shift}, {"n_fft", f.n_fft},
                   {"n_mels", f.n_mels},           {"low_hz", f.low_hz},
                   {"high_hz", f.high_hz},         {"preemphasis", f.preemphasis},
                   {"mean_normalize", f.mean_normalize}};
  const auto& t = train;
  j["train"] = {{"base_lr", t.base_lr},
                {"warmup_epochs", t.warmup_epochs},
                {"decay_step", t.decay_step},
                {"decay_factor", t.decay_factor},
                {"stop_lr", t.stop_lr},
                {"momentum", t.momentum},
                {"weight_decay", t.weight_decay},
                {"batch_size", t.batch_size},
                {"chunk_seconds", t.chunk_seconds},
                {"max_epochs", t.max_epochs},
                {"lambda_age", t.loss_weights.lambda_age},
                {"lambda_grl", t.loss_weights.lambda_grl},
                {"age_class_weights", t.age_class_weights},
                {"relabel_speed", t.relabel_speed},
                {"checkpoint_every_epoch", t.checkpoint_every_epoch}};
  const auto& a = train.augmentation;
  j["augmentation"] = {{"p_noise", a.p_noise},
                       {"p_reverb", a.p_reverb},
                       {"p_gain", a.p_gain},
                       {"p_speed", a.p_speed},
                       {"speed_factors", a.speed_factors},
                       {"noise_snr", {a.noise_snr.lo_db, a.noise_snr.hi_db}},
                       {"music_snr", {a.music_snr.lo_db, a.music_snr.hi_db}},
                       {"babble_snr", {a.babble_snr.lo_db, a.babble_snr.hi_db}},
                       {"gain_db", {a.gain_lo_db, a.gain_hi_db}}};
  j["protocol"] = {{"presets", protocol.presets},
                   {"positives_per_speaker", protocol.positives_per_speaker},
                   {"negatives_per_speaker", protocol.negatives_per_speaker
                                                 ? json(*protocol.negatives_per_speaker)
                                                 : json(nullptr)},
                   {"min_cohort_size", protocol.min_cohort_size}};
  j["evaluate"] = {{"embedding", evaluate.embedding}, {"chunk_frames", evaluate.chunk_frames}};
  const auto& to = synth.toy;
  const auto& mo = synth.metadata;
  j["synth"] = {{"kind", synth.kind},
                {"toy",
                 {{"n_speakers", to.n_speakers},
                  {"utterances_per_segment", to.utterances_per_segment},
                  {"young_min", to.young_min},
                  {"young_max", to.young_max},
                  {"gap_min", to.gap_min},
                  {"gap_max", to.gap_max},
                  {"utterance_seconds", to.voice.utterance_seconds},
                  {"age_effect", to.voice.age_effect},
                  {"channel_variation", to.voice.channel_variation},
                  {"speaker_spread", to.voice.speaker_spread}}},
                {"metadata",
                 {{"n_speakers", mo.n_speakers},
                  {"segments_per_speaker", mo.segments_per_speaker},
                  {"utterances_per_segment", mo.utterances_per_segment},
                  {"age_min", mo.age_min},
                  {"age_max", mo.age_max},
                  {"wide_span_fraction", mo.wide_span_fraction},
                  {"wide_span_years", mo.wide_span_years},
                  {"utterance_age_jitter", mo.utterance_age_jitter},
                  {"min_cohort_size", mo.min_cohort_size}}}};
  return j.dump(2);
}

void RunConfig::apply_seed(uint64_t s) {
  seed = s;
  model.seed = s;
  train.seed = s;
  synth.toy.seed = s;
  synth.metadata.seed = s;
}

void RunConfig::validate() const {
  try {
    model.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (model.n_mels != train.features.n_mels) {
    throw ConfigError("config: model and feature mel counts differ");
  }
  for (const auto& p : protocol.presets) {
    try {
      preset(p);
    } catch (const ProtocolError& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  static const std::set<std::string> kKinds = {"default", "z", "z_id", "z_age"};
  if (!kKinds.count(evaluate.embedding)) {
    throw ConfigError("config: evaluate.embedding must be one of default, z, z_id, z_age");
  }
  if (evaluate.chunk_frames < 0) throw ConfigError("config: evaluate.chunk_frames must be >= 0");
  if (synth.kind != "toy" && synth.kind != "metadata") {
    throw ConfigError("config: synth.kind must be 'toy' or 'metadata'");
  }
}

// ---------------------------------------------------------------------------
// Run directory and log

namespace {

std::string config_hash(const std::string& subcommand, const std::string& config_json) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : subcommand + "\n" + config_json) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

class RunLog {
 public:
  RunLog(const fs::path& path, const std::string& subcommand, std::ostream& err)
      : out_(path, std::ios::trunc), err_(err) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    out_ << "# casv " << subcommand << " started " << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ")
         << "\n";
  }
  void operator()(const std::string& line) {
    out_ << line << '\n';
    out_.flush();
    err_ << line << '\n';
  }

 private:
  std::ofstream out_;
  std::ostream& err_;
};

struct Context {
  RunConfig cfg;
  fs::path run_dir;
  std::string preset_flag;
  RunLog* log = nullptr;
};

void require_file(const fs::path& p, const char* what) {
  if (p.empty()) throw ConfigError(std::string("missing ") + what + " path");
  if (!fs::exists(p)) throw ConfigError(std::string(what) + " not found: " + p.string());
}

EmbeddingKind parse_kind(const std::string& s, const SpeakerModel& model) {
  if (s == "z") return EmbeddingKind::kZ;
  if (s == "z_id") return EmbeddingKind::kZId;
  if (s == "z_age") return EmbeddingKind::kZAge;
  return model.default_embedding();
}

std::string kind_name(EmbeddingKind k) {
  switch (k) {
    case EmbeddingKind::kZ: return "z";
    case EmbeddingKind::kZId: return "z_id";
    case EmbeddingKind::kZAge: return "z_age";
  }
  return "?";
}

std::string checkpoint_id(const fs::path& path, const Checkpoint& ck) {
  return path.filename().string() + "@step" + std::to_string(ck.step);
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_label_age(Context& c) {
  require_file(c.cfg.paths.metadata, "metadata");
  const auto table = load_metadata(c.cfg.paths.metadata);
  const auto segages = compute_segment_ages(table);
  write_segment_ages(table, segages, c.run_dir / "segment_ages.csv");
  std::vector<size_t> hist(AgeGroupId::kCount, 0);
  for (const auto& [k, age] : segages.entries()) ++hist[static_cast<size_t>(assign_age_group(age).index)];
  std::ofstream g(c.run_dir / "age_groups.kv");
  for (int i = 0; i < AgeGroupId::kCount; ++i) g << "group" << i << "=" << hist[static_cast<size_t>(i)] << '\n';
  (*c.log)("labelled " + std::to_string(segages.size()) + " segments from " +
           std::to_string(table.size()) + " utterances");
}

ProtocolSpec spec_for(const Context& c, const std::string& name) {
  ProtocolSpec s = preset(name, c.cfg.seed);
  s.positives_per_speaker = c.cfg.protocol.positives_per_speaker;
  s.negatives_per_speaker = c.cfg.protocol.negatives_per_speaker;
  s.min_cohort_size = c.cfg.protocol.min_cohort_size;
  return s;
}

void cmd_build_protocol(Context& c) {
  require_file(c.cfg.paths.metadata, "metadata");
  const auto table = load_metadata(c.cfg.paths.metadata);
  const std::vector<std::string> names =
      c.preset_flag.empty() ? c.cfg.protocol.presets : std::vector<std::string>{c.preset_flag};
  for (const auto& name : names) {
    const auto protocol = build_protocol(table, spec_for(c, name));
    const std::string stem = protocol.spec.name;
    write_trials(protocol, c.run_dir / (stem + ".trials"));
    const auto stats = protocol_stats(protocol);
    write_stats_report(stats, stem, c.run_dir / (stem + ".stats.txt"), c.run_dir / (stem + ".stats.kv"));
    (*c.log)(stem + ": " + std::to_string(stats.n_positive) + " positive, " +
             std::to_string(stats.n_negative) + " negative trials over " +
             std::to_string(stats.n_speakers) + " speakers");
  }
}

void cmd_stats(Context& c) {
  require_file(c.cfg.paths.metadata, "metadata");
  require_file(c.cfg.paths.trials, "trials");
  const auto table = load_metadata(c.cfg.paths.metadata);
  const auto segages = compute_segment_ages(table);
  const auto protocol = read_trials(c.cfg.paths.trials, &segages);
  const auto stats = protocol_stats(protocol);
  const std::string name = protocol.spec.name;
  write_stats_report(stats, name, c.run_dir / "stats.txt", c.run_dir / "stats.kv");
  std::istringstream report(format_stats_table(stats, name));
  for (std::string line; std::getline(report, line);) (*c.log)(line);
}

void cmd_synth_data(Context& c) {
  if (c.cfg.synth.kind == "metadata") {
    const auto table = generate_synthetic_metadata(c.cfg.synth.metadata);
    write_metadata(table, c.run_dir / "metadata.csv");
    (*c.log)("wrote metadata for " + std::to_string(table.size()) + " utterances");
    return;
  }
  const auto corpus = synthesize_toy_corpus(c.cfg.synth.toy);
  write_metadata(corpus.table, c.run_dir / "metadata.csv");
  for (const auto& [key, wave] : corpus.audio) {
    const auto p = c.run_dir / "audio" / key.path();
    fs::create_directories(p.parent_path());
    write_wav(wave, p);
  }
  (*c.log)("wrote " + std::to_string(corpus.audio.size()) + " utterances of synthetic audio");
}

void cmd_train(Context& c) {
  require_file(c.cfg.paths.metadata, "metadata");
  require_file(c.cfg.paths.audio_root, "audio root");
  const auto table = load_metadata(c.cfg.paths.metadata);
  const auto data = make_training_set(table, compute_segment_ages(table));
  ModelConfig mc = c.cfg.model;
  mc.n_speakers = label_space(data, c.cfg.train);
  SpeakerModel model(mc);
  const DirectoryAudioSource audio(c.cfg.paths.audio_root);
  const auto corpora = AugmentationCorpora::load(c.cfg.train.augmentation);
  (*c.log)("training " + std::string(to_string(mc.variant)) + " on " +
           std::to_string(data.items.size()) + " utterances, " + std::to_string(mc.n_speakers) +
           " classes, " + std::to_string(scheduled_epochs(c.cfg.train)) + " epochs");
  Trainer trainer(model, data, audio, c.cfg.train, corpora);
  const auto r = trainer.run(c.run_dir, [&](const EpochSummary& e) {
    (*c.log)("epoch " + std::to_string(e.epoch + 1) + ": mean L_total " + format_double(e.mean_total) +
             ", mean L_id " + format_double(e.mean_id) + ", lr " + format_double(e.lr_end));
  });
  std::ofstream kv(c.run_dir / "train.kv");
  kv << "epochs=" << r.epochs.size() << '\n'
     << "steps=" << r.total_steps << '\n'
     << "final_l_total=" << format_double(r.epochs.back().mean_total) << '\n'
     << "final_l_id=" << format_double(r.epochs.back().mean_id) << '\n'
     << "checkpoint=" << fs::relative(r.last_checkpoint, c.run_dir).string() << '\n';
}

std::vector<UtteranceKey> keys_to_embed(const Context& c) {
  std::set<UtteranceKey> keys;
  if (!c.cfg.paths.trials.empty()) {
    require_file(c.cfg.paths.trials, "trials");
    for (const auto& t : read_trials(c.cfg.paths.trials).trials) {
      keys.insert(t.enroll);
      keys.insert(t.test);
    }
  } else {
    require_file(c.cfg.paths.metadata, "metadata");
    for (const auto& r : load_metadata(c.cfg.paths.metadata)) keys.insert(r.key);
  }
  return {keys.begin(), keys.end()};
}

void cmd_extract(Context& c) {
  require_file(c.cfg.paths.checkpoint, "checkpoint");
  require_file(c.cfg.paths.audio_root, "audio root");
  const auto ck = load_checkpoint(c.cfg.paths.checkpoint);
  SpeakerModel model(ck.config);
  restore_parameters(model, ck);
  const DirectoryAudioSource audio(c.cfg.paths.audio_root);
  const auto kind = parse_kind(c.cfg.evaluate.embedding, model);
  ModelEmbedder embedder(model, audio, c.cfg.train.features, kind, c.cfg.evaluate.chunk_frames);
  const auto keys = keys_to_embed(c);
  for (const auto& k : keys) embedder.get(k);
  embedder.cache().save(c.run_dir / "embeddings.txt");
  std::ofstream kv(c.run_dir / "extract.kv");
  kv << "checkpoint=" << checkpoint_id(c.cfg.paths.checkpoint, ck) << '\n'
     << "embedding=" << kind_name(kind) << '\n'
     << "count=" << keys.size() << '\n'
     << "dim=" << embedder.cache().dim() << '\n';
  (*c.log)("extracted " + std::to_string(keys.size()) + " " + kind_name(kind) + " embeddings");
}

void cmd_score(Context& c) {
  require_file(c.cfg.paths.trials, "trials");
  require_file(c.cfg.paths.embeddings, "embeddings");
  const auto protocol = read_trials(c.cfg.paths.trials);
  auto store = EmbeddingStore::load(c.cfg.paths.embeddings);
  std::vector<double> scores;
  scores.reserve(protocol.trials.size());
  for (const auto& t : protocol.trials) scores.push_back(cosine_score(store.get(t.enroll), store.get(t.test)));
  write_scores(protocol.trials, scores, c.run_dir / "scores.txt");
  (*c.log)("scored " + std::to_string(scores.size()) + " trials");
}

// Stored embeddings first, then the model when one is configured.
class FallbackEmbeddings : public EmbeddingProvider {
 public:
  FallbackEmbeddings(EmbeddingStore* store, ModelEmbedder* model) : store_(store), model_(model) {}
  const std::vector<double>& get(const UtteranceKey& key) override {
    if (store_ && store_->contains(key)) return store_->get(key);
    if (model_) return model_->get(key);
    throw EvaluationError("missing embedding for " + key.str() +
                          " (not in the embeddings file and no checkpoint and audio to compute it)");
  }

 private:
  EmbeddingStore* store_;
  ModelEmbedder* model_;
};

std::string embeddings_checkpoint_id(const fs::path& embeddings) {
  const auto kv = embeddings.parent_path() / "extract.kv";
  if (fs::exists(kv)) {
    const auto m = read_kv_file(kv);
    const auto it = m.find("checkpoint");
    if (it != m.end()) return it->second;
  }
  return "unknown";
}

void cmd_evaluate(Context& c) {
  require_file(c.cfg.paths.trials, "trials");
  const auto protocol = read_trials(c.cfg.paths.trials);
  std::optional<EmbeddingStore> store;
  std::string ck_id = "none";
  if (!c.cfg.paths.embeddings.empty()) {
    require_file(c.cfg.paths.embeddings, "embeddings");
    store = EmbeddingStore::load(c.cfg.paths.embeddings);
    ck_id = embeddings_checkpoint_id(c.cfg.paths.embeddings);
  }
  std::unique_ptr<SpeakerModel> model;
  std::unique_ptr<DirectoryAudioSource> audio;
  std::unique_ptr<ModelEmbedder> embedder;
  if (!c.cfg.paths.checkpoint.empty() && !c.cfg.paths.audio_root.empty()) {
    require_file(c.cfg.paths.checkpoint, "checkpoint");
    require_file(c.cfg.paths.audio_root, "audio root");
    const auto ck = load_checkpoint(c.cfg.paths.checkpoint);
    model = std::make_unique<SpeakerModel>(ck.config);
    restore_parameters(*model, ck);
    audio = std::make_unique<DirectoryAudioSource>(c.cfg.paths.audio_root);
    embedder = std::make_unique<ModelEmbedder>(*model, *audio, c.cfg.train.features,
                                               parse_kind(c.cfg.evaluate.embedding, *model),
                                               c.cfg.evaluate.chunk_frames);
    ck_id = checkpoint_id(c.cfg.paths.checkpoint, ck);
  }
  FallbackEmbeddings provider(store ? &*store : nullptr, embedder.get());
  std::vector<double> scores;
  const auto r = evaluate_protocol(protocol.trials, provider, protocol.spec.name, ck_id, &scores);
  write_scores(protocol.trials, scores, c.run_dir / "scores.txt");
  write_result(r, c.run_dir / "result.kv");
  ScoreSet s;
  for (size_t i = 0; i < scores.size(); ++i) s.add(scores[i], protocol.trials[i].is_target());
  write_operating_points(s, c.run_dir / "operating_points.txt");
  char line[256];
  std::snprintf(line, sizeof(line), "%s: EER %.3f%%  minDCF(p=0.01) %.4f  (%zu target, %zu non-target)",
                r.protocol.c_str(), r.eer, r.min_dcf, r.n_target, r.n_nontarget);
  (*c.log)(line);
}

}  // namespace

// ---------------------------------------------------------------------------

int dispatch(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Age-invariant speaker verification toolkit"};
  app.require_subcommand(1);
  std::string config_path, preset_flag, out_dir;
  std::optional<uint64_t> seed;
  bool overwrite = false;
  Paths flag_paths;

  struct Sub {
    const char* name;
    const char* help;
    void (*fn)(Context&);
  };
  const std::vector<Sub> subs = {
      {"label-age", "segment-level age labels from utterance metadata", cmd_label_age},
      {"build-protocol", "mine trial lists for the configured presets", cmd_build_protocol},
      {"stats", "statistics of an existing trial list", cmd_stats},
      {"synth-data", "synthetic metadata (and audio) fixture", cmd_synth_data},
      {"train", "train a speaker model", cmd_train},
      {"extract", "embed utterances with a checkpoint", cmd_extract},
      {"score", "cosine-score a trial list from stored embeddings", cmd_score},
      {"evaluate", "score a trial list and compute EER and minDCF", cmd_evaluate},
  };
  std::vector<CLI::App*> handles;
  for (const auto& s : subs) {
    auto* sc = app.add_subcommand(s.name, s.help);
    sc->add_option("--config", config_path, "JSON run configuration");
    sc->add_option("--seed", seed, "overrides every seed in the configuration");
    sc->add_option("--preset", preset_flag, "protocol preset (build-protocol)");
    sc->add_option("--out", out_dir, "output root (default: paths.output_dir)");
    sc->add_flag("--overwrite", overwrite, "replace an existing run directory");
    sc->add_option("--metadata", flag_paths.metadata, "metadata CSV");
    sc->add_option("--audio", flag_paths.audio_root, "audio root");
    sc->add_option("--trials", flag_paths.trials, "trial list");
    sc->add_option("--embeddings", flag_paths.embeddings, "embeddings file");
    sc->add_option("--checkpoint", flag_paths.checkpoint, "model checkpoint");
    handles.push_back(sc);
  }

  std::vector<std::string> args(argv.begin() + (argv.empty() ? 0 : 1), argv.end());
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  size_t which = 0;
  while (which < handles.size() && !handles[which]->parsed()) ++which;
  const std::string subcommand = subs[which].name;

  try {
    Context c;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot read config " + config_path);
      std::stringstream ss;
      ss << in.rdbuf();
      c.cfg = RunConfig::from_json(ss.str());
    }
    if (seed) c.cfg.apply_seed(*seed);
    const auto override_path = [](const fs::path& flag, fs::path& dst) {
      if (!flag.empty()) dst = flag;
    };
    override_path(flag_paths.metadata, c.cfg.paths.metadata);
    override_path(flag_paths.audio_root, c.cfg.paths.audio_root);
    override_path(flag_paths.trials, c.cfg.paths.trials);
    override_path(flag_paths.embeddings, c.cfg.paths.embeddings);
    override_path(flag_paths.checkpoint, c.cfg.paths.checkpoint);
    if (!out_dir.empty()) c.cfg.paths.output_dir = out_dir;
    if (!preset_flag.empty()) {
      preset(preset_flag);  // validates the name
      c.preset_flag = preset_flag;
    }
    c.cfg.validate();

    const std::string cfg_json = c.cfg.to_json();
    c.run_dir = c.cfg.paths.output_dir /
                (subcommand + "-" + config_hash(subcommand + "|" + preset_flag, cfg_json));
    if (fs::exists(c.run_dir)) {
      if (!overwrite) {
        throw ConfigError("run directory " + c.run_dir.string() +
                          " exists (identical configuration); pass --overwrite to replace it");
      }
      fs::remove_all(c.run_dir);
    }
    fs::create_directories(c.run_dir);
    std::ofstream(c.run_dir / "config.json") << cfg_json << '\n';
    RunLog log(c.run_dir / "run.log", subcommand, err);
    c.log = &log;
    try {
      subs[which].fn(c);
    } catch (...) {
      // A failed run leaves nothing behind, so the same command can be retried.
      std::error_code ec;
      fs::remove_all(c.run_dir, ec);
      throw;
    }
    out << c.run_dir.string() << '\n';
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace casv::cli
