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

#ifndef CASV_FEATURES_HPP_
#define CASV_FEATURES_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace casv {

class FeatureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mono audio. Samples are in [-1, 1) for 16-bit sources.
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  double duration() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

/// 16-bit PCM mono WAV.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const Waveform& w, const std::filesystem::path& path);

/// Log-Mel energies, row-major [n_mels x n_frames].
struct FeatureMatrix {
  int n_mels = 0;
  int n_frames = 0;
  std::vector<double> values;

  double at(int mel, int frame) const {
    return values[static_cast<size_t>(mel) * static_cast<size_t>(n_frames) +
                  static_cast<size_t>(frame)];
  }
  double& at(int mel, int frame) {
    return values[static_cast<size_t>(mel) * static_cast<size_t>(n_frames) +
                  static_cast<size_t>(frame)];
  }
  bool operator==(const FeatureMatrix&) const = default;
};

struct LogMelOptions {
  int sample_rate = 16000;
  int frame_length = 400;  // 25 ms
  int frame_shift = 160;   // 10 ms
  int n_fft = 512;
  int n_mels = 80;
  double low_hz = 20.0;
  double high_hz = 7600.0;
  double preemphasis = 0.97;
  double energy_floor = 1e-10;
  bool mean_normalize = true;  // subtract the per-utterance mean of each bin
};

/// floor((n_samples - frame_length) / frame_shift) + 1, or 0 when too short.
int frame_count(size_t n_samples, const LogMelOptions& opts = {});

/// Reusable extractor; holds the FFT plan and the mel filterbank. One
/// instance per thread.
class LogMelExtractor {
 public:
  explicit LogMelExtractor(LogMelOptions opts = {});
  ~LogMelExtractor();
  LogMelExtractor(const LogMelExtractor&) = delete;
  LogMelExtractor& operator=(const LogMelExtractor&) = delete;

  FeatureMatrix compute(const Waveform& w) const;
  const LogMelOptions& options() const { return opts_; }
  /// Triangular filter weights, [n_mels x (n_fft/2 + 1)].
  const std::vector<double>& filterbank() const { return filterbank_; }

 private:
  struct Fft;
  LogMelOptions opts_;
  std::vector<double> window_;
  std::vector<double> filterbank_;
  std::unique_ptr<Fft> fft_;
};

FeatureMatrix compute_logmel(const Waveform& w, const LogMelOptions& opts = {});

// ---------------------------------------------------------------------------
// Augmentation

/// Noise categories recognised in corpus manifests.
enum class NoiseKind { kNoise, kMusic, kBabble };

struct SnrRange {
  double lo_db = 0.0;
  double hi_db = 15.0;
};

struct AugmentationConfig {
  std::filesystem::path noise_corpus_path;  // manifest.txt inside
  std::filesystem::path rir_corpus_path;
  SnrRange noise_snr{0.0, 15.0};
  SnrRange music_snr{5.0, 15.0};
  SnrRange babble_snr{13.0, 20.0};
  double gain_lo_db = -6.0;
  double gain_hi_db = 6.0;
  std::vector<double> speed_factors{0.9, 1.0, 1.1};
  double p_noise = 0.25;
  double p_reverb = 0.25;
  double p_gain = 0.25;
  double p_speed = 0.25;

  void validate() const;
  /// All probabilities zero.
  bool disabled() const {
    return p_noise == 0.0 && p_reverb == 0.0 && p_gain == 0.0 && p_speed == 0.0;
  }
};

/// Directory of WAVs with `manifest.txt`: one `<relative-path> <category>`
/// per line. Categories: noise, music, babble (noise corpora) or rir.
/// Audio is read per call; only the listing is held in memory.
class AudioCorpus {
 public:
  AudioCorpus() = default;
  static AudioCorpus load(const std::filesystem::path& dir);

  bool empty() const { return entries_.empty(); }
  size_t size(const std::string& category) const;
  /// Reads a uniformly chosen file of the category.
  Waveform draw(const std::string& category, uint64_t index_seed) const;
  std::vector<std::string> categories() const;

 private:
  std::filesystem::path root_;
  std::map<std::string, std::vector<std::filesystem::path>> entries_;
};

struct AugmentationCorpora {
  AudioCorpus noise;
  AudioCorpus rir;

  static AugmentationCorpora load(const AugmentationConfig& cfg);
};

Waveform apply_gain(const Waveform& w, double gain_db);
/// Adds `noise` (tiled or cropped to length) scaled so that
/// 10 log10(P_clean / P_noise) = snr_db.
Waveform add_noise(const Waveform& clean, const Waveform& noise, double snr_db);
/// Convolution with an energy-normalised impulse response, aligned on the
/// direct-path peak and truncated to the input length.
Waveform reverberate(const Waveform& w, const Waveform& rir);
/// Tempo change by linear-interpolation resampling: output length is
/// floor(n / factor).
Waveform change_speed(const Waveform& w, double factor);

/// Each branch fires independently with its probability; order: speed,
/// reverb, noise, gain. Deterministic given seed.
Waveform augment(const Waveform& w, const AugmentationConfig& cfg,
                 const AugmentationCorpora& corpora, uint64_t seed);

/// Uniform crop of `seconds`; shorter audio is tiled to length first.
Waveform sample_training_chunk(const Waveform& w, double seconds, uint64_t seed);

}  // namespace casv

#endif  // CASV_FEATURES_HPP_
