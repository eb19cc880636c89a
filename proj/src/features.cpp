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

#include "casv/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>

#include "casv/rng.hpp"
#include "casv/text_util.hpp"

namespace casv {

namespace {

// FFTW planning is not thread-safe; execution on caller-owned arrays is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

double mel_scale(double hz) { return 1127.0 * std::log(1.0 + hz / 700.0); }

uint32_t read_u32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}
uint16_t read_u16(const unsigned char* p) { return uint16_t(p[0] | p[1] << 8); }

void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u16(std::string& s, uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

double power(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v * v;
  return s / static_cast<double>(x.size());
}

size_t next_pow2(size_t n) {
  size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

/// Linear convolution via FFT, full length a.size() + b.size() - 1.
std::vector<double> fft_convolve(const std::vector<double>& a, const std::vector<double>& b) {
  const size_t out_len = a.size() + b.size() - 1;
  const size_t n = next_pow2(out_len);
  const size_t nc = n / 2 + 1;
  double* ra = fftw_alloc_real(n);
  double* rb = fftw_alloc_real(n);
  fftw_complex* ca = fftw_alloc_complex(nc);
  fftw_complex* cb = fftw_alloc_complex(nc);
  fftw_plan fa, fb, inv;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fa = fftw_plan_dft_r2c_1d(static_cast<int>(n), ra, ca, FFTW_ESTIMATE);
    fb = fftw_plan_dft_r2c_1d(static_cast<int>(n), rb, cb, FFTW_ESTIMATE);
    inv = fftw_plan_dft_c2r_1d(static_cast<int>(n), ca, ra, FFTW_ESTIMATE);
  }
  std::fill(ra, ra + n, 0.0);
  std::fill(rb, rb + n, 0.0);
  std::copy(a.begin(), a.end(), ra);
  std::copy(b.begin(), b.end(), rb);
  fftw_execute(fa);
  fftw_execute(fb);
  for (size_t k = 0; k < nc; ++k) {
    const std::complex<double> x(ca[k][0], ca[k][1]), y(cb[k][0], cb[k][1]);
    const auto z = x * y;
    ca[k][0] = z.real();
    ca[k][1] = z.imag();
  }
  fftw_execute(inv);
  std::vector<double> out(ra, ra + out_len);
  for (auto& v : out) v /= static_cast<double>(n);
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(fa);
    fftw_destroy_plan(fb);
    fftw_destroy_plan(inv);
  }
  fftw_free(ra);
  fftw_free(rb);
  fftw_free(ca);
  fftw_free(cb);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// WAV

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FeatureError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0) {
    throw FeatureError(path.string() + ": not a RIFF/WAVE file");
  }
  size_t pos = 12;
  int channels = 0, bits = 0, format = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  while (pos + 8 <= bytes.size()) {
    const uint32_t size = read_u32(p + pos + 4);
    const size_t body = pos + 8;
    if (body + size > bytes.size()) throw FeatureError(path.string() + ": truncated chunk");
    if (std::memcmp(p + pos, "fmt ", 4) == 0) {
      if (size < 16) throw FeatureError(path.string() + ": short fmt chunk");
      format = read_u16(p + body);
      channels = read_u16(p + body + 2);
      rate = read_u32(p + body + 4);
      bits = read_u16(p + body + 14);
      have_fmt = true;
    } else if (std::memcmp(p + pos, "data", 4) == 0) {
      if (!have_fmt) throw FeatureError(path.string() + ": data before fmt");
      if (format != 1 || bits != 16 || channels != 1) {
        throw FeatureError(path.string() + ": only 16-bit PCM mono is supported");
      }
      Waveform w;
      w.sample_rate = static_cast<int>(rate);
      w.samples.resize(size / 2);
      for (size_t i = 0; i < w.samples.size(); ++i) {
        const auto v = static_cast<int16_t>(read_u16(p + body + 2 * i));
        w.samples[i] = static_cast<double>(v) / 32768.0;
      }
      return w;
    }
    pos = body + size + (size & 1);
  }
  throw FeatureError(path.string() + ": no data chunk");
}

void write_wav(const Waveform& w, const std::filesystem::path& path) {
  std::string out;
  const auto data_bytes = static_cast<uint32_t>(w.samples.size() * 2);
  out += "RIFF";
  put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<uint32_t>(w.sample_rate));
  put_u32(out, static_cast<uint32_t>(w.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, data_bytes);
  for (double s : w.samples) {
    const double scaled = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(scaled)));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FeatureError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

// ---------------------------------------------------------------------------
// Log-Mel

int frame_count(size_t n_samples, const LogMelOptions& opts) {
  if (n_samples < static_cast<size_t>(opts.frame_length)) return 0;
  return static_cast<int>((n_samples - static_cast<size_t>(opts.frame_length)) /
                          static_cast<size_t>(opts.frame_shift)) +
         1;
}

struct LogMelExtractor::Fft {
  int n = 0;
  fftw_plan plan = nullptr;
  double* in = nullptr;
  fftw_complex* out = nullptr;

  explicit Fft(int size) : n(size) {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    in = fftw_alloc_real(static_cast<size_t>(n));
    out = fftw_alloc_complex(static_cast<size_t>(n / 2 + 1));
    plan = fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE | FFTW_UNALIGNED);
  }
  ~Fft() {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
    fftw_free(in);
    fftw_free(out);
  }
};

LogMelExtractor::LogMelExtractor(LogMelOptions opts) : opts_(opts) {
  if (opts_.frame_length > opts_.n_fft || opts_.n_mels < 1 || opts_.frame_shift < 1 ||
      !(opts_.low_hz >= 0.0 && opts_.high_hz > opts_.low_hz &&
        opts_.high_hz <= opts_.sample_rate / 2.0)) {
    throw FeatureError("invalid log-Mel options");
  }
  window_.resize(static_cast<size_t>(opts_.frame_length));
  for (int i = 0; i < opts_.frame_length; ++i) {
    window_[static_cast<size_t>(i)] =
        0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (opts_.frame_length - 1));
  }
  const int n_bins = opts_.n_fft / 2 + 1;
  filterbank_.assign(static_cast<size_t>(opts_.n_mels * n_bins), 0.0);
  const double mel_lo = mel_scale(opts_.low_hz), mel_hi = mel_scale(opts_.high_hz);
  const double mel_step = (mel_hi - mel_lo) / (opts_.n_mels + 1);
  for (int m = 0; m < opts_.n_mels; ++m) {
    const double left = mel_lo + m * mel_step, center = left + mel_step,
                 right = center + mel_step;
    for (int k = 0; k < n_bins; ++k) {
      const double mel = mel_scale(static_cast<double>(k) * opts_.sample_rate / opts_.n_fft);
      double w = 0.0;
      if (mel > left && mel <= center) {
        w = (mel - left) / (center - left);
      } else if (mel > center && mel < right) {
        w = (right - mel) / (right - center);
      }
      filterbank_[static_cast<size_t>(m * n_bins + k)] = w;
    }
  }
  fft_ = std::make_unique<Fft>(opts_.n_fft);
}

LogMelExtractor::~LogMelExtractor() = default;

FeatureMatrix LogMelExtractor::compute(const Waveform& w) const {
  if (w.sample_rate != opts_.sample_rate) {
    throw FeatureError("expected " + std::to_string(opts_.sample_rate) + " Hz audio, got " +
                       std::to_string(w.sample_rate) + " Hz");
  }
  const int frames = frame_count(w.samples.size(), opts_);
  if (frames < 1) throw FeatureError("audio shorter than one analysis frame");

  const int n_bins = opts_.n_fft / 2 + 1;
  FeatureMatrix fm;
  fm.n_mels = opts_.n_mels;
  fm.n_frames = frames;
  fm.values.assign(static_cast<size_t>(opts_.n_mels) * static_cast<size_t>(frames), 0.0);

  std::vector<double> in(static_cast<size_t>(opts_.n_fft));
  std::vector<std::complex<double>> spec(static_cast<size_t>(n_bins));
  std::vector<double> pow_spec(static_cast<size_t>(n_bins));
  const size_t len = static_cast<size_t>(opts_.frame_length);
  for (int t = 0; t < frames; ++t) {
    const double* x = w.samples.data() + static_cast<size_t>(t) * static_cast<size_t>(opts_.frame_shift);
    double mean = 0.0;
    for (size_t i = 0; i < len; ++i) mean += x[i];
    mean /= static_cast<double>(len);
    std::fill(in.begin(), in.end(), 0.0);
    for (size_t i = 0; i < len; ++i) in[i] = x[i] - mean;
    for (size_t i = len - 1; i > 0; --i) in[i] -= opts_.preemphasis * in[i - 1];
    in[0] -= opts_.preemphasis * in[0];
    for (size_t i = 0; i < len; ++i) in[i] *= window_[i];
    fftw_execute_dft_r2c(fft_->plan, in.data(), reinterpret_cast<fftw_complex*>(spec.data()));
    for (int k = 0; k < n_bins; ++k) {
      pow_spec[static_cast<size_t>(k)] = std::norm(spec[static_cast<size_t>(k)]);
    }
    for (int m = 0; m < opts_.n_mels; ++m) {
      const double* fb = filterbank_.data() + static_cast<size_t>(m * n_bins);
      double e = 0.0;
      for (int k = 0; k < n_bins; ++k) e += fb[k] * pow_spec[static_cast<size_t>(k)];
      fm.at(m, t) = std::log(std::max(e, opts_.energy_floor));
    }
  }
  if (opts_.mean_normalize) {
    for (int m = 0; m < opts_.n_mels; ++m) {
      double mean = 0.0;
      for (int t = 0; t < frames; ++t) mean += fm.at(m, t);
      mean /= frames;
      for (int t = 0; t < frames; ++t) fm.at(m, t) -= mean;
    }
  }
  return fm;
}

FeatureMatrix compute_logmel(const Waveform& w, const LogMelOptions& opts) {
  return LogMelExtractor(opts).compute(w);
}

// ---------------------------------------------------------------------------
// Augmentation

void AugmentationConfig::validate() const {
  for (double p : {p_noise, p_reverb, p_gain, p_speed}) {
    if (!(p >= 0.0 && p <= 1.0)) throw FeatureError("augmentation probability outside [0,1]");
  }
  if (std::find(speed_factors.begin(), speed_factors.end(), 1.0) == speed_factors.end()) {
    throw FeatureError("speed_factors must include 1.0");
  }
  for (double f : speed_factors) {
    if (!(f > 0.0)) throw FeatureError("speed factors must be positive");
  }
  if (gain_lo_db > gain_hi_db) throw FeatureError("gain range is inverted");
}

AudioCorpus AudioCorpus::load(const std::filesystem::path& dir) {
  AudioCorpus c;
  c.root_ = dir;
  const auto manifest = dir / "manifest.txt";
  std::ifstream in(manifest);
  if (!in) throw FeatureError("cannot open corpus manifest " + manifest.string());
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto tok = tokenize(line);
    if (tok.empty() || tok[0].front() == '#') continue;
    if (tok.size() != 2) {
      throw FeatureError(manifest.string() + ":" + std::to_string(line_no) +
                         ": expected '<path> <category>'");
    }
    c.entries_[std::string(tok[1])].emplace_back(std::string(tok[0]));
  }
  return c;
}

size_t AudioCorpus::size(const std::string& category) const {
  const auto it = entries_.find(category);
  return it == entries_.end() ? 0 : it->second.size();
}

std::vector<std::string> AudioCorpus::categories() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

Waveform AudioCorpus::draw(const std::string& category, uint64_t index_seed) const {
  const auto it = entries_.find(category);
  if (it == entries_.end() || it->second.empty()) {
    throw FeatureError("corpus has no '" + category + "' entries");
  }
  Rng rng(index_seed);
  const auto& rel = it->second[rng.uniform_index(it->second.size())];
  try {
    return read_wav(root_ / rel);
  } catch (const FeatureError& e) {
    throw FeatureError("unreadable corpus entry: " + std::string(e.what()));
  }
}

AugmentationCorpora AugmentationCorpora::load(const AugmentationConfig& cfg) {
  AugmentationCorpora c;
  if (!cfg.noise_corpus_path.empty()) c.noise = AudioCorpus::load(cfg.noise_corpus_path);
  if (!cfg.rir_corpus_path.empty()) c.rir = AudioCorpus::load(cfg.rir_corpus_path);
  return c;
}

Waveform apply_gain(const Waveform& w, double gain_db) {
  Waveform out = w;
  const double g = std::pow(10.0, gain_db / 20.0);
  for (auto& s : out.samples) s *= g;
  return out;
}

Waveform add_noise(const Waveform& clean, const Waveform& noise, double snr_db) {
  Waveform out = clean;
  if (clean.samples.empty() || noise.samples.empty()) return out;
  std::vector<double> n(clean.samples.size());
  for (size_t i = 0; i < n.size(); ++i) n[i] = noise.samples[i % noise.samples.size()];
  const double p_clean = power(clean.samples), p_noise = power(n);
  if (p_clean == 0.0 || p_noise == 0.0) return out;
  const double scale = std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));
  for (size_t i = 0; i < n.size(); ++i) out.samples[i] += scale * n[i];
  return out;
}

Waveform reverberate(const Waveform& w, const Waveform& rir) {
  Waveform out = w;
  if (w.samples.empty() || rir.samples.empty()) return out;
  double energy = 0.0;
  size_t peak = 0;
  for (size_t i = 0; i < rir.samples.size(); ++i) {
    energy += rir.samples[i] * rir.samples[i];
    if (std::abs(rir.samples[i]) > std::abs(rir.samples[peak])) peak = i;
  }
  if (energy == 0.0) return out;
  std::vector<double> h(rir.samples);
  for (auto& v : h) v /= std::sqrt(energy);
  const auto full = fft_convolve(w.samples, h);
  for (size_t i = 0; i < out.samples.size(); ++i) out.samples[i] = full[i + peak];
  // keep the input level
  const double p_in = power(w.samples), p_out = power(out.samples);
  if (p_out > 0.0) {
    const double g = std::sqrt(p_in / p_out);
    for (auto& s : out.samples) s *= g;
  }
  return out;
}

Waveform change_speed(const Waveform& w, double factor) {
  if (!(factor > 0.0)) throw FeatureError("speed factor must be positive");
  if (factor == 1.0) return w;
  Waveform out;
  out.sample_rate = w.sample_rate;
  const auto n = static_cast<size_t>(std::floor(static_cast<double>(w.samples.size()) / factor));
  out.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const double pos = static_cast<double>(i) * factor;
    const auto j = static_cast<size_t>(pos);
    const double frac = pos - static_cast<double>(j);
    const double a = w.samples[std::min(j, w.samples.size() - 1)];
    const double b = w.samples[std::min(j + 1, w.samples.size() - 1)];
    out.samples[i] = a + frac * (b - a);
  }
  return out;
}

Waveform augment(const Waveform& w, const AugmentationConfig& cfg,
                 const AugmentationCorpora& corpora, uint64_t seed) {
  cfg.validate();
  if (cfg.disabled()) return w;
  Rng rng(derive_seed(seed, "augment"));
  // Every decision is drawn up front so each branch's randomness is fixed
  // regardless of which other branches fire.
  const bool do_speed = rng.bernoulli(cfg.p_speed);
  const bool do_reverb = rng.bernoulli(cfg.p_reverb);
  const bool do_noise = rng.bernoulli(cfg.p_noise);
  const bool do_gain = rng.bernoulli(cfg.p_gain);
  const double speed = cfg.speed_factors[rng.uniform_index(cfg.speed_factors.size())];
  const uint64_t rir_seed = rng.next_u64();
  const uint64_t noise_seed = rng.next_u64();
  const double noise_pick = rng.uniform();
  const double snr_u = rng.uniform();
  const double gain_db = rng.uniform(cfg.gain_lo_db, cfg.gain_hi_db);

  Waveform out = w;
  if (do_speed) out = change_speed(out, speed);
  if (do_reverb) {
    if (corpora.rir.size("rir") == 0) throw FeatureError("reverb selected but no RIR corpus loaded");
    out = reverberate(out, corpora.rir.draw("rir", rir_seed));
  }
  if (do_noise) {
    std::vector<std::pair<std::string, SnrRange>> kinds;
    for (const auto& [name, range] : {std::pair{std::string("noise"), cfg.noise_snr},
                                      std::pair{std::string("music"), cfg.music_snr},
                                      std::pair{std::string("babble"), cfg.babble_snr}}) {
      if (corpora.noise.size(name) > 0) kinds.emplace_back(name, range);
    }
    if (kinds.empty()) throw FeatureError("noise selected but no noise corpus loaded");
    const auto& [kind, range] =
        kinds[std::min(kinds.size() - 1, static_cast<size_t>(noise_pick * kinds.size()))];
    const double snr = range.lo_db + snr_u * (range.hi_db - range.lo_db);
    out = add_noise(out, corpora.noise.draw(kind, noise_seed), snr);
  }
  if (do_gain) out = apply_gain(out, gain_db);
  return out;
}

Waveform sample_training_chunk(const Waveform& w, double seconds, uint64_t seed) {
  if (!(seconds > 0.0)) throw std::invalid_argument("chunk duration must be positive");
  if (w.samples.empty()) throw FeatureError("cannot crop empty audio");
  const auto len = static_cast<size_t>(std::llround(seconds * w.sample_rate));
  Rng rng(seed);
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.resize(len);
  const size_t n = w.samples.size();
  if (n >= len) {
    const size_t offset = rng.uniform_index(n - len + 1);
    std::copy_n(w.samples.begin() + static_cast<std::ptrdiff_t>(offset), len, out.samples.begin());
  } else {
    const size_t offset = rng.uniform_index(n);
    for (size_t i = 0; i < len; ++i) out.samples[i] = w.samples[(offset + i) % n];
  }
  return out;
}

}  // namespace casv
