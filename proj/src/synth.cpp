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

#include "casv/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "casv/rng.hpp"

namespace casv {

namespace {

constexpr double kFs = 16000.0;
constexpr double kPi = std::numbers::pi;

// Adult male reference formants (Hz) for five vowels.
constexpr std::array<std::array<double, 4>, 5> kVowels = {{
    {730, 1090, 2440, 3400},
    {270, 2290, 3010, 3500},
    {300, 870, 2240, 3300},
    {530, 1840, 2480, 3400},
    {570, 840, 2410, 3300},
}};
constexpr std::array<double, 4> kBandwidths = {80, 100, 140, 200};

// RBJ peaking equaliser.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;

  static Biquad peaking(double freq, double gain_db, double q) {
    const double a = std::pow(10.0, gain_db / 40.0);
    const double w = 2 * kPi * freq / kFs;
    const double alpha = std::sin(w) / (2 * q);
    const double a0 = 1 + alpha / a;
    Biquad f;
    f.b0 = (1 + alpha * a) / a0;
    f.b1 = -2 * std::cos(w) / a0;
    f.b2 = (1 - alpha * a) / a0;
    f.a1 = -2 * std::cos(w) / a0;
    f.a2 = (1 - alpha / a) / a0;
    return f;
  }

  double operator()(double x) {
    const double y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x;
    y2 = y1;
    y1 = y;
    return y;
  }
};

// Two-pole resonator with unit peak-ish gain.
struct Resonator {
  double c1 = 0, c2 = 0, g = 0, y1 = 0, y2 = 0;

  void set(double freq, double bw) {
    freq = std::min(freq, 0.45 * kFs);
    const double r = std::exp(-kPi * bw / kFs);
    c1 = 2 * r * std::cos(2 * kPi * freq / kFs);
    c2 = -r * r;
    g = 1 - r;
  }
  double operator()(double x) {
    const double y = g * x + c1 * y1 + c2 * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

struct Voice {
  double f0 = 120;
  double formant_scale = 1.0;
  std::array<double, 5> vowel_weights{};
  double rate = 1.0;
  double jitter = 0.01;
  double breath = 0.02;
  std::array<Biquad, 2> timbre;
};

struct Channel {
  Biquad eq;
  double snr_db = 25;
  double noise_color = 0.0;
  double gain = 0.1;
};

Voice make_voice(const UtteranceRecord& rec, const VoiceSynthOptions& o) {
  Rng rng(derive_seed(o.seed, "voice:" + rec.key.speaker_id));
  Voice v;
  const bool female = rec.gender == Gender::kFemale;
  const double f0_center = female ? 205.0 : 118.0;
  v.f0 = f0_center * std::exp(o.speaker_spread * rng.uniform(-0.25, 0.25));
  v.formant_scale = (female ? 1.15 : 1.0) * std::exp(o.speaker_spread * rng.uniform(-0.1, 0.1));
  for (auto& w : v.vowel_weights) w = 0.1 + rng.uniform();
  v.rate = std::exp(o.speaker_spread * rng.uniform(-0.2, 0.2));
  v.jitter = rng.uniform(0.004, 0.015);
  v.breath = rng.uniform(0.01, 0.04);
  for (auto& f : v.timbre) {
    f = Biquad::peaking(rng.uniform(400, 5000), o.speaker_spread * rng.uniform(-9, 9),
                        rng.uniform(1.0, 3.0));
  }
  return v;
}

Channel make_channel(const UtteranceRecord& rec, const VoiceSynthOptions& o) {
  Rng rng(derive_seed(o.seed, "channel:" + rec.key.speaker_id + "/" + rec.key.segment_id));
  Channel c;
  c.eq = Biquad::peaking(rng.uniform(300, 5000), o.channel_variation * rng.uniform(-6, 6),
                         rng.uniform(0.7, 2.0));
  c.snr_db = 35.0 - o.channel_variation * rng.uniform(0.0, 20.0);
  c.noise_color = rng.uniform(-0.5, 0.9);
  c.gain = 0.1 * std::pow(10.0, o.channel_variation * rng.uniform(-4.0, 4.0) / 20.0);
  return c;
}

size_t pick_weighted(Rng& rng, const std::array<double, 5>& w) {
  double total = 0;
  for (double x : w) total += x;
  double u = rng.uniform() * total;
  for (size_t i = 0; i < w.size(); ++i) {
    if (u < w[i]) return i;
    u -= w[i];
  }
  return w.size() - 1;
}

}  // namespace

Waveform render_utterance(const UtteranceRecord& rec, double segment_age,
                          const VoiceSynthOptions& o) {
  if (!(o.utterance_seconds > 0.05)) throw std::invalid_argument("utterance too short");
  const Voice voice = make_voice(rec, o);
  Channel chan = make_channel(rec, o);
  Rng rng(derive_seed(o.seed, "utterance:" + rec.key.str()));

  // Age: 0 at 20 years, 1 at 70.
  const double t = o.age_effect * std::clamp((segment_age - 20.0) / 50.0, 0.0, 1.2);
  const double tilt = std::min(0.85 * t, 0.95);
  const double f0 = voice.f0 * (1.0 - 0.1 * t);
  const double jitter = voice.jitter + 0.025 * t;
  const double breath = voice.breath + 0.12 * t;

  const size_t n = static_cast<size_t>(o.utterance_seconds * kFs);
  std::vector<double> source(n, 0.0), frication(n, 0.0);
  std::vector<int> vowel_at(n, -1);
  std::vector<double> env(n, 0.0);

  size_t pos = static_cast<size_t>(rng.uniform(0.03, 0.12) * kFs);
  while (pos < n) {
    if (rng.bernoulli(0.3)) {
      const size_t len = static_cast<size_t>(rng.uniform(0.04, 0.09) * kFs / voice.rate);
      double prev = 0.0;
      for (size_t i = 0; i < len && pos + i < n; ++i) {
        const double w = rng.normal();
        const double shape = std::sin(kPi * static_cast<double>(i) / static_cast<double>(len));
        frication[pos + i] = 0.25 * shape * (w - prev);
        prev = w;
      }
      pos += len;
    }
    const size_t len = static_cast<size_t>(rng.uniform(0.12, 0.28) * kFs / voice.rate);
    const int vowel = static_cast<int>(pick_weighted(rng, voice.vowel_weights));
    const double declination = 1.0 - 0.12 * static_cast<double>(pos) / static_cast<double>(n);
    const double syl_f0 = f0 * declination * rng.uniform(0.9, 1.12);
    const double slope = rng.uniform(-0.15, 0.15);
    double phase = rng.uniform();
    double period_scale = 1.0;
    for (size_t i = 0; i < len && pos + i < n; ++i) {
      const double frac = static_cast<double>(i) / static_cast<double>(len);
      const double inst = syl_f0 * (1.0 + slope * (frac - 0.5)) * period_scale;
      phase += inst / kFs;
      if (phase >= 1.0) {
        phase -= 1.0;
        // Fractional pulse placement spread over two samples.
        const double over = phase * kFs / inst;
        const size_t k = pos + i;
        source[k] += 1.0 - std::min(over, 1.0);
        if (k + 1 < n) source[k + 1] += std::min(over, 1.0);
        period_scale = 1.0 + jitter * rng.normal();
      }
      const double attack = std::min(1.0, frac * len / (0.02 * kFs));
      const double release = std::min(1.0, (1.0 - frac) * len / (0.04 * kFs));
      env[pos + i] = attack * release;
      vowel_at[pos + i] = vowel;
    }
    pos += len + static_cast<size_t>(rng.uniform(0.03, 0.1) * kFs / voice.rate);
  }

  // Glottal pulse shaping, age tilt, breath noise.
  std::vector<double> x(n);
  double g1 = 0, g2 = 0, tl = 0;
  for (size_t i = 0; i < n; ++i) {
    g1 = 0.85 * g1 + source[i];
    g2 = 0.6 * g2 + g1;
    double v = g2 - 0.5 * g1;  // keep some high-frequency content
    tl = (1.0 - tilt) * v + tilt * tl;
    v = tl;
    x[i] = env[i] * (v + breath * 4.0 * rng.normal());
  }

  // Formant cascade, targets glide over 25 ms between vowels.
  std::array<Resonator, 4> res;
  std::array<double, 4> cur = kVowels[0];
  for (auto& f : cur) f *= voice.formant_scale;
  const double glide = 1.0 - std::exp(-1.0 / (0.008 * kFs));
  std::vector<double> y(n);
  for (size_t i = 0; i < n; ++i) {
    if (vowel_at[i] >= 0) {
      const auto& target = kVowels[static_cast<size_t>(vowel_at[i])];
      for (size_t k = 0; k < 4; ++k) cur[k] += glide * (target[k] * voice.formant_scale - cur[k]);
    }
    if (i % 16 == 0) {
      for (size_t k = 0; k < 4; ++k) res[k].set(cur[k], kBandwidths[k] * voice.formant_scale);
    }
    double s = x[i];
    double out = 0.0;
    for (size_t k = 0; k < 4; ++k) {
      s = res[k](s) * 4.0;
      out += s * (k == 0 ? 0.3 : 0.25);
    }
    y[i] = out + frication[i];
  }

  // Speaker timbre, then the recording channel.
  Voice v2 = voice;
  double power = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double s = v2.timbre[0](y[i]);
    s = v2.timbre[1](s);
    y[i] = chan.eq(s);
    power += y[i] * y[i];
  }
  power = std::max(power / static_cast<double>(n), 1e-12);
  const double scale = chan.gain / std::sqrt(power);
  const double noise_rms = chan.gain * std::pow(10.0, -chan.snr_db / 20.0);
  double colored = 0.0;
  const double color_norm = std::sqrt(1.0 - chan.noise_color * chan.noise_color);
  Waveform w;
  w.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    colored = chan.noise_color * colored + color_norm * rng.normal();
    w.samples[i] = std::clamp(y[i] * scale + noise_rms * colored, -1.0, 32767.0 / 32768.0);
  }
  return w;
}

MetadataTable toy_metadata(const ToyCorpusOptions& o) {
  if (o.n_speakers < 2 || o.utterances_per_segment < 1) {
    throw std::invalid_argument("toy corpus needs >= 2 speakers and >= 1 utterance per segment");
  }
  if (!(o.young_min <= o.young_max) || !(o.gap_min <= o.gap_max) || o.gap_min < 0) {
    throw std::invalid_argument("toy corpus: invalid age ranges");
  }
  Rng rng(derive_seed(o.seed, "toy-metadata"));
  MetadataTable table;
  for (int s = 0; s < o.n_speakers; ++s) {
    char spk[16];
    std::snprintf(spk, sizeof(spk), "spk%04d", s + 1);
    const double young = rng.uniform(o.young_min, o.young_max);
    const double old = young + rng.uniform(o.gap_min, o.gap_max);
    for (int g = 0; g < 2; ++g) {
      char seg[16];
      std::snprintf(seg, sizeof(seg), "seg%03d", g + 1);
      for (int u = 0; u < o.utterances_per_segment; ++u) {
        char utt[16];
        std::snprintf(utt, sizeof(utt), "utt%03d", u + 1);
        UtteranceRecord r;
        r.key = {spk, seg, utt};
        r.age = g == 0 ? young : old;
        r.nationality = "Synthland";
        r.gender = s % 2 == 0 ? Gender::kMale : Gender::kFemale;
        table.push_back(std::move(r));
      }
    }
  }
  return table;
}

ToyCorpus synthesize_toy_corpus(const ToyCorpusOptions& o) {
  ToyCorpus c;
  c.table = toy_metadata(o);
  VoiceSynthOptions voice = o.voice;
  voice.seed = derive_seed(o.seed, "toy-voices");
  const auto segages = compute_segment_ages(c.table);
  for (const auto& r : c.table) c.audio.emplace(r.key, render_utterance(r, segages.age(r.key), voice));
  return c;
}

}  // namespace casv
