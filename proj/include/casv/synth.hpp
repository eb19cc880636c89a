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

// Source-filter voice synthesizer for fixtures and the toy experiments.
//
// A speaker is a pitch range, formant scaling, vowel habits, speaking rate
// and a fixed timbre EQ, all drawn from (seed, speaker_id). A segment adds
// a recording channel (EQ and background noise) drawn from (seed, speaker,
// segment). Age acts on the glottal source: with increasing segment age the
// excitation is low-passed (spectral tilt), pitch drops, and jitter and
// breath noise grow.

#ifndef CASV_SYNTH_HPP_
#define CASV_SYNTH_HPP_

#include <cstdint>
#include <map>

#include "casv/features.hpp"
#include "casv/metadata.hpp"

namespace casv {

struct VoiceSynthOptions {
  uint64_t seed = 0;
  double utterance_seconds = 3.0;
  double age_effect = 1.0;         // 0 disables every age-dependent change
  double channel_variation = 1.0;  // scales per-segment EQ and noise
  double speaker_spread = 1.0;     // scales between-speaker differences
};

/// Deterministic in (options.seed, record key, gender, segment_age).
Waveform render_utterance(const UtteranceRecord& rec, double segment_age,
                          const VoiceSynthOptions& options);

struct ToyCorpusOptions {
  uint64_t seed = 0;
  int n_speakers = 20;
  int utterances_per_segment = 10;
  /// Two recording phases per speaker: the first at an age drawn from
  /// [young_min, young_max], the second `gap` years later.
  double young_min = 22.0;
  double young_max = 32.0;
  double gap_min = 24.0;
  double gap_max = 34.0;
  VoiceSynthOptions voice;
};

/// Two same-nationality cohorts split by gender; segments seg001 (young)
/// and seg002 (old) per speaker.
MetadataTable toy_metadata(const ToyCorpusOptions& options);

struct ToyCorpus {
  MetadataTable table;
  std::map<UtteranceKey, Waveform> audio;
};

ToyCorpus synthesize_toy_corpus(const ToyCorpusOptions& options);

}  // namespace casv

#endif  // CASV_SYNTH_HPP_
