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

// Trial protocol construction: cross-age target pairs and cohort-matched
// non-target pairs drawn from age-labelled utterance metadata.

#ifndef CASV_PROTOCOL_HPP_
#define CASV_PROTOCOL_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "casv/metadata.hpp"

namespace casv {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TrialLabel { kTarget, kNontarget };

struct Trial {
  TrialLabel label = TrialLabel::kTarget;
  UtteranceKey enroll;
  UtteranceKey test;
  double age_gap = 0.0;  // |segment age(enroll) - segment age(test)|

  bool is_target() const { return label == TrialLabel::kTarget; }
};

enum class PositiveRule { kRandom, kCrossSegment, kCrossAge, kIntraSegment };
enum class NegativeRule { kRandom, kSameNationalityGender, kSameNationality, kSameGender };

std::string_view to_string(PositiveRule r);
std::string_view to_string(NegativeRule r);

struct ProtocolSpec {
  std::string name = "custom";
  PositiveRule positive_rule = PositiveRule::kRandom;
  double min_gap = 0.0;  // cross_age only; pair gap must be >= min_gap
  NegativeRule negative_rule = NegativeRule::kRandom;
  /// Enrolment requires a speaker max gap strictly above this, when set.
  std::optional<double> min_speaker_max_gap;
  int min_cohort_size = 5;
  int positives_per_speaker = 40;
  /// Unset: each speaker gets as many negatives as it got positives.
  std::optional<int> negatives_per_speaker;
  uint64_t seed = 0;

  void validate() const;
};

/// Named presets: vox-ca5/10/15/20, only-ca5/10/15/20, only-n, only-g,
/// only-i, our-e, our-h. Lookup is case-insensitive.
ProtocolSpec preset(std::string_view name, uint64_t seed = 0);
std::vector<std::string> preset_names();

struct TrialProtocol {
  ProtocolSpec spec;
  std::vector<Trial> trials;
  std::set<std::string> speakers;  // enrolled speakers
};

struct ProtocolStats {
  size_t n_speakers = 0;
  size_t n_trials = 0;
  size_t n_positive = 0;
  size_t n_negative = 0;
  // Population statistics; absent when the class has no trials.
  std::optional<double> positive_gap_mean;
  std::optional<double> positive_gap_std;
  std::optional<double> negative_gap_mean;
  std::optional<double> negative_gap_std;
};

std::set<std::string> eligible_speakers(const std::vector<SpeakerAgeSpan>& spans,
                                        double min_speaker_max_gap);

struct PositiveTrials {
  std::vector<Trial> trials;
  size_t skipped_speakers = 0;  // candidates without a single qualifying pair
};

/// `candidates` restricts which speakers are considered; when empty every
/// speaker in the table (subject to the ProtocolSpec eligibility rule) is.
PositiveTrials build_positive_trials(const MetadataTable& table, const SegmentAgeTable& segages,
                                     const ProtocolSpec& spec,
                                     const std::set<std::string>& candidates = {});

/// Negatives anchored on each enrolled speaker's utterances. `quota` gives
/// the number of negatives per enrolled speaker.
std::vector<Trial> build_negative_trials(const MetadataTable& table,
                                         const SegmentAgeTable& segages,
                                         const ProtocolSpec& spec,
                                         const std::map<std::string, size_t>& quota);

TrialProtocol build_protocol(const MetadataTable& table, const ProtocolSpec& spec);

ProtocolStats protocol_stats(const TrialProtocol& protocol);

/// `<label> <enroll-path> <test-path>` per line, label 1 = target.
void write_trials(const TrialProtocol& protocol, const std::filesystem::path& path);
/// Age gaps are filled in from `segages` when given, NaN otherwise.
TrialProtocol read_trials(const std::filesystem::path& path,
                          const SegmentAgeTable* segages = nullptr);

/// Human-readable table plus `key=value` file.
void write_stats_report(const ProtocolStats& stats, std::string_view protocol_name,
                        const std::filesystem::path& text_path,
                        const std::filesystem::path& kv_path);
std::string format_stats_table(const ProtocolStats& stats, std::string_view protocol_name);

}  // namespace casv

#endif  // CASV_PROTOCOL_HPP_
