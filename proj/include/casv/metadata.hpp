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

#ifndef CASV_METADATA_HPP_
#define CASV_METADATA_HPP_

#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace casv {

class MetadataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Gender { kMale, kFemale };

std::string_view to_string(Gender g);
Gender parse_gender(std::string_view s);

/// speaker_id/segment_id/utterance_id, mirroring the on-disk layout
/// `speaker_id/segment_id/utterance_id.wav`.
struct UtteranceKey {
  std::string speaker_id;
  std::string segment_id;
  std::string utterance_id;

  auto operator<=>(const UtteranceKey&) const = default;
  bool operator==(const UtteranceKey&) const = default;

  /// "spk/seg/utt.wav"
  std::string path() const;
  /// "spk/seg/utt"
  std::string str() const;
  /// Accepts both forms above; throws MetadataError otherwise.
  static UtteranceKey parse(std::string_view text);
};

struct SegmentKey {
  std::string speaker_id;
  std::string segment_id;

  auto operator<=>(const SegmentKey&) const = default;
  bool operator==(const SegmentKey&) const = default;
};

inline SegmentKey segment_of(const UtteranceKey& k) {
  return {k.speaker_id, k.segment_id};
}

struct UtteranceRecord {
  UtteranceKey key;
  double age = 0.0;  // years; already averaged over face estimates
  std::string nationality;
  Gender gender = Gender::kMale;

  bool operator==(const UtteranceRecord&) const = default;
};

using MetadataTable = std::vector<UtteranceRecord>;

/// Checks every table invariant; throws MetadataError naming the culprit.
void validate_table(const MetadataTable& table);

/// Header: speaker_id,segment_id,utterance_id,age,nationality,gender.
/// `age` may be a ';'-joined list of per-face estimates, which is averaged.
MetadataTable parse_metadata(std::istream& in, std::string_view source = "<stream>");
MetadataTable load_metadata(const std::filesystem::path& path);
void write_metadata(const MetadataTable& table, std::ostream& out);
void write_metadata(const MetadataTable& table, const std::filesystem::path& path);

/// Segment-level age label: mean of the segment's utterance ages.
class SegmentAgeTable {
 public:
  SegmentAgeTable() = default;
  explicit SegmentAgeTable(std::map<SegmentKey, double> ages) : ages_(std::move(ages)) {}

  double age(const SegmentKey& k) const;
  double age(const UtteranceKey& k) const { return age(segment_of(k)); }
  bool contains(const SegmentKey& k) const { return ages_.count(k) != 0; }
  size_t size() const { return ages_.size(); }
  bool empty() const { return ages_.empty(); }
  const std::map<SegmentKey, double>& entries() const { return ages_; }

 private:
  std::map<SegmentKey, double> ages_;
};

SegmentAgeTable compute_segment_ages(const MetadataTable& table);

/// Same keys as the metadata file plus a `segment_age` column.
void write_segment_ages(const MetadataTable& table, const SegmentAgeTable& segages,
                        const std::filesystem::path& path);

/// Age-group bins over floor(age): [0,20] [21,30] [31,40] [41,50] [51,60]
/// [61,70] [71,+inf). Ages past 100 land in the last bin.
struct AgeGroupId {
  int index = 0;

  static constexpr int kCount = 7;
  auto operator<=>(const AgeGroupId&) const = default;
};

AgeGroupId assign_age_group(double age);

struct SpeakerAgeSpan {
  std::string speaker_id;
  double min_age = 0.0;
  double max_age = 0.0;
  double max_gap = 0.0;
};

/// One span per speaker (sorted by id), computed over segment ages.
std::vector<SpeakerAgeSpan> speaker_age_spans(const SegmentAgeTable& segages);

struct SyntheticMetadataOptions {
  uint64_t seed = 0;
  int n_speakers = 50;
  int segments_per_speaker = 6;
  int utterances_per_segment = 4;
  double age_min = 18.0;
  double age_max = 75.0;
  /// Fraction of speakers whose segment ages span more than
  /// `wide_span_years`; the rest span at most that much.
  double wide_span_fraction = 0.5;
  double wide_span_years = 23.0;
  /// Per-face estimate scatter around the segment age. Utterance ages are
  /// re-centred so each segment mean is exactly the designed age.
  double utterance_age_jitter = 1.5;
  int min_cohort_size = 5;
};

MetadataTable generate_synthetic_metadata(const SyntheticMetadataOptions& options);

}  // namespace casv

#endif  // CASV_METADATA_HPP_
