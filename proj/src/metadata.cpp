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

#include "casv/metadata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "casv/rng.hpp"
#include "casv/text_util.hpp"

namespace casv {

namespace {

constexpr std::string_view kHeader =
    "speaker_id,segment_id,utterance_id,age,nationality,gender";

double parse_age_field(std::string_view field, const std::string& where) {
  const auto parts = split(field, ';');
  if (parts.empty()) throw MetadataError(where + ": empty age field");
  double sum = 0.0;
  for (auto p : parts) {
    const auto v = parse_double(trim(p));
    if (!v) throw MetadataError(where + ": bad age value '" + std::string(p) + "'");
    if (!std::isfinite(*v) || *v < 0.0) {
      throw MetadataError(where + ": age must be finite and non-negative");
    }
    sum += *v;
  }
  return sum / static_cast<double>(parts.size());
}

}  // namespace

std::string_view to_string(Gender g) { return g == Gender::kMale ? "m" : "f"; }

Gender parse_gender(std::string_view s) {
  if (s == "m" || s == "male" || s == "M") return Gender::kMale;
  if (s == "f" || s == "female" || s == "F") return Gender::kFemale;
  throw MetadataError("unknown gender '" + std::string(s) + "'");
}

std::string UtteranceKey::path() const { return str() + ".wav"; }

std::string UtteranceKey::str() const {
  return speaker_id + "/" + segment_id + "/" + utterance_id;
}

UtteranceKey UtteranceKey::parse(std::string_view text) {
  if (text.size() > 4 && text.substr(text.size() - 4) == ".wav") {
    text.remove_suffix(4);
  }
  const auto parts = split(text, '/');
  if (parts.size() != 3 || parts[0].empty() || parts[1].empty() || parts[2].empty()) {
    throw MetadataError("not a speaker/segment/utterance key: '" + std::string(text) + "'");
  }
  return {std::string(parts[0]), std::string(parts[1]), std::string(parts[2])};
}

void validate_table(const MetadataTable& table) {
  std::set<UtteranceKey> seen;
  std::map<std::string, std::pair<std::string, Gender>> speaker_attrs;
  for (const auto& r : table) {
    if (!std::isfinite(r.age) || r.age < 0.0) {
      throw MetadataError("utterance " + r.key.str() + ": age must be finite and non-negative");
    }
    if (!seen.insert(r.key).second) {
      throw MetadataError("duplicate utterance " + r.key.str());
    }
    auto [it, inserted] =
        speaker_attrs.try_emplace(r.key.speaker_id, r.nationality, r.gender);
    if (!inserted && (it->second.first != r.nationality || it->second.second != r.gender)) {
      throw MetadataError("speaker " + r.key.speaker_id +
                          " has conflicting nationality/gender across rows");
    }
  }
}

MetadataTable parse_metadata(std::istream& in, std::string_view source) {
  MetadataTable table;
  std::string line;
  size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    const auto text = trim(line);
    if (text.empty()) continue;
    const std::string where = std::string(source) + ":" + std::to_string(line_no);
    if (!header_seen) {
      if (text != kHeader) {
        throw MetadataError(where + ": expected header '" + std::string(kHeader) + "'");
      }
      header_seen = true;
      continue;
    }
    const auto f = split(text, ',');
    if (f.size() != 6) {
      throw MetadataError(where + ": expected 6 fields, got " + std::to_string(f.size()));
    }
    UtteranceRecord r;
    r.key = {std::string(trim(f[0])), std::string(trim(f[1])), std::string(trim(f[2]))};
    if (r.key.speaker_id.empty() || r.key.segment_id.empty() || r.key.utterance_id.empty()) {
      throw MetadataError(where + ": empty identifier");
    }
    r.age = parse_age_field(f[3], where);
    r.nationality = std::string(trim(f[4]));
    try {
      r.gender = parse_gender(trim(f[5]));
    } catch (const MetadataError& e) {
      throw MetadataError(where + ": " + e.what());
    }
    table.push_back(std::move(r));
  }
  if (!header_seen) throw MetadataError(std::string(source) + ": missing header");
  validate_table(table);
  return table;
}

MetadataTable load_metadata(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MetadataError("cannot open metadata file " + path.string());
  return parse_metadata(in, path.string());
}

void write_metadata(const MetadataTable& table, std::ostream& out) {
  out << kHeader << '\n';
  for (const auto& r : table) {
    out << r.key.speaker_id << ',' << r.key.segment_id << ',' << r.key.utterance_id << ','
        << format_double(r.age) << ',' << r.nationality << ',' << to_string(r.gender) << '\n';
  }
}

void write_metadata(const MetadataTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw MetadataError("cannot write " + path.string());
  write_metadata(table, out);
}

double SegmentAgeTable::age(const SegmentKey& k) const {
  const auto it = ages_.find(k);
  if (it == ages_.end()) {
    throw MetadataError("no segment age for " + k.speaker_id + "/" + k.segment_id);
  }
  return it->second;
}

SegmentAgeTable compute_segment_ages(const MetadataTable& table) {
  if (table.empty()) throw MetadataError("compute_segment_ages: empty table");
  // Sum in key order so the result does not depend on row order.
  std::map<SegmentKey, std::vector<std::pair<std::string, double>>> groups;
  for (const auto& r : table) {
    groups[segment_of(r.key)].emplace_back(r.key.utterance_id, r.age);
  }
  std::map<SegmentKey, double> ages;
  for (auto& [seg, utts] : groups) {
    std::sort(utts.begin(), utts.end());
    double sum = 0.0;
    for (const auto& u : utts) sum += u.second;
    ages.emplace(seg, sum / static_cast<double>(utts.size()));
  }
  return SegmentAgeTable(std::move(ages));
}

void write_segment_ages(const MetadataTable& table, const SegmentAgeTable& segages,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw MetadataError("cannot write " + path.string());
  out << kHeader << ",segment_age\n";
  for (const auto& r : table) {
    out << r.key.speaker_id << ',' << r.key.segment_id << ',' << r.key.utterance_id << ','
        << format_double(r.age) << ',' << r.nationality << ',' << to_string(r.gender) << ','
        << format_double(segages.age(r.key)) << '\n';
  }
}

AgeGroupId assign_age_group(double age) {
  if (!std::isfinite(age) || age < 0.0) {
    throw std::invalid_argument("assign_age_group: age must be finite and non-negative");
  }
  const double years = std::floor(age);
  if (years <= 20.0) return {0};
  if (years >= 71.0) return {6};
  // 21..30 -> 1, 31..40 -> 2, ..., 61..70 -> 5
  return {static_cast<int>((years - 21.0) / 10.0) + 1};
}

std::vector<SpeakerAgeSpan> speaker_age_spans(const SegmentAgeTable& segages) {
  if (segages.empty()) throw MetadataError("speaker_age_spans: empty segment table");
  std::vector<SpeakerAgeSpan> spans;
  for (const auto& [seg, age] : segages.entries()) {
    if (spans.empty() || spans.back().speaker_id != seg.speaker_id) {
      spans.push_back({seg.speaker_id, age, age, 0.0});
    } else {
      auto& s = spans.back();
      s.min_age = std::min(s.min_age, age);
      s.max_age = std::max(s.max_age, age);
    }
  }
  for (auto& s : spans) s.max_gap = s.max_age - s.min_age;
  return spans;
}

namespace {

std::string cohort_nationality(int cohort) {
  static constexpr std::string_view kNations[] = {
      "USA", "UK", "India", "Canada", "Australia", "Germany", "Ireland", "Mexico", "Norway",
      "Italy"};
  const int n = cohort / 2;
  std::string name(kNations[n % 10]);
  if (n >= 10) name += std::to_string(n / 10);
  return name;
}

std::string numbered(std::string_view prefix, int i, int width) {
  std::string digits = std::to_string(i);
  if (static_cast<int>(digits.size()) < width) {
    digits.insert(0, static_cast<size_t>(width) - digits.size(), '0');
  }
  return std::string(prefix) + digits;
}

}  // namespace

MetadataTable generate_synthetic_metadata(const SyntheticMetadataOptions& o) {
  if (o.n_speakers < 1 || o.segments_per_speaker < 1 || o.utterances_per_segment < 1) {
    throw std::invalid_argument("synthetic metadata: counts must be >= 1");
  }
  if (o.n_speakers < o.min_cohort_size) {
    throw std::invalid_argument("synthetic metadata: need at least " +
                                std::to_string(o.min_cohort_size) +
                                " speakers to form one nationality-gender cohort");
  }
  const double range = o.age_max - o.age_min;
  if (range < 0.0 || o.age_min - 2.0 * o.utterance_age_jitter < 0.0) {
    throw std::invalid_argument("synthetic metadata: invalid age range");
  }
  if (o.wide_span_fraction < 0.0 || o.wide_span_fraction > 1.0) {
    throw std::invalid_argument("synthetic metadata: wide_span_fraction outside [0,1]");
  }
  const bool want_wide = o.wide_span_fraction > 0.0 && o.segments_per_speaker > 1;
  if (want_wide && range < o.wide_span_years) {
    throw std::invalid_argument("synthetic metadata: age range narrower than wide span");
  }

  Rng rng(derive_seed(o.seed, "synthetic-metadata"));
  const int n = o.n_speakers;

  // Balanced cohorts, each with more than min_cohort_size speakers.
  const int n_cohorts = std::max(1, n / (o.min_cohort_size + 1));
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  rng.shuffle(order);
  std::vector<int> cohort_of(static_cast<size_t>(n));
  for (int p = 0; p < n; ++p) cohort_of[static_cast<size_t>(order[static_cast<size_t>(p)])] = p % n_cohorts;

  rng.shuffle(order);
  const int n_wide = want_wide ? static_cast<int>(std::lround(o.wide_span_fraction * n)) : 0;
  std::vector<bool> wide(static_cast<size_t>(n), false);
  for (int p = 0; p < n_wide; ++p) wide[static_cast<size_t>(order[static_cast<size_t>(p)])] = true;

  MetadataTable table;
  for (int s = 0; s < n; ++s) {
    const int cohort = cohort_of[static_cast<size_t>(s)];
    const std::string spk = numbered("spk", s + 1, 4);
    double span = 0.0;
    if (o.segments_per_speaker > 1) {
      if (wide[static_cast<size_t>(s)]) {
        span = rng.uniform(o.wide_span_years, std::min(range, o.wide_span_years + 20.0));
      } else {
        span = rng.uniform(0.0, std::min(range, std::max(0.0, o.wide_span_years - 1.0)));
      }
    }
    const double base = rng.uniform(o.age_min, o.age_max - span);
    for (int g = 0; g < o.segments_per_speaker; ++g) {
      double seg_age = base;
      if (g == o.segments_per_speaker - 1 && g > 0) {
        seg_age = base + span;
      } else if (g > 0) {
        seg_age = base + rng.uniform(0.0, span);
      }
      std::vector<double> jitter(static_cast<size_t>(o.utterances_per_segment));
      double mean = 0.0;
      for (auto& j : jitter) {
        j = rng.uniform(-o.utterance_age_jitter, o.utterance_age_jitter);
        mean += j;
      }
      mean /= static_cast<double>(jitter.size());
      for (int u = 0; u < o.utterances_per_segment; ++u) {
        UtteranceRecord r;
        r.key = {spk, numbered("seg", g + 1, 3), numbered("utt", u + 1, 3)};
        r.age = seg_age + jitter[static_cast<size_t>(u)] - mean;
        r.nationality = cohort_nationality(cohort);
        r.gender = (cohort % 2 == 0) ? Gender::kMale : Gender::kFemale;
        table.push_back(std::move(r));
      }
    }
  }
  return table;
}

}  // namespace casv
