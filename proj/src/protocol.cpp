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

#include "casv/protocol.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "casv/rng.hpp"
#include "casv/text_util.hpp"

namespace casv {

namespace {

struct SpeakerInfo {
  std::string nationality;
  Gender gender = Gender::kMale;
  std::vector<UtteranceKey> utterances;  // sorted
};

std::map<std::string, SpeakerInfo> index_speakers(const MetadataTable& table) {
  std::map<std::string, SpeakerInfo> speakers;
  for (const auto& r : table) {
    auto& info = speakers[r.key.speaker_id];
    info.nationality = r.nationality;
    info.gender = r.gender;
    info.utterances.push_back(r.key);
  }
  for (auto& [id, info] : speakers) std::sort(info.utterances.begin(), info.utterances.end());
  return speakers;
}

bool uses_cohorts(NegativeRule r) { return r != NegativeRule::kRandom; }

std::string cohort_key(const SpeakerInfo& s, NegativeRule r) {
  switch (r) {
    case NegativeRule::kRandom:
      return "*";
    case NegativeRule::kSameNationalityGender:
      return s.nationality + "|" + std::string(to_string(s.gender));
    case NegativeRule::kSameNationality:
      return s.nationality;
    case NegativeRule::kSameGender:
      return std::string(to_string(s.gender));
  }
  return "*";
}

std::map<std::string, std::vector<std::string>> cohorts(
    const std::map<std::string, SpeakerInfo>& speakers, NegativeRule r) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [id, info] : speakers) out[cohort_key(info, r)].push_back(id);
  return out;
}

bool positive_pair_qualifies(const UtteranceKey& a, const UtteranceKey& b, double gap,
                             const ProtocolSpec& spec) {
  const bool same_segment = a.segment_id == b.segment_id;
  switch (spec.positive_rule) {
    case PositiveRule::kRandom:
      return true;
    case PositiveRule::kCrossSegment:
      return !same_segment;
    case PositiveRule::kCrossAge:
      return !same_segment && gap >= spec.min_gap;
    case PositiveRule::kIntraSegment:
      return same_segment;
  }
  return false;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

std::string_view to_string(PositiveRule r) {
  switch (r) {
    case PositiveRule::kRandom:
      return "random";
    case PositiveRule::kCrossSegment:
      return "cross_segment";
    case PositiveRule::kCrossAge:
      return "cross_age";
    case PositiveRule::kIntraSegment:
      return "intra_segment";
  }
  return "?";
}

std::string_view to_string(NegativeRule r) {
  switch (r) {
    case NegativeRule::kRandom:
      return "random";
    case NegativeRule::kSameNationalityGender:
      return "same_nationality_gender";
    case NegativeRule::kSameNationality:
      return "same_nationality";
    case NegativeRule::kSameGender:
      return "same_gender";
  }
  return "?";
}

void ProtocolSpec::validate() const {
  if (positive_rule == PositiveRule::kCrossAge && !(min_gap > 0.0)) {
    throw ProtocolError("cross_age positive rule needs min_gap > 0");
  }
  if (min_cohort_size < 2) throw ProtocolError("min_cohort_size must be >= 2");
  if (positives_per_speaker < 1) throw ProtocolError("positives_per_speaker must be >= 1");
  if (negatives_per_speaker && *negatives_per_speaker < 0) {
    throw ProtocolError("negatives_per_speaker must be >= 0");
  }
}

ProtocolSpec preset(std::string_view name, uint64_t seed) {
  const std::string n = lower(name);
  ProtocolSpec spec;
  spec.name = n;
  spec.seed = seed;
  for (int gap : {5, 10, 15, 20}) {
    const std::string suffix = "ca" + std::to_string(gap);
    if (n == "vox-" + suffix || n == "only-" + suffix) {
      spec.positive_rule = PositiveRule::kCrossAge;
      spec.min_gap = gap;
      spec.min_speaker_max_gap = gap + 2.0;
      spec.negative_rule = n[0] == 'v' ? NegativeRule::kSameNationalityGender
                                       : NegativeRule::kRandom;
      return spec;
    }
  }
  if (n == "only-n") {
    spec.negative_rule = NegativeRule::kSameNationality;
  } else if (n == "only-g") {
    spec.negative_rule = NegativeRule::kSameGender;
  } else if (n == "only-i") {
    spec.positive_rule = PositiveRule::kIntraSegment;
  } else if (n == "our-e") {
    // random positives, random negatives
  } else if (n == "our-h") {
    spec.negative_rule = NegativeRule::kSameNationalityGender;
  } else {
    throw ProtocolError("unknown protocol preset '" + std::string(name) + "'");
  }
  return spec;
}

std::vector<std::string> preset_names() {
  return {"vox-ca5",   "vox-ca10", "vox-ca15", "vox-ca20", "only-ca5", "only-ca10",
          "only-ca15", "only-ca20", "only-n",  "only-g",   "only-i",   "our-e",
          "our-h"};
}

std::set<std::string> eligible_speakers(const std::vector<SpeakerAgeSpan>& spans,
                                        double min_speaker_max_gap) {
  std::set<std::string> out;
  for (const auto& s : spans) {
    if (s.max_gap > min_speaker_max_gap) out.insert(s.speaker_id);
  }
  return out;
}

PositiveTrials build_positive_trials(const MetadataTable& table, const SegmentAgeTable& segages,
                                     const ProtocolSpec& spec,
                                     const std::set<std::string>& candidates) {
  spec.validate();
  const auto speakers = index_speakers(table);
  std::set<std::string> pool = candidates;
  if (pool.empty()) {
    for (const auto& [id, info] : speakers) pool.insert(id);
    if (spec.min_speaker_max_gap) {
      pool = eligible_speakers(speaker_age_spans(segages), *spec.min_speaker_max_gap);
    }
  }
  if (pool.empty()) throw ProtocolError(spec.name + ": no eligible speakers");

  PositiveTrials out;
  for (const auto& spk : pool) {
    const auto it = speakers.find(spk);
    if (it == speakers.end()) throw ProtocolError("unknown speaker " + spk);
    const auto& utts = it->second.utterances;

    std::vector<Trial> qualifying;
    for (size_t i = 0; i < utts.size(); ++i) {
      const double age_i = segages.age(utts[i]);
      for (size_t j = i + 1; j < utts.size(); ++j) {
        const double gap = std::abs(age_i - segages.age(utts[j]));
        if (positive_pair_qualifies(utts[i], utts[j], gap, spec)) {
          qualifying.push_back({TrialLabel::kTarget, utts[i], utts[j], gap});
        }
      }
    }
    if (qualifying.empty()) {
      ++out.skipped_speakers;
      continue;
    }
    Rng rng(derive_seed(spec.seed, "positive:" + spk));
    auto picks = rng.sample_without_replacement(
        qualifying.size(), static_cast<size_t>(spec.positives_per_speaker));
    std::sort(picks.begin(), picks.end());
    for (size_t p : picks) out.trials.push_back(qualifying[p]);
  }
  if (out.trials.empty()) {
    throw ProtocolError(spec.name + ": no speaker has a qualifying positive pair");
  }
  return out;
}

std::vector<Trial> build_negative_trials(const MetadataTable& table,
                                         const SegmentAgeTable& segages,
                                         const ProtocolSpec& spec,
                                         const std::map<std::string, size_t>& quota) {
  spec.validate();
  const auto speakers = index_speakers(table);
  const auto groups = cohorts(speakers, spec.negative_rule);
  const size_t floor = uses_cohorts(spec.negative_rule)
                           ? static_cast<size_t>(spec.min_cohort_size)
                           : size_t{2};
  bool any_cohort = false;
  for (const auto& [key, members] : groups) any_cohort |= members.size() >= floor;
  if (!any_cohort) {
    throw ProtocolError(spec.name + ": no cohort has at least " + std::to_string(floor) +
                        " speakers");
  }

  std::vector<Trial> out;
  for (const auto& [spk, want] : quota) {
    const auto it = speakers.find(spk);
    if (it == speakers.end()) throw ProtocolError("unknown speaker " + spk);
    if (want == 0) continue;
    const auto& members = groups.at(cohort_key(it->second, spec.negative_rule));
    if (members.size() < floor) continue;
    std::vector<const std::string*> partners;
    for (const auto& m : members) {
      if (m != spk) partners.push_back(&m);
    }
    if (partners.empty()) continue;

    const auto& own = it->second.utterances;
    Rng rng(derive_seed(spec.seed, "negative:" + spk));
    std::set<std::pair<UtteranceKey, UtteranceKey>> used;
    size_t emitted = 0;
    const size_t max_attempts = 20 * want + 100;
    for (size_t attempt = 0; attempt < max_attempts && emitted < want; ++attempt) {
      const auto& enroll = own[rng.uniform_index(own.size())];
      const auto& partner = speakers.at(*partners[rng.uniform_index(partners.size())]);
      const auto& test = partner.utterances[rng.uniform_index(partner.utterances.size())];
      if (!used.emplace(enroll, test).second) continue;
      out.push_back({TrialLabel::kNontarget, enroll, test,
                     std::abs(segages.age(enroll) - segages.age(test))});
      ++emitted;
    }
  }
  return out;
}

TrialProtocol build_protocol(const MetadataTable& table, const ProtocolSpec& spec) {
  spec.validate();
  const auto segages = compute_segment_ages(table);
  const auto speakers = index_speakers(table);

  std::set<std::string> candidates;
  if (spec.min_speaker_max_gap) {
    candidates = eligible_speakers(speaker_age_spans(segages), *spec.min_speaker_max_gap);
  } else {
    for (const auto& [id, info] : speakers) candidates.insert(id);
  }
  if (uses_cohorts(spec.negative_rule)) {
    const auto groups = cohorts(speakers, spec.negative_rule);
    std::erase_if(candidates, [&](const std::string& id) {
      return groups.at(cohort_key(speakers.at(id), spec.negative_rule)).size() <
             static_cast<size_t>(spec.min_cohort_size);
    });
  }
  if (candidates.empty()) throw ProtocolError(spec.name + ": no eligible speakers");

  auto positives = build_positive_trials(table, segages, spec, candidates);

  std::map<std::string, size_t> quota;
  for (const auto& t : positives.trials) ++quota[t.enroll.speaker_id];
  if (spec.negatives_per_speaker) {
    for (auto& [spk, n] : quota) n = static_cast<size_t>(*spec.negatives_per_speaker);
  }
  auto negatives = build_negative_trials(table, segages, spec, quota);

  TrialProtocol protocol;
  protocol.spec = spec;
  for (const auto& [spk, n] : quota) protocol.speakers.insert(spk);
  protocol.trials = std::move(positives.trials);
  protocol.trials.insert(protocol.trials.end(), negatives.begin(), negatives.end());
  std::stable_sort(protocol.trials.begin(), protocol.trials.end(),
                   [](const Trial& a, const Trial& b) {
                     return a.enroll.speaker_id < b.enroll.speaker_id;
                   });
  return protocol;
}

ProtocolStats protocol_stats(const TrialProtocol& protocol) {
  ProtocolStats s;
  s.n_speakers = protocol.speakers.size();
  s.n_trials = protocol.trials.size();
  double pos_sum = 0.0, neg_sum = 0.0;
  for (const auto& t : protocol.trials) {
    if (t.is_target()) {
      ++s.n_positive;
      pos_sum += t.age_gap;
    } else {
      ++s.n_negative;
      neg_sum += t.age_gap;
    }
  }
  double pos_ss = 0.0, neg_ss = 0.0;
  const double pos_mean = s.n_positive ? pos_sum / static_cast<double>(s.n_positive) : 0.0;
  const double neg_mean = s.n_negative ? neg_sum / static_cast<double>(s.n_negative) : 0.0;
  for (const auto& t : protocol.trials) {
    const double d = t.age_gap - (t.is_target() ? pos_mean : neg_mean);
    (t.is_target() ? pos_ss : neg_ss) += d * d;
  }
  if (s.n_positive) {
    s.positive_gap_mean = pos_mean;
    s.positive_gap_std = std::sqrt(pos_ss / static_cast<double>(s.n_positive));
  }
  if (s.n_negative) {
    s.negative_gap_mean = neg_mean;
    s.negative_gap_std = std::sqrt(neg_ss / static_cast<double>(s.n_negative));
  }
  return s;
}

void write_trials(const TrialProtocol& protocol, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ProtocolError("cannot write " + path.string());
  for (const auto& t : protocol.trials) {
    out << (t.is_target() ? 1 : 0) << ' ' << t.enroll.path() << ' ' << t.test.path() << '\n';
  }
}

TrialProtocol read_trials(const std::filesystem::path& path, const SegmentAgeTable* segages) {
  std::ifstream in(path);
  if (!in) throw ProtocolError("cannot open trial file " + path.string());
  TrialProtocol protocol;
  protocol.spec.name = path.stem().string();
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    const auto tok = tokenize(line);
    if (tok.size() != 3) throw ProtocolError(where + ": expected '<label> <enroll> <test>'");
    Trial t;
    if (tok[0] == "1") {
      t.label = TrialLabel::kTarget;
    } else if (tok[0] == "0") {
      t.label = TrialLabel::kNontarget;
    } else {
      throw ProtocolError(where + ": label must be 1 or 0, got '" + std::string(tok[0]) + "'");
    }
    try {
      t.enroll = UtteranceKey::parse(tok[1]);
      t.test = UtteranceKey::parse(tok[2]);
    } catch (const MetadataError& e) {
      throw ProtocolError(where + ": " + e.what());
    }
    t.age_gap = segages ? std::abs(segages->age(t.enroll) - segages->age(t.test))
                        : std::numeric_limits<double>::quiet_NaN();
    if (t.is_target()) protocol.speakers.insert(t.enroll.speaker_id);
    protocol.trials.push_back(std::move(t));
  }
  return protocol;
}

std::string format_stats_table(const ProtocolStats& s, std::string_view name) {
  const auto cell = [](const std::optional<double>& mean, const std::optional<double>& sd) {
    if (!mean) return std::string("n/a");
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << *mean << " +- " << *sd;
    return os.str();
  };
  std::ostringstream os;
  os << "# age-gap statistics use the population standard deviation\n";
  os << std::left << std::setw(14) << "test set" << std::setw(10) << "speakers" << std::setw(10)
     << "trials" << std::setw(18) << "positive gap" << "negative gap\n";
  os << std::left << std::setw(14) << name << std::setw(10) << s.n_speakers << std::setw(10)
     << s.n_trials << std::setw(18) << cell(s.positive_gap_mean, s.positive_gap_std)
     << cell(s.negative_gap_mean, s.negative_gap_std) << '\n';
  return os.str();
}

void write_stats_report(const ProtocolStats& s, std::string_view name,
                        const std::filesystem::path& text_path,
                        const std::filesystem::path& kv_path) {
  {
    std::ofstream out(text_path);
    if (!out) throw ProtocolError("cannot write " + text_path.string());
    out << format_stats_table(s, name);
  }
  std::ofstream kv(kv_path);
  if (!kv) throw ProtocolError("cannot write " + kv_path.string());
  const auto opt = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string("absent");
  };
  kv << "protocol=" << name << '\n'
     << "std_convention=population\n"
     << "n_speakers=" << s.n_speakers << '\n'
     << "n_trials=" << s.n_trials << '\n'
     << "n_positive=" << s.n_positive << '\n'
     << "n_negative=" << s.n_negative << '\n'
     << "positive_gap_mean=" << opt(s.positive_gap_mean) << '\n'
     << "positive_gap_std=" << opt(s.positive_gap_std) << '\n'
     << "negative_gap_mean=" << opt(s.negative_gap_mean) << '\n'
     << "negative_gap_std=" << opt(s.negative_gap_std) << '\n';
}

}  // namespace casv
