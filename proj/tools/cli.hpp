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

// Command-line front end. The JSON config schema is documented in README.md.

#ifndef CASV_TOOLS_CLI_HPP_
#define CASV_TOOLS_CLI_HPP_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "casv/metadata.hpp"
#include "casv/model.hpp"
#include "casv/synth.hpp"
#include "casv/training.hpp"

namespace casv::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Paths {
  std::filesystem::path metadata;
  std::filesystem::path audio_root;
  std::filesystem::path noise_corpus;
  std::filesystem::path rir_corpus;
  std::filesystem::path trials;
  std::filesystem::path embeddings;
  std::filesystem::path checkpoint;
  std::filesystem::path output_dir = "runs";
};

struct ProtocolOptions {
  std::vector<std::string> presets{"vox-ca20"};
  int positives_per_speaker = 40;
  std::optional<int> negatives_per_speaker;
  int min_cohort_size = 5;
};

struct EvaluateOptions {
  std::string embedding = "default";  // default | z | z_id | z_age
  int chunk_frames = 0;               // 0: whole utterance in one pass
};

struct SynthOptions {
  std::string kind = "toy";  // toy (metadata + audio) | metadata
  ToyCorpusOptions toy;
  SyntheticMetadataOptions metadata;
};

struct RunConfig {
  uint64_t seed = 0;
  Paths paths;
  ModelConfig model;
  TrainConfig train;  // includes feature and augmentation settings
  ProtocolOptions protocol;
  EvaluateOptions evaluate;
  SynthOptions synth;

  /// Unknown keys are errors. Missing keys keep their defaults.
  static RunConfig from_json(const std::string& text);
  /// Canonical form (sorted keys), also the input of the run-directory hash.
  std::string to_json() const;
  /// Sets every seed in the config.
  void apply_seed(uint64_t s);
  void validate() const;
};

/// Runs one invocation; argv[0] is the program name. Diagnostics go to `err`;
/// the run directory is printed on `out`.
int dispatch(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace casv::cli

#endif  // CASV_TOOLS_CLI_HPP_
