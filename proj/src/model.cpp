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

#include "casv/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "casv/metadata.hpp"
#include "casv/rng.hpp"
#include "json.hpp"

namespace casv {

using nn::Tensor;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written in native byte order");

namespace {

constexpr double kGrlScale = 1.0;  // loss weighting lives in lambda_grl

const std::pair<ModelVariant, std::string_view> kVariantNames[] = {
    {ModelVariant::kBaselineSoftmax, "baseline-softmax"},
    {ModelVariant::kBaselineArcface, "baseline-arcface"},
    {ModelVariant::kGrl, "grl"},
    {ModelVariant::kAgeResidual, "age-residual"},
    {ModelVariant::kAre, "are"},
    {ModelVariant::kAdal, "adal"},
};

void add_into(Tensor& dst, const Tensor& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

std::string_view to_string(ModelVariant v) {
  for (const auto& [k, name] : kVariantNames) {
    if (k == v) return name;
  }
  return "?";
}

ModelVariant parse_variant(std::string_view s) {
  for (const auto& [k, name] : kVariantNames) {
    if (name == s) return k;
  }
  throw std::invalid_argument("unknown model variant '" + std::string(s) + "'");
}

std::vector<ModelVariant> all_variants() {
  std::vector<ModelVariant> out;
  for (const auto& [k, name] : kVariantNames) out.push_back(k);
  return out;
}

bool has_age_branch(ModelVariant v) {
  return v == ModelVariant::kAgeResidual || v == ModelVariant::kAre || v == ModelVariant::kAdal;
}
bool has_attentive_branch(ModelVariant v) {
  return v == ModelVariant::kAre || v == ModelVariant::kAdal;
}
bool has_adversary(ModelVariant v) { return v == ModelVariant::kGrl || v == ModelVariant::kAdal; }
bool uses_arcface(ModelVariant v) { return v != ModelVariant::kBaselineSoftmax; }

std::string_view to_string(EmbeddingKind k) {
  switch (k) {
    case EmbeddingKind::kZ:
      return "z";
    case EmbeddingKind::kZId:
      return "z_id";
    case EmbeddingKind::kZAge:
      return "z_age";
  }
  return "?";
}

EmbeddingKind parse_embedding_kind(std::string_view s) {
  if (s == "z") return EmbeddingKind::kZ;
  if (s == "z_id") return EmbeddingKind::kZId;
  if (s == "z_age") return EmbeddingKind::kZAge;
  throw std::invalid_argument("unknown embedding kind '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (embedding_dim <= 0) throw std::invalid_argument("embedding_dim must be positive");
  if (n_age_groups != AgeGroupId::kCount) throw std::invalid_argument("n_age_groups must be 7");
  if (n_speakers < 1) throw std::invalid_argument("n_speakers must be at least 1");
  if (n_mels < 8) throw std::invalid_argument("n_mels must be at least 8");
  if (asp_hidden < 1 || head_hidden < 1) throw std::invalid_argument("hidden sizes must be positive");
  if (trunk.widths.empty() || trunk.widths.size() != trunk.blocks.size()) {
    throw std::invalid_argument("trunk widths and blocks must be non-empty and equally long");
  }
  for (size_t i = 0; i < trunk.widths.size(); ++i) {
    if (trunk.widths[i] < 1 || trunk.blocks[i] < 1) {
      throw std::invalid_argument("trunk widths and block counts must be positive");
    }
  }
  arcface.validate();
}

std::string ModelConfig::to_json() const {
  json j;
  j["variant"] = std::string(casv::to_string(variant));
  j["trunk_widths"] = trunk.widths;
  j["trunk_blocks"] = trunk.blocks;
  j["n_mels"] = n_mels;
  j["embedding_dim"] = embedding_dim;
  j["n_speakers"] = n_speakers;
  j["n_age_groups"] = n_age_groups;
  j["arcface_scale"] = arcface.scale;
  j["arcface_margin"] = arcface.margin;
  j["asp_hidden"] = asp_hidden;
  j["head_hidden"] = head_hidden;
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("model config: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  static const std::set<std::string> kKeys = {
      "variant", "trunk_widths", "trunk_blocks", "n_mels",       "embedding_dim", "n_speakers",
      "n_age_groups", "arcface_scale", "arcface_margin", "asp_hidden", "head_hidden", "seed"};
  for (const auto& [k, v] : j.items()) {
    if (!kKeys.count(k)) throw std::invalid_argument("model config: unknown key '" + k + "'");
  }
  ModelConfig c;
  try {
    if (j.contains("variant")) c.variant = parse_variant(j["variant"].get<std::string>());
    if (j.contains("trunk_widths")) c.trunk.widths = j["trunk_widths"].get<std::vector<int>>();
    if (j.contains("trunk_blocks")) c.trunk.blocks = j["trunk_blocks"].get<std::vector<int>>();
    c.n_mels = j.value("n_mels", c.n_mels);
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    c.n_speakers = j.value("n_speakers", c.n_speakers);
    c.n_age_groups = j.value("n_age_groups", c.n_age_groups);
    c.arcface.scale = j.value("arcface_scale", c.arcface.scale);
    c.arcface.margin = j.value("arcface_margin", c.arcface.margin);
    c.asp_hidden = j.value("asp_hidden", c.asp_hidden);
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// SpeakerModel

Tensor features_to_batch(const std::vector<const FeatureMatrix*>& feats) {
  if (feats.empty()) throw std::invalid_argument("features_to_batch: empty batch");
  const int f = feats[0]->n_mels, t = feats[0]->n_frames;
  Tensor x({static_cast<int>(feats.size()), 1, f, t});
  const size_t per = static_cast<size_t>(f) * static_cast<size_t>(t);
  for (size_t i = 0; i < feats.size(); ++i) {
    if (feats[i]->n_mels != f || feats[i]->n_frames != t) {
      throw std::invalid_argument("features_to_batch: feature shapes differ within a batch");
    }
    std::copy(feats[i]->values.begin(), feats[i]->values.end(), x.data() + i * per);
  }
  return x;
}

SpeakerModel::SpeakerModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const uint64_t seed = derive_seed(cfg_.seed, "model");
  trunk_ = nn::ResNetTrunk("trunk", cfg_.trunk, seed);
  const int c = trunk_.out_channels();
  const int e = cfg_.embedding_dim;
  emb_fc_ = nn::Linear("embedding", 2 * c, e, true, seed);
  if (has_attentive_branch(cfg_.variant)) {
    const int frame_dim = c * trunk_.out_size(cfg_.n_mels);
    asp_ = nn::AttentiveStatsPool("are.asp", frame_dim, cfg_.asp_hidden, seed);
    are_fc_ = nn::Linear("are.fc", 2 * frame_dim, e, true, seed);
  } else if (cfg_.variant == ModelVariant::kAgeResidual) {
    residual_fc_ = nn::Linear("residual.fc", e, e, true, seed);
  }
  if (uses_arcface(cfg_.variant)) {
    arcface_head_ = ArcFaceHead("id_head", cfg_.n_speakers, e, cfg_.arcface, seed);
  } else {
    softmax_head_ = nn::Linear("id_head", e, cfg_.n_speakers, true, seed);
  }
  if (has_age_branch(cfg_.variant)) {
    age_head_ = nn::MlpHead("age_head", e, cfg_.head_hidden, cfg_.n_age_groups, seed);
  }
  if (has_adversary(cfg_.variant)) {
    adv_head_ = nn::MlpHead("adv_head", e, cfg_.head_hidden, cfg_.n_age_groups, seed);
  }
}

Tensor SpeakerModel::trunk_forward(const Tensor& feats) {
  if (feats.rank() != 4 || feats.dim(1) != 1 || feats.dim(2) != cfg_.n_mels) {
    throw std::invalid_argument("trunk input must be [N, 1, " + std::to_string(cfg_.n_mels) +
                                ", T], got " + nn::shape_string(feats.shape()));
  }
  if (feats.dim(3) < ModelConfig::kMinFrames) {
    throw FeatureError("input of " + std::to_string(feats.dim(3)) +
                       " frames is shorter than the minimum of " +
                       std::to_string(ModelConfig::kMinFrames));
  }
  Tensor x = trunk_.forward(feats);
  map_shape_ = x.shape();
  return x;
}

Tensor SpeakerModel::gsp_pool(const Tensor& x) { return gsp_.forward(x); }

Tensor SpeakerModel::are_extract(const Tensor& x) {
  if (!has_attentive_branch(cfg_.variant)) {
    throw std::invalid_argument("variant " + std::string(casv::to_string(cfg_.variant)) +
                                " has no attentive age extractor");
  }
  return are_fc_.forward(asp_.forward(x));
}

EmbeddingBatch SpeakerModel::embed(const Tensor& feats) {
  const Tensor x = trunk_forward(feats);
  EmbeddingBatch e;
  e.z = emb_fc_.forward(gsp_pool(x));
  if (has_attentive_branch(cfg_.variant)) {
    e.z_age = are_extract(x);
  } else if (cfg_.variant == ModelVariant::kAgeResidual) {
    e.z_age = residual_fc_.forward(e.z);
  } else {
    e.z_age = Tensor(e.z.shape());
  }
  e.z_id = e.z;
  for (size_t i = 0; i < e.z_id.size(); ++i) e.z_id[i] -= e.z_age[i];
  return e;
}

HeadOutputs SpeakerModel::heads_forward(const EmbeddingBatch& e,
                                        const std::vector<int>* id_labels) {
  HeadOutputs h;
  if (uses_arcface(cfg_.variant)) {
    h.id_logits = arcface_head_.forward(e.z_id, id_labels);
  } else {
    if (id_labels) {
      for (int y : *id_labels) {
        if (y < 0 || y >= cfg_.n_speakers) {
          throw std::invalid_argument("speaker label " + std::to_string(y) + " out of range");
        }
      }
    }
    h.id_logits = softmax_head_.forward(e.z_id);
  }
  if (has_age_branch(cfg_.variant)) h.age_logits = age_head_.forward(e.z_age);
  if (has_adversary(cfg_.variant)) h.adv_logits = adv_head_.forward(grl_forward(e.z_id));
  return h;
}

void SpeakerModel::backward(const HeadGrads& g) {
  if (map_shape_.empty()) throw std::logic_error("backward before forward");
  const int n = map_shape_[0], e = cfg_.embedding_dim;
  Tensor dz_id({n, e});
  if (!g.id.empty()) {
    add_into(dz_id, uses_arcface(cfg_.variant) ? arcface_head_.backward(g.id)
                                               : softmax_head_.backward(g.id));
  }
  if (!g.adv.empty() && has_adversary(cfg_.variant)) {
    add_into(dz_id, grl_backward(adv_head_.backward(g.adv), kGrlScale));
  }
  Tensor dz = dz_id;
  if (has_age_branch(cfg_.variant)) {
    Tensor dz_age({n, e});
    if (!g.age.empty()) dz_age = age_head_.backward(g.age);
    for (size_t i = 0; i < dz_age.size(); ++i) dz_age[i] -= dz_id[i];
    if (cfg_.variant == ModelVariant::kAgeResidual) add_into(dz, residual_fc_.backward(dz_age));
    if (has_attentive_branch(cfg_.variant)) {
      Tensor dx = asp_.backward(are_fc_.backward(dz_age));
      dx.reshape(map_shape_);
      Tensor dx_gsp = gsp_.backward(emb_fc_.backward(dz));
      add_into(dx_gsp, dx);
      trunk_.backward(dx_gsp);
      return;
    }
  }
  trunk_.backward(gsp_.backward(emb_fc_.backward(dz)));
}

std::vector<double> SpeakerModel::extract_embedding(const FeatureMatrix& feats,
                                                    EmbeddingKind which) {
  if (which != EmbeddingKind::kZ && !has_age_branch(cfg_.variant)) {
    throw std::invalid_argument("variant " + std::string(casv::to_string(cfg_.variant)) +
                                " only defines z; " + std::string(casv::to_string(which)) +
                                " was requested");
  }
  const bool was_training = training_;
  set_training(false);
  EmbeddingBatch e;
  try {
    e = embed(features_to_batch({&feats}));
  } catch (...) {
    set_training(was_training);
    throw;
  }
  set_training(was_training);
  const Tensor& t = which == EmbeddingKind::kZ ? e.z : which == EmbeddingKind::kZId ? e.z_id : e.z_age;
  return t.values();
}

std::vector<double> SpeakerModel::extract_embedding_chunked(const FeatureMatrix& feats,
                                                            int chunk_frames,
                                                            EmbeddingKind which) {
  if (chunk_frames < ModelConfig::kMinFrames) {
    throw std::invalid_argument("chunk length below the minimum input length");
  }
  const int t = feats.n_frames;
  const int n_chunks = std::max(1, t / chunk_frames);
  std::vector<double> sum(static_cast<size_t>(cfg_.embedding_dim), 0.0);
  for (int c = 0; c < n_chunks; ++c) {
    const int begin = static_cast<int>(static_cast<int64_t>(c) * t / n_chunks);
    const int end = static_cast<int>(static_cast<int64_t>(c + 1) * t / n_chunks);
    FeatureMatrix part;
    part.n_mels = feats.n_mels;
    part.n_frames = end - begin;
    part.values.resize(static_cast<size_t>(part.n_mels) * static_cast<size_t>(part.n_frames));
    for (int m = 0; m < feats.n_mels; ++m) {
      for (int k = begin; k < end; ++k) part.at(m, k - begin) = feats.at(m, k);
    }
    const auto v = extract_embedding(part, which);
    for (size_t i = 0; i < sum.size(); ++i) sum[i] += v[i];
  }
  for (auto& v : sum) v /= n_chunks;
  return sum;
}

EmbeddingKind SpeakerModel::default_embedding() const {
  return has_age_branch(cfg_.variant) ? EmbeddingKind::kZId : EmbeddingKind::kZ;
}

nn::ParameterList SpeakerModel::parameters() {
  nn::ParameterList ps;
  trunk_.collect(ps);
  emb_fc_.collect(ps);
  if (has_attentive_branch(cfg_.variant)) {
    asp_.collect(ps);
    are_fc_.collect(ps);
  }
  if (cfg_.variant == ModelVariant::kAgeResidual) residual_fc_.collect(ps);
  if (uses_arcface(cfg_.variant)) {
    arcface_head_.collect(ps);
  } else {
    softmax_head_.collect(ps);
  }
  if (has_age_branch(cfg_.variant)) age_head_.collect(ps);
  if (has_adversary(cfg_.variant)) adv_head_.collect(ps);
  return ps;
}

void SpeakerModel::set_training(bool t) {
  training_ = t;
  trunk_.set_training(t);
}

void SpeakerModel::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

nn::Linear& SpeakerModel::age_projection() {
  if (has_attentive_branch(cfg_.variant)) return are_fc_;
  if (cfg_.variant == ModelVariant::kAgeResidual) return residual_fc_;
  throw std::invalid_argument("variant has no age branch");
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'C', 'A', 'S', 'V', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("truncated checkpoint " + what);
  }
  return v;
}

}  // namespace

Checkpoint capture_checkpoint(SpeakerModel& model, int64_t step, int epoch) {
  Checkpoint ck;
  ck.config = model.config();
  ck.step = step;
  ck.epoch = epoch;
  for (auto* p : model.parameters()) {
    if (!ck.parameters.emplace(p->name, p->value).second) {
      throw std::logic_error("duplicate parameter name " + p->name);
    }
  }
  return ck;
}

void restore_parameters(SpeakerModel& model, const Checkpoint& ck) {
  auto ps = model.parameters();
  if (ps.size() != ck.parameters.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(ck.parameters.size()) +
                             " tensors, model expects " + std::to_string(ps.size()));
  }
  for (auto* p : ps) {
    const auto it = ck.parameters.find(p->name);
    if (it == ck.parameters.end()) throw std::runtime_error("checkpoint lacks tensor " + p->name);
    if (!it->second.same_shape(p->value)) {
      throw std::runtime_error("shape mismatch for " + p->name + ": " +
                               nn::shape_string(it->second.shape()) + " vs " +
                               nn::shape_string(p->value.shape()));
    }
    p->value = it->second;
  }
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  json header;
  header["config"] = json::parse(ck.config.to_json());
  header["step"] = ck.step;
  header["epoch"] = ck.epoch;
  json index = json::array();
  uint64_t offset = 0;
  std::vector<const Tensor*> order;
  for (const auto* group : {&ck.parameters, &ck.optimizer}) {
    for (const auto& [name, t] : *group) {
      index.push_back({{"group", group == &ck.parameters ? "model" : "optimizer"},
                       {"name", name},
                       {"shape", t.shape()},
                       {"offset", offset}});
      offset += t.size();
      order.push_back(&t);
    }
  }
  header["tensors"] = index;
  const std::string h = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod<uint32_t>(out, kVersion);
    write_pod<uint64_t>(out, h.size());
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const Tensor* t : order) {
      out.write(reinterpret_cast<const char*>(t->data()),
                static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint");
  }
  const auto version = read_pod<uint32_t>(in, path.string());
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const auto hlen = read_pod<uint64_t>(in, path.string());
  if (hlen > (1u << 30)) throw std::runtime_error("corrupt checkpoint header length");
  std::string h(hlen, '\0');
  if (!in.read(h.data(), static_cast<std::streamsize>(hlen))) {
    throw std::runtime_error("truncated checkpoint " + path.string());
  }
  Checkpoint ck;
  try {
    const json header = json::parse(h);
    ck.config = ModelConfig::from_json(header.at("config").dump());
    ck.step = header.at("step").get<int64_t>();
    ck.epoch = header.at("epoch").get<int>();
    for (const auto& entry : header.at("tensors")) {
      Tensor t(entry.at("shape").get<std::vector<int>>());
      if (!in.read(reinterpret_cast<char*>(t.data()),
                   static_cast<std::streamsize>(t.size() * sizeof(double)))) {
        throw std::runtime_error("truncated checkpoint payload in " + path.string());
      }
      auto& group = entry.at("group").get<std::string>() == "model" ? ck.parameters : ck.optimizer;
      group.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace casv
