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

#include "casv/evaluation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <set>

#include "casv/rng.hpp"
#include "casv/text_util.hpp"

namespace casv {

double cosine_score(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("cosine_score: vectors of size " + std::to_string(a.size()) +
                                " and " + std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_score: zero-norm vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

size_t ScoreSet::n_target() const {
  return static_cast<size_t>(std::count(is_target.begin(), is_target.end(), true));
}

size_t ScoreSet::n_nontarget() const { return is_target.size() - n_target(); }

namespace {

void check_score_set(const ScoreSet& s) {
  if (s.scores.size() != s.is_target.size()) {
    throw EvaluationError("score set: " + std::to_string(s.scores.size()) + " scores but " +
                          std::to_string(s.is_target.size()) + " labels");
  }
  for (double v : s.scores) {
    if (!std::isfinite(v)) throw EvaluationError("score set: non-finite score");
  }
  if (s.n_target() == 0 || s.n_nontarget() == 0) {
    throw EvaluationError("score set needs both target and non-target trials");
  }
}

}  // namespace

std::vector<OperatingPoint> operating_points(const ScoreSet& s) {
  check_score_set(s);
  const size_t n = s.scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return s.scores[a] < s.scores[b]; });
  const double nt = static_cast<double>(s.n_target());
  const double nn = static_cast<double>(s.n_nontarget());

  std::vector<OperatingPoint> pts;
  const double lo = s.scores[order.front()];
  const double hi = s.scores[order.back()];
  pts.push_back({lo - 1.0, 0.0, 1.0});
  size_t misses = 0, rejected_nontargets = 0;
  size_t i = 0;
  while (i < n) {
    const double v = s.scores[order[i]];
    while (i < n && s.scores[order[i]] == v) {
      if (s.is_target[order[i]]) {
        ++misses;
      } else {
        ++rejected_nontargets;
      }
      ++i;
    }
    const double t = i < n ? 0.5 * (v + s.scores[order[i]]) : hi + 1.0;
    pts.push_back({t, static_cast<double>(misses) / nt,
                   (nn - static_cast<double>(rejected_nontargets)) / nn});
  }
  return pts;
}

EerResult compute_eer(const ScoreSet& s) {
  const auto pts = operating_points(s);
  for (size_t i = 1; i < pts.size(); ++i) {
    const auto& b = pts[i];
    if (b.p_miss < b.p_fa) continue;
    if (b.p_miss == b.p_fa) return {100.0 * b.p_miss, b.threshold};
    const auto& a = pts[i - 1];
    // a.p_miss < a.p_fa and b.p_miss > b.p_fa: the difference changes sign.
    const double da = a.p_miss - a.p_fa;
    const double db = b.p_miss - b.p_fa;
    const double alpha = -da / (db - da);
    const double rate = a.p_miss + alpha * (b.p_miss - a.p_miss);
    return {100.0 * rate, a.threshold + alpha * (b.threshold - a.threshold)};
  }
  // Unreachable: the last point always has p_miss = 1, p_fa = 0.
  throw EvaluationError("compute_eer: no crossing found");
}

namespace {

void check_dcf_params(const DcfParams& p) {
  if (!(p.p_target > 0.0 && p.p_target < 1.0) || !(p.c_fa > 0.0) || !(p.c_miss > 0.0)) {
    throw std::invalid_argument("DCF parameters: need 0 < p_target < 1 and positive costs");
  }
}

double normalized_cost(double p_miss, double p_fa, const DcfParams& p) {
  const double c = p.c_miss * p.p_target * p_miss + p.c_fa * (1.0 - p.p_target) * p_fa;
  return c / std::min(p.c_miss * p.p_target, p.c_fa * (1.0 - p.p_target));
}

}  // namespace

double normalized_dcf(const ScoreSet& s, double threshold, const DcfParams& p) {
  check_score_set(s);
  check_dcf_params(p);
  double miss = 0.0, fa = 0.0;
  for (size_t i = 0; i < s.scores.size(); ++i) {
    const bool accept = s.scores[i] >= threshold;
    if (s.is_target[i] && !accept) miss += 1.0;
    if (!s.is_target[i] && accept) fa += 1.0;
  }
  return normalized_cost(miss / static_cast<double>(s.n_target()),
                         fa / static_cast<double>(s.n_nontarget()), p);
}

DcfResult compute_min_dcf(const ScoreSet& s, const DcfParams& p) {
  check_dcf_params(p);
  const auto pts = operating_points(s);
  DcfResult best{normalized_cost(pts[0].p_miss, pts[0].p_fa, p), pts[0].threshold};
  for (const auto& o : pts) {
    const double c = normalized_cost(o.p_miss, o.p_fa, p);
    if (c < best.min_dcf) best = {c, o.threshold};
  }
  return best;
}

EvalResult evaluate_scores(const ScoreSet& s, const DcfParams& p) {
  EvalResult r;
  const auto eer = compute_eer(s);
  const auto dcf = compute_min_dcf(s, p);
  r.eer = eer.eer;
  r.eer_threshold = eer.threshold;
  r.min_dcf = dcf.min_dcf;
  r.dcf_threshold = dcf.threshold;
  r.dcf = p;
  r.n_target = s.n_target();
  r.n_nontarget = s.n_nontarget();
  return r;
}

// ---------------------------------------------------------------------------

void EmbeddingStore::put(const UtteranceKey& key, std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("embedding store: empty vector for " + key.str());
  if (!map_.empty() && v.size() != dim()) {
    throw std::invalid_argument("embedding store: " + key.str() + " has dimension " +
                                std::to_string(v.size()) + ", expected " + std::to_string(dim()));
  }
  map_[key] = std::move(v);
}

const std::vector<double>& EmbeddingStore::get(const UtteranceKey& key) {
  const auto it = map_.find(key);
  if (it == map_.end()) throw EvaluationError("missing embedding for " + key.str());
  return it->second;
}

void EmbeddingStore::save(const std::filesystem::path& path) const {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw EvaluationError("cannot write " + path.string());
    for (const auto& [k, v] : map_) {
      out << k.str();
      for (double x : v) out << ' ' << format_double(x);
      out << '\n';
    }
    if (!out) throw EvaluationError("write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

EmbeddingStore EmbeddingStore::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw EvaluationError("cannot read embeddings " + path.string());
  EmbeddingStore store;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tok = tokenize(trim(line));
    if (tok.empty()) continue;
    const auto where = path.string() + ":" + std::to_string(lineno);
    if (tok.size() < 2) throw EvaluationError(where + ": expected <key> <values...>");
    std::vector<double> v;
    for (size_t i = 1; i < tok.size(); ++i) {
      const auto x = parse_double(tok[i]);
      if (!x || !std::isfinite(*x)) throw EvaluationError(where + ": bad value '" + std::string(tok[i]) + "'");
      v.push_back(*x);
    }
    UtteranceKey key;
    try {
      key = UtteranceKey::parse(tok[0]);
    } catch (const std::exception& e) {
      throw EvaluationError(where + ": " + e.what());
    }
    if (store.contains(key)) throw EvaluationError(where + ": duplicate key " + key.str());
    try {
      store.put(key, std::move(v));
    } catch (const std::invalid_argument& e) {
      throw EvaluationError(where + ": " + e.what());
    }
  }
  return store;
}

ModelEmbedder::ModelEmbedder(SpeakerModel& model, const AudioSource& audio, LogMelOptions features,
                             EmbeddingKind kind, int chunk_frames)
    : model_(model),
      audio_(audio),
      extractor_(std::make_unique<LogMelExtractor>(features)),
      kind_(kind),
      chunk_frames_(chunk_frames) {
  if (features.n_mels != model.config().n_mels) {
    throw std::invalid_argument("embedder: features have " + std::to_string(features.n_mels) +
                                " mel bins, model expects " + std::to_string(model.config().n_mels));
  }
}

ModelEmbedder::~ModelEmbedder() = default;

const std::vector<double>& ModelEmbedder::get(const UtteranceKey& key) {
  if (cache_.contains(key)) return cache_.get(key);
  Waveform w;
  try {
    w = audio_.load(key);
  } catch (const std::exception& e) {
    throw EvaluationError("no audio for " + key.str() + ": " + e.what());
  }
  const auto feats = extractor_->compute(w);
  std::vector<double> e = chunk_frames_ > 0 && feats.n_frames > chunk_frames_
                              ? model_.extract_embedding_chunked(feats, chunk_frames_, kind_)
                              : model_.extract_embedding(feats, kind_);
  cache_.put(key, std::move(e));
  ++computed_;
  return cache_.get(key);
}

EvalResult evaluate_protocol(const std::vector<Trial>& trials, EmbeddingProvider& embeddings,
                             const std::string& protocol_name, const std::string& checkpoint_id,
                             std::vector<double>* scores, const DcfParams& p) {
  if (trials.empty()) throw EvaluationError("protocol has no trials");
  ScoreSet s;
  s.scores.reserve(trials.size());
  for (const auto& t : trials) {
    const auto& a = embeddings.get(t.enroll);
    const auto& b = embeddings.get(t.test);
    double v = 0.0;
    try {
      v = cosine_score(a, b);
    } catch (const std::invalid_argument& e) {
      throw EvaluationError("trial " + t.enroll.str() + " " + t.test.str() + ": " + e.what());
    }
    s.add(v, t.is_target());
  }
  EvalResult r = evaluate_scores(s, p);
  r.protocol = protocol_name;
  r.checkpoint_id = checkpoint_id;
  if (scores) *scores = s.scores;
  return r;
}

void write_scores(const std::vector<Trial>& trials, const std::vector<double>& scores,
                  const std::filesystem::path& path) {
  if (trials.size() != scores.size()) throw std::invalid_argument("write_scores: size mismatch");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw EvaluationError("cannot write " + path.string());
  for (size_t i = 0; i < trials.size(); ++i) {
    out << (trials[i].is_target() ? 1 : 0) << ' ' << trials[i].enroll.path() << ' '
        << trials[i].test.path() << ' ' << format_double(scores[i]) << '\n';
  }
}

void write_result(const EvalResult& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw EvaluationError("cannot write " + path.string());
  out << "protocol=" << r.protocol << '\n'
      << "checkpoint=" << r.checkpoint_id << '\n'
      << "eer=" << format_double(r.eer) << '\n'
      << "eer_threshold=" << format_double(r.eer_threshold) << '\n'
      << "min_dcf=" << format_double(r.min_dcf) << '\n'
      << "dcf_threshold=" << format_double(r.dcf_threshold) << '\n'
      << "p_target=" << format_double(r.dcf.p_target) << '\n'
      << "c_fa=" << format_double(r.dcf.c_fa) << '\n'
      << "c_miss=" << format_double(r.dcf.c_miss) << '\n'
      << "n_target=" << r.n_target << '\n'
      << "n_nontarget=" << r.n_nontarget << '\n';
}

std::map<std::string, std::string> read_kv_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw EvaluationError("cannot read " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw EvaluationError("bad line in " + path.string() + ": " + line);
    kv[std::string(trim(t.substr(0, eq)))] = std::string(trim(t.substr(eq + 1)));
  }
  return kv;
}

void write_operating_points(const ScoreSet& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw EvaluationError("cannot write " + path.string());
  out << "threshold p_miss p_fa\n";
  for (const auto& o : operating_points(s)) {
    out << format_double(o.threshold) << ' ' << format_double(o.p_miss) << ' '
        << format_double(o.p_fa) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Age probe

namespace {

using Mat = Eigen::MatrixXd;

struct Softmax {
  const Mat& x;                // [n, d+1], last column ones
  const std::vector<int>& y;   // class indices
  int k;
  double l2;

  // Mean cross-entropy plus 0.5 * l2 * |W|^2 (bias excluded); w is [d+1, k].
  double eval(const Mat& w, Mat* grad) const {
    const Mat logits = x * w;
    const double n = static_cast<double>(x.rows());
    double loss = 0.0;
    Mat g = Mat::Zero(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double m = logits.row(i).maxCoeff();
      double z = 0.0;
      for (int c = 0; c < k; ++c) z += std::exp(logits(i, c) - m);
      loss += m + std::log(z) - logits(i, y[static_cast<size_t>(i)]);
      for (int c = 0; c < k; ++c) g(i, c) = std::exp(logits(i, c) - m) / z;
      g(i, y[static_cast<size_t>(i)]) -= 1.0;
    }
    loss /= n;
    const auto d = w.rows() - 1;
    loss += 0.5 * l2 * w.topRows(d).squaredNorm();
    if (grad) {
      *grad = x.transpose() * g / n;
      grad->topRows(d) += l2 * w.topRows(d);
    }
    return loss;
  }
};

// Limited-memory BFGS with Armijo backtracking.
int minimize(const Softmax& f, Mat& w, int max_iter, double tol) {
  const int history = 10;
  std::deque<std::pair<Mat, Mat>> sy;
  Mat g;
  double fx = f.eval(w, &g);
  int it = 0;
  for (; it < max_iter; ++it) {
    if (g.cwiseAbs().maxCoeff() < tol) break;
    Mat q = g;
    std::vector<double> alpha(sy.size());
    for (size_t j = sy.size(); j-- > 0;) {
      const double rho = 1.0 / sy[j].second.cwiseProduct(sy[j].first).sum();
      alpha[j] = rho * sy[j].first.cwiseProduct(q).sum();
      q -= alpha[j] * sy[j].second;
    }
    if (!sy.empty()) {
      const auto& [s, y] = sy.back();
      q *= s.cwiseProduct(y).sum() / y.squaredNorm();
    }
    for (size_t j = 0; j < sy.size(); ++j) {
      const double rho = 1.0 / sy[j].second.cwiseProduct(sy[j].first).sum();
      const double beta = rho * sy[j].second.cwiseProduct(q).sum();
      q += (alpha[j] - beta) * sy[j].first;
    }
    Mat dir = -q;
    double slope = g.cwiseProduct(dir).sum();
    if (!(slope < 0.0)) {
      dir = -g;
      slope = -g.squaredNorm();
      sy.clear();
    }
    double step = 1.0;
    Mat w_new, g_new;
    double f_new = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls) {
      w_new = w + step * dir;
      f_new = f.eval(w_new, &g_new);
      if (f_new <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    Mat s = w_new - w;
    Mat y = g_new - g;
    if (s.cwiseProduct(y).sum() > 1e-12) {
      sy.emplace_back(std::move(s), std::move(y));
      if (static_cast<int>(sy.size()) > history) sy.pop_front();
    }
    const double decrease = fx - f_new;
    w = std::move(w_new);
    g = std::move(g_new);
    fx = f_new;
    if (decrease < 1e-14 * std::max(1.0, std::abs(fx))) {
      ++it;
      break;
    }
  }
  return it;
}

}  // namespace

ProbeResult age_probe(const std::vector<std::vector<double>>& embeddings,
                      const std::vector<int>& age_groups, uint64_t split_seed,
                      const ProbeOptions& o) {
  if (embeddings.size() != age_groups.size()) {
    throw std::invalid_argument("age_probe: embeddings and labels differ in length");
  }
  if (embeddings.empty()) throw EvaluationError("age_probe: no embeddings");
  if (!(o.train_fraction > 0.0 && o.train_fraction < 1.0)) {
    throw std::invalid_argument("age_probe: train_fraction must be in (0, 1)");
  }
  const size_t d = embeddings.front().size();
  for (const auto& e : embeddings) {
    if (e.size() != d || d == 0) throw std::invalid_argument("age_probe: inconsistent dimensions");
  }
  std::map<int, std::vector<size_t>> by_group;
  for (size_t i = 0; i < age_groups.size(); ++i) by_group[age_groups[i]].push_back(i);
  if (by_group.size() < 2) {
    throw EvaluationError("age_probe: needs at least 2 age groups, got " +
                          std::to_string(by_group.size()));
  }

  // Stratified split.
  Rng rng(split_seed);
  std::vector<size_t> train, test;
  for (auto& [g, idx] : by_group) {
    rng.shuffle(idx);
    size_t n_train = static_cast<size_t>(std::llround(o.train_fraction * static_cast<double>(idx.size())));
    n_train = std::clamp<size_t>(n_train, 1, idx.size());
    train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    test.insert(test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  if (test.empty()) throw EvaluationError("age_probe: too few samples for a held-out split");
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());

  std::map<int, int> cls;
  for (size_t i : train) cls.emplace(age_groups[i], 0);
  int k = 0;
  for (auto& [g, c] : cls) c = k++;

  // Standardize with training statistics.
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (size_t i : train) {
    for (size_t j = 0; j < d; ++j) mean[j] += embeddings[i][j];
  }
  for (auto& m : mean) m /= static_cast<double>(train.size());
  for (size_t i : train) {
    for (size_t j = 0; j < d; ++j) sd[j] += (embeddings[i][j] - mean[j]) * (embeddings[i][j] - mean[j]);
  }
  for (auto& s : sd) {
    s = std::sqrt(s / static_cast<double>(train.size()));
    s = s > 1e-12 ? s : 0.0;
  }
  const auto design = [&](const std::vector<size_t>& rows) {
    Mat x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d + 1));
    for (size_t r = 0; r < rows.size(); ++r) {
      const auto& e = embeddings[rows[r]];
      for (size_t j = 0; j < d; ++j) {
        x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = sd[j] > 0.0 ? (e[j] - mean[j]) / sd[j] : 0.0;
      }
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)) = 1.0;
    }
    return x;
  };
  const Mat x_train = design(train);
  std::vector<int> y_train;
  for (size_t i : train) y_train.push_back(cls.at(age_groups[i]));

  Mat w = Mat::Zero(static_cast<Eigen::Index>(d + 1), k);
  if (!(o.c > 0.0)) throw std::invalid_argument("age_probe: c must be positive");
  const Softmax f{x_train, y_train, k, 1.0 / (o.c * static_cast<double>(train.size()))};
  ProbeResult r;
  r.iterations = minimize(f, w, o.max_iterations, o.tolerance);
  r.split_seed = split_seed;
  r.n_train = train.size();
  r.n_test = test.size();

  std::map<int, size_t> train_counts;
  for (size_t i : train) ++train_counts[age_groups[i]];
  int majority = train_counts.begin()->first;
  for (const auto& [g, c] : train_counts) {
    if (c > train_counts[majority]) majority = g;
  }

  const Mat logits = design(test) * w;
  size_t correct = 0, majority_hits = 0;
  std::vector<int> group_of_class(static_cast<size_t>(k));
  for (const auto& [g, c] : cls) group_of_class[static_cast<size_t>(c)] = g;
  for (size_t r_i = 0; r_i < test.size(); ++r_i) {
    Eigen::Index best = 0;
    logits.row(static_cast<Eigen::Index>(r_i)).maxCoeff(&best);
    const int truth = age_groups[test[r_i]];
    if (group_of_class[static_cast<size_t>(best)] == truth) ++correct;
    if (truth == majority) ++majority_hits;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  r.majority_rate = static_cast<double>(majority_hits) / static_cast<double>(test.size());
  return r;
}

}  // namespace casv
