#include "glorank/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "glorank/errors.hpp"
#include "glorank/jsonl.hpp"

namespace glorank {

namespace {

// squared distances from every point row to every centroid row
Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centers) {
  const Eigen::VectorXd pn = points.rowwise().squaredNorm();
  const Eigen::VectorXd cn = centers.rowwise().squaredNorm();
  Eigen::MatrixXd d = -2.0 * points * centers.transpose();
  d.colwise() += pn;
  d.rowwise() += cn.transpose();
  return d.cwiseMax(0.0);
}

int nearest_center(const Eigen::MatrixXd& dists, int row) {
  int best = 0;
  double best_d = dists(row, 0);
  for (int c = 1; c < dists.cols(); ++c) {
    if (dists(row, c) < best_d) {
      best_d = dists(row, c);
      best = c;
    }
  }
  return best;
}

}  // namespace

KmeansResult kmeans(const Eigen::MatrixXd& points, int k, int iters, Rng& rng) {
  const int n = static_cast<int>(points.rows());
  const int dim = static_cast<int>(points.cols());
  if (n < 1) throw ArgumentError("kmeans: empty point set");
  if (k < 1) throw ArgumentError("kmeans: k must be >= 1");
  if (iters < 1) throw ArgumentError("kmeans: iters must be >= 1");

  KmeansResult res;
  res.centroids.resize(k, dim);

  // k-means++ seeding
  std::vector<bool> used(n, false);
  {
    const int first = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
    res.centroids.row(0) = points.row(first);
    used[first] = true;
    Eigen::VectorXd min_d2 =
        (points.rowwise() - res.centroids.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
      const double total = min_d2.sum();
      int pick = -1;
      if (total > 0.0) {
        double target = rng.uniform() * total;
        for (int i = 0; i < n; ++i) {
          target -= min_d2[i];
          if (target <= 0.0) {
            pick = i;
            break;
          }
        }
        if (pick < 0) {  // numeric slack: take the last point with mass
          for (int i = n - 1; i >= 0; --i)
            if (min_d2[i] > 0.0) {
              pick = i;
              break;
            }
        }
      }
      if (pick < 0) {  // all residual mass zero (duplicates); lowest unused row
        for (int i = 0; i < n; ++i)
          if (!used[i]) {
            pick = i;
            break;
          }
        if (pick < 0) pick = 0;
      }
      res.centroids.row(c) = points.row(pick);
      used[pick] = true;
      min_d2 = min_d2.cwiseMin(
          (points.rowwise() - res.centroids.row(c)).rowwise().squaredNorm());
    }
  }

  res.assignment.assign(n, 0);
  for (int it = 0; it < iters; ++it) {
    const Eigen::MatrixXd dists = squared_distances(points, res.centroids);
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      const int a = nearest_center(dists, i);
      if (a != res.assignment[i]) changed = true;
      res.assignment[i] = a;
    }

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, dim);
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      sums.row(res.assignment[i]) += points.row(i);
      ++counts[res.assignment[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) res.centroids.row(c) = sums.row(c) / counts[c];
    }
    // empty-cluster repair: farthest point from its own centroid, lowest row on ties
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      int far_row = 0;
      double far_d = -1.0;
      for (int i = 0; i < n; ++i) {
        const double d =
            (points.row(i) - res.centroids.row(res.assignment[i])).squaredNorm();
        if (d > far_d + 1e-18) {
          far_d = d;
          far_row = i;
        }
      }
      res.centroids.row(c) = points.row(far_row);
      // the stolen point moves; its old cluster keeps its centroid this round
      counts[res.assignment[far_row]]--;
      res.assignment[far_row] = c;
      counts[c] = 1;
    }
    if (!changed && it > 0) break;
  }

  // final assignment against the updated centroids
  const Eigen::MatrixXd dists = squared_distances(points, res.centroids);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    res.assignment[i] = nearest_center(dists, i);
    total += dists(i, res.assignment[i]);
  }
  res.mean_sq_residual = total / n;
  return res;
}

RqCodebooks fit_rq_kmeans(const Corpus& corpus, int num_levels, int codebook_size, int iters,
                          std::uint64_t seed) {
  if (corpus.empty()) throw ArgumentError("fit_rq_kmeans: empty corpus");
  if (num_levels < 1) throw ArgumentError("fit_rq_kmeans: num_levels must be >= 1");
  if (codebook_size < 1) throw ArgumentError("fit_rq_kmeans: codebook_size must be >= 1");
  if (iters < 1) throw ArgumentError("fit_rq_kmeans: iters must be >= 1");

  const auto ids = corpus.sorted_ids();
  const int n = static_cast<int>(ids.size());
  const int dim = corpus.dim();
  Eigen::MatrixXd residual(n, dim);
  for (int i = 0; i < n; ++i) residual.row(i) = corpus.item(ids[i]).embedding.transpose();

  RqCodebooks out;
  out.codebook_size = codebook_size;
  out.dim = dim;
  Rng rng(seed);
  for (int m = 1; m <= num_levels; ++m) {
    const KmeansResult km = kmeans(residual, codebook_size, iters, rng);
    Codebook cb;
    cb.level = m;
    cb.centroids = km.centroids;
    cb.mean_sq_residual = km.mean_sq_residual;
    out.levels.push_back(std::move(cb));
    for (int i = 0; i < n; ++i) residual.row(i) -= km.centroids.row(km.assignment[i]);
  }
  return out;
}

void RqCodebooks::save_json(const std::string& path) const {
  json j;
  j["M"] = num_levels();
  j["codebook_size"] = codebook_size;
  j["D"] = dim;
  json lv = json::array();
  for (const auto& cb : levels) {
    json rows = json::array();
    for (int r = 0; r < cb.centroids.rows(); ++r) {
      json row = json::array();
      for (int c = 0; c < cb.centroids.cols(); ++c) row.push_back(cb.centroids(r, c));
      rows.push_back(std::move(row));
    }
    lv.push_back(json{{"level", cb.level},
                      {"mean_sq_residual", cb.mean_sq_residual},
                      {"centroids", std::move(rows)}});
  }
  j["levels"] = std::move(lv);
  save_json_file(path, j);
}

RqCodebooks RqCodebooks::load_json(const std::string& path) {
  const json j = load_json_file(path);
  RqCodebooks out;
  out.codebook_size = j.at("codebook_size").get<int>();
  out.dim = j.at("D").get<int>();
  for (const auto& lv : j.at("levels")) {
    Codebook cb;
    cb.level = lv.at("level").get<int>();
    cb.mean_sq_residual = lv.at("mean_sq_residual").get<double>();
    const auto& rows = lv.at("centroids");
    cb.centroids.resize(static_cast<Eigen::Index>(rows.size()), out.dim);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (int c = 0; c < out.dim; ++c)
        cb.centroids(static_cast<Eigen::Index>(r), c) = rows[r][c].get<double>();
    out.levels.push_back(std::move(cb));
  }
  if (out.num_levels() != j.at("M").get<int>())
    throw ParseError(path + ": level count does not match M");
  return out;
}

SemanticId quantize(const Eigen::VectorXd& embedding, const RqCodebooks& codebooks) {
  if (embedding.size() != codebooks.dim)
    throw ArgumentError("quantize: embedding dimension mismatch");
  SemanticId sid;
  Eigen::RowVectorXd residual = embedding.transpose();
  for (const auto& cb : codebooks.levels) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < cb.centroids.rows(); ++c) {
      const double d = (residual - cb.centroids.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    sid.codes.push_back(best);
    residual -= cb.centroids.row(best);
  }
  return sid;
}

SidTable::SidTable(std::map<std::int64_t, SemanticId> by_item, int num_levels)
    : by_item_(std::move(by_item)), num_levels_(num_levels) {
  for (const auto& [id, sid] : by_item_) max_disamb_ = std::max(max_disamb_, sid.disamb);
}

const SemanticId& SidTable::sid(std::int64_t item_id) const {
  auto it = by_item_.find(item_id);
  if (it == by_item_.end())
    throw IntegrityError("item " + std::to_string(item_id) + " has no semantic id");
  return it->second;
}

SidTable assign_sids(const Corpus& corpus, const RqCodebooks& codebooks) {
  if (corpus.dim() != codebooks.dim)
    throw ArgumentError("assign_sids: corpus dimension does not match codebooks");
  std::map<std::int64_t, SemanticId> table;
  // std::map iterates in ascending item_id order, so colliding tuples pick up
  // disamb values 0,1,2,... by ascending item_id
  std::map<std::vector<int>, int> collision_counter;
  for (const auto id : corpus.sorted_ids()) {
    SemanticId sid = quantize(corpus.item(id).embedding, codebooks);
    sid.disamb = collision_counter[sid.codes]++;
    table.emplace(id, std::move(sid));
  }
  return SidTable(std::move(table), codebooks.num_levels());
}

void SidTable::save_jsonl(const std::string& path) const {
  JsonlWriter w(path);
  for (const auto& [id, sid] : by_item_)
    w.write(json{{"item_id", id}, {"codes", sid.codes}, {"disamb", sid.disamb}});
}

SidTable SidTable::load_jsonl(const std::string& path) {
  std::map<std::int64_t, SemanticId> table;
  int num_levels = 0;
  read_jsonl(path, [&](int lineno, const json& obj) {
    try {
      SemanticId sid;
      const std::int64_t id = obj.at("item_id").get<std::int64_t>();
      sid.codes = obj.at("codes").get<std::vector<int>>();
      sid.disamb = obj.at("disamb").get<int>();
      if (num_levels == 0) num_levels = static_cast<int>(sid.codes.size());
      if (static_cast<int>(sid.codes.size()) != num_levels)
        throw ParseError(path + ":" + std::to_string(lineno) + ": inconsistent code length");
      if (!table.emplace(id, std::move(sid)).second)
        throw IntegrityError(path + ":" + std::to_string(lineno) + ": duplicate item_id");
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  });
  return SidTable(std::move(table), num_levels);
}

TokenVocabulary::TokenVocabulary(int num_levels, int codebook_size, int disamb_count)
    : num_levels_(num_levels), codebook_size_(codebook_size), disamb_count_(disamb_count) {
  if (num_levels < 1 || codebook_size < 1 || disamb_count < 0)
    throw ArgumentError("TokenVocabulary: invalid shape");
}

TokenVocabulary TokenVocabulary::for_table(const SidTable& table, int codebook_size) {
  const int disamb_count = table.has_collisions() ? table.max_disamb() + 1 : 0;
  return TokenVocabulary(table.num_levels(), codebook_size, disamb_count);
}

int TokenVocabulary::level_token(int level, int code) const {
  if (level < 1 || level > num_levels_)
    throw ArgumentError("level_token: level out of range");
  if (code < 0 || code >= codebook_size_)
    throw ArgumentError("level_token: code " + std::to_string(code) + " out of range");
  return (level - 1) * codebook_size_ + code;
}

int TokenVocabulary::disamb_token(int d) const {
  if (d < 0 || d >= disamb_count_)
    throw ArgumentError("disamb_token: value " + std::to_string(d) + " out of range");
  return num_levels_ * codebook_size_ + d;
}

TokenVocabulary::TokenInfo TokenVocabulary::info(int token) const {
  if (token < 0 || token >= vocab_size()) throw ArgumentError("info: token out of range");
  if (token < num_levels_ * codebook_size_)
    return {Kind::kLevel, token / codebook_size_ + 1, token % codebook_size_};
  if (token < num_levels_ * codebook_size_ + disamb_count_)
    return {Kind::kDisamb, 0, token - num_levels_ * codebook_size_};
  return {Kind::kSpecial, 0, token - num_levels_ * codebook_size_ - disamb_count_};
}

std::vector<int> TokenVocabulary::tokens_of(const SemanticId& sid) const {
  if (static_cast<int>(sid.codes.size()) != num_levels_)
    throw ArgumentError("tokens_of: code count does not match vocabulary levels");
  std::vector<int> out;
  out.reserve(item_token_len());
  for (int m = 0; m < num_levels_; ++m) out.push_back(level_token(m + 1, sid.codes[m]));
  if (disamb_count_ > 0) out.push_back(disamb_token(sid.disamb));
  return out;
}

SemanticId TokenVocabulary::sid_of(std::span<const int> tokens) const {
  if (static_cast<int>(tokens.size()) != item_token_len())
    throw ArgumentError("sid_of: wrong token count for this corpus");
  SemanticId sid;
  for (int m = 0; m < num_levels_; ++m) {
    const TokenInfo ti = info(tokens[m]);
    if (ti.kind != Kind::kLevel || ti.level != m + 1)
      throw ArgumentError("sid_of: token " + std::to_string(tokens[m]) +
                          " is not a level-" + std::to_string(m + 1) + " code");
    sid.codes.push_back(ti.code);
  }
  if (disamb_count_ > 0) {
    const TokenInfo ti = info(tokens[num_levels_]);
    if (ti.kind != Kind::kDisamb)
      throw ArgumentError("sid_of: expected disambiguation token");
    sid.disamb = ti.code;
  }
  return sid;
}

}  // namespace glorank
