#ifndef GLORANK_TOKENIZER_HPP_
#define GLORANK_TOKENIZER_HPP_

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "glorank/corpus.hpp"
#include "glorank/rng.hpp"

namespace glorank {

// One quantizer level. Level 1 is fit on raw embeddings, level m > 1 on the
// residuals left by level m-1.
struct Codebook {
  int level = 0;  // 1-based
  Eigen::MatrixXd centroids;  // codebook_size x D
  double mean_sq_residual = 0.0;  // after assigning this level
};

struct SemanticId {
  std::vector<int> codes;  // c_m in [0, codebook_size), one per level
  int disamb = 0;          // 0 unless the code tuple collides within the corpus

  bool operator==(const SemanticId& o) const { return codes == o.codes && disamb == o.disamb; }
};

struct RqCodebooks {
  std::vector<Codebook> levels;
  int codebook_size = 0;
  int dim = 0;

  int num_levels() const { return static_cast<int>(levels.size()); }

  void save_json(const std::string& path) const;
  static RqCodebooks load_json(const std::string& path);
};

// Plain k-means with k-means++ seeding and deterministic empty-cluster repair
// (reinitialize to the point farthest from its assigned centroid, ties broken
// by lowest row index). Exposed for reuse and direct testing.
struct KmeansResult {
  Eigen::MatrixXd centroids;    // k x D
  std::vector<int> assignment;  // per row of points
  double mean_sq_residual = 0.0;
};

KmeansResult kmeans(const Eigen::MatrixXd& points, int k, int iters, Rng& rng);

// Residual k-means quantizer over the corpus embeddings, rows ordered by
// ascending item_id. Deterministic given seed.
RqCodebooks fit_rq_kmeans(const Corpus& corpus, int num_levels, int codebook_size, int iters,
                          std::uint64_t seed);

class SidTable {
 public:
  SidTable() = default;
  SidTable(std::map<std::int64_t, SemanticId> by_item, int num_levels);

  const SemanticId& sid(std::int64_t item_id) const;
  bool contains(std::int64_t item_id) const { return by_item_.count(item_id) > 0; }
  const std::map<std::int64_t, SemanticId>& all() const { return by_item_; }
  int num_levels() const { return num_levels_; }
  int max_disamb() const { return max_disamb_; }
  bool has_collisions() const { return max_disamb_ > 0; }
  std::size_t size() const { return by_item_.size(); }

  void save_jsonl(const std::string& path) const;
  static SidTable load_jsonl(const std::string& path);

 private:
  std::map<std::int64_t, SemanticId> by_item_;
  int num_levels_ = 0;
  int max_disamb_ = 0;
};

// Greedy nearest-centroid assignment per level on the running residual;
// colliding code tuples receive disamb = 0,1,2,... in ascending item_id order.
SidTable assign_sids(const Corpus& corpus, const RqCodebooks& codebooks);

// Quantize a single embedding (disamb always 0; collision handling needs the corpus).
SemanticId quantize(const Eigen::VectorXd& embedding, const RqCodebooks& codebooks);

// Fixed global token space: per-level code tokens at offset (level-1)*codebook_size,
// then disambiguation tokens, then PAD/BOS/SEP/RANK. Token ids form a contiguous
// 0-based range and the token <-> (kind, level, code) mapping is a bijection.
class TokenVocabulary {
 public:
  enum class Kind { kLevel, kDisamb, kSpecial };
  struct TokenInfo {
    Kind kind;
    int level;  // 1-based for kLevel, 0 otherwise
    int code;   // code / disamb value / special ordinal
  };

  TokenVocabulary() = default;
  TokenVocabulary(int num_levels, int codebook_size, int disamb_count);

  // disamb_count derived from the table: max_disamb + 1 when any collision exists
  static TokenVocabulary for_table(const SidTable& table, int codebook_size);

  int vocab_size() const { return num_levels_ * codebook_size_ + disamb_count_ + 4; }
  int num_levels() const { return num_levels_; }
  int codebook_size() const { return codebook_size_; }
  int disamb_count() const { return disamb_count_; }

  // uniform per-corpus item arity: M, or M+1 when the corpus has collisions
  int item_token_len() const { return num_levels_ + (disamb_count_ > 0 ? 1 : 0); }

  int level_token(int level, int code) const;
  int disamb_token(int d) const;
  int pad() const { return num_levels_ * codebook_size_ + disamb_count_; }
  int bos() const { return pad() + 1; }
  int sep() const { return pad() + 2; }
  int rank() const { return pad() + 3; }

  TokenInfo info(int token) const;

  std::vector<int> tokens_of(const SemanticId& sid) const;
  SemanticId sid_of(std::span<const int> tokens) const;

 private:
  int num_levels_ = 0;
  int codebook_size_ = 0;
  int disamb_count_ = 0;
};

}  // namespace glorank

#endif  // GLORANK_TOKENIZER_HPP_
