#ifndef GLORANK_CORPUS_HPP_
#define GLORANK_CORPUS_HPP_

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "glorank/errors.hpp"

namespace glorank {

struct Item {
  std::int64_t item_id = 0;
  Eigen::VectorXd embedding;
  std::string text;
};

struct Interaction {
  std::int64_t user_id = 0;
  std::int64_t item_id = 0;
  std::int64_t ts = 0;
  int label = 0;
};

// One reranking instance: the stored candidate order is the experimental
// permutation sigma and is never reshuffled implicitly.
struct RerankRequest {
  std::int64_t request_id = 0;
  std::int64_t user_id = 0;
  std::vector<std::int64_t> history;     // chronological, most recent last
  std::vector<std::int64_t> candidates;  // length N, order significant
  std::unordered_map<std::int64_t, int> relevance;

  int total_relevant() const;
};

struct RankedList {
  std::vector<std::int64_t> items;
};

// Throws ConstraintError unless the list is duplicate-free and every member
// is one of the request's candidates. Called on every emitted list.
void validate_ranked_list(const RankedList& list, const RerankRequest& request);

class Corpus {
 public:
  // dimension of the shared embedding space; 0 until the first item
  int dim() const { return dim_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  void add_item(Item item);
  bool contains(std::int64_t item_id) const { return index_.count(item_id) > 0; }
  const Item& item(std::int64_t item_id) const;
  const std::vector<Item>& items() const { return items_; }

  // item ids in ascending order
  std::vector<std::int64_t> sorted_ids() const;

  static Corpus load_jsonl(const std::string& path);
  void save_jsonl(const std::string& path) const;

 private:
  std::vector<Item> items_;
  std::unordered_map<std::int64_t, std::size_t> index_;
  int dim_ = 0;
};

struct SyntheticData {
  Corpus corpus;
  std::vector<Interaction> interactions;
};

// Clustered synthetic universe: unit-norm cluster centers plus Gaussian noise,
// per-user preference vectors, labels Bernoulli in sigmoid(affinity).
// Fully deterministic in seed.
SyntheticData generate_synthetic(std::uint64_t seed, int n_items, int n_users, int dim,
                                 int n_clusters);

struct RequestBuildResult {
  std::vector<RerankRequest> requests;
  int skipped_users = 0;
};

// Per user: history = earlier positives, candidates = held-out positives plus
// uniform negatives from non-interacted items, shuffled by seed.
RequestBuildResult build_requests(const Corpus& corpus,
                                  const std::vector<Interaction>& interactions, int n_candidates,
                                  int k, std::uint64_t seed);

struct MaskSplit {
  std::vector<Interaction> train;        // masked items removed
  std::vector<Interaction> test;         // untouched
  std::vector<std::int64_t> masked_items;
};

MaskSplit mask_items(const Corpus& corpus, const std::vector<Interaction>& interactions,
                     double fraction, std::uint64_t seed);

void save_interactions_jsonl(const std::string& path, const std::vector<Interaction>& interactions);
std::vector<Interaction> load_interactions_jsonl(const std::string& path);

void save_requests_jsonl(const std::string& path, const std::vector<RerankRequest>& requests);
std::vector<RerankRequest> load_requests_jsonl(const std::string& path);

}  // namespace glorank

#endif  // GLORANK_CORPUS_HPP_
