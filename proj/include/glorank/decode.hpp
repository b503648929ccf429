#ifndef GLORANK_DECODE_HPP_
#define GLORANK_DECODE_HPP_

#include <cstdint>
#include <vector>

#include "glorank/corpus.hpp"
#include "glorank/model.hpp"
#include "glorank/tokenizer.hpp"
#include "glorank/trie.hpp"

namespace glorank {

struct DecodedList {
  RankedList list;
  std::vector<int> tokens;              // generated token string (global head)
  std::vector<double> token_logprobs;   // under the masked (and tempered) policy
  double logprob = 0.0;                 // sum of token logprobs
  int beam_rank = 0;
};

// Per-request state reusable across decodes under fixed parameters (the
// encoder pass and the candidate trie are shared by a whole GRPO group).
struct PreparedRequest {
  InputSequence input;
  EncoderContext ctx;
  CandidateTrie trie;
};

// Trie-constrained decoding over the global token vocabulary, and the
// position-slot equivalents used by the local-action-space variant. All
// emitted lists satisfy the RankedList invariants by construction and are
// asserted anyway.
class Reranker {
 public:
  Reranker(const Parameters& params, const SidTable& sids, const TokenVocabulary& vocab,
           int history_cap);

  PreparedRequest prepare(const RerankRequest& request) const;

  // Token-level beam search, scores are exact masked sequence log-probs,
  // no length normalization, token-lexicographic tie-break. Returns up to B
  // lists, best first.
  std::vector<DecodedList> beam_search(const RerankRequest& request, int beam_size, int k) const;

  // Temperature sampling from the masked distribution, deterministic by seed.
  DecodedList sample(const RerankRequest& request, double temperature, int k,
                     std::uint64_t seed) const;

  // argmax decoding (the temperature -> 0 limit of sample)
  DecodedList greedy(const RerankRequest& request, int k) const;

  // Teacher-forced masked log-prob of an item sequence (temperature 1).
  double score_items(const RerankRequest& request, const std::vector<std::int64_t>& items) const;

  // Local-head counterparts over candidate positions.
  DecodedList sample_local(const RerankRequest& request, double temperature, int k,
                           std::uint64_t seed) const;
  DecodedList greedy_local(const RerankRequest& request, int k) const;

  // Prepared variants reusing a shared encoder pass.
  DecodedList sample_prepared(const PreparedRequest& prep, const RerankRequest& request,
                              double temperature, int k, std::uint64_t seed,
                              bool greedy_mode) const;
  DecodedList sample_local_prepared(const PreparedRequest& prep, const RerankRequest& request,
                                    double temperature, int k, std::uint64_t seed,
                                    bool greedy_mode) const;
  double score_items_prepared(const PreparedRequest& prep,
                              const std::vector<std::int64_t>& items) const;

  const Parameters& params() const { return *params_; }
  const TokenVocabulary& vocab() const { return vocab_; }
  InputSequence serialize(const RerankRequest& request) const;

 private:
  const Parameters* params_;
  const SidTable* sids_;
  TokenVocabulary vocab_;
  int history_cap_;
};

// Masked, tempered log-probabilities over the legal subset of a logits vector.
// Entries outside `legal` are set to -inf surrogate.
Eigen::VectorXd masked_log_softmax(const Eigen::VectorXd& logits, const std::vector<int>& legal,
                                   double temperature);

}  // namespace glorank

#endif  // GLORANK_DECODE_HPP_
