#ifndef GLORANK_TRIE_HPP_
#define GLORANK_TRIE_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "glorank/tokenizer.hpp"

namespace glorank {

// Static prefix tree over the token strings of a request's candidates.
// Immutable after build; pruning state lives in PruneState so that beam
// hypotheses can branch without copying or mutating the shared tree.
class CandidateTrie {
 public:
  struct Node {
    std::map<int, int> children;  // token -> node index, ordered for determinism
    std::int64_t terminal_item = -1;
    int subtree_terminals = 0;
  };

  static CandidateTrie build(const std::vector<std::int64_t>& candidates, const SidTable& sids,
                             const TokenVocabulary& vocab);

  int root() const { return 0; }
  int item_token_len() const { return item_token_len_; }
  int num_candidates() const { return num_candidates_; }
  const Node& node(int idx) const { return nodes_[idx]; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  // node indices visited by the item's token string, excluding the root
  const std::vector<int>& path_nodes(std::int64_t item) const;
  const std::vector<int>& item_tokens(std::int64_t item) const;

  std::string to_dot() const;

 private:
  std::vector<Node> nodes_;
  std::unordered_map<std::int64_t, std::vector<int>> paths_;
  std::unordered_map<std::int64_t, std::vector<int>> tokens_;
  int item_token_len_ = 0;
  int num_candidates_ = 0;
};

// Per-consumer pruning bookkeeping: live(node) = static terminals below the
// node minus terminals pruned below it. O(item_token_len) per prune and cheap
// to copy when a beam hypothesis branches.
class PruneState {
 public:
  PruneState() = default;
  explicit PruneState(const CandidateTrie& trie)
      : pruned_below_(static_cast<std::size_t>(trie.num_nodes()), 0) {}

  int live(const CandidateTrie& trie, int node) const {
    return trie.node(node).subtree_terminals - pruned_below_[static_cast<std::size_t>(node)];
  }
  int live_root(const CandidateTrie& trie) const { return live(trie, trie.root()); }
  bool is_pruned(std::int64_t item) const { return pruned_.count(item) > 0; }

  void prune(const CandidateTrie& trie, std::int64_t item);

 private:
  std::vector<int> pruned_below_;
  std::map<std::int64_t, bool> pruned_;
};

struct TrieCursor {
  int node = 0;
  int depth = 0;
};

// Children of the cursor whose subtrees still hold unpruned terminals.
std::vector<int> legal_tokens(const CandidateTrie& trie, const PruneState& state,
                              const TrieCursor& cursor);

struct AdvanceResult {
  TrieCursor cursor;
  std::optional<std::int64_t> completed;
};

// Step the cursor along `token`; on reaching item_token_len returns the
// finished item and resets the cursor to the root. Pruning is the caller's
// move (beam search prunes a branched copy of the state).
AdvanceResult advance(const CandidateTrie& trie, const PruneState& state, TrieCursor cursor,
                      int token);

}  // namespace glorank

#endif  // GLORANK_TRIE_HPP_
