#include "glorank/trie.hpp"

#include <sstream>

#include "glorank/errors.hpp"

namespace glorank {

CandidateTrie CandidateTrie::build(const std::vector<std::int64_t>& candidates,
                                   const SidTable& sids, const TokenVocabulary& vocab) {
  if (candidates.empty()) throw ArgumentError("build_trie: empty candidate set");
  CandidateTrie trie;
  trie.item_token_len_ = vocab.item_token_len();
  trie.nodes_.push_back(Node{});

  std::unordered_map<std::int64_t, bool> seen;
  for (const auto item : candidates) {
    if (seen.count(item))
      throw ArgumentError("build_trie: duplicate candidate " + std::to_string(item));
    seen[item] = true;
    if (!sids.contains(item))
      throw IntegrityError("build_trie: candidate " + std::to_string(item) +
                           " missing from sid table");
    const std::vector<int> toks = vocab.tokens_of(sids.sid(item));
    int cur = 0;
    std::vector<int> path;
    for (const int tok : toks) {
      auto it = trie.nodes_[cur].children.find(tok);
      if (it == trie.nodes_[cur].children.end()) {
        const int idx = static_cast<int>(trie.nodes_.size());
        trie.nodes_[cur].children.emplace(tok, idx);
        trie.nodes_.push_back(Node{});
        cur = idx;
      } else {
        cur = it->second;
      }
      path.push_back(cur);
    }
    if (trie.nodes_[cur].terminal_item != -1)
      throw IntegrityError("build_trie: items " + std::to_string(trie.nodes_[cur].terminal_item) +
                           " and " + std::to_string(item) + " share a token string");
    trie.nodes_[cur].terminal_item = item;
    for (const int n : path) ++trie.nodes_[n].subtree_terminals;
    ++trie.nodes_[0].subtree_terminals;
    trie.paths_.emplace(item, std::move(path));
    trie.tokens_.emplace(item, toks);
    ++trie.num_candidates_;
  }
  return trie;
}

const std::vector<int>& CandidateTrie::path_nodes(std::int64_t item) const {
  auto it = paths_.find(item);
  if (it == paths_.end())
    throw ArgumentError("path_nodes: item " + std::to_string(item) + " not in trie");
  return it->second;
}

const std::vector<int>& CandidateTrie::item_tokens(std::int64_t item) const {
  auto it = tokens_.find(item);
  if (it == tokens_.end())
    throw ArgumentError("item_tokens: item " + std::to_string(item) + " not in trie");
  return it->second;
}

std::string CandidateTrie::to_dot() const {
  std::ostringstream os;
  os << "digraph trie {\n";
  for (int i = 0; i < num_nodes(); ++i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    os << "  n" << i << " [label=\"#" << n.subtree_terminals;
    if (n.terminal_item != -1) os << " item " << n.terminal_item;
    os << "\"];\n";
    for (const auto& [tok, child] : n.children)
      os << "  n" << i << " -> n" << child << " [label=\"" << tok << "\"];\n";
  }
  os << "}\n";
  return os.str();
}

void PruneState::prune(const CandidateTrie& trie, std::int64_t item) {
  if (pruned_.count(item))
    throw StateError("prune: item " + std::to_string(item) + " already pruned");
  const auto& path = trie.path_nodes(item);
  ++pruned_below_[static_cast<std::size_t>(trie.root())];
  for (const int n : path) ++pruned_below_[static_cast<std::size_t>(n)];
  pruned_[item] = true;
}

std::vector<int> legal_tokens(const CandidateTrie& trie, const PruneState& state,
                              const TrieCursor& cursor) {
  if (state.live(trie, cursor.node) <= 0)
    throw StateError("legal_tokens: cursor rests on a dead subtree");
  std::vector<int> out;
  for (const auto& [tok, child] : trie.node(cursor.node).children)
    if (state.live(trie, child) > 0) out.push_back(tok);
  return out;
}

AdvanceResult advance(const CandidateTrie& trie, const PruneState& state, TrieCursor cursor,
                      int token) {
  const auto& children = trie.node(cursor.node).children;
  auto it = children.find(token);
  if (it == children.end() || state.live(trie, it->second) <= 0) {
    std::ostringstream os;
    os << "advance: token " << token << " is illegal here; legal set {";
    bool first = true;
    for (const int t : legal_tokens(trie, state, cursor)) {
      if (!first) os << ", ";
      os << t;
      first = false;
    }
    os << "}";
    throw ConstraintError(os.str());
  }
  AdvanceResult res;
  res.cursor.node = it->second;
  res.cursor.depth = cursor.depth + 1;
  if (res.cursor.depth == trie.item_token_len()) {
    res.completed = trie.node(res.cursor.node).terminal_item;
    res.cursor = TrieCursor{};  // back to root
  }
  return res;
}

}  // namespace glorank
