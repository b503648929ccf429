#include <doctest.h>

#include <algorithm>
#include <functional>
#include <set>

#include "glorank/corpus.hpp"
#include "glorank/rng.hpp"
#include "glorank/tokenizer.hpp"
#include "glorank/trie.hpp"

using namespace glorank;

namespace {

// hand-built sid table matching the worked examples: A = [5,7,2,9], B = [5,7,3,1]
// realized as M=4, codebook large enough that post-offset tokens are the codes
SidTable two_item_table() {
  std::map<std::int64_t, SemanticId> table;
  SemanticId a;
  a.codes = {5, 7, 2, 9};
  SemanticId b;
  b.codes = {5, 7, 3, 1};
  // use per-level codes that collide across levels only via offsets
  table.emplace(100, a);
  table.emplace(200, b);
  return SidTable(std::move(table), 4);
}

std::vector<std::vector<int>> all_k_permutations(int n, int k) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur;
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  std::function<void()> rec = [&] {
    if (static_cast<int>(cur.size()) == k) {
      out.push_back(cur);
      return;
    }
    for (int i = 0; i < n; ++i) {
      if (used[static_cast<std::size_t>(i)]) continue;
      used[static_cast<std::size_t>(i)] = true;
      cur.push_back(i);
      rec();
      cur.pop_back();
      used[static_cast<std::size_t>(i)] = false;
    }
  };
  rec();
  return out;
}

// language accepted by the trie automaton with pruning, up to k items
std::set<std::vector<int>> accepted_sequences(const CandidateTrie& trie, int k) {
  std::set<std::vector<int>> out;
  std::vector<int> cur;
  std::function<void(PruneState, TrieCursor, int)> rec = [&](PruneState state, TrieCursor cursor,
                                                             int emitted) {
    if (emitted == k) {
      out.insert(cur);
      return;
    }
    for (const int tok : legal_tokens(trie, state, cursor)) {
      cur.push_back(tok);
      const AdvanceResult adv = advance(trie, state, cursor, tok);
      PruneState next_state = state;
      int next_emitted = emitted;
      if (adv.completed) {
        next_state.prune(trie, *adv.completed);
        ++next_emitted;
      }
      rec(next_state, adv.cursor, next_emitted);
      cur.pop_back();
    }
  };
  rec(PruneState(trie), TrieCursor{}, 0);
  return out;
}

}  // namespace

TEST_CASE("build: structure of the two-candidate example") {
  const SidTable table = two_item_table();
  const TokenVocabulary vocab(4, 16, 0);
  const CandidateTrie trie = CandidateTrie::build({100, 200}, table, vocab);

  CHECK(trie.num_candidates() == 2);
  CHECK(trie.item_token_len() == 4);
  CHECK(trie.node(trie.root()).children.size() == 1);  // shared first token

  PruneState state(trie);
  TrieCursor cursor;
  const auto l0 = legal_tokens(trie, state, cursor);
  CHECK(l0 == std::vector<int>{vocab.level_token(1, 5)});

  auto adv = advance(trie, state, cursor, vocab.level_token(1, 5));
  adv = advance(trie, state, adv.cursor, vocab.level_token(2, 7));
  const auto l2 = legal_tokens(trie, state, adv.cursor);
  CHECK(l2 == std::vector<int>{vocab.level_token(3, 2), vocab.level_token(3, 3)});

  // walking A's full string returns item A and resets to root
  auto c3 = advance(trie, state, adv.cursor, vocab.level_token(3, 2));
  CHECK(!c3.completed);
  auto c4 = advance(trie, state, c3.cursor, vocab.level_token(4, 9));
  REQUIRE(c4.completed);
  CHECK(*c4.completed == 100);
  CHECK(c4.cursor.node == trie.root());
  CHECK(c4.cursor.depth == 0);

  // illegal token at the root names the legal set
  CHECK_THROWS_AS(advance(trie, state, TrieCursor{}, vocab.level_token(1, 9)), ConstraintError);
}

TEST_CASE("prune: shared prefixes stay alive, exhaustion kills the root") {
  const SidTable table = two_item_table();
  const TokenVocabulary vocab(4, 16, 0);
  const CandidateTrie trie = CandidateTrie::build({100, 200}, table, vocab);

  PruneState state(trie);
  state.prune(trie, 100);
  TrieCursor cursor;
  CHECK(legal_tokens(trie, state, cursor) == std::vector<int>{vocab.level_token(1, 5)});
  auto adv = advance(trie, state, cursor, vocab.level_token(1, 5));
  adv = advance(trie, state, adv.cursor, vocab.level_token(2, 7));
  CHECK(legal_tokens(trie, state, adv.cursor) == std::vector<int>{vocab.level_token(3, 3)});

  CHECK_THROWS_AS(state.prune(trie, 100), StateError);  // double prune
  state.prune(trie, 200);
  CHECK(state.live_root(trie) == 0);
}

TEST_CASE("singleton candidate set") {
  const SidTable table = two_item_table();
  const TokenVocabulary vocab(4, 16, 0);
  const CandidateTrie trie = CandidateTrie::build({100}, table, vocab);
  CHECK(trie.num_candidates() == 1);
  PruneState state(trie);
  CHECK(state.live_root(trie) == 1);
  CHECK(trie.item_tokens(100).size() == 4);
}

TEST_CASE("missing sid raises integrity error; duplicates rejected") {
  const SidTable table = two_item_table();
  const TokenVocabulary vocab(4, 16, 0);
  CHECK_THROWS_AS(CandidateTrie::build({100, 300}, table, vocab), IntegrityError);
  CHECK_THROWS_AS(CandidateTrie::build({100, 100}, table, vocab), ArgumentError);
}

TEST_CASE("50 random candidates: every token string retrievable by path walk") {
  const SyntheticData data = generate_synthetic(19, 300, 2, 16, 8);
  const RqCodebooks cb = fit_rq_kmeans(data.corpus, 3, 16, 20, 7);
  const SidTable sids = assign_sids(data.corpus, cb);
  const TokenVocabulary vocab = TokenVocabulary::for_table(sids, 16);

  Rng rng(123);
  std::vector<std::int64_t> cands;
  const auto perm = rng.k_permutation(300, 50);
  for (const int p : perm) cands.push_back(p);

  const CandidateTrie trie = CandidateTrie::build(cands, sids, vocab);
  int terminals = 0;
  for (int i = 0; i < trie.num_nodes(); ++i)
    if (trie.node(i).terminal_item != -1) ++terminals;
  CHECK(terminals == 50);

  PruneState state(trie);
  for (const auto item : cands) {
    TrieCursor cursor;
    std::optional<std::int64_t> completed;
    for (const int tok : vocab.tokens_of(sids.sid(item))) {
      const auto legal = legal_tokens(trie, state, cursor);
      CHECK(std::find(legal.begin(), legal.end(), tok) != legal.end());
      const auto adv = advance(trie, state, cursor, tok);
      cursor = adv.cursor;
      completed = adv.completed;
    }
    REQUIRE(completed);
    CHECK(*completed == item);
  }
}

TEST_CASE("completeness and soundness: accepted language equals K-permutations (N<=6, K<=3)") {
  const SyntheticData data = generate_synthetic(29, 40, 2, 8, 4);
  const RqCodebooks cb = fit_rq_kmeans(data.corpus, 2, 4, 20, 3);
  const SidTable sids = assign_sids(data.corpus, cb);
  const TokenVocabulary vocab = TokenVocabulary::for_table(sids, 4);

  for (const int n : {2, 4, 6}) {
    for (const int k : {1, 2, 3}) {
      if (k > n) continue;
      std::vector<std::int64_t> cands;
      for (int i = 0; i < n; ++i) cands.push_back(i);
      const CandidateTrie trie = CandidateTrie::build(cands, sids, vocab);
      const auto accepted = accepted_sequences(trie, k);

      std::set<std::vector<int>> expected;
      for (const auto& perm : all_k_permutations(n, k)) {
        std::vector<int> seq;
        for (const int p : perm) {
          const auto toks = vocab.tokens_of(sids.sid(cands[static_cast<std::size_t>(p)]));
          seq.insert(seq.end(), toks.begin(), toks.end());
        }
        expected.insert(std::move(seq));
      }
      CHECK(accepted == expected);
    }
  }
}

TEST_CASE("prune/rebuild equivalence after every prune, N=6 K=6") {
  const SyntheticData data = generate_synthetic(37, 40, 2, 8, 4);
  const RqCodebooks cb = fit_rq_kmeans(data.corpus, 2, 8, 20, 5);
  const SidTable sids = assign_sids(data.corpus, cb);
  const TokenVocabulary vocab = TokenVocabulary::for_table(sids, 8);

  std::vector<std::int64_t> cands{0, 1, 2, 3, 4, 5};
  const CandidateTrie trie = CandidateTrie::build(cands, sids, vocab);
  PruneState state(trie);

  Rng rng(8);
  std::vector<std::int64_t> order = cands;
  rng.shuffle(order);

  std::vector<std::int64_t> remaining = cands;
  for (const auto victim : order) {
    state.prune(trie, victim);
    remaining.erase(std::find(remaining.begin(), remaining.end(), victim));
    if (remaining.empty()) {
      CHECK(state.live_root(trie) == 0);
      break;
    }
    // rebuilding from the reduced candidate set gives identical legal sets at
    // every reachable node
    const CandidateTrie rebuilt = CandidateTrie::build(remaining, sids, vocab);
    PruneState fresh(rebuilt);
    std::function<void(TrieCursor, TrieCursor)> walk = [&](TrieCursor a, TrieCursor b) {
      const auto la = legal_tokens(trie, state, a);
      const auto lb = legal_tokens(rebuilt, fresh, b);
      CHECK(la == lb);
      if (a.depth == trie.item_token_len() - 1) return;
      for (const int tok : la) {
        walk(TrieCursor{trie.node(a.node).children.at(tok), a.depth + 1},
             TrieCursor{rebuilt.node(b.node).children.at(tok), b.depth + 1});
      }
    };
    walk(TrieCursor{}, TrieCursor{});
  }
}
