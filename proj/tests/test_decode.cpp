#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>

#include "glorank/corpus.hpp"
#include "glorank/decode.hpp"
#include "glorank/model.hpp"
#include "glorank/rng.hpp"

using namespace glorank;

namespace {

struct Fixture {
  Corpus corpus;
  SidTable sids;
  TokenVocabulary vocab;
  ModelConfig config;

  explicit Fixture(std::uint64_t seed = 3, int n_items = 16, int m_levels = 2, int cb = 8,
                   int local_slots = 0) {
    SyntheticData data = generate_synthetic(seed, n_items, 2, 8, 4);
    corpus = std::move(data.corpus);
    const RqCodebooks cbk = fit_rq_kmeans(corpus, m_levels, cb, 15, seed + 1);
    sids = assign_sids(corpus, cbk);
    vocab = TokenVocabulary::for_table(sids, cb);
    config.d_model = 16;
    config.n_heads = 2;
    config.n_enc_layers = 1;
    config.n_dec_layers = 1;
    config.d_ff = 32;
    config.vocab_size = vocab.vocab_size();
    config.max_enc_len = 256;
    config.max_dec_len = 32;
    config.local_slots = local_slots;
  }

  RerankRequest request(int n) const {
    RerankRequest req;
    for (int i = 0; i < n; ++i) {
      req.candidates.push_back(i);
      req.relevance[i] = i % 2;
    }
    req.history = {n, n + 1};
    return req;
  }
};

std::vector<std::vector<std::int64_t>> all_item_permutations(const std::vector<std::int64_t>& pool,
                                                             int k) {
  std::vector<std::vector<std::int64_t>> out;
  std::vector<std::int64_t> cur;
  std::vector<bool> used(pool.size(), false);
  std::function<void()> rec = [&] {
    if (static_cast<int>(cur.size()) == k) {
      out.push_back(cur);
      return;
    }
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (used[i]) continue;
      used[i] = true;
      cur.push_back(pool[i]);
      rec();
      cur.pop_back();
      used[i] = false;
    }
  };
  rec();
  return out;
}

}  // namespace

TEST_CASE("single candidate, K=1, B=1 returns the forced path") {
  Fixture f;
  const Parameters params = Parameters::init(f.config, 5);
  const Reranker ranker(params, f.sids, f.vocab, 8);
  RerankRequest req;
  req.candidates = {3};
  req.relevance[3] = 1;
  const auto lists = ranker.beam_search(req, 1, 1);
  REQUIRE(lists.size() == 1);
  CHECK(lists[0].list.items == std::vector<std::int64_t>{3});
}

TEST_CASE("beam with B >= permutation count enumerates exactly the valid K-permutations") {
  Fixture f;
  const Parameters params = Parameters::init(f.config, 7);
  const Reranker ranker(params, f.sids, f.vocab, 8);
  const RerankRequest req = f.request(4);
  const int k = 2;  // 12 ordered pairs

  const auto lists = ranker.beam_search(req, 40, k);
  CHECK(lists.size() == 12);

  std::set<std::vector<std::int64_t>> got;
  for (const auto& d : lists) got.insert(d.list.items);
  std::set<std::vector<std::int64_t>> expected;
  for (const auto& p : all_item_permutations(req.candidates, k)) expected.insert(p);
  CHECK(got == expected);

  // the top hypothesis is the brute-force argmax of teacher-forced log-prob,
  // and every beam score equals its teacher-forced recomputation
  double best = -1e300;
  std::vector<std::int64_t> best_items;
  for (const auto& p : all_item_permutations(req.candidates, k)) {
    const double s = ranker.score_items(req, p);
    if (s > best + 1e-12) {
      best = s;
      best_items = p;
    }
  }
  CHECK(lists[0].list.items == best_items);
  CHECK(lists[0].logprob == doctest::Approx(best).epsilon(1e-9));
  for (const auto& d : lists)
    CHECK(ranker.score_items(req, d.list.items) == doctest::Approx(d.logprob).epsilon(1e-9));

  // beam scores sorted non-increasing
  for (std::size_t i = 1; i < lists.size(); ++i) CHECK(lists[i - 1].logprob >= lists[i].logprob);
}

TEST_CASE("greedy equals the argmax limit of sampling and lists validate") {
  Fixture f;
  const Parameters params = Parameters::init(f.config, 11);
  const Reranker ranker(params, f.sids, f.vocab, 8);
  const RerankRequest req = f.request(5);
  const DecodedList g = ranker.greedy(req, 3);
  CHECK(g.list.items.size() == 3);
  // greedy must equal the best single path the beam of width 1 takes
  const auto beam1 = ranker.beam_search(req, 1, 3);
  CHECK(g.list.items == beam1[0].list.items);
  CHECK(g.logprob == doctest::Approx(beam1[0].logprob).epsilon(1e-12));
}

TEST_CASE("sampling log-probs re-evaluate identically under teacher forcing") {
  Fixture f;
  const Parameters params = Parameters::init(f.config, 13);
  const Reranker ranker(params, f.sids, f.vocab, 8);
  const RerankRequest req = f.request(5);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const DecodedList d = ranker.sample(req, 1.0, 3, seed);
    const double rescored = ranker.score_items(req, d.list.items);
    CHECK(std::abs(rescored - d.logprob) < 1e-5);
  }
}

TEST_CASE("masked renormalized probabilities sum to 1 at every step") {
  Eigen::VectorXd logits(6);
  logits << 0.3, -1.2, 2.0, 0.0, -0.5, 1.1;
  const std::vector<int> legal{0, 2, 5};
  const Eigen::VectorXd lp = masked_log_softmax(logits, legal, 0.8);
  double total = 0;
  for (const int t : legal) total += std::exp(lp[t]);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::isinf(lp[1]));
}

TEST_CASE("uniform logits sample uniformly: N=3, K=1 over 30000 draws") {
  Fixture f(3, 12, 2, 8);
  Parameters params = Parameters::init(f.config, 17);
  params.at("w_out").setZero();  // every masked distribution becomes uniform
  const Reranker ranker(params, f.sids, f.vocab, 8);

  // pick three candidates with distinct level-1 codes so the first step has
  // exactly three legal tokens
  std::vector<std::int64_t> cands;
  std::set<int> first_codes;
  for (const auto id : f.corpus.sorted_ids()) {
    const int c0 = f.sids.sid(id).codes[0];
    if (first_codes.insert(c0).second) cands.push_back(id);
    if (cands.size() == 3) break;
  }
  REQUIRE(cands.size() == 3);
  RerankRequest req;
  req.candidates = cands;
  for (const auto id : cands) req.relevance[id] = 0;

  std::map<std::int64_t, int> counts;
  const int n = 30000;
  const PreparedRequest prep = ranker.prepare(req);
  for (int s = 0; s < n; ++s)
    counts[ranker.sample_prepared(prep, req, 1.0, 1, static_cast<std::uint64_t>(s), false)
               .list.items[0]]++;
  const double p = 1.0 / 3.0;
  const double sigma = std::sqrt(p * (1 - p) / n);
  for (const auto id : cands) {
    const double freq = static_cast<double>(counts[id]) / n;
    CHECK(std::abs(freq - p) < 3.0 * sigma);
  }
}

TEST_CASE("local head: decode over position slots, duplicates masked") {
  Fixture f(19, 16, 2, 8, /*local_slots=*/5);
  const Parameters params = Parameters::init(f.config, 23);
  const Reranker ranker(params, f.sids, f.vocab, 8);
  const RerankRequest req = f.request(5);
  const DecodedList g = ranker.greedy_local(req, 5);
  CHECK(g.list.items.size() == 5);
  std::set<std::int64_t> uniq(g.list.items.begin(), g.list.items.end());
  CHECK(uniq.size() == 5);  // a full permutation of the candidates
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const DecodedList d = ranker.sample_local(req, 1.0, 3, seed);
    CHECK(d.list.items.size() == 3);
  }

  // slot count must match the candidate count
  const RerankRequest wrong = f.request(4);
  CHECK_THROWS_AS(ranker.greedy_local(wrong, 2), ArgumentError);
}
