#include "glorank/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "glorank/rng.hpp"

namespace glorank {

Eigen::VectorXd masked_log_softmax(const Eigen::VectorXd& logits, const std::vector<int>& legal,
                                   double temperature) {
  if (legal.empty()) throw ArgumentError("masked_log_softmax: empty legal set");
  if (temperature <= 0.0) throw ArgumentError("masked_log_softmax: temperature must be > 0");
  Eigen::VectorXd out =
      Eigen::VectorXd::Constant(logits.size(), -std::numeric_limits<double>::infinity());
  double mx = -std::numeric_limits<double>::infinity();
  for (const int t : legal) mx = std::max(mx, logits[t] / temperature);
  double denom = 0.0;
  for (const int t : legal) denom += std::exp(logits[t] / temperature - mx);
  const double lse = mx + std::log(denom);
  for (const int t : legal) out[t] = logits[t] / temperature - lse;
  return out;
}

Reranker::Reranker(const Parameters& params, const SidTable& sids, const TokenVocabulary& vocab,
                   int history_cap)
    : params_(&params), sids_(&sids), vocab_(vocab), history_cap_(history_cap) {
  if (params.config.vocab_size != vocab.vocab_size())
    throw ArgumentError("Reranker: model vocab_size " + std::to_string(params.config.vocab_size) +
                        " does not match vocabulary " + std::to_string(vocab.vocab_size()));
}

InputSequence Reranker::serialize(const RerankRequest& request) const {
  return serialize_input(request, *sids_, vocab_, history_cap_, params_->config.max_enc_len);
}

PreparedRequest Reranker::prepare(const RerankRequest& request) const {
  PreparedRequest prep;
  prep.input = serialize(request);
  prep.ctx = encode(*params_, prep.input);
  prep.trie = CandidateTrie::build(request.candidates, *sids_, vocab_);
  return prep;
}

namespace {

struct BeamHypothesis {
  std::vector<int> tokens;
  std::vector<double> token_logprobs;
  double logprob = 0.0;
  TrieCursor cursor;
  PruneState pruned;
  std::vector<std::int64_t> emitted;
  DecoderRun run;
  Eigen::VectorXd pending_logits;

  BeamHypothesis(const Parameters& params, const EncoderContext& ctx, const CandidateTrie& trie)
      : pruned(trie), run(params, ctx, /*local_head=*/false) {}
};

bool lex_less(const std::vector<int>& a, const std::vector<int>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

// deterministic categorical draw over the legal subset of a log-prob vector
int draw_from(const Eigen::VectorXd& logp, const std::vector<int>& legal, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (const int t : legal) {
    acc += std::exp(logp[t]);
    if (u < acc) return t;
  }
  return legal.back();
}

int argmax_over(const Eigen::VectorXd& logp, const std::vector<int>& legal) {
  int best = legal.front();
  for (const int t : legal)
    if (logp[t] > logp[best]) best = t;
  return best;
}

}  // namespace

std::vector<DecodedList> Reranker::beam_search(const RerankRequest& request, int beam_size,
                                               int k) const {
  if (beam_size < 1) throw ArgumentError("beam_search: beam size must be >= 1");
  if (k < 1 || k > static_cast<int>(request.candidates.size()))
    throw ArgumentError("beam_search: need 1 <= K <= N");

  const PreparedRequest prep = prepare(request);
  const int total_steps = k * prep.trie.item_token_len();

  std::vector<BeamHypothesis> beams;
  {
    BeamHypothesis h(*params_, prep.ctx, prep.trie);
    h.pending_logits = h.run.step(bos_token_id(params_->config)).logits;
    h.tokens.reserve(static_cast<std::size_t>(total_steps));
    beams.push_back(std::move(h));
  }

  for (int step = 0; step < total_steps; ++step) {
    struct Expansion {
      int parent;
      int token;
      double logp_total;
      double token_logp;
    };
    std::vector<Expansion> expansions;
    for (int b = 0; b < static_cast<int>(beams.size()); ++b) {
      BeamHypothesis& hyp = beams[static_cast<std::size_t>(b)];
      const std::vector<int> legal = legal_tokens(prep.trie, hyp.pruned, hyp.cursor);
      const Eigen::VectorXd logp = masked_log_softmax(hyp.pending_logits, legal, 1.0);
      for (const int t : legal)
        expansions.push_back({b, t, hyp.logprob + logp[t], logp[t]});
    }
    std::sort(expansions.begin(), expansions.end(), [&](const Expansion& a, const Expansion& b) {
      if (a.logp_total != b.logp_total) return a.logp_total > b.logp_total;
      const auto& ta = beams[static_cast<std::size_t>(a.parent)].tokens;
      const auto& tb = beams[static_cast<std::size_t>(b.parent)].tokens;
      if (ta != tb) return lex_less(ta, tb);
      return a.token < b.token;
    });
    const int keep = std::min<int>(beam_size, static_cast<int>(expansions.size()));

    std::vector<BeamHypothesis> next;
    next.reserve(static_cast<std::size_t>(keep));
    for (int i = 0; i < keep; ++i) {
      const Expansion& e = expansions[static_cast<std::size_t>(i)];
      BeamHypothesis h = beams[static_cast<std::size_t>(e.parent)];  // branch: copy state
      h.tokens.push_back(e.token);
      h.token_logprobs.push_back(e.token_logp);
      h.logprob = e.logp_total;
      const AdvanceResult adv = advance(prep.trie, h.pruned, h.cursor, e.token);
      h.cursor = adv.cursor;
      if (adv.completed) {
        h.emitted.push_back(*adv.completed);
        h.pruned.prune(prep.trie, *adv.completed);
      }
      if (step + 1 < total_steps) h.pending_logits = h.run.step(e.token).logits;
      next.push_back(std::move(h));
    }
    beams = std::move(next);
  }

  std::vector<DecodedList> out;
  for (int b = 0; b < static_cast<int>(beams.size()); ++b) {
    BeamHypothesis& hyp = beams[static_cast<std::size_t>(b)];
    DecodedList d;
    d.list.items = hyp.emitted;
    d.tokens = hyp.tokens;
    d.token_logprobs = hyp.token_logprobs;
    d.logprob = hyp.logprob;
    d.beam_rank = b;
    validate_ranked_list(d.list, request);
    if (static_cast<int>(d.list.items.size()) != k)
      throw StateError("beam_search: hypothesis finished with wrong item count");
    out.push_back(std::move(d));
  }
  return out;
}

DecodedList Reranker::sample_prepared(const PreparedRequest& prep, const RerankRequest& request,
                                      double temperature, int k, std::uint64_t seed,
                                      bool greedy_mode) const {
  if (k < 1 || k > static_cast<int>(request.candidates.size()))
    throw ArgumentError("constrained decode: need 1 <= K <= N");
  const int total_steps = k * prep.trie.item_token_len();

  Rng rng(seed);
  DecodedList d;
  PruneState pruned(prep.trie);
  TrieCursor cursor;
  DecoderRun run(*params_, prep.ctx, /*local_head=*/false);
  Eigen::VectorXd logits = run.step(bos_token_id(params_->config)).logits;
  for (int step = 0; step < total_steps; ++step) {
    const std::vector<int> legal = legal_tokens(prep.trie, pruned, cursor);
    const Eigen::VectorXd logp = masked_log_softmax(logits, legal, temperature);
    const int chosen = greedy_mode ? argmax_over(logp, legal) : draw_from(logp, legal, rng);
    d.tokens.push_back(chosen);
    d.token_logprobs.push_back(logp[chosen]);
    d.logprob += logp[chosen];
    const AdvanceResult adv = advance(prep.trie, pruned, cursor, chosen);
    cursor = adv.cursor;
    if (adv.completed) {
      d.list.items.push_back(*adv.completed);
      pruned.prune(prep.trie, *adv.completed);
    }
    if (step + 1 < total_steps) logits = run.step(chosen).logits;
  }
  validate_ranked_list(d.list, request);
  if (static_cast<int>(d.list.items.size()) != k)
    throw StateError("constrained decode: finished with wrong item count");
  return d;
}

DecodedList Reranker::sample(const RerankRequest& request, double temperature, int k,
                             std::uint64_t seed) const {
  if (temperature <= 0.0) throw ArgumentError("sample: temperature must be > 0");
  return sample_prepared(prepare(request), request, temperature, k, seed, false);
}

DecodedList Reranker::greedy(const RerankRequest& request, int k) const {
  return sample_prepared(prepare(request), request, 1.0, k, 0, true);
}

double Reranker::score_items_prepared(const PreparedRequest& prep,
                                      const std::vector<std::int64_t>& items) const {
  PruneState pruned(prep.trie);
  TrieCursor cursor;
  DecoderRun run(*params_, prep.ctx, /*local_head=*/false);
  Eigen::VectorXd logits = run.step(bos_token_id(params_->config)).logits;
  double total = 0.0;
  std::size_t fed = 0;
  const std::size_t n_tokens = items.size() * static_cast<std::size_t>(prep.trie.item_token_len());
  for (const auto item : items) {
    for (const int t : prep.trie.item_tokens(item)) {
      const std::vector<int> legal = legal_tokens(prep.trie, pruned, cursor);
      const Eigen::VectorXd logp = masked_log_softmax(logits, legal, 1.0);
      if (!std::isfinite(logp[t]))
        throw ConstraintError("score_items: sequence is not trie-legal");
      total += logp[t];
      const AdvanceResult adv = advance(prep.trie, pruned, cursor, t);
      cursor = adv.cursor;
      if (adv.completed) pruned.prune(prep.trie, *adv.completed);
      if (++fed < n_tokens) logits = run.step(t).logits;
    }
  }
  return total;
}

double Reranker::score_items(const RerankRequest& request,
                             const std::vector<std::int64_t>& items) const {
  return score_items_prepared(prepare(request), items);
}

DecodedList Reranker::sample_local_prepared(const PreparedRequest& prep,
                                            const RerankRequest& request, double temperature,
                                            int k, std::uint64_t seed, bool greedy_mode) const {
  const int n = static_cast<int>(request.candidates.size());
  if (params_->config.local_slots != n)
    throw ArgumentError("local decode: model local_slots " +
                        std::to_string(params_->config.local_slots) +
                        " does not match candidate count " + std::to_string(n));
  if (k < 1 || k > n) throw ArgumentError("local decode: need 1 <= K <= N");

  Rng rng(seed);
  DecodedList d;
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  DecoderRun run(*params_, prep.ctx, /*local_head=*/true);
  Eigen::VectorXd logits = run.step(0).logits;
  for (int step = 0; step < k; ++step) {
    std::vector<int> legal;
    for (int p = 0; p < n; ++p)
      if (!taken[static_cast<std::size_t>(p)]) legal.push_back(p);
    const Eigen::VectorXd logp = masked_log_softmax(logits, legal, temperature);
    const int chosen = greedy_mode ? argmax_over(logp, legal) : draw_from(logp, legal, rng);
    taken[static_cast<std::size_t>(chosen)] = true;
    d.tokens.push_back(chosen);
    d.token_logprobs.push_back(logp[chosen]);
    d.logprob += logp[chosen];
    d.list.items.push_back(request.candidates[static_cast<std::size_t>(chosen)]);
    if (step + 1 < k) logits = run.step(local_input_of_position(chosen)).logits;
  }
  validate_ranked_list(d.list, request);
  return d;
}

DecodedList Reranker::sample_local(const RerankRequest& request, double temperature, int k,
                                   std::uint64_t seed) const {
  if (temperature <= 0.0) throw ArgumentError("sample_local: temperature must be > 0");
  return sample_local_prepared(prepare(request), request, temperature, k, seed, false);
}

DecodedList Reranker::greedy_local(const RerankRequest& request, int k) const {
  return sample_local_prepared(prepare(request), request, 1.0, k, 0, true);
}

}  // namespace glorank
