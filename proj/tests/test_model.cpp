#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "glorank/corpus.hpp"
#include "glorank/model.hpp"
#include "glorank/rng.hpp"
#include "glorank/tokenizer.hpp"

using namespace glorank;

namespace {

struct Fixture {
  Corpus corpus;
  SidTable sids;
  TokenVocabulary vocab;
  RerankRequest request;
  ModelConfig config;

  explicit Fixture(int n_items = 12, int n_candidates = 4, int m_levels = 2, int cb_size = 8,
                   int d_model = 16, PositionalMode mode = PositionalMode::kAbsolute,
                   int local_slots = 0, std::uint64_t seed = 3) {
    SyntheticData data = generate_synthetic(seed, n_items, 2, 8, 3);
    corpus = std::move(data.corpus);
    const RqCodebooks cb = fit_rq_kmeans(corpus, m_levels, cb_size, 15, seed + 1);
    sids = assign_sids(corpus, cb);
    vocab = TokenVocabulary::for_table(sids, cb_size);

    request.request_id = 0;
    request.user_id = 0;
    for (int i = 0; i < n_candidates; ++i) {
      request.candidates.push_back(i);
      request.relevance[i] = i % 2;
    }
    request.history = {n_candidates, n_candidates + 1};

    config.d_model = d_model;
    config.n_heads = 4;
    config.n_enc_layers = 1;
    config.n_dec_layers = 1;
    config.d_ff = 2 * d_model;
    config.vocab_size = vocab.vocab_size();
    config.max_enc_len = 128;
    config.max_dec_len = 16;
    config.positional = mode;
    config.local_slots = local_slots;
  }
};

std::vector<int> target_tokens(const Fixture& f, const std::vector<std::int64_t>& items) {
  std::vector<int> toks;
  for (const auto id : items) {
    const auto t = f.vocab.tokens_of(f.sids.sid(id));
    toks.insert(toks.end(), t.begin(), t.end());
  }
  return toks;
}

}  // namespace

TEST_CASE("serialize_input: template arithmetic and annotations") {
  Fixture f(12, 2, 4, 8, 16);
  RerankRequest req;
  req.request_id = 7;
  req.candidates = {0, 1};
  REQUIRE(!f.sids.has_collisions());  // template arithmetic assumes arity M here
  const InputSequence in = serialize_input(req, f.sids, f.vocab, 50, 128);
  // 2*4 candidate tokens + SEP + empty history + SEP + RANK = 11
  CHECK(in.tokens.size() == 11);
  CHECK(in.tokens[8] == f.vocab.sep());
  CHECK(in.tokens[9] == f.vocab.sep());
  CHECK(in.tokens[10] == f.vocab.rank());
  CHECK(in.candidate_index[0] == 0);
  CHECK(in.candidate_index[4] == 1);
  CHECK(in.candidate_index[8] == -1);
  CHECK(in.block_offset[5] == 1);

  // swapping candidates permutes only the candidate blocks
  RerankRequest swapped = req;
  std::swap(swapped.candidates[0], swapped.candidates[1]);
  const InputSequence in2 = serialize_input(swapped, f.sids, f.vocab, 50, 128);
  const InputSequence in_perm = permute_candidates(in, {1, 0});
  CHECK(in2.tokens == in_perm.tokens);
  CHECK(std::vector<int>(in.tokens.begin() + 8, in.tokens.end()) ==
        std::vector<int>(in2.tokens.begin() + 8, in2.tokens.end()));

  // history truncation keeps the most recent items
  RerankRequest hist = req;
  for (int i = 0; i < 8; ++i) hist.history.push_back(i % 4);
  const InputSequence in3 = serialize_input(hist, f.sids, f.vocab, 3, 128);
  CHECK(in3.tokens.size() == 2 * 4 + 1 + 3 * 4 + 1 + 1);

  // overflow names the request
  try {
    serialize_input(hist, f.sids, f.vocab, 50, 16);
    FAIL("expected length error");
  } catch (const ArgumentError& e) {
    CHECK(std::string(e.what()).find("request 7") != std::string::npos);
  }
}

TEST_CASE("forward: softmax normalization, finiteness, determinism") {
  Fixture f;
  const Parameters params = Parameters::init(f.config, 5);
  const InputSequence in = serialize_input(f.request, f.sids, f.vocab, 8, 128);
  const std::vector<int> prefix = target_tokens(f, {0, 1});

  const auto steps = forward_steps(params, in, prefix, false);
  CHECK(steps.size() == prefix.size() + 1);
  for (const auto& s : steps) {
    CHECK(s.logits.allFinite());
    CHECK(s.hidden.allFinite());
    Eigen::VectorXd p = (s.logits.array() - s.logits.maxCoeff()).exp();
    p /= p.sum();
    CHECK(std::abs(p.sum() - 1.0) < 1e-6);
  }

  // bitwise determinism across two runs
  const auto steps2 = forward_steps(params, in, prefix, false);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    CHECK(steps[i].logits == steps2[i].logits);
    CHECK(steps[i].hidden == steps2[i].hidden);
  }
}

TEST_CASE("forward activations stay finite over 1000 random passes") {
  Fixture f;
  Rng rng(71);
  const InputSequence in = serialize_input(f.request, f.sids, f.vocab, 8, 128);
  for (int trial = 0; trial < 1000; ++trial) {
    const Parameters params = Parameters::init(f.config, rng.next_u64());
    const auto steps = forward_steps(params, in, {}, false);
    CHECK(steps[0].logits.allFinite());
    CHECK(steps[0].hidden.allFinite());
  }
}

TEST_CASE("teacher-forced tape logits match incremental inference logits") {
  Fixture f;
  const Parameters params = Parameters::init(f.config, 9);
  const InputSequence in = serialize_input(f.request, f.sids, f.vocab, 8, 128);
  const std::vector<int> targets = target_tokens(f, {1, 0});

  TrainGraph graph(params, in);
  std::vector<int> dec_inputs{bos_token_id(params.config)};
  for (std::size_t i = 0; i + 1 < targets.size(); ++i) dec_inputs.push_back(targets[i]);
  const auto out = graph.decode(dec_inputs, false);
  const Mat& tape_logits = graph.tape().value(out.logits);

  const auto steps = forward_steps(params, in, std::vector<int>(targets.begin(), targets.end() - 1),
                                   false);
  REQUIRE(static_cast<Eigen::Index>(steps.size()) == tape_logits.rows());
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const double diff =
        (steps[t].logits.transpose() - tape_logits.row(static_cast<Eigen::Index>(t))).cwiseAbs().maxCoeff();
    CHECK(diff < 1e-9);
  }
}

TEST_CASE("permuted vocabulary rows permute logits identically") {
  Fixture f;
  Parameters params = Parameters::init(f.config, 13);
  const InputSequence in = serialize_input(f.request, f.sids, f.vocab, 8, 128);
  const auto base = forward_steps(params, in, {}, false);

  // swap two embedding+output rows that do not appear in the input
  std::vector<bool> used(static_cast<std::size_t>(f.vocab.vocab_size()), false);
  for (const int t : in.tokens) used[static_cast<std::size_t>(t)] = true;
  used[static_cast<std::size_t>(bos_token_id(params.config))] = true;
  int a = -1, b = -1;
  for (int t = 0; t < f.vocab.vocab_size(); ++t) {
    if (used[static_cast<std::size_t>(t)]) continue;
    if (a < 0)
      a = t;
    else if (b < 0) {
      b = t;
      break;
    }
  }
  REQUIRE(b >= 0);
  params.at("tok_emb").row(a).swap(params.at("tok_emb").row(b));
  params.at("w_out").row(a).swap(params.at("w_out").row(b));
  const auto swapped = forward_steps(params, in, {}, false);
  CHECK(std::abs(base[0].logits[a] - swapped[0].logits[b]) < 1e-12);
  CHECK(std::abs(base[0].logits[b] - swapped[0].logits[a]) < 1e-12);
  // all other rows untouched
  for (int j = 0; j < f.vocab.vocab_size(); ++j) {
    if (j == a || j == b) continue;
    CHECK(std::abs(base[0].logits[j] - swapped[0].logits[j]) < 1e-12);
  }
}

TEST_CASE("setlike positional mode: first decode hidden invariant to candidate permutation") {
  Fixture f(12, 4, 2, 8, 16, PositionalMode::kSetlike);
  const Parameters params = Parameters::init(f.config, 17);
  const InputSequence base = serialize_input(f.request, f.sids, f.vocab, 8, 128);
  const auto h0 = forward_steps(params, base, {}, false)[0].hidden;

  Rng rng(23);
  for (int trial = 0; trial < 6; ++trial) {
    const auto perm = rng.permutation(4);
    const InputSequence permuted = permute_candidates(base, perm);
    const auto h = forward_steps(params, permuted, {}, false)[0].hidden;
    CHECK((h - h0).cwiseAbs().maxCoeff() < 1e-5);
  }

  // absolute mode is genuinely permutation-sensitive
  Fixture g(12, 4, 2, 8, 16, PositionalMode::kAbsolute);
  const Parameters params_abs = Parameters::init(g.config, 17);
  const InputSequence base_abs = serialize_input(g.request, g.sids, g.vocab, 8, 128);
  const auto ha = forward_steps(params_abs, base_abs, {}, false)[0].hidden;
  const auto hb =
      forward_steps(params_abs, permute_candidates(base_abs, {3, 2, 1, 0}), {}, false)[0].hidden;
  CHECK((ha - hb).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("loss: uniform logits give ln V, gradients match the output-layer closed form") {
  Fixture f;
  Parameters params = Parameters::init(f.config, 19);
  const InputSequence in = serialize_input(f.request, f.sids, f.vocab, 8, 128);

  // zero output matrix makes every step uniform: loss = ln(vocab)
  params.at("w_out").setZero();
  const std::vector<int> targets = target_tokens(f, {0});
  {
    TrainGraph graph(params, in);
    const auto out = graph.decode({bos_token_id(params.config), targets[0]}, false);
    const auto loss = graph.tape().cross_entropy(out.logits, {targets[0], targets[1]}, true);
    CHECK(graph.tape().value(loss)(0, 0) ==
          doctest::Approx(std::log(static_cast<double>(f.vocab.vocab_size()))).epsilon(1e-12));
  }

  // single-token CE: d loss / d W_out == (p - e_y) h^T exactly (Eq. form)
  params = Parameters::init(f.config, 19);
  TrainGraph graph(params, in);
  const auto out = graph.decode({bos_token_id(params.config)}, false);
  const auto loss = graph.tape().cross_entropy(out.logits, {targets[0]}, true);
  graph.tape().backward(loss);
  const Mat got = graph.tape().grad(graph.param_ref("w_out"));

  const auto steps = forward_steps(params, in, {}, false);
  Eigen::VectorXd p = (steps[0].logits.array() - steps[0].logits.maxCoeff()).exp();
  p /= p.sum();
  Eigen::VectorXd e = Eigen::VectorXd::Zero(f.vocab.vocab_size());
  e[targets[0]] = 1.0;
  const Mat closed_form = (p - e) * steps[0].hidden.transpose();
  CHECK((got - closed_form).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("loss_and_grads: finite differences across every parameter group, both heads") {
  for (const bool local : {false, true}) {
    Fixture f(12, 3, 2, 8, 8, PositionalMode::kAbsolute, local ? 3 : 0);
    f.config.n_heads = 2;
    const InputSequence in = serialize_input(f.request, f.sids, f.vocab, 8, 128);
    const std::vector<int> targets = local ? std::vector<int>{1, 0} : target_tokens(f, {1, 0});

    for (const std::uint64_t seed : {101u, 202u}) {
      Parameters params = Parameters::init(f.config, seed);
      const LossAndGrads lg = loss_and_grads(params, in, targets, local);
      Rng pick(seed + 7);
      for (const auto& [name, grad] : lg.grads) {
        const Mat& tensor = params.at(name);
        // probe a handful of entries per tensor
        for (int probe = 0; probe < 3; ++probe) {
          const Eigen::Index r =
              static_cast<Eigen::Index>(pick.uniform_int(static_cast<std::uint64_t>(tensor.rows())));
          const Eigen::Index c =
              static_cast<Eigen::Index>(pick.uniform_int(static_cast<std::uint64_t>(tensor.cols())));
          const double eps = 1e-5;
          Parameters shifted = params;
          shifted.at(name)(r, c) += eps;
          const double up = loss_and_grads(shifted, in, targets, local).loss;
          shifted.at(name)(r, c) -= 2 * eps;
          const double dn = loss_and_grads(shifted, in, targets, local).loss;
          const double fd = (up - dn) / (2 * eps);
          const double a = grad(r, c);
          CAPTURE(name);
          CHECK(std::abs(fd - a) <= 1e-4 * std::max({std::abs(fd), std::abs(a), 1.0}));
        }
      }
    }
  }
}

TEST_CASE("tied output head reuses the token embedding") {
  Fixture f;
  f.config.tie_output = true;
  const Parameters params = Parameters::init(f.config, 29);
  CHECK(!params.has("w_out"));
  const InputSequence in = serialize_input(f.request, f.sids, f.vocab, 8, 128);
  const auto steps = forward_steps(params, in, {}, false);
  CHECK(steps[0].logits.allFinite());

  // gradients flow into the embedding from both uses
  const std::vector<int> targets = target_tokens(f, {0});
  const LossAndGrads lg = loss_and_grads(params, in, targets, false);
  CHECK(lg.grads.at("tok_emb").cwiseAbs().sum() > 0.0);
}

TEST_CASE("checkpoint round trip is exact") {
  Fixture f;
  const Parameters params = Parameters::init(f.config, 31);
  Checkpoint ckpt;
  ckpt.params = params;
  ckpt.step = 123;
  ckpt.rng_state = Rng(9).serialize();
  const std::string path =
      (std::filesystem::temp_directory_path() / "glorank_ckpt_test.bin").string();
  save_checkpoint(path, ckpt);
  const Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.step == 123);
  CHECK(loaded.rng_state == ckpt.rng_state);
  CHECK(loaded.params.config.to_json() == params.config.to_json());
  for (const auto& [name, tensor] : params.tensors) {
    CHECK(loaded.params.at(name) == tensor);  // bit-exact
  }
}
