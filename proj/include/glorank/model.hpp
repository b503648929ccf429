#ifndef GLORANK_MODEL_HPP_
#define GLORANK_MODEL_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "glorank/corpus.hpp"
#include "glorank/graph.hpp"
#include "glorank/jsonl.hpp"
#include "glorank/rng.hpp"
#include "glorank/tokenizer.hpp"

namespace glorank {

// "absolute": every encoder token carries its absolute position.
// "setlike": candidate tokens carry only their offset within their SID block,
// so the encoder treats the candidate set as unordered and the first decode
// hidden state is invariant to candidate permutations.
enum class PositionalMode { kAbsolute, kSetlike };

std::string to_string(PositionalMode mode);
PositionalMode positional_mode_from_string(const std::string& s);

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ff = 256;
  int vocab_size = 0;
  int max_enc_len = 512;
  int max_dec_len = 64;
  double dropout = 0.0;
  PositionalMode positional = PositionalMode::kAbsolute;
  int local_slots = 0;      // > 0 adds the position-indexed decoder head of that width
  bool tie_output = false;  // share w_out with the token embedding

  void validate() const;
  json to_json() const;
  static ModelConfig from_json(const json& j);
};

// Named parameter tensors. Iteration order (std::map) is the canonical order
// for initialization, checkpoints and optimizer state.
struct Parameters {
  ModelConfig config;
  std::map<std::string, Mat> tensors;
  std::uint64_t init_seed = 0;

  static Parameters init(const ModelConfig& config, std::uint64_t seed);

  Mat& at(const std::string& name);
  const Mat& at(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  // name of the global output projection (token embedding when tied)
  std::string output_matrix_name() const { return config.tie_output ? "tok_emb" : "w_out"; }
};

// Serialized encoder input: S(C) <sep> S(H) <sep> <rank>, with per-token
// segment annotations used for positional modes and candidate permutation.
struct InputSequence {
  std::vector<int> tokens;
  std::vector<int> candidate_index;  // block index, -1 for non-candidate tokens
  std::vector<int> block_offset;     // offset inside the SID block, -1 elsewhere
  int n_candidates = 0;
  int item_token_len = 0;

  std::vector<int> position_ids(PositionalMode mode) const;
};

InputSequence serialize_input(const RerankRequest& request, const SidTable& sids,
                              const TokenVocabulary& vocab, int history_cap, int max_enc_len);

// Reorder candidate blocks: block j of the result is block perm[j] of the input.
InputSequence permute_candidates(const InputSequence& input, const std::vector<int>& perm);

struct StepDistribution {
  Eigen::VectorXd logits;
  Eigen::VectorXd hidden;
};

// Specials sit at the top of the vocabulary range: PAD, BOS, SEP, RANK.
inline int bos_token_id(const ModelConfig& config) { return config.vocab_size - 3; }

// Local-head decoder inputs are slot-embedding rows: 0 is the start symbol and
// candidate position p (0-based) embeds as row p + 1. Local-head targets and
// logits columns are the 0-based positions themselves.
inline int local_input_of_position(int position) { return position + 1; }

// ---- no-grad inference path ----

// Encoder output and per-decoder-layer cross-attention K/V, cached per request.
struct EncoderContext {
  Mat enc_out;
  std::vector<Mat> cross_k;  // per decoder layer, (L_enc x d_model)
  std::vector<Mat> cross_v;
};

EncoderContext encode(const Parameters& params, const InputSequence& input);

// Incremental decoder with self-attention K/V caches; copyable so that beam
// hypotheses can branch. Feed the start token first (BOS, or 0 in local mode).
class DecoderRun {
 public:
  DecoderRun(const Parameters& params, const EncoderContext& ctx, bool local_head);

  StepDistribution step(int token);
  int length() const { return pos_; }

 private:
  const Parameters* params_;
  const EncoderContext* ctx_;
  bool local_;
  int pos_ = 0;
  std::vector<Mat> self_k_, self_v_;  // per layer, grows one row per step
};

// Teacher-forced distributions: element i conditions on prefix[0..i-1], so the
// result has prefix.size() + 1 entries. Global head unless local_head.
std::vector<StepDistribution> forward_steps(const Parameters& params, const InputSequence& input,
                                            const std::vector<int>& prefix, bool local_head);

// ---- training path (tape autodiff) ----

class TrainGraph {
 public:
  // dropout_rng enables inverted dropout when config.dropout > 0
  TrainGraph(const Parameters& params, const InputSequence& input, Rng* dropout_rng = nullptr);

  struct DecodeOut {
    Tape::Ref hidden;  // (T x d_model)
    Tape::Ref logits;  // (T x vocab) or (T x local_slots)
  };
  // decoder_inputs must start with BOS (global) or the start slot 0 (local)
  DecodeOut decode(const std::vector<int>& decoder_inputs, bool local_head);

  Tape& tape() { return tape_; }
  Tape::Ref param_ref(const std::string& name) const;
  Tape::Ref encoder_out() const { return enc_out_; }

  // gradient tensors for every parameter after tape().backward(...); params
  // that did not participate in the graph get zeros
  std::map<std::string, Mat> collect_grads() const;

 private:
  Tape::Ref sublayer_dropout(Tape::Ref x);

  const Parameters* params_;
  Tape tape_;
  std::map<std::string, Tape::Ref> refs_;
  Tape::Ref enc_out_ = -1;
  Rng* dropout_rng_ = nullptr;
};

// Mean-per-token negative log-likelihood and exact reverse-mode gradients.
struct LossAndGrads {
  double loss = 0.0;
  std::map<std::string, Mat> grads;
};
LossAndGrads loss_and_grads(const Parameters& params, const InputSequence& input,
                            const std::vector<int>& targets, bool local_head = false);

// ---- checkpoints ----

struct Checkpoint {
  Parameters params;
  std::int64_t step = 0;
  std::vector<std::uint64_t> rng_state;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace glorank

#endif  // GLORANK_MODEL_HPP_
