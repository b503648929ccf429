#include "glorank/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace glorank {

std::string to_string(PositionalMode mode) {
  return mode == PositionalMode::kAbsolute ? "absolute" : "setlike";
}

PositionalMode positional_mode_from_string(const std::string& s) {
  if (s == "absolute") return PositionalMode::kAbsolute;
  if (s == "setlike") return PositionalMode::kSetlike;
  throw ArgumentError("unknown positional mode: " + s);
}

void ModelConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_ff < 1 || n_enc_layers < 0 || n_dec_layers < 0)
    throw ConfigError("model: sizes must be positive");
  if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
  if (vocab_size < 1) throw ConfigError("model: vocab_size must be set");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0,1)");
  if (max_enc_len < 1 || max_dec_len < 1) throw ConfigError("model: sequence caps must be positive");
  if (local_slots < 0) throw ConfigError("model: local_slots must be >= 0");
}

json ModelConfig::to_json() const {
  return json{{"d_model", d_model},
              {"n_heads", n_heads},
              {"n_enc_layers", n_enc_layers},
              {"n_dec_layers", n_dec_layers},
              {"d_ff", d_ff},
              {"vocab_size", vocab_size},
              {"max_enc_len", max_enc_len},
              {"max_dec_len", max_dec_len},
              {"dropout", dropout},
              {"positional", to_string(positional)},
              {"local_slots", local_slots},
              {"tie_output", tie_output}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_enc_layers = j.at("n_enc_layers").get<int>();
  c.n_dec_layers = j.at("n_dec_layers").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_enc_len = j.at("max_enc_len").get<int>();
  c.max_dec_len = j.at("max_dec_len").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.positional = positional_mode_from_string(j.at("positional").get<std::string>());
  c.local_slots = j.at("local_slots").get<int>();
  c.tie_output = j.at("tie_output").get<bool>();
  return c;
}

namespace {

std::string enc_name(int layer, const std::string& leaf) {
  return "enc." + std::to_string(layer) + "." + leaf;
}
std::string dec_name(int layer, const std::string& leaf) {
  return "dec." + std::to_string(layer) + "." + leaf;
}

const char* kAttnLeaves[] = {"wq", "wk", "wv", "wo"};

}  // namespace

Parameters Parameters::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Parameters p;
  p.config = config;
  p.init_seed = seed;
  const int d = config.d_model;

  auto shape = [&](const std::string& name, int rows, int cols) {
    p.tensors.emplace(name, Mat::Zero(rows, cols));
  };

  shape("tok_emb", config.vocab_size, d);
  shape("enc_pos", config.max_enc_len, d);
  shape("dec_pos", config.max_dec_len, d);
  for (int l = 0; l < config.n_enc_layers; ++l) {
    shape(enc_name(l, "ln1.g"), d, 1);
    shape(enc_name(l, "ln1.b"), d, 1);
    for (const char* leaf : kAttnLeaves) shape(enc_name(l, std::string("attn.") + leaf), d, d);
    shape(enc_name(l, "ln2.g"), d, 1);
    shape(enc_name(l, "ln2.b"), d, 1);
    shape(enc_name(l, "ffn.w1"), config.d_ff, d);
    shape(enc_name(l, "ffn.b1"), config.d_ff, 1);
    shape(enc_name(l, "ffn.w2"), d, config.d_ff);
    shape(enc_name(l, "ffn.b2"), d, 1);
  }
  shape("enc.final.g", d, 1);
  shape("enc.final.b", d, 1);
  for (int l = 0; l < config.n_dec_layers; ++l) {
    shape(dec_name(l, "ln1.g"), d, 1);
    shape(dec_name(l, "ln1.b"), d, 1);
    for (const char* leaf : kAttnLeaves) shape(dec_name(l, std::string("self.") + leaf), d, d);
    shape(dec_name(l, "ln2.g"), d, 1);
    shape(dec_name(l, "ln2.b"), d, 1);
    for (const char* leaf : kAttnLeaves) shape(dec_name(l, std::string("cross.") + leaf), d, d);
    shape(dec_name(l, "ln3.g"), d, 1);
    shape(dec_name(l, "ln3.b"), d, 1);
    shape(dec_name(l, "ffn.w1"), config.d_ff, d);
    shape(dec_name(l, "ffn.b1"), config.d_ff, 1);
    shape(dec_name(l, "ffn.w2"), d, config.d_ff);
    shape(dec_name(l, "ffn.b2"), d, 1);
  }
  shape("dec.final.g", d, 1);
  shape("dec.final.b", d, 1);
  if (!config.tie_output) shape("w_out", config.vocab_size, d);
  if (config.local_slots > 0) {
    shape("slot_emb", config.local_slots + 1, d);  // row 0 is the start token
    shape("w_local", config.local_slots, d);
  }

  Rng rng(seed);
  for (auto& [name, t] : p.tensors) {
    const bool is_ln_gain = name.ends_with(".g") || name == "enc.final.g" || name == "dec.final.g";
    const bool is_bias = name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2");
    if (is_ln_gain) {
      t.setOnes();
    } else if (is_bias) {
      t.setZero();
    } else {
      for (Eigen::Index i = 0; i < t.rows(); ++i)
        for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = 0.02 * rng.normal();
    }
  }
  return p;
}

Mat& Parameters::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ArgumentError("unknown parameter tensor: " + name);
  return it->second;
}

const Mat& Parameters::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ArgumentError("unknown parameter tensor: " + name);
  return it->second;
}

std::vector<int> InputSequence::position_ids(PositionalMode mode) const {
  std::vector<int> pos(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (mode == PositionalMode::kSetlike && candidate_index[i] >= 0)
      pos[i] = block_offset[i];
    else
      pos[i] = static_cast<int>(i);
  }
  return pos;
}

InputSequence serialize_input(const RerankRequest& request, const SidTable& sids,
                              const TokenVocabulary& vocab, int history_cap, int max_enc_len) {
  InputSequence out;
  out.n_candidates = static_cast<int>(request.candidates.size());
  out.item_token_len = vocab.item_token_len();

  auto push_item = [&](std::int64_t item, int block) {
    const auto toks = vocab.tokens_of(sids.sid(item));
    for (std::size_t o = 0; o < toks.size(); ++o) {
      out.tokens.push_back(toks[o]);
      out.candidate_index.push_back(block);
      out.block_offset.push_back(block >= 0 ? static_cast<int>(o) : -1);
    }
  };
  auto push_special = [&](int tok) {
    out.tokens.push_back(tok);
    out.candidate_index.push_back(-1);
    out.block_offset.push_back(-1);
  };

  for (int b = 0; b < out.n_candidates; ++b)
    push_item(request.candidates[static_cast<std::size_t>(b)], b);
  push_special(vocab.sep());
  const int h0 = std::max(0, static_cast<int>(request.history.size()) - history_cap);
  for (std::size_t i = static_cast<std::size_t>(h0); i < request.history.size(); ++i)
    push_item(request.history[i], -1);
  push_special(vocab.sep());
  push_special(vocab.rank());

  if (static_cast<int>(out.tokens.size()) > max_enc_len)
    throw ArgumentError("serialize_input: request " + std::to_string(request.request_id) +
                        " serializes to " + std::to_string(out.tokens.size()) +
                        " tokens, exceeding max_enc_len " + std::to_string(max_enc_len));
  return out;
}

InputSequence permute_candidates(const InputSequence& input, const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != input.n_candidates)
    throw ArgumentError("permute_candidates: permutation size mismatch");
  InputSequence out;
  out.n_candidates = input.n_candidates;
  out.item_token_len = input.item_token_len;
  const int block_len = input.item_token_len;
  // candidate blocks occupy the first n_candidates * block_len positions
  for (int b = 0; b < input.n_candidates; ++b) {
    const int src = perm[static_cast<std::size_t>(b)];
    if (src < 0 || src >= input.n_candidates)
      throw ArgumentError("permute_candidates: invalid permutation entry");
    const int start = src * block_len;
    for (int o = 0; o < block_len; ++o) {
      out.tokens.push_back(input.tokens[static_cast<std::size_t>(start + o)]);
      out.candidate_index.push_back(b);
      out.block_offset.push_back(o);
    }
  }
  for (std::size_t i = static_cast<std::size_t>(input.n_candidates * block_len);
       i < input.tokens.size(); ++i) {
    out.tokens.push_back(input.tokens[i]);
    out.candidate_index.push_back(input.candidate_index[i]);
    out.block_offset.push_back(input.block_offset[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// no-grad inference
// ---------------------------------------------------------------------------

namespace {

Mat layernorm_plain(const Mat& x, const Mat& gamma, const Mat& beta, double eps = 1e-5) {
  Mat out(x.rows(), x.cols());
  const Eigen::RowVectorXd g = gamma.col(0).transpose();
  const Eigen::RowVectorXd b = beta.col(0).transpose();
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    out.row(r) =
        (((x.row(r).array() - mu) * is) * g.array() + b.array()).matrix();
  }
  return out;
}

Mat gelu_plain(const Mat& x) {
  constexpr double c = 0.7978845608028654;
  constexpr double a = 0.044715;
  return (0.5 * x.array() * (1.0 + (c * (x.array() + a * x.array().cube())).tanh())).matrix();
}

Mat mha_plain(const Mat& q_in, const Mat& kv_in, const Mat& wq, const Mat& wk, const Mat& wv,
              const Mat& wo, int n_heads, bool causal) {
  const Eigen::Index d = q_in.cols();
  const Eigen::Index dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat q = q_in * wq.transpose();
  const Mat k = kv_in * wk.transpose();
  const Mat v = kv_in * wv.transpose();
  Mat heads(q_in.rows(), d);
  for (int h = 0; h < n_heads; ++h) {
    Mat scores = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < scores.rows(); ++i)
        for (Eigen::Index j = i + 1; j < scores.cols(); ++j) scores(i, j) = kMaskNegInf;
    }
    heads.middleCols(h * dh, dh) = softmax_rows(scores) * v.middleCols(h * dh, dh);
  }
  return heads * wo.transpose();
}

Mat ffn_plain(const Mat& x, const Mat& w1, const Mat& b1, const Mat& w2, const Mat& b2) {
  Mat h = x * w1.transpose();
  h.rowwise() += b1.col(0).transpose();
  h = gelu_plain(h);
  Mat out = h * w2.transpose();
  out.rowwise() += b2.col(0).transpose();
  return out;
}

}  // namespace

EncoderContext encode(const Parameters& params, const InputSequence& input) {
  const ModelConfig& cfg = params.config;
  const auto pos = input.position_ids(cfg.positional);
  const Mat& tok_emb = params.at("tok_emb");
  const Mat& enc_pos = params.at("enc_pos");

  Mat x(static_cast<Eigen::Index>(input.tokens.size()), cfg.d_model);
  for (std::size_t i = 0; i < input.tokens.size(); ++i) {
    const int t = input.tokens[i];
    if (t < 0 || t >= cfg.vocab_size)
      throw ArgumentError("encode: token id " + std::to_string(t) + " out of vocabulary");
    x.row(static_cast<Eigen::Index>(i)) = tok_emb.row(t) + enc_pos.row(pos[i]);
  }

  for (int l = 0; l < cfg.n_enc_layers; ++l) {
    const Mat h = layernorm_plain(x, params.at(enc_name(l, "ln1.g")), params.at(enc_name(l, "ln1.b")));
    x += mha_plain(h, h, params.at(enc_name(l, "attn.wq")), params.at(enc_name(l, "attn.wk")),
                   params.at(enc_name(l, "attn.wv")), params.at(enc_name(l, "attn.wo")),
                   cfg.n_heads, false);
    const Mat f = layernorm_plain(x, params.at(enc_name(l, "ln2.g")), params.at(enc_name(l, "ln2.b")));
    x += ffn_plain(f, params.at(enc_name(l, "ffn.w1")), params.at(enc_name(l, "ffn.b1")),
                   params.at(enc_name(l, "ffn.w2")), params.at(enc_name(l, "ffn.b2")));
  }
  EncoderContext ctx;
  ctx.enc_out = layernorm_plain(x, params.at("enc.final.g"), params.at("enc.final.b"));
  for (int l = 0; l < cfg.n_dec_layers; ++l) {
    ctx.cross_k.push_back(ctx.enc_out * params.at(dec_name(l, "cross.wk")).transpose());
    ctx.cross_v.push_back(ctx.enc_out * params.at(dec_name(l, "cross.wv")).transpose());
  }
  return ctx;
}

DecoderRun::DecoderRun(const Parameters& params, const EncoderContext& ctx, bool local_head)
    : params_(&params), ctx_(&ctx), local_(local_head) {
  if (local_ && params.config.local_slots <= 0)
    throw ArgumentError("DecoderRun: model has no local head");
  const ModelConfig& cfg = params.config;
  self_k_.assign(static_cast<std::size_t>(cfg.n_dec_layers), Mat(0, cfg.d_model));
  self_v_.assign(static_cast<std::size_t>(cfg.n_dec_layers), Mat(0, cfg.d_model));
}

StepDistribution DecoderRun::step(int token) {
  const Parameters& p = *params_;
  const ModelConfig& cfg = p.config;
  if (pos_ >= cfg.max_dec_len) throw ArgumentError("DecoderRun: exceeded max_dec_len");
  const Eigen::Index d = cfg.d_model;
  const Eigen::Index dh = d / cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat y(1, d);
  if (local_) {
    const Mat& se = p.at("slot_emb");
    if (token < 0 || token >= se.rows())
      throw ArgumentError("DecoderRun: slot token out of range");
    y = se.row(token);
  } else {
    if (token < 0 || token >= cfg.vocab_size)
      throw ArgumentError("DecoderRun: token out of vocabulary");
    y = p.at("tok_emb").row(token);
  }
  y += p.at("dec_pos").row(pos_);

  for (int l = 0; l < cfg.n_dec_layers; ++l) {
    const Mat h = layernorm_plain(y, p.at(dec_name(l, "ln1.g")), p.at(dec_name(l, "ln1.b")));
    Mat& kc = self_k_[static_cast<std::size_t>(l)];
    Mat& vc = self_v_[static_cast<std::size_t>(l)];
    kc.conservativeResize(kc.rows() + 1, Eigen::NoChange);
    vc.conservativeResize(vc.rows() + 1, Eigen::NoChange);
    kc.row(kc.rows() - 1) = h * p.at(dec_name(l, "self.wk")).transpose();
    vc.row(vc.rows() - 1) = h * p.at(dec_name(l, "self.wv")).transpose();
    const Mat q = h * p.at(dec_name(l, "self.wq")).transpose();
    Mat heads(1, d);
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      Mat scores = q.middleCols(hd * dh, dh) * kc.middleCols(hd * dh, dh).transpose() * scale;
      heads.middleCols(hd * dh, dh) = softmax_rows(scores) * vc.middleCols(hd * dh, dh);
    }
    y += heads * p.at(dec_name(l, "self.wo")).transpose();

    const Mat h2 = layernorm_plain(y, p.at(dec_name(l, "ln2.g")), p.at(dec_name(l, "ln2.b")));
    const Mat q2 = h2 * p.at(dec_name(l, "cross.wq")).transpose();
    const Mat& ck = ctx_->cross_k[static_cast<std::size_t>(l)];
    const Mat& cv = ctx_->cross_v[static_cast<std::size_t>(l)];
    Mat heads2(1, d);
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      Mat scores = q2.middleCols(hd * dh, dh) * ck.middleCols(hd * dh, dh).transpose() * scale;
      heads2.middleCols(hd * dh, dh) = softmax_rows(scores) * cv.middleCols(hd * dh, dh);
    }
    y += heads2 * p.at(dec_name(l, "cross.wo")).transpose();

    const Mat h3 = layernorm_plain(y, p.at(dec_name(l, "ln3.g")), p.at(dec_name(l, "ln3.b")));
    y += ffn_plain(h3, p.at(dec_name(l, "ffn.w1")), p.at(dec_name(l, "ffn.b1")),
                   p.at(dec_name(l, "ffn.w2")), p.at(dec_name(l, "ffn.b2")));
  }
  y = layernorm_plain(y, p.at("dec.final.g"), p.at("dec.final.b"));

  StepDistribution out;
  out.hidden = y.row(0).transpose();
  const Mat& w = local_ ? p.at("w_local") : p.at(p.output_matrix_name());
  out.logits = (y * w.transpose()).row(0).transpose();
  ++pos_;
  return out;
}

std::vector<StepDistribution> forward_steps(const Parameters& params, const InputSequence& input,
                                            const std::vector<int>& prefix, bool local_head) {
  if (static_cast<int>(prefix.size()) + 1 > params.config.max_dec_len)
    throw ArgumentError("forward_steps: prefix exceeds max_dec_len");
  const EncoderContext ctx = encode(params, input);
  DecoderRun run(params, ctx, local_head);
  std::vector<StepDistribution> steps;
  steps.push_back(run.step(local_head ? 0 : bos_token_id(params.config)));
  for (const int t : prefix) steps.push_back(run.step(t));
  return steps;
}

// ---------------------------------------------------------------------------
// training graph
// ---------------------------------------------------------------------------

TrainGraph::TrainGraph(const Parameters& params, const InputSequence& input, Rng* dropout_rng)
    : params_(&params), dropout_rng_(dropout_rng) {
  const ModelConfig& cfg = params.config;
  for (const auto& [name, t] : params.tensors) refs_[name] = tape_.leaf(t, true);

  const auto pos = input.position_ids(cfg.positional);
  std::vector<int> toks = input.tokens;
  for (const int t : toks)
    if (t < 0 || t >= cfg.vocab_size)
      throw ArgumentError("TrainGraph: token id " + std::to_string(t) + " out of vocabulary");

  Tape::Ref x = tape_.add(tape_.embedding(refs_.at("tok_emb"), toks),
                          tape_.embedding(refs_.at("enc_pos"), pos));
  x = sublayer_dropout(x);
  for (int l = 0; l < cfg.n_enc_layers; ++l) {
    Tape::Ref h = tape_.layernorm(x, refs_.at(enc_name(l, "ln1.g")), refs_.at(enc_name(l, "ln1.b")));
    Tape::Ref a = tape_.attention(h, h, refs_.at(enc_name(l, "attn.wq")),
                                  refs_.at(enc_name(l, "attn.wk")), refs_.at(enc_name(l, "attn.wv")),
                                  refs_.at(enc_name(l, "attn.wo")), cfg.n_heads, false);
    x = tape_.add(x, sublayer_dropout(a));
    Tape::Ref f = tape_.layernorm(x, refs_.at(enc_name(l, "ln2.g")), refs_.at(enc_name(l, "ln2.b")));
    Tape::Ref ff = tape_.linear(
        tape_.gelu(tape_.linear(f, refs_.at(enc_name(l, "ffn.w1")), refs_.at(enc_name(l, "ffn.b1")))),
        refs_.at(enc_name(l, "ffn.w2")), refs_.at(enc_name(l, "ffn.b2")));
    x = tape_.add(x, sublayer_dropout(ff));
  }
  enc_out_ = tape_.layernorm(x, refs_.at("enc.final.g"), refs_.at("enc.final.b"));
}

Tape::Ref TrainGraph::sublayer_dropout(Tape::Ref x) {
  const double rate = params_->config.dropout;
  if (rate <= 0.0 || dropout_rng_ == nullptr) return x;
  const Mat& v = tape_.value(x);
  const double keep = 1.0 - rate;
  Mat mask(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j)
      mask(i, j) = dropout_rng_->uniform() < keep ? 1.0 / keep : 0.0;
  return tape_.mul_const(x, std::move(mask));
}

TrainGraph::DecodeOut TrainGraph::decode(const std::vector<int>& decoder_inputs, bool local_head) {
  const ModelConfig& cfg = params_->config;
  if (decoder_inputs.empty()) throw ArgumentError("TrainGraph::decode: empty decoder input");
  if (static_cast<int>(decoder_inputs.size()) > cfg.max_dec_len)
    throw ArgumentError("TrainGraph::decode: sequence exceeds max_dec_len");
  if (local_head && cfg.local_slots <= 0)
    throw ArgumentError("TrainGraph::decode: model has no local head");

  std::vector<int> pos(decoder_inputs.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);

  Tape::Ref y = tape_.add(
      tape_.embedding(refs_.at(local_head ? "slot_emb" : "tok_emb"), decoder_inputs),
      tape_.embedding(refs_.at("dec_pos"), pos));
  y = sublayer_dropout(y);
  for (int l = 0; l < cfg.n_dec_layers; ++l) {
    Tape::Ref h = tape_.layernorm(y, refs_.at(dec_name(l, "ln1.g")), refs_.at(dec_name(l, "ln1.b")));
    Tape::Ref a = tape_.attention(h, h, refs_.at(dec_name(l, "self.wq")),
                                  refs_.at(dec_name(l, "self.wk")), refs_.at(dec_name(l, "self.wv")),
                                  refs_.at(dec_name(l, "self.wo")), cfg.n_heads, true);
    y = tape_.add(y, sublayer_dropout(a));
    Tape::Ref h2 = tape_.layernorm(y, refs_.at(dec_name(l, "ln2.g")), refs_.at(dec_name(l, "ln2.b")));
    Tape::Ref c = tape_.attention(h2, enc_out_, refs_.at(dec_name(l, "cross.wq")),
                                  refs_.at(dec_name(l, "cross.wk")), refs_.at(dec_name(l, "cross.wv")),
                                  refs_.at(dec_name(l, "cross.wo")), cfg.n_heads, false);
    y = tape_.add(y, sublayer_dropout(c));
    Tape::Ref h3 = tape_.layernorm(y, refs_.at(dec_name(l, "ln3.g")), refs_.at(dec_name(l, "ln3.b")));
    Tape::Ref ff = tape_.linear(
        tape_.gelu(tape_.linear(h3, refs_.at(dec_name(l, "ffn.w1")), refs_.at(dec_name(l, "ffn.b1")))),
        refs_.at(dec_name(l, "ffn.w2")), refs_.at(dec_name(l, "ffn.b2")));
    y = tape_.add(y, sublayer_dropout(ff));
  }
  DecodeOut out;
  out.hidden = tape_.layernorm(y, refs_.at("dec.final.g"), refs_.at("dec.final.b"));
  out.logits = tape_.linear(
      out.hidden, refs_.at(local_head ? "w_local" : params_->output_matrix_name()));
  return out;
}

Tape::Ref TrainGraph::param_ref(const std::string& name) const {
  auto it = refs_.find(name);
  if (it == refs_.end()) throw ArgumentError("param_ref: unknown tensor " + name);
  return it->second;
}

std::map<std::string, Mat> TrainGraph::collect_grads() const {
  std::map<std::string, Mat> grads;
  for (const auto& [name, ref] : refs_) {
    if (tape_.has_grad(ref))
      grads[name] = tape_.grad(ref);
    else
      grads[name] = Mat::Zero(params_->at(name).rows(), params_->at(name).cols());
  }
  return grads;
}

LossAndGrads loss_and_grads(const Parameters& params, const InputSequence& input,
                            const std::vector<int>& targets, bool local_head) {
  if (targets.empty()) throw ArgumentError("loss_and_grads: empty target");
  TrainGraph graph(params, input);
  std::vector<int> dec_inputs;
  dec_inputs.reserve(targets.size());
  dec_inputs.push_back(local_head ? 0 : bos_token_id(params.config));
  for (std::size_t i = 0; i + 1 < targets.size(); ++i)
    dec_inputs.push_back(local_head ? local_input_of_position(targets[i]) : targets[i]);
  auto out = graph.decode(dec_inputs, local_head);
  const Tape::Ref loss = graph.tape().cross_entropy(out.logits, targets, /*mean=*/true);
  graph.tape().backward(loss);
  LossAndGrads res;
  res.loss = graph.tape().value(loss)(0, 0);
  res.grads = graph.collect_grads();
  return res;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'G', 'L', 'R', 'K'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json header;
  header["config"] = ckpt.params.config.to_json();
  header["init_seed"] = ckpt.params.init_seed;
  header["step"] = ckpt.step;
  header["rng_state"] = ckpt.rng_state;
  json tensors = json::array();
  for (const auto& [name, t] : ckpt.params.tensors)
    tensors.push_back(json{{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  header["tensors"] = std::move(tensors);
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 4);
  const std::uint32_t ver = kVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : ckpt.params.tensors) {
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        const double v = t(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
  }
  if (!out) throw Error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw ParseError(path + ": not a checkpoint file");
  std::uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (ver != kVersion) throw ParseError(path + ": unsupported checkpoint version");
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw ParseError(path + ": truncated header");
  const json header = json::parse(hs);

  Checkpoint ckpt;
  ckpt.params.config = ModelConfig::from_json(header.at("config"));
  ckpt.params.init_seed = header.at("init_seed").get<std::uint64_t>();
  ckpt.step = header.at("step").get<std::int64_t>();
  ckpt.rng_state = header.at("rng_state").get<std::vector<std::uint64_t>>();
  for (const auto& td : header.at("tensors")) {
    const std::string name = td.at("name").get<std::string>();
    const Eigen::Index rows = td.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = td.at("cols").get<Eigen::Index>();
    Mat t(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) {
        double v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        t(r, c) = v;
      }
    ckpt.params.tensors.emplace(name, std::move(t));
  }
  if (!in) throw ParseError(path + ": truncated tensor data");
  return ckpt;
}

}  // namespace glorank
