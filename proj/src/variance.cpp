#include "glorank/variance.hpp"

#include <cmath>
#include <sstream>

#include "glorank/rng.hpp"

namespace glorank {

std::vector<GradientProbe> sample_probes(const Parameters& params, const RerankRequest& request,
                                         const SidTable& sids, const TokenVocabulary& vocab,
                                         std::int64_t target_item, int n_samples,
                                         std::uint64_t seed, const ProbeOptions& opts) {
  if (n_samples < 1) throw ArgumentError("sample_probes: need at least one sample");
  if (opts.step < 1) throw ArgumentError("sample_probes: step is 1-based");
  if (opts.step + static_cast<int>(opts.prefix.size()) > params.config.max_dec_len)
    throw ArgumentError("sample_probes: step exceeds max_dec_len");
  if (static_cast<int>(opts.prefix.size()) < opts.step - 1)
    throw ArgumentError("sample_probes: prefix shorter than step-1 tokens");

  const auto cand_it =
      std::find(request.candidates.begin(), request.candidates.end(), target_item);
  if (cand_it == request.candidates.end())
    throw ArgumentError("sample_probes: target item is not a candidate");
  const int target_block = static_cast<int>(cand_it - request.candidates.begin());
  const int y_global = vocab.tokens_of(sids.sid(target_item)).front();

  const InputSequence base =
      serialize_input(request, sids, vocab, opts.history_cap, params.config.max_enc_len);
  const int n = static_cast<int>(request.candidates.size());

  Rng rng(seed);
  std::vector<GradientProbe> probes;
  probes.reserve(static_cast<std::size_t>(n_samples));
  for (int s = 0; s < n_samples; ++s) {
    GradientProbe p;
    p.perm = rng.permutation(n);
    const InputSequence permuted = permute_candidates(base, p.perm);
    const auto steps = forward_steps(params, permuted, opts.prefix, /*local_head=*/false);
    p.hidden = steps[static_cast<std::size_t>(opts.step - 1)].hidden;
    if (opts.unit_norm_hidden) {
      const double norm = p.hidden.norm();
      if (norm > 0) p.hidden /= norm;
    }
    for (int j = 0; j < n; ++j) {
      if (p.perm[static_cast<std::size_t>(j)] == target_block) {
        p.y_local = j + 1;
        break;
      }
    }
    p.y_global = y_global;
    probes.push_back(std::move(p));
  }
  return probes;
}

namespace {

// gradient vector received by the probed output row (sign does not affect
// any variance quantity; we keep the -h convention)
Eigen::VectorXd row_gradient(const GradientProbe& p, Labeling labeling, int row_j) {
  if (labeling == Labeling::kGlobal) return -p.hidden;
  if (p.y_local == row_j) return -p.hidden;
  return Eigen::VectorXd::Zero(p.hidden.size());
}

}  // namespace

VarianceEstimate estimate_variance(const std::vector<GradientProbe>& probes, Labeling labeling,
                                   std::optional<int> row_j, int n_candidates) {
  if (probes.empty()) throw ArgumentError("estimate_variance: no probes");
  if (labeling == Labeling::kLocal && !row_j)
    throw ArgumentError("estimate_variance: local labeling requires a row index");
  const int j = labeling == Labeling::kLocal ? *row_j : 0;
  const int S = static_cast<int>(probes.size());
  const Eigen::Index d = probes.front().hidden.size();

  VarianceEstimate est;
  est.samples = S;
  if (S < 2) return est;  // variance of a single draw is 0 by definition

  std::vector<Eigen::VectorXd> grads;
  grads.reserve(probes.size());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const auto& p : probes) {
    grads.push_back(row_gradient(p, labeling, j));
    mean += grads.back();
  }
  mean /= static_cast<double>(S);

  // unbiased total variance and its standard error
  std::vector<double> sq_dev(probes.size());
  double total = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    sq_dev[i] = (grads[i] - mean).squaredNorm();
    total += sq_dev[i];
  }
  est.total_var = total / static_cast<double>(S - 1);
  double sq_dev_var = 0.0;
  const double sq_dev_mean = total / static_cast<double>(S);
  for (const double x : sq_dev) sq_dev_var += (x - sq_dev_mean) * (x - sq_dev_mean);
  sq_dev_var /= static_cast<double>(S - 1);
  est.se = std::sqrt(sq_dev_var / static_cast<double>(S));

  if (labeling == Labeling::kGlobal) {
    // single event: the whole variance is "within"; the mapping term is zero
    est.within_var = est.total_var;
    est.mapping_var = 0.0;
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
    for (const auto& p : probes) mu += p.hidden;
    mu /= static_cast<double>(S);
    est.mu_norm_sq = mu.squaredNorm();
    est.p_hat = 1.0;
    est.bound = 0.0;
    return est;
  }

  // exact sample decomposition conditioned on the realized indicator
  Eigen::VectorXd mu_on = Eigen::VectorXd::Zero(d);   // conditional mean of h on the event
  int s_on = 0;
  for (const auto& p : probes) {
    if (p.y_local == j) {
      mu_on += p.hidden;
      ++s_on;
    }
  }
  if (s_on > 0) mu_on /= static_cast<double>(s_on);
  const int s_off = S - s_on;
  est.p_hat = static_cast<double>(s_on) / static_cast<double>(S);
  est.mu_norm_sq = mu_on.squaredNorm();

  double within = 0.0;
  for (const auto& p : probes)
    if (p.y_local == j) within += (p.hidden - mu_on).squaredNorm();
  // off-event gradients are exactly zero, so their group contributes nothing

  const Eigen::VectorXd mean_on = -mu_on;  // group mean of the gradient on the event
  double between = static_cast<double>(s_on) * (mean_on - mean).squaredNorm() +
                   static_cast<double>(s_off) * mean.squaredNorm();

  // scale both terms to match the unbiased total so the identity is exact
  const double scale = 1.0 / static_cast<double>(S - 1);
  est.within_var = within * scale;
  est.mapping_var = between * scale;

  const double n = static_cast<double>(n_candidates);
  est.bound = (1.0 / n) * (1.0 - 1.0 / n) * est.mu_norm_sq;
  return est;
}

double hidden_variance(const std::vector<GradientProbe>& probes) {
  if (probes.size() < 2) return 0.0;
  const Eigen::Index d = probes.front().hidden.size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const auto& p : probes) mean += p.hidden;
  mean /= static_cast<double>(probes.size());
  double total = 0.0;
  for (const auto& p : probes) total += (p.hidden - mean).squaredNorm();
  return total / static_cast<double>(probes.size() - 1);
}

std::vector<VarianceRow> variance_report(const VarianceReportOptions& opts) {
  std::vector<VarianceRow> rows;
  for (const int n : opts.candidate_counts) {
    // small synthetic universe sized to the candidate count
    const SyntheticData data = generate_synthetic(opts.seed, std::max(4 * n, 32), 4,
                                                  /*dim=*/16, /*n_clusters=*/4);
    const RqCodebooks cb =
        fit_rq_kmeans(data.corpus, opts.m_levels, opts.codebook_size, 20, opts.seed + 1);
    const SidTable sids = assign_sids(data.corpus, cb);
    const TokenVocabulary vocab = TokenVocabulary::for_table(sids, opts.codebook_size);

    RerankRequest req;
    req.request_id = 0;
    req.user_id = 0;
    for (int i = 0; i < n; ++i) {
      req.candidates.push_back(i);
      req.relevance[i] = i == 0 ? 1 : 0;
    }

    for (const PositionalMode mode : {PositionalMode::kAbsolute, PositionalMode::kSetlike}) {
      ModelConfig cfg;
      cfg.d_model = opts.d_model;
      cfg.n_heads = opts.n_heads;
      cfg.n_enc_layers = opts.n_layers;
      cfg.n_dec_layers = opts.n_layers;
      cfg.d_ff = 2 * opts.d_model;
      cfg.vocab_size = vocab.vocab_size();
      cfg.max_enc_len = (n + 8) * vocab.item_token_len() + 8;
      cfg.max_dec_len = 8;
      cfg.positional = mode;
      const Parameters params = Parameters::init(cfg, opts.seed + 17);

      ProbeOptions popts;
      popts.unit_norm_hidden = opts.unit_norm_hidden;
      const auto probes = sample_probes(params, req, sids, vocab, req.candidates.front(),
                                        opts.n_samples, opts.seed + 23, popts);

      for (const Labeling labeling : {Labeling::kLocal, Labeling::kGlobal}) {
        const std::vector<int> row_list =
            labeling == Labeling::kLocal ? std::vector<int>{1, n} : std::vector<int>{0};
        for (const int j : row_list) {
          const VarianceEstimate est = estimate_variance(
              probes, labeling, labeling == Labeling::kLocal ? std::optional<int>(j) : std::nullopt,
              n);
          VarianceRow row;
          row.n_candidates = n;
          row.mode = to_string(mode);
          row.labeling = labeling == Labeling::kLocal ? "local" : "global";
          row.row_j = j;
          row.total_var = est.total_var;
          row.mapping_var = est.mapping_var;
          row.within_var = est.within_var;
          row.bound = est.bound;
          row.se = est.se;
          row.samples = est.samples;
          row.bound_satisfied = est.total_var >= est.bound - 3.0 * est.se;
          rows.push_back(row);
        }
      }
    }
  }
  return rows;
}

std::string variance_rows_to_csv(const std::vector<VarianceRow>& rows) {
  std::ostringstream os;
  os << "n,mode,labeling,row,samples,total_var,mapping_var,within_var,bound,se,bound_satisfied\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << r.n_candidates << ',' << r.mode << ',' << r.labeling << ',' << r.row_j << ','
       << r.samples << ',' << r.total_var << ',' << r.mapping_var << ',' << r.within_var << ','
       << r.bound << ',' << r.se << ',' << (r.bound_satisfied ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace glorank
