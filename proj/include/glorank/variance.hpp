#ifndef GLORANK_VARIANCE_HPP_
#define GLORANK_VARIANCE_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "glorank/corpus.hpp"
#include "glorank/model.hpp"
#include "glorank/tokenizer.hpp"

namespace glorank {

// One Monte-Carlo draw: a uniform candidate permutation, the decoder hidden
// state it produces at the probed step, and the induced labels. The local
// label is the target's 1-based position in the permuted list; the global
// label is its fixed first token and does not depend on the permutation.
struct GradientProbe {
  std::vector<int> perm;       // perm[j] = original block index now at position j
  Eigen::VectorXd hidden;      // h_sigma at the probed step
  int y_local = 0;             // 1-based position of the target item
  int y_global = 0;            // fixed token row of the target item
};

enum class Labeling { kLocal, kGlobal };

struct ProbeOptions {
  int step = 1;                     // decode step t (1-based)
  std::vector<int> prefix;          // teacher-forced tokens before step t
  bool unit_norm_hidden = false;    // normalize h to unit norm before use
  int history_cap = 8;
};

// S i.i.d. uniform permutations of the candidate block; deterministic by seed.
std::vector<GradientProbe> sample_probes(const Parameters& params, const RerankRequest& request,
                                         const SidTable& sids, const TokenVocabulary& vocab,
                                         std::int64_t target_item, int n_samples,
                                         std::uint64_t seed, const ProbeOptions& opts);

// Empirical variance of the label-dependent output-row gradient, its exact
// sample decomposition into within-event and mapping-induced terms, and the
// theoretical lower bound evaluated on the estimated conditional mean.
struct VarianceEstimate {
  double total_var = 0.0;       // unbiased, squared-norm deviation
  double within_var = 0.0;      // conditional variance term (same scaling)
  double mapping_var = 0.0;     // between-event term (same scaling)
  double bound = 0.0;           // (1/N)(1-1/N) * ||mu_hat||^2
  double mu_norm_sq = 0.0;      // ||mu_hat_j||^2
  double p_hat = 0.0;           // empirical event frequency
  double se = 0.0;              // standard error of total_var
  int samples = 0;

  double decomposition_residual() const { return total_var - within_var - mapping_var; }
};

// row_j is 1-based and required for local labeling. n_candidates is N.
VarianceEstimate estimate_variance(const std::vector<GradientProbe>& probes, Labeling labeling,
                                   std::optional<int> row_j, int n_candidates);

// Unbiased empirical variance of the hidden states themselves (Var of h).
double hidden_variance(const std::vector<GradientProbe>& probes);

struct VarianceRow {
  int n_candidates = 0;
  std::string mode;      // "absolute" | "setlike"
  std::string labeling;  // "local" | "global"
  int row_j = 0;
  double total_var = 0.0;
  double mapping_var = 0.0;
  double within_var = 0.0;
  double bound = 0.0;
  double se = 0.0;
  bool bound_satisfied = false;
  int samples = 0;
};

struct VarianceReportOptions {
  std::vector<int> candidate_counts{4, 8, 16};
  int n_samples = 20000;
  std::uint64_t seed = 7;
  int m_levels = 2;
  int codebook_size = 16;
  int d_model = 32;
  int n_heads = 4;
  int n_layers = 1;
  bool unit_norm_hidden = false;
};

// Builds small synthetic probe problems for each (N, mode, labeling, row) cell
// and tabulates the measured terms against the bound.
std::vector<VarianceRow> variance_report(const VarianceReportOptions& opts);

std::string variance_rows_to_csv(const std::vector<VarianceRow>& rows);

}  // namespace glorank

#endif  // GLORANK_VARIANCE_HPP_
