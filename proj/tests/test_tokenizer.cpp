#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "glorank/corpus.hpp"
#include "glorank/rng.hpp"
#include "glorank/tokenizer.hpp"

using namespace glorank;

namespace {

Corpus corpus_from_rows(const Eigen::MatrixXd& rows) {
  Corpus c;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    Item it;
    it.item_id = i;
    it.embedding = rows.row(i).transpose();
    c.add_item(std::move(it));
  }
  return c;
}

// exact optimal 2-means on tiny point sets by bipartition enumeration
double exact_two_means_sse(const Eigen::MatrixXd& pts) {
  const int n = static_cast<int>(pts.rows());
  double best = 1e300;
  for (int mask = 1; mask < (1 << n) - 1; ++mask) {
    Eigen::RowVectorXd c0 = Eigen::RowVectorXd::Zero(pts.cols());
    Eigen::RowVectorXd c1 = Eigen::RowVectorXd::Zero(pts.cols());
    int n0 = 0, n1 = 0;
    for (int i = 0; i < n; ++i) {
      if (mask & (1 << i)) {
        c0 += pts.row(i);
        ++n0;
      } else {
        c1 += pts.row(i);
        ++n1;
      }
    }
    c0 /= n0;
    c1 /= n1;
    double sse = 0;
    for (int i = 0; i < n; ++i)
      sse += (mask & (1 << i)) ? (pts.row(i) - c0).squaredNorm()
                               : (pts.row(i) - c1).squaredNorm();
    best = std::min(best, sse);
  }
  return best;
}

}  // namespace

TEST_CASE("fit_rq_kmeans: shapes at the reference configuration M=4, 256 codes") {
  const SyntheticData data = generate_synthetic(31, 1000, 2, 32, 16);
  const RqCodebooks cb = fit_rq_kmeans(data.corpus, 4, 256, 10, 9);
  REQUIRE(cb.num_levels() == 4);
  for (const auto& level : cb.levels) {
    CHECK(level.centroids.rows() == 256);
    CHECK(level.centroids.cols() == 32);
    CHECK(level.centroids.allFinite());
  }
  // residual quantization contract: per-level mean squared residual non-increasing
  for (int m = 1; m < 4; ++m)
    CHECK(cb.levels[m].mean_sq_residual <= cb.levels[m - 1].mean_sq_residual + 1e-12);
}

TEST_CASE("k = n distinct points: level-1 residuals vanish") {
  Rng rng(5);
  Eigen::MatrixXd pts(256, 8);
  for (int i = 0; i < 256; ++i)
    for (int j = 0; j < 8; ++j) pts(i, j) = rng.normal();
  const Corpus c = corpus_from_rows(pts);
  const RqCodebooks cb = fit_rq_kmeans(c, 1, 256, 30, 10);
  CHECK(cb.levels[0].mean_sq_residual < 1e-12);  // zero up to distance-expansion roundoff
}

TEST_CASE("8 points in 2D, M=2, k=2: oracle checks") {
  Eigen::MatrixXd pts(8, 2);
  pts << 0.1, 0.2, 0.3, -0.1, -0.2, 0.15, 0.05, 0.05, 5.0, 5.1, 5.2, 4.9, 4.8, 5.05, 5.1, 4.95;
  const Corpus c = corpus_from_rows(pts);
  const RqCodebooks cb = fit_rq_kmeans(c, 2, 2, 50, 3);

  // level MSR equals an independent recomputation from the returned centroids
  for (int level = 0; level < 2; ++level) {
    Eigen::MatrixXd residual = pts;
    for (int m = 0; m < level; ++m) {
      for (int i = 0; i < 8; ++i) {
        int best = 0;
        double bd = 1e300;
        for (int cc = 0; cc < 2; ++cc) {
          const double d = (residual.row(i) - cb.levels[m].centroids.row(cc)).squaredNorm();
          if (d < bd) {
            bd = d;
            best = cc;
          }
        }
        residual.row(i) -= cb.levels[m].centroids.row(best);
      }
    }
    double total = 0;
    for (int i = 0; i < 8; ++i) {
      double bd = 1e300;
      for (int cc = 0; cc < 2; ++cc)
        bd = std::min(bd, (residual.row(i) - cb.levels[level].centroids.row(cc)).squaredNorm());
      total += bd;
    }
    CHECK(cb.levels[level].mean_sq_residual == doctest::Approx(total / 8.0).epsilon(1e-9));
  }

  CHECK(cb.levels[1].mean_sq_residual <= cb.levels[0].mean_sq_residual + 1e-15);

  // with two well-separated blobs, Lloyd from k-means++ reaches the exact optimum
  const double exact = exact_two_means_sse(pts) / 8.0;
  CHECK(cb.levels[0].mean_sq_residual == doctest::Approx(exact).epsilon(1e-9));
}

TEST_CASE("assign_sids: exact-centroid items, collisions, uniqueness oracle") {
  // identical embeddings are forced to collide and receive disamb 0,1 by item id
  Eigen::MatrixXd pts(4, 3);
  pts << 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
  const Corpus c = corpus_from_rows(pts);
  const RqCodebooks cb = fit_rq_kmeans(c, 2, 3, 30, 21);
  const SidTable sids = assign_sids(c, cb);
  CHECK(sids.sid(0).codes == sids.sid(1).codes);
  CHECK(sids.sid(0).disamb == 0);
  CHECK(sids.sid(1).disamb == 1);
  CHECK(sids.has_collisions());

  // random corpus: (codes, disamb) unique; collision count equals brute-force grouping
  const SyntheticData data = generate_synthetic(55, 100, 2, 8, 4);
  const RqCodebooks cb2 = fit_rq_kmeans(data.corpus, 2, 4, 25, 2);
  const SidTable sids2 = assign_sids(data.corpus, cb2);
  std::set<std::pair<std::vector<int>, int>> uniq;
  std::map<std::vector<int>, int> groups;
  for (const auto& [id, sid] : sids2.all()) {
    CHECK(uniq.insert({sid.codes, sid.disamb}).second);
    groups[sid.codes]++;
  }
  int expected_collisions = 0;
  for (const auto& [codes, n] : groups) expected_collisions += n - 1;
  int got_collisions = 0;
  for (const auto& [id, sid] : sids2.all())
    if (sid.disamb > 0) ++got_collisions;
  CHECK(got_collisions == expected_collisions);
}

TEST_CASE("reconstruction error bounded by level-M residual with slack 10") {
  const SyntheticData data = generate_synthetic(77, 400, 2, 16, 8);
  const RqCodebooks cb = fit_rq_kmeans(data.corpus, 3, 32, 30, 4);
  const SidTable sids = assign_sids(data.corpus, cb);
  const double cap = cb.levels.back().mean_sq_residual * 10.0;
  for (const auto& item : data.corpus.items()) {
    Eigen::VectorXd recon = Eigen::VectorXd::Zero(16);
    const auto& sid = sids.sid(item.item_id);
    for (int m = 0; m < 3; ++m) recon += cb.levels[m].centroids.row(sid.codes[m]).transpose();
    CHECK((item.embedding - recon).squaredNorm() <= cap);
  }
}

TEST_CASE("fit and assign are deterministic in seed") {
  const SyntheticData data = generate_synthetic(13, 150, 2, 8, 4);
  const RqCodebooks a = fit_rq_kmeans(data.corpus, 2, 16, 20, 42);
  const RqCodebooks b = fit_rq_kmeans(data.corpus, 2, 16, 20, 42);
  for (int m = 0; m < 2; ++m) CHECK(a.levels[m].centroids == b.levels[m].centroids);
  const SidTable sa = assign_sids(data.corpus, a);
  const SidTable sb = assign_sids(data.corpus, b);
  for (const auto& [id, sid] : sa.all()) {
    CHECK(sid.codes == sb.sid(id).codes);
    CHECK(sid.disamb == sb.sid(id).disamb);
  }
}

TEST_CASE("token vocabulary: offsets, specials, bijection, uniform item length") {
  // no collisions: item arity M
  TokenVocabulary vocab(4, 256, 0);
  SemanticId sid;
  sid.codes = {3, 0, 255, 17};
  const auto toks = vocab.tokens_of(sid);
  CHECK(toks == std::vector<int>{3, 256, 512 + 255, 768 + 17});
  CHECK(vocab.item_token_len() == 4);
  CHECK(vocab.vocab_size() == 4 * 256 + 4);
  CHECK(vocab.pad() == 1024);
  CHECK(vocab.bos() == 1025);
  CHECK(vocab.sep() == 1026);
  CHECK(vocab.rank() == 1027);

  // token <-> (kind, level, code) is a bijection over the whole range
  for (int t = 0; t < vocab.vocab_size(); ++t) {
    const auto info = vocab.info(t);
    int back = -1;
    switch (info.kind) {
      case TokenVocabulary::Kind::kLevel:
        back = vocab.level_token(info.level, info.code);
        break;
      case TokenVocabulary::Kind::kDisamb:
        back = vocab.disamb_token(info.code);
        break;
      case TokenVocabulary::Kind::kSpecial:
        back = 4 * 256 + info.code;
        break;
    }
    CHECK(back == t);
  }

  // round trip through sid_of
  const SemanticId rt = vocab.sid_of(toks);
  CHECK(rt.codes == sid.codes);
  CHECK(rt.disamb == 0);

  // a corpus with one collision forces uniform length M+1 for every item
  Eigen::MatrixXd pts(3, 2);
  pts << 1, 1, 1, 1, -1, -1;
  const Corpus c = corpus_from_rows(pts);
  const RqCodebooks cb = fit_rq_kmeans(c, 2, 2, 20, 1);
  const SidTable sids = assign_sids(c, cb);
  REQUIRE(sids.has_collisions());
  const TokenVocabulary v2 = TokenVocabulary::for_table(sids, 2);
  CHECK(v2.item_token_len() == 3);
  for (const auto& [id, s] : sids.all()) CHECK(v2.tokens_of(s).size() == 3);

  CHECK_THROWS_AS(vocab.level_token(1, 256), ArgumentError);
  SemanticId bad;
  bad.codes = {3, 0, 255, 256};
  CHECK_THROWS_AS(vocab.tokens_of(bad), ArgumentError);
}

TEST_CASE("codebooks and sid table persist exactly") {
  const SyntheticData data = generate_synthetic(3, 60, 2, 8, 4);
  const RqCodebooks cb = fit_rq_kmeans(data.corpus, 2, 8, 15, 12);
  const std::string cb_path =
      (std::filesystem::temp_directory_path() / "glorank_codebooks.json").string();
  cb.save_json(cb_path);
  const RqCodebooks loaded = RqCodebooks::load_json(cb_path);
  REQUIRE(loaded.num_levels() == cb.num_levels());
  for (int m = 0; m < cb.num_levels(); ++m) {
    CHECK(loaded.levels[m].centroids == cb.levels[m].centroids);  // full-precision floats
    CHECK(loaded.levels[m].mean_sq_residual == cb.levels[m].mean_sq_residual);
  }

  const SidTable sids = assign_sids(data.corpus, cb);
  const std::string sid_path =
      (std::filesystem::temp_directory_path() / "glorank_sids.jsonl").string();
  sids.save_jsonl(sid_path);
  const SidTable loaded_sids = SidTable::load_jsonl(sid_path);
  CHECK(loaded_sids.size() == sids.size());
  for (const auto& [id, sid] : sids.all()) {
    CHECK(loaded_sids.sid(id).codes == sid.codes);
    CHECK(loaded_sids.sid(id).disamb == sid.disamb);
  }
}
