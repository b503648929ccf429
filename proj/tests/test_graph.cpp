#include <doctest.h>

#include <cmath>
#include <functional>

#include "glorank/graph.hpp"
#include "glorank/rng.hpp"

using namespace glorank;

namespace {

Mat random_mat(Rng& rng, int rows, int cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

// central finite differences of a scalar graph output w.r.t. one leaf input
void check_gradients(const std::function<Tape::Ref(Tape&, const std::vector<Tape::Ref>&)>& build,
                     std::vector<Mat> inputs, double eps = 1e-5, double tol = 1e-6) {
  Tape tape;
  std::vector<Tape::Ref> leaves;
  for (const auto& in : inputs) leaves.push_back(tape.leaf(in, true));
  const Tape::Ref loss = build(tape, leaves);
  tape.backward(loss);

  for (std::size_t li = 0; li < inputs.size(); ++li) {
    const Mat analytic = tape.grad(leaves[li]);
    for (Eigen::Index r = 0; r < inputs[li].rows(); ++r) {
      for (Eigen::Index c = 0; c < inputs[li].cols(); ++c) {
        auto eval = [&](double delta) {
          std::vector<Mat> shifted = inputs;
          shifted[li](r, c) += delta;
          Tape t2;
          std::vector<Tape::Ref> l2;
          for (const auto& in : shifted) l2.push_back(t2.leaf(in, true));
          return t2.value(build(t2, l2))(0, 0);
        };
        const double fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
        const double a = analytic(r, c);
        const double denom = std::max({std::abs(fd), std::abs(a), 1.0});
        CAPTURE(li);
        CAPTURE(r);
        CAPTURE(c);
        CHECK(std::abs(fd - a) / denom < tol);
      }
    }
  }
}

}  // namespace

TEST_CASE("matmul and linear gradients match finite differences") {
  Rng rng(11);
  check_gradients(
      [](Tape& t, const std::vector<Tape::Ref>& in) {
        return t.sum(t.matmul(in[0], in[1]));
      },
      {random_mat(rng, 3, 4), random_mat(rng, 4, 2)});
  check_gradients(
      [](Tape& t, const std::vector<Tape::Ref>& in) {
        return t.mean(t.linear(in[0], in[1], in[2]));
      },
      {random_mat(rng, 3, 4), random_mat(rng, 5, 4), random_mat(rng, 5, 1)});
}

TEST_CASE("layernorm gradients match finite differences") {
  Rng rng(12);
  check_gradients(
      [](Tape& t, const std::vector<Tape::Ref>& in) {
        return t.sum(t.hadamard(t.layernorm(in[0], in[1], in[2]), in[3]));
      },
      {random_mat(rng, 4, 6), random_mat(rng, 6, 1, 0.5), random_mat(rng, 6, 1, 0.5),
       random_mat(rng, 4, 6)},
      1e-5, 1e-5);
}

TEST_CASE("gelu gradients match finite differences") {
  Rng rng(13);
  check_gradients(
      [](Tape& t, const std::vector<Tape::Ref>& in) {
        return t.sum(t.hadamard(t.gelu(in[0]), in[1]));
      },
      {random_mat(rng, 5, 3), random_mat(rng, 5, 3)});
}

TEST_CASE("attention gradients match finite differences, self and cross, causal and not") {
  Rng rng(14);
  for (const bool causal : {false, true}) {
    // self-attention: q_in == kv_in exercises gradient accumulation into one node
    check_gradients(
        [causal](Tape& t, const std::vector<Tape::Ref>& in) {
          return t.sum(
              t.hadamard(t.attention(in[0], in[0], in[1], in[2], in[3], in[4], 2, causal), in[5]));
        },
        {random_mat(rng, 4, 6), random_mat(rng, 6, 6, 0.4), random_mat(rng, 6, 6, 0.4),
         random_mat(rng, 6, 6, 0.4), random_mat(rng, 6, 6, 0.4), random_mat(rng, 4, 6)},
        1e-5, 1e-5);
  }
  // cross attention with distinct kv input
  check_gradients(
      [](Tape& t, const std::vector<Tape::Ref>& in) {
        return t.sum(
            t.hadamard(t.attention(in[0], in[1], in[2], in[3], in[4], in[5], 2, false), in[6]));
      },
      {random_mat(rng, 3, 6), random_mat(rng, 5, 6), random_mat(rng, 6, 6, 0.4),
       random_mat(rng, 6, 6, 0.4), random_mat(rng, 6, 6, 0.4), random_mat(rng, 6, 6, 0.4),
       random_mat(rng, 3, 6)},
      1e-5, 1e-5);
}

TEST_CASE("embedding scatters gradients to the right rows") {
  Rng rng(15);
  const Mat table = random_mat(rng, 6, 3);
  Tape tape;
  const Tape::Ref t_table = tape.leaf(table, true);
  const Tape::Ref gathered = tape.embedding(t_table, {4, 1, 4});
  const Tape::Ref loss = tape.sum(gathered);
  tape.backward(loss);
  const Mat& g = tape.grad(t_table);
  CHECK(g.row(4).isApproxToConstant(2.0));
  CHECK(g.row(1).isApproxToConstant(1.0));
  CHECK(g.row(0).isZero());
  CHECK(g.row(2).isZero());
}

TEST_CASE("cross_entropy value and gradient") {
  Rng rng(16);
  const Mat logits = random_mat(rng, 3, 5);
  check_gradients(
      [](Tape& t, const std::vector<Tape::Ref>& in) {
        return t.cross_entropy(in[0], {1, 4, 0}, true);
      },
      {logits});

  // uniform logits: loss per token is ln(V)
  Tape tape;
  const Tape::Ref z = tape.leaf(Mat::Zero(2, 7), true);
  const Tape::Ref loss = tape.cross_entropy(z, {0, 3}, true);
  CHECK(tape.value(loss)(0, 0) == doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("log_softmax_select with mask and temperature") {
  Rng rng(17);
  Mat logits = random_mat(rng, 2, 6);
  Mat mask = Mat::Zero(2, 6);
  mask(0, 5) = kMaskNegInf;
  mask(1, 0) = kMaskNegInf;
  const double tau = 0.7;
  check_gradients(
      [&](Tape& t, const std::vector<Tape::Ref>& in) {
        return t.sum(t.log_softmax_select(in[0], {2, 3}, &mask, tau));
      },
      {logits});

  // probabilities over the unmasked entries renormalize to 1
  double total = 0.0;
  for (int j = 0; j < 6; ++j) {
    if (j == 5) continue;
    Tape t2;
    const Tape::Ref lp2 = t2.log_softmax_select(t2.leaf(logits, false), {j, 3}, &mask, tau);
    total += std::exp(t2.value(lp2)(0, 0));
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("elementwise ops: exp, clamp, minimum") {
  Rng rng(18);
  check_gradients(
      [](Tape& t, const std::vector<Tape::Ref>& in) {
        return t.sum(t.exp(t.scale(in[0], 0.3)));
      },
      {random_mat(rng, 3, 3)});
  check_gradients(
      [](Tape& t, const std::vector<Tape::Ref>& in) {
        return t.sum(t.minimum(in[0], t.clamp(in[1], -0.5, 0.5)));
      },
      {random_mat(rng, 3, 3), random_mat(rng, 3, 3)});
}

TEST_CASE("slice_rows routes gradients") {
  Rng rng(19);
  check_gradients(
      [](Tape& t, const std::vector<Tape::Ref>& in) {
        return t.sum(t.slice_rows(in[0], 1, 2));
      },
      {random_mat(rng, 4, 3)});
}

TEST_CASE("backward accumulates over shared subexpressions") {
  // f(x) = sum(x + x): grad must be 2 everywhere
  Tape tape;
  const Tape::Ref x = tape.leaf(Mat::Ones(2, 2), true);
  const Tape::Ref loss = tape.sum(tape.add(x, x));
  tape.backward(loss);
  CHECK(tape.grad(x).isApproxToConstant(2.0));
}
