#include <algorithm>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "mhformer/blocks.hpp"
#include "mhformer/grad_check.hpp"
#include "test_util.hpp"

using namespace mhf;
using testutil::random_tensor;

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat as_mat(const Tensor<double>& t) {
  const Eigen::Index r = t.rank() == 1 ? 1 : Eigen::Index(t.dim(0));
  return Eigen::Map<const Mat>(t.data().data(), r, Eigen::Index(t.shape().back()));
}

AttentionWeights<double> random_attention(std::size_t d, std::size_t heads, std::mt19937_64& rng) {
  AttentionWeights<double> w;
  w.heads = heads;
  for (auto* m : {&w.w_q, &w.w_k, &w.w_v, &w.w_o}) *m = random_tensor({d, d}, rng, 0.5);
  for (auto* b : {&w.b_q, &w.b_k, &w.b_v, &w.b_o}) *b = random_tensor({d}, rng, 0.1);
  return w;
}

Mat affine(const Mat& x, const Tensor<double>& w, const Tensor<double>& b) {
  Mat y = x * as_mat(w);
  y.rowwise() += as_mat(b).row(0);
  return y;
}

// Dense per-head reference for one sample.
Mat reference_cross(const Mat& xq, const Mat& xk, const Mat& xv,
                    const AttentionWeights<double>& w) {
  const Mat Q = affine(xq, w.w_q, w.b_q), K = affine(xk, w.w_k, w.b_k),
            V = affine(xv, w.w_v, w.b_v);
  const Eigen::Index dh = Q.cols() / Eigen::Index(w.heads);
  Mat O(Q.rows(), Q.cols());
  for (Eigen::Index h = 0; h < Eigen::Index(w.heads); ++h) {
    Mat S = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose() /
            std::sqrt(double(dh));
    for (Eigen::Index r = 0; r < S.rows(); ++r) {
      S.row(r) = (S.row(r).array() - S.row(r).maxCoeff()).exp().matrix();
      S.row(r) /= S.row(r).sum();
    }
    O.middleCols(h * dh, dh) = S * V.middleCols(h * dh, dh);
  }
  return affine(O, w.w_o, w.b_o);
}

}  // namespace

TEST(Blocks, CrossAttentionWithEqualSourcesIsSelfAttention) {
  std::mt19937_64 rng(1);
  const auto w = random_attention(6, 3, rng);
  const auto x = random_tensor({5, 6}, rng);
  EXPECT_TRUE(bit_equal(mca(x, x, x, w), msa(x, w)));
}

TEST(Blocks, SelfAttentionMatchesDenseReference) {
  std::mt19937_64 rng(2);
  const auto w = random_attention(8, 4, rng);
  const auto x = random_tensor({5, 8}, rng);
  const Mat ref = reference_cross(as_mat(x), as_mat(x), as_mat(x), w);
  EXPECT_LT((as_mat(msa(x, w)) - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Blocks, CrossAttentionMatchesDenseReference) {
  std::mt19937_64 rng(3);
  const auto w = random_attention(4, 2, rng);
  const auto a = random_tensor({7, 4}, rng), b = random_tensor({7, 4}, rng),
             c = random_tensor({7, 4}, rng);
  const Mat ref = reference_cross(as_mat(a), as_mat(b), as_mat(c), w);
  EXPECT_LT((as_mat(mca(a, b, c, w)) - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Blocks, StackedSamplesAreIndependent) {
  std::mt19937_64 rng(4);
  const auto w = random_attention(4, 2, rng);
  const auto x = random_tensor({6, 4}, rng);
  BlockContext ctx;
  ctx.tokens = 3;
  const Mat out = as_mat(msa(x, w, ctx));
  const Mat X = as_mat(x);
  const Mat top = reference_cross(X.topRows(3), X.topRows(3), X.topRows(3), w);
  const Mat bot = reference_cross(X.bottomRows(3), X.bottomRows(3), X.bottomRows(3), w);
  EXPECT_LT((out.topRows(3) - top).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((out.bottomRows(3) - bot).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Blocks, SelfAttentionIsPermutationEquivariant) {
  std::mt19937_64 rng(5);
  const auto w = random_attention(6, 2, rng);
  const auto x = random_tensor({7, 6}, rng);
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> xp({7, 6});
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t c = 0; c < 6; ++c) xp.at(i, c) = x.at(perm[i], c);
  const auto y = msa(x, w), yp = msa(xp, w);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(yp.at(i, c), y.at(perm[i], c), 1e-12);
}

TEST(Blocks, HeadCountMustDivideWidth) {
  std::mt19937_64 rng(6);
  auto w = random_attention(6, 4, rng);
  const auto x = random_tensor({3, 6}, rng);
  EXPECT_THROW(msa(x, w), ShapeError);
  w.heads = 0;
  EXPECT_THROW(msa(x, w), ShapeError);
  w.heads = 3;
  EXPECT_THROW(mca(x, random_tensor({4, 6}, rng), x, w), ShapeError);
}

TEST(Blocks, MlpMatchesReference) {
  std::mt19937_64 rng(7);
  MlpWeights<double> w{random_tensor({4, 8}, rng), random_tensor({8}, rng),
                       random_tensor({8, 4}, rng), random_tensor({4}, rng)};
  const auto x = random_tensor({3, 4}, rng);
  Mat h = affine(as_mat(x), w.w1, w.b1);
  h = h.unaryExpr([](double v) { return 0.5 * v * (1 + std::erf(v / std::sqrt(2.0))); });
  const Mat ref = affine(h, w.w2, w.b2);
  EXPECT_LT((as_mat(mlp(x, w)) - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Blocks, ZeroWeightEncoderLayerIsIdentity) {
  std::mt19937_64 rng(8);
  const std::size_t d = 6;
  EncoderLayerWeights<double> w;
  w.ln1 = {Tensor<double>({d}), Tensor<double>({d})};
  w.ln2 = {Tensor<double>({d}), Tensor<double>({d})};
  w.attn.heads = 2;
  for (auto* m : {&w.attn.w_q, &w.attn.w_k, &w.attn.w_v, &w.attn.w_o}) *m = Tensor<double>({d, d});
  for (auto* b : {&w.attn.b_q, &w.attn.b_k, &w.attn.b_v, &w.attn.b_o}) *b = Tensor<double>({d});
  w.mlp = {Tensor<double>({d, 12}), Tensor<double>({12}), Tensor<double>({12, d}),
           Tensor<double>({d})};
  const auto x = random_tensor({5, d}, rng);
  EXPECT_TRUE(bit_equal(encoder_layer(x, w), x));
}

TEST(Blocks, EncoderLayerGradients) {
  std::mt19937_64 rng(9);
  const std::size_t d = 4;
  const auto attn = random_attention(d, 2, rng);
  const auto readout = random_tensor({6, d}, rng);
  std::vector<Tensor<double>> in{random_tensor({6, d}, rng),
                                 random_tensor({d}, rng),
                                 random_tensor({d}, rng),
                                 attn.w_q,
                                 attn.w_k,
                                 attn.w_v,
                                 attn.w_o,
                                 random_tensor({d, 8}, rng, 0.5),
                                 random_tensor({8, d}, rng, 0.5)};
  const double err = grad_check<double>(
      [&](const std::vector<Tensor<double>>& v) {
        EncoderLayerWeights<double> w;
        w.ln1 = {v[1], v[2]};
        w.ln2 = {v[1], v[2]};
        w.attn = attn;
        w.attn.w_q = v[3];
        w.attn.w_k = v[4];
        w.attn.w_v = v[5];
        w.attn.w_o = v[6];
        w.mlp = {v[7], Tensor<double>({8}), v[8], Tensor<double>({d})};
        BlockContext ctx;
        ctx.tokens = 3;
        return sum(mul(encoder_layer(v[0], w, ctx), readout));
      },
      in, 1e-6);
  EXPECT_LT(err, 1e-6);
}
