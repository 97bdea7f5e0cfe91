#pragma once

// Straight-line Eigen transcription of the network for one window. Shares no
// code with the tensor library beyond reading parameter values.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mhformer/config.hpp"
#include "mhformer/params.hpp"

namespace oracle {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Mat mat(const mhf::Tensor<double>& t) {
  const Eigen::Index r = t.rank() == 1 ? 1 : Eigen::Index(t.dim(0));
  const Eigen::Index c = Eigen::Index(t.shape().back());
  return Eigen::Map<const Mat>(t.data().data(), r, c);
}

struct Net {
  const mhf::ModelParams<double>& p;
  const mhf::ModelConfig& cfg;

  Mat P(const std::string& name) const { return mat(p.at(name)); }

  Mat layer_norm(const Mat& x, const std::string& pre) const {
    const Mat g = P(pre + ".gain"), b = P(pre + ".bias");
    Mat out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double mu = x.row(r).mean();
      const double var = (x.row(r).array() - mu).square().mean();
      const double inv = 1.0 / std::sqrt(var + cfg.ln_eps);
      out.row(r) = ((x.row(r).array() - mu) * inv * g.row(0).array() + b.row(0).array()).matrix();
    }
    return out;
  }

  Mat affine(const Mat& x, const std::string& w, const std::string& b) const {
    Mat y = x * P(w);
    y.rowwise() += P(b).row(0);
    return y;
  }

  static Mat softmax(const Mat& s) {
    Mat out(s.rows(), s.cols());
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const Eigen::RowVectorXd e = (s.row(r).array() - s.row(r).maxCoeff()).exp().matrix();
      out.row(r) = e / e.sum();
    }
    return out;
  }

  static Mat gelu(const Mat& x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); });
  }

  Mat attention(const Mat& xq, const Mat& xk, const Mat& xv, const std::string& pre,
                std::size_t heads) const {
    const Mat Q = affine(xq, pre + ".w_q", pre + ".b_q");
    const Mat K = affine(xk, pre + ".w_k", pre + ".b_k");
    const Mat V = affine(xv, pre + ".w_v", pre + ".b_v");
    const Eigen::Index dh = Q.cols() / Eigen::Index(heads);
    Mat O(Q.rows(), Q.cols());
    for (Eigen::Index h = 0; h < Eigen::Index(heads); ++h) {
      const Mat A = softmax(Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose() /
                            std::sqrt(double(dh)));
      O.middleCols(h * dh, dh) = A * V.middleCols(h * dh, dh);
    }
    return affine(O, pre + ".w_o", pre + ".b_o");
  }

  Mat mlp(const Mat& x, const std::string& pre) const {
    return affine(gelu(affine(x, pre + ".w1", pre + ".b1")), pre + ".w2", pre + ".b2");
  }

  static std::string h(std::size_t m) { return "h" + std::to_string(m + 1); }
  static std::string l(std::size_t i) { return "layer" + std::to_string(i + 1); }

  // x: N×J×2 row-major. Returns the N × 3J pose sequence.
  Mat operator()(const double* x) const {
    const std::size_t N = cfg.N, J = cfg.J, M = cfg.M;
    Mat xbar(2 * J, N);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t k = 0; k < 2; ++k) xbar(2 * j + k, n) = x[(n * J + j) * 2 + k];

    std::vector<Mat> spatial;
    for (std::size_t m = 0; m < M; ++m) {
      const Mat in = (m == 0 || cfg.parallel_mhg) ? xbar : spatial.back();
      const std::string pre = "mhg." + h(m);
      Mat X = layer_norm(in, pre + ".ln_in") + P(pre + ".pos");
      for (std::size_t i = 0; i < cfg.L1; ++i) {
        const std::string q = pre + "." + l(i);
        const Mat n1 = layer_norm(X, q + ".ln1");
        X = X + attention(n1, n1, n1, q + ".attn", cfg.h_s);
        X = X + mlp(layer_norm(X, q + ".ln2"), q + ".mlp");
      }
      spatial.push_back(in + layer_norm(X, pre + ".ln_out"));
    }

    std::vector<Mat> Z;
    for (std::size_t m = 0; m < M; ++m) {
      const std::string pre = "embed." + h(m);
      Mat z = spatial[m].transpose() * P(pre + ".w");
      z.rowwise() += P(pre + ".b").row(0);
      Z.push_back(z + P(pre + ".pos"));
    }

    auto concat = [&](const std::vector<Mat>& parts) {
      Mat c(parts[0].rows(), parts[0].cols() * Eigen::Index(parts.size()));
      for (std::size_t m = 0; m < parts.size(); ++m)
        c.middleCols(Eigen::Index(m) * parts[0].cols(), parts[0].cols()) = parts[m];
      return c;
    };
    auto split = [&](const Mat& c) {
      std::vector<Mat> parts;
      const Eigen::Index w = c.cols() / Eigen::Index(M);
      for (std::size_t m = 0; m < M; ++m) parts.push_back(c.middleCols(Eigen::Index(m) * w, w));
      return parts;
    };
    auto mix = [&](const std::vector<Mat>& parts, const std::string& pre) {
      const Mat c = concat(parts);
      return Mat(c + mlp(layer_norm(c, pre + ".mix.ln"), pre + ".mix.mlp"));
    };

    for (std::size_t i = 0; i < cfg.L2; ++i) {
      const std::string pre = "shr." + l(i);
      std::vector<Mat> a;
      for (std::size_t m = 0; m < M; ++m) {
        const Mat n1 = layer_norm(Z[m], pre + "." + h(m) + ".ln");
        a.push_back(Z[m] + attention(n1, n1, n1, pre + "." + h(m) + ".attn", cfg.h_t));
      }
      Z = split(mix(a, pre));
    }

    Mat final_rep = concat(Z);
    for (std::size_t i = 0; i < cfg.L3; ++i) {
      const std::string pre = "chi." + l(i);
      std::vector<Mat> normed, a;
      for (std::size_t m = 0; m < M; ++m)
        normed.push_back(layer_norm(Z[m], pre + "." + h(m) + ".ln"));
      for (std::size_t m = 0; m < M; ++m) {
        const bool cyc = cfg.cross_roles == mhf::CrossRoles::cyclic;
        const std::size_t m1 = cyc ? (m + 1) % M : (m + M - 1) % M;
        const std::size_t m2 = cyc ? (m + 2) % M : (m + 2 * M - 2) % M;
        a.push_back(Z[m] + attention(normed[m1], normed[m2], normed[m],
                                     pre + "." + h(m) + ".attn", cfg.h_t));
      }
      final_rep = mix(a, pre);
      if (i + 1 < cfg.L3) Z = split(final_rep);
    }
    return affine(final_rep, "head.w", "head.b");
  }
};

}  // namespace oracle
