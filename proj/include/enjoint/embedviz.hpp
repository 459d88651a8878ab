#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "enjoint/aquasynth.hpp"
#include "enjoint/model.hpp"

namespace enjoint {

using MatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Pooled backbone features, one row per image.
struct EmbeddingSet {
  MatrixXd rows;
  WaterType tag = WaterType::Clear;
  std::string checkpoint;

  void validate() const {
    if (rows.rows() < 2) throw std::invalid_argument("embedding set needs at least 2 rows");
    if (!rows.allFinite()) throw std::invalid_argument("embedding set has non-finite entries");
  }
};

/// Backbone embeddings of `images`, computed in chunks of 16.
inline EmbeddingSet collect_embeddings(const Network<float>& net, const ParamStore<float>& params, const std::vector<Image>& images,
                                       WaterType tag, std::string checkpoint = "") {
  if (images.size() < 2) throw std::invalid_argument("collect_embeddings: need at least 2 images");
  EmbeddingSet e;
  e.tag = tag;
  e.checkpoint = std::move(checkpoint);
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    std::vector<const Image*> chunk;
    for (std::size_t i = start; i < std::min(images.size(), start + kChunk); ++i) chunk.push_back(&images[i]);
    const auto f = net.backbone(params, Var<float>::constant(images_to_tensor(chunk)));
    const Tensor<float>& emb = f.embedding.value();
    const int d = emb.dim(1);
    if (start == 0) e.rows.resize(static_cast<Eigen::Index>(images.size()), d);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      for (int k = 0; k < d; ++k) e.rows(static_cast<Eigen::Index>(start + i), k) = emb[i * static_cast<std::size_t>(d) + k];
  }
  return e;
}

/// Sample covariance with 1/(n-1) normalization.
inline MatrixXd covariance_matrix(const MatrixXd& x) {
  if (x.rows() < 2) throw std::invalid_argument("covariance_matrix: need at least 2 rows");
  const MatrixXd c = x.rowwise() - x.colwise().mean();
  return (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

/// ||mean(A) - mean(B)||^2 / d + ||C(A) - C(B)||_F^2.
inline double domain_gap(const EmbeddingSet& a, const EmbeddingSet& b) {
  a.validate();
  b.validate();
  if (a.rows.cols() != b.rows.cols()) throw std::invalid_argument("domain_gap: embedding widths differ");
  const double mean_term = (a.rows.colwise().mean() - b.rows.colwise().mean()).squaredNorm() / static_cast<double>(a.rows.cols());
  const double cov_term = (covariance_matrix(a.rows) - covariance_matrix(b.rows)).squaredNorm();
  return mean_term + cov_term;
}

struct Projection {
  MatrixXd coords;                  // n x k
  MatrixXd components;              // k x d, unit rows (zero when rank-deficient)
  std::vector<double> eigenvalues;  // k
  bool rank_deficient = false;
};

struct PcaOptions {
  int iterations = 200;
  double tol = 1e-9;
};

/// Centers X and projects it onto the top-k covariance eigenvectors, found by
/// power iteration with deflation. Each component's largest-magnitude
/// coordinate is made positive. Components beyond the data's rank come out
/// zero and set the flag.
inline Projection pca_project(const MatrixXd& x, int k = 2, const PcaOptions& opt = {}) {
  if (k < 1 || x.rows() <= k) throw std::invalid_argument("pca_project: need n > k >= 1");
  const Eigen::Index d = x.cols();
  const MatrixXd centered = x.rowwise() - x.colwise().mean();
  MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
  const double scale = std::max(cov.diagonal().cwiseAbs().maxCoeff(), 1e-300);

  Projection p;
  p.components = MatrixXd::Zero(k, d);
  p.eigenvalues.assign(static_cast<std::size_t>(k), 0.0);
  for (int c = 0; c < k; ++c) {
    // Deterministic start: the column of largest remaining variance, nudged
    // so it is not orthogonal to the leading eigenvector by accident.
    Eigen::Index j = 0;
    cov.diagonal().maxCoeff(&j);
    Eigen::VectorXd v = Eigen::VectorXd::Constant(d, 1e-3);
    v(j) = 1.0;
    v.normalize();
    double lambda = 0;
    // Earlier components are projected out of every iterate: an unconverged
    // first component otherwise leaks into the deflated matrix.
    auto orthogonalize = [&](Eigen::VectorXd& u) {
      for (int prev = 0; prev < c; ++prev) {
        const Eigen::VectorXd q = p.components.row(prev).transpose();
        u -= q.dot(u) * q;
      }
    };
    orthogonalize(v);
    v.normalize();
    for (int it = 0; it < opt.iterations; ++it) {
      Eigen::VectorXd w = cov * v;
      orthogonalize(w);
      const double n = w.norm();
      if (n <= opt.tol * scale) {
        lambda = 0;
        break;
      }
      w /= n;
      const double delta = std::min((w - v).norm(), (w + v).norm());
      v = w;
      lambda = v.dot(cov * v);
      if (delta < opt.tol) break;
    }
    if (lambda <= opt.tol * scale) {
      p.rank_deficient = true;
      continue;
    }
    Eigen::Index m = 0;
    v.cwiseAbs().maxCoeff(&m);
    if (v(m) < 0) v = -v;
    p.components.row(c) = v.transpose();
    p.eigenvalues[static_cast<std::size_t>(c)] = lambda;
    cov -= lambda * v * v.transpose();
  }
  p.coords = centered * p.components.transpose();
  return p;
}

/// CSV rows `tag,checkpoint,x,y` for a 2-D projection of the stacked sets.
inline void write_projection_csv(std::ostream& os, const std::vector<EmbeddingSet>& sets, const MatrixXd& coords) {
  Eigen::Index r = 0;
  os.precision(9);
  for (const auto& s : sets)
    for (Eigen::Index i = 0; i < s.rows.rows(); ++i, ++r)
      os << to_string(s.tag) << ',' << s.checkpoint << ',' << coords(r, 0) << ',' << coords(r, 1) << '\n';
}

inline MatrixXd stack_rows(const std::vector<EmbeddingSet>& sets) {
  Eigen::Index n = 0;
  for (const auto& s : sets) n += s.rows.rows();
  MatrixXd all(n, sets.front().rows.cols());
  Eigen::Index r = 0;
  for (const auto& s : sets) {
    all.middleRows(r, s.rows.rows()) = s.rows;
    r += s.rows.rows();
  }
  return all;
}

}  // namespace enjoint
