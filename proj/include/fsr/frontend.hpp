#pragma once

#include "fsr/io.hpp"
#include "fsr/types.hpp"

#include <algorithm>
#include <vector>

namespace fsr {

struct HogConfig {
  int image_size = 128;
  std::vector<int> grids = {4, 8, 16};
  int n_orientations = 9;
  double epsilon = 1e-6;

  void validate() const;
  int feature_length() const;
};

// Multi-grid histogram of oriented gradients for a square grayscale image.
// Unsigned orientations in [0, pi), central differences with replicated
// borders, per-cell L2 normalisation, grids concatenated coarse to fine.
Vector hog(const Matrix& image, const HogConfig& cfg = {});

// Renders a grayscale hand-like image from a pose vector: each consecutive
// pair of pose entries sets the angle and offset of one soft bar.
Matrix render_pose_image(const Vector& pose, int image_size = 128);

struct PcaModel {
  Vector mean;
  Matrix basis;  // D x k, orthonormal columns, descending eigenvalue
  Vector eigenvalues;

  int input_dim() const { return static_cast<int>(mean.size()); }
  int output_dim() const { return static_cast<int>(basis.cols()); }

  io::Json header() const;
  void save(const io::fs::path& path) const;
  static PcaModel load(const io::fs::path& path);
};

PcaModel pca_fit(const Matrix& data, int k);

template <typename Derived>
Vector pca_apply(const PcaModel& model, const Eigen::MatrixBase<Derived>& x) {
  return model.basis.transpose() * (x - model.mean);
}

// Row-wise projection of a T x D matrix.
Matrix pca_apply_rows(const PcaModel& model, const Matrix& frames);

struct WindowConfig {
  int width = 21;
  void validate() const;
  int half() const { return (width - 1) / 2; }
};

// Row t holds frames t-w .. t+w side by side, edge frames replicated.
template <typename Derived>
Matrix window_concat(const Eigen::MatrixBase<Derived>& frames, const WindowConfig& cfg) {
  cfg.validate();
  const Eigen::Index T = frames.rows();
  const Eigen::Index k = frames.cols();
  const int w = cfg.half();
  Matrix out(T, k * cfg.width);
  for (Eigen::Index t = 0; t < T; ++t)
    for (int j = -w; j <= w; ++j) {
      const Eigen::Index src = std::clamp<Eigen::Index>(t + j, 0, T - 1);
      out.block(t, (j + w) * k, 1, k) = frames.row(src);
    }
  return out;
}

}  // namespace fsr
