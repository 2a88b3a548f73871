#include "fsr/frontend.hpp"

#include "fsr/errors.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>

namespace fsr {

void HogConfig::validate() const {
  if (image_size < 1) throw ConfigError("hog.image_size: must be positive");
  if (n_orientations < 2) throw ConfigError("hog.n_orientations: must be >= 2");
  if (grids.empty()) throw ConfigError("hog.grids: at least one grid required");
  for (int g : grids)
    if (g < 1 || image_size % g != 0) throw ConfigError("hog.grids: grid sizes must divide the image size");
  if (!(epsilon > 0.0)) throw ConfigError("hog.epsilon: must be positive");
}

int HogConfig::feature_length() const {
  int cells = 0;
  for (int g : grids) cells += g * g;
  return cells * n_orientations;
}

Vector hog(const Matrix& image, const HogConfig& cfg) {
  cfg.validate();
  const int n = cfg.image_size;
  if (image.rows() != n || image.cols() != n) throw DataError("shape mismatch: hog expects a square image of the configured size");
  if (!image.allFinite()) throw DataError("hog: non-finite pixel values");

  const int bins = cfg.n_orientations;
  const double bin_width = std::numbers::pi / bins;
  // Orientation votes per pixel: two neighbouring bins with linear weights.
  Matrix magnitude(n, n);
  Eigen::MatrixXi bin_lo(n, n);
  Matrix frac(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const double gx = image(r, std::min(c + 1, n - 1)) - image(r, std::max(c - 1, 0));
      const double gy = image(std::min(r + 1, n - 1), c) - image(std::max(r - 1, 0), c);
      magnitude(r, c) = std::hypot(gx, gy);
      double theta = std::atan2(gy, gx);
      if (theta < 0.0) theta += std::numbers::pi;
      if (theta >= std::numbers::pi) theta -= std::numbers::pi;
      const double pos = theta / bin_width;
      const int lo = std::min(static_cast<int>(std::floor(pos)), bins - 1);
      bin_lo(r, c) = lo;
      frac(r, c) = pos - lo;
    }

  Vector out(cfg.feature_length());
  Eigen::Index offset = 0;
  for (int g : cfg.grids) {
    const int cell = n / g;
    for (int gr = 0; gr < g; ++gr)
      for (int gc = 0; gc < g; ++gc) {
        Vector h = Vector::Zero(bins);
        for (int r = gr * cell; r < (gr + 1) * cell; ++r)
          for (int c = gc * cell; c < (gc + 1) * cell; ++c) {
            const int lo = bin_lo(r, c);
            h(lo) += (1.0 - frac(r, c)) * magnitude(r, c);
            h((lo + 1) % bins) += frac(r, c) * magnitude(r, c);
          }
        out.segment(offset, bins) = h / std::sqrt(h.squaredNorm() + cfg.epsilon * cfg.epsilon);
        offset += bins;
      }
  }
  return out;
}

Matrix render_pose_image(const Vector& pose, int image_size) {
  Matrix img = Matrix::Zero(image_size, image_size);
  const double centre = 0.5 * (image_size - 1);
  const double width = image_size / 24.0;
  for (Eigen::Index b = 0; b + 1 < pose.size(); b += 2) {
    const double angle = std::numbers::pi * std::tanh(pose(b));
    const double offset = 0.3 * image_size * std::tanh(pose(b + 1));
    const double nx = -std::sin(angle);
    const double ny = std::cos(angle);
    for (int r = 0; r < image_size; ++r)
      for (int c = 0; c < image_size; ++c) {
        const double d = (c - centre) * nx + (r - centre) * ny - offset;
        img(r, c) += std::exp(-0.5 * d * d / (width * width));
      }
  }
  return img;
}

io::Json PcaModel::header() const { return {{"kind", "pca"}, {"input_dim", input_dim()}, {"output_dim", output_dim()}}; }

void PcaModel::save(const io::fs::path& path) const {
  io::write_container(path, header(), {{"mean", mean.transpose()}, {"basis", basis}, {"eigenvalues", eigenvalues.transpose()}});
}

PcaModel PcaModel::load(const io::fs::path& path) {
  const auto c = io::read_container(path);
  if (c.header.value("kind", "") != "pca") throw DataError(path.string() + ": not a PCA model");
  PcaModel m;
  m.mean = c.tensor("mean").transpose();
  m.basis = c.tensor("basis");
  m.eigenvalues = c.tensor("eigenvalues").transpose();
  return m;
}

PcaModel pca_fit(const Matrix& data, int k) {
  const auto N = data.rows();
  const auto D = data.cols();
  if (k < 1 || k > D) throw ConfigError("invalid dimension: PCA output must lie in [1, D]");
  if (N <= k) throw DataError("pca_fit: need more samples than output dimensions");

  PcaModel m;
  m.mean = data.colwise().mean().transpose();
  const Matrix centred = data.rowwise() - m.mean.transpose();
  const Matrix cov = (centred.transpose() * centred) / static_cast<double>(N - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericalError("pca_fit: eigendecomposition failed");

  // Eigen returns ascending eigenvalues.
  m.basis.resize(D, k);
  m.eigenvalues.resize(k);
  for (int i = 0; i < k; ++i) {
    Vector v = solver.eigenvectors().col(D - 1 - i);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    m.basis.col(i) = v;
    m.eigenvalues(i) = std::max(0.0, solver.eigenvalues()(D - 1 - i));
  }
  return m;
}

Matrix pca_apply_rows(const PcaModel& model, const Matrix& frames) {
  if (frames.cols() != model.input_dim()) throw DataError("shape mismatch: PCA input dimension");
  return (frames.rowwise() - model.mean.transpose()) * model.basis;
}

void WindowConfig::validate() const {
  if (width < 1 || width % 2 == 0) throw ConfigError("window.width: must be odd and >= 1");
}

}  // namespace fsr
