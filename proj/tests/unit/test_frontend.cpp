#include "doctest.h"

#include "fixtures.hpp"

#include "fsr/errors.hpp"
#include "fsr/frontend.hpp"

#include <filesystem>
#include <random>

using namespace fsr;

TEST_CASE("hog layout and invariants") {
  HogConfig cfg;
  CHECK(cfg.feature_length() == (16 + 64 + 256) * 9);

  // A flat image has no gradient anywhere.
  const Vector flat = hog(Matrix::Constant(128, 128, 0.3), cfg);
  CHECK(flat.size() == cfg.feature_length());
  CHECK(flat.isZero());

  // Brightness rising left to right: every vote lands in bin 0 of the
  // interior cells, and the per-cell norm is 1 up to epsilon.
  HogConfig small;
  small.image_size = 16;
  small.grids = {2};
  Matrix ramp(16, 16);
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) ramp(r, c) = 0.1 * c;
  Vector h = hog(ramp, small);
  REQUIRE(h.size() == 4 * 9);
  for (int cell = 0; cell < 4; ++cell) {
    CHECK(h(cell * 9) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(h.segment(cell * 9 + 1, 8).isZero());
  }

  // Rising top to bottom points at pi/2, halfway through the bins: 4.5 bin
  // widths, split evenly between bins 4 and 5.
  const Vector v = hog(Matrix(ramp.transpose()), small);
  CHECK(v(4) == doctest::Approx(std::sqrt(0.5)));
  CHECK(v(5) == doctest::Approx(std::sqrt(0.5)));

  // Contrast scaling leaves the normalised histograms unchanged.
  std::mt19937_64 rng(3);
  // Random texture: every cell carries real gradient energy, so no cell
  // normalises rounding noise.
  const Matrix img = fixture::random_features(32, 32, rng);
  HogConfig c32;
  c32.image_size = 32;
  c32.grids = {2, 4};
  const Vector a = hog(img, c32);
  const Vector b = hog(Matrix(3.0 * img), c32);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-6);
  for (Eigen::Index k = 0; k < a.size(); k += 9) CHECK(a.segment(k, 9).norm() <= 1.0 + 1e-12);
  CHECK((a.array() >= 0.0).all());

  CHECK_THROWS_AS(hog(Matrix::Zero(10, 10), c32), DataError);
  HogConfig bad = c32;
  bad.grids = {3};
  CHECK_THROWS_AS(hog(img, bad), ConfigError);
  Matrix nan = img;
  nan(0, 0) = std::nan("");
  CHECK_THROWS_AS(hog(nan, c32), DataError);
}

TEST_CASE("pose images respond to the pose") {
  Vector p(4);
  p << 0.2, -0.1, 1.0, 0.5;
  const Matrix a = render_pose_image(p, 32);
  CHECK(a.rows() == 32);
  CHECK(a.allFinite());
  CHECK(a.maxCoeff() > 0.5);
  p(0) += 0.5;
  CHECK((render_pose_image(p, 32) - a).norm() > 1.0);
}

TEST_CASE("pca against the covariance eigenproblem") {
  std::mt19937_64 rng(11);
  const int N = 200, D = 6;
  Matrix mix = fixture::random_features(D, D, rng);
  const Matrix data = (fixture::random_features(N, D, rng) * mix).rowwise() + Eigen::RowVectorXd::LinSpaced(D, 1, 6);
  const auto m = pca_fit(data, 3);
  CHECK(m.basis.cols() == 3);
  CHECK((m.basis.transpose() * m.basis - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(m.eigenvalues(0) >= m.eigenvalues(1));
  CHECK(m.eigenvalues(1) >= m.eigenvalues(2));

  // Each eigenvalue equals the sample variance of the projection, and
  // projected components are uncorrelated.
  const Matrix y = pca_apply_rows(m, data);
  CHECK(y.colwise().mean().cwiseAbs().maxCoeff() < 1e-10);
  const Matrix cov = (y.transpose() * y) / (N - 1);
  CHECK((cov - Matrix(m.eigenvalues.asDiagonal())).cwiseAbs().maxCoeff() < 1e-8);
  // The first direction beats random unit directions.
  const Matrix centred = data.rowwise() - m.mean.transpose();
  for (int k = 0; k < 50; ++k) {
    Vector u = fixture::random_features(1, D, rng).row(0).transpose();
    u.normalize();
    CHECK((centred * u).squaredNorm() / (N - 1) <= m.eigenvalues(0) + 1e-9);
  }

  // A full-rank model reconstructs exactly.
  const auto full = pca_fit(data, D);
  const Matrix back = (pca_apply_rows(full, data) * full.basis.transpose()).rowwise() + full.mean.transpose();
  CHECK((back - data).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((pca_apply(m, Vector(data.row(4).transpose())) - Vector(y.row(4).transpose())).norm() < 1e-12);

  CHECK_THROWS_AS(pca_fit(data, 0), ConfigError);
  CHECK_THROWS_AS(pca_fit(data, D + 1), ConfigError);
  CHECK_THROWS_AS(pca_fit(data.topRows(3), 3), DataError);
  CHECK_THROWS_AS(pca_apply_rows(m, Matrix::Zero(2, D + 1)), DataError);

  const auto path = std::filesystem::temp_directory_path() / "fsr_test_pca.fsr";
  m.save(path);
  const auto l = PcaModel::load(path);
  std::filesystem::remove(path);
  CHECK((l.basis - m.basis).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((l.mean - m.mean).cwiseAbs().maxCoeff() < 1e-5);
  CHECK(l.output_dim() == 3);
}

TEST_CASE("context windows replicate edge frames") {
  Matrix f(4, 2);
  f << 1, 10, 2, 20, 3, 30, 4, 40;
  WindowConfig w{3};
  const Matrix x = window_concat(f, w);
  REQUIRE(x.rows() == 4);
  REQUIRE(x.cols() == 6);
  Eigen::RowVectorXd want(6);
  want << 1, 10, 1, 10, 2, 20;
  CHECK(x.row(0) == want);
  want << 2, 20, 3, 30, 4, 40;
  CHECK(x.row(2) == want);
  want << 3, 30, 4, 40, 4, 40;
  CHECK(x.row(3) == want);

  // Width exceeding the sequence keeps replicating.
  const Matrix y = window_concat(f.topRows(1), WindowConfig{5});
  REQUIRE(y.cols() == 10);
  for (int j = 0; j < 5; ++j) {
    CHECK(y(0, 2 * j) == 1.0);
    CHECK(y(0, 2 * j + 1) == 10.0);
  }
  CHECK(window_concat(f, WindowConfig{1}) == f);
  CHECK_THROWS_AS(window_concat(f, WindowConfig{4}), ConfigError);
}
