#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "protodiff/autoencoder.hpp"
#include "test_support.hpp"

using namespace protodiff;

TEST(Autoencoder, ZeroWeightsGiveZeroLatentAndOutput) {
  auto p = AutoencoderParams::zeros(AutoencoderDims::flat(5, 2));
  auto z = p.encode(std::vector<double>{1, -2, 3, 0.5, 7});
  EXPECT_EQ(z, (std::vector<double>{0, 0}));
  EXPECT_EQ(p.decode(std::vector<double>{0, 0}), std::vector<double>(5, 0.0));
}

TEST(Autoencoder, IdentityLinearAutoencoder) {
  auto p = AutoencoderParams::identity(4);
  std::vector<double> x{0.25, -1.5, 3.0, 9.0};
  EXPECT_EQ(p.encode(x), x);
  EXPECT_EQ(p.decode(p.encode(x)), x);
}

TEST(Autoencoder, DefaultShapeContract) {
  AutoencoderDims dims;  // 16x16x3 images, 4x4x4 latents
  Rng rng(1);
  AutoencoderParams p(dims, {32}, Activation::tanh, rng);
  EXPECT_EQ(dims.input_dim(), 768u);
  EXPECT_EQ(dims.latent_dim(), 64u);
  Tensor x({2, 768}, protodiff::testing::random_values(1536, rng));
  Tensor z = p.encode(x);
  EXPECT_EQ(z.shape(), (Shape{2, 64}));
  EXPECT_EQ(p.decode(z).shape(), (Shape{2, 768}));
  EXPECT_THROW(p.encode(Tensor::zeros({1, 767})), ContractError);
  EXPECT_THROW(p.decode(Tensor::zeros({1, 63})), ContractError);
}

TEST(Autoencoder, InferenceIsPure) {
  Rng rng(2);
  AutoencoderParams p(AutoencoderDims::flat(6, 3), {8}, Activation::tanh, rng);
  auto x = protodiff::testing::random_values(6, rng);
  EXPECT_EQ(p.encode(x), p.encode(x));
  EXPECT_EQ(p.decode(p.encode(x)), p.decode(p.encode(x)));
}

TEST(Autoencoder, EmptyDatasetIsRejected) {
  AutoencoderTrainConfig cfg;
  cfg.dims = AutoencoderDims::flat(3, 1);
  EXPECT_THROW(train_autoencoder(std::vector<double>{}, cfg), ContractError);
}

TEST(Autoencoder, SingleSampleOverfits) {
  AutoencoderTrainConfig cfg;
  cfg.dims = AutoencoderDims::flat(6, 2);
  cfg.hidden = {16};
  cfg.epochs = 1500;
  cfg.optimizer.lr = 1e-2;
  cfg.seed = 3;
  auto res = train_autoencoder(std::vector<double>{0.3, -0.7, 1.1, 0.0, 0.5, -0.2}, cfg);
  EXPECT_LT(res.train_loss, 1e-6);
  EXPECT_FALSE(res.heldout_loss.has_value());
}

TEST(Autoencoder, IdenticalSamplesDecodeToThatSample) {
  const std::vector<double> sample{1.0, -0.5, 0.25};
  std::vector<double> rows;
  for (int i = 0; i < 20; ++i) rows.insert(rows.end(), sample.begin(), sample.end());
  AutoencoderTrainConfig cfg;
  cfg.dims = AutoencoderDims::flat(3, 1);
  cfg.hidden = {};
  cfg.epochs = 400;
  cfg.batch_size = 20;
  cfg.optimizer.lr = 1e-2;
  auto res = train_autoencoder(rows, cfg);
  auto out = res.params.decode(res.params.encode(sample));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out[i], sample[i], 1e-3);
}

TEST(Autoencoder, TrainingCurveAndBeforeAfter) {
  Rng rng(4);
  std::vector<double> rows;
  for (int i = 0; i < 64; ++i) {
    const double a = standard_normal(rng), b = standard_normal(rng);
    for (double v : {a, b, a + b, a - b, 0.5 * a, 2.0 * b}) rows.push_back(v + 0.05 * standard_normal(rng));
  }
  AutoencoderTrainConfig cfg;
  cfg.dims = AutoencoderDims::flat(6, 2);
  cfg.hidden = {16};
  cfg.epochs = 300;
  cfg.batch_size = 64;  // full batch: the curve is deterministic
  cfg.optimizer.lr = 3e-3;
  cfg.cosine = false;
  cfg.holdout_fraction = 0.0;
  auto res = train_autoencoder(rows, cfg);
  EXPECT_LT(res.train_loss, res.initial_train_loss);
  const auto& l = res.step_losses;
  ASSERT_EQ(l.size(), 300u);
  for (std::size_t i = 10; i + 10 <= l.size(); ++i) {
    double prev = 0.0, cur = 0.0;
    for (std::size_t j = 0; j < 10; ++j) {
      prev += l[i - 1 + j];
      cur += l[i + j];
    }
    EXPECT_LE(cur, prev + 1e-12) << "window " << i;
  }
}

TEST(Autoencoder, HeldOutLossIsReportedSeparately) {
  Rng rng(5);
  auto rows = protodiff::testing::random_values(40 * 4, rng);
  AutoencoderTrainConfig cfg;
  cfg.dims = AutoencoderDims::flat(4, 2);
  cfg.epochs = 5;
  cfg.holdout_fraction = 0.25;
  auto res = train_autoencoder(rows, cfg);
  ASSERT_TRUE(res.heldout_loss.has_value());
  EXPECT_NE(*res.heldout_loss, res.train_loss);
}

TEST(Autoencoder, LinearAutoencoderApproachesPcaOptimum) {
  // Correlated Gaussian data; the best rank-2 linear reconstruction error per
  // element is the sum of the discarded covariance eigenvalues / dim.
  const std::size_t n = 400, d = 5, k = 2;
  Rng rng(6);
  Eigen::MatrixXd mix(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) mix(i, j) = standard_normal(rng) * (j < 2 ? 2.0 : 0.3);
  Eigen::MatrixXd data(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    Eigen::VectorXd g(d);
    for (std::size_t j = 0; j < d; ++j) g(j) = standard_normal(rng);
    data.row(r) = (mix * g).transpose();
  }
  Eigen::MatrixXd centered = data.rowwise() - data.colwise().mean();
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  double optimum = 0.0;
  for (std::size_t i = 0; i < d - k; ++i) optimum += eig.eigenvalues()(static_cast<Eigen::Index>(i));
  optimum /= static_cast<double>(d);

  std::vector<double> rows(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) rows[r * d + j] = data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j));
  AutoencoderTrainConfig cfg;
  cfg.dims = AutoencoderDims::flat(d, k);
  cfg.hidden = {};
  cfg.epochs = 400;
  cfg.batch_size = 50;
  cfg.optimizer.lr = 1e-2;
  cfg.optimizer.weight_decay = 0.0;
  cfg.seed = 7;
  auto res = train_autoencoder(rows, cfg);
  EXPECT_GE(res.train_loss, optimum * (1.0 - 1e-6));
  EXPECT_LT(res.train_loss, optimum * 1.02);
}

TEST(Autoencoder, CheckpointRoundTrip) {
  Rng rng(8);
  AutoencoderParams p(AutoencoderDims{4, 4, 3, 2, 2, 2}, {10}, Activation::relu, rng);
  auto bytes = p.to_checkpoint().encode();
  auto back = AutoencoderParams::from_checkpoint(Checkpoint::decode(bytes));
  EXPECT_EQ(back.to_checkpoint().encode(), bytes);
  auto x = protodiff::testing::random_values(48, rng);
  EXPECT_EQ(back.encode(x), p.encode(x));
}
