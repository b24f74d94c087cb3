#pragma once

// MLP autoencoder between pixel space (H x W x C, flattened) and the latent
// space (h x w x c, flattened) where diffusion runs. Trained on plain mean
// squared reconstruction error.

#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "protodiff/checkpoint.hpp"
#include "protodiff/embeddings.hpp"
#include "protodiff/nn.hpp"
#include "protodiff/optim.hpp"

namespace protodiff {

struct AutoencoderDims {
  std::size_t image_h = 16, image_w = 16, image_c = 3;
  std::size_t latent_h = 4, latent_w = 4, latent_c = 4;

  std::size_t input_dim() const { return image_h * image_w * image_c; }
  std::size_t latent_dim() const { return latent_h * latent_w * latent_c; }

  // Flat-vector data (e.g. 2-D toy latents): H = input_dim, W = C = 1.
  static AutoencoderDims flat(std::size_t input, std::size_t latent) { return {input, 1, 1, latent, 1, 1}; }
};

struct AutoencoderParams {
  AutoencoderDims dims;
  Mlp encoder;
  Mlp decoder;

  AutoencoderParams() = default;

  AutoencoderParams(const AutoencoderDims& d, const std::vector<std::size_t>& hidden, Activation act, Rng& rng)
      : dims(d) {
    std::vector<std::size_t> enc{d.input_dim()};
    enc.insert(enc.end(), hidden.begin(), hidden.end());
    enc.push_back(d.latent_dim());
    std::vector<std::size_t> dec(enc.rbegin(), enc.rend());
    encoder = Mlp(enc, act, rng);
    decoder = Mlp(dec, act, rng);
  }

  // Single linear layer each way with all weights and biases zero.
  static AutoencoderParams zeros(const AutoencoderDims& d) {
    AutoencoderParams p;
    p.dims = d;
    p.encoder.layers.push_back(Linear::zeros(d.input_dim(), d.latent_dim()));
    p.decoder.layers.push_back(Linear::zeros(d.latent_dim(), d.input_dim()));
    return p;
  }

  // Square linear autoencoder with identity weights and zero bias.
  static AutoencoderParams identity(std::size_t dim) {
    AutoencoderParams p = zeros(AutoencoderDims::flat(dim, dim));
    for (Linear* l : {&p.encoder.layers[0], &p.decoder.layers[0]}) {
      auto w = l->weight.mutable_data();
      for (std::size_t i = 0; i < dim; ++i) w[i * dim + i] = 1.0;
    }
    return p;
  }

  void validate() const {
    if (encoder.layers.empty() || decoder.layers.empty()) throw ContractError("autoencoder has no layers");
    if (encoder.in_features() != dims.input_dim() || decoder.out_features() != dims.input_dim() ||
        encoder.out_features() != dims.latent_dim() || decoder.in_features() != dims.latent_dim()) {
      throw DimensionError("autoencoder weights do not match recorded dims");
    }
  }

  ParameterList parameters() const {
    ParameterList out;
    encoder.collect("encoder", out);
    decoder.collect("decoder", out);
    return out;
  }

  // x: [n, input_dim] -> [n, latent_dim]
  Tensor encode(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != dims.input_dim()) {
      throw ContractError("encode: expected [n, " + std::to_string(dims.input_dim()) + "], got " +
                          detail::shape_string(x.shape()));
    }
    return encoder(x);
  }

  Tensor decode(const Tensor& z) const {
    if (z.rank() != 2 || z.dim(1) != dims.latent_dim()) {
      throw ContractError("decode: expected [n, " + std::to_string(dims.latent_dim()) + "], got " +
                          detail::shape_string(z.shape()));
    }
    return decoder(z);
  }

  std::vector<double> encode(const std::vector<double>& x) const {
    return encode(Tensor({1, x.size()}, x)).values();
  }
  std::vector<double> decode(const std::vector<double>& z) const {
    return decode(Tensor({1, z.size()}, z)).values();
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.set("kind", "autoencoder");
    ck.set("image_dims", std::to_string(dims.image_h) + "," + std::to_string(dims.image_w) + "," +
                             std::to_string(dims.image_c));
    ck.set("latent_dims", std::to_string(dims.latent_h) + "," + std::to_string(dims.latent_w) + "," +
                              std::to_string(dims.latent_c));
    ck.set("encoder.layers", encoder.layers.size());
    ck.set("activation", activation_name(encoder.activation));
    ck.add(parameters());
    return ck;
  }

  static AutoencoderParams from_checkpoint(const Checkpoint& ck) {
    auto triple = [](const std::string& s) {
      std::istringstream is(s);
      std::vector<std::size_t> v;
      for (std::string part; std::getline(is, part, ',');) v.push_back(std::stoul(part));
      if (v.size() != 3) throw ContractError("bad dims '" + s + "'");
      return v;
    };
    if (ck.require("kind") != "autoencoder") throw ContractError("checkpoint is not an autoencoder");
    auto img = triple(ck.require("image_dims"));
    auto lat = triple(ck.require("latent_dims"));
    AutoencoderParams p;
    p.dims = {img[0], img[1], img[2], lat[0], lat[1], lat[2]};
    const std::size_t layers = ck.require_u64("encoder.layers");
    const Activation act = parse_activation(ck.require("activation"));
    p.encoder.activation = p.decoder.activation = act;
    for (std::size_t i = 0; i < layers; ++i) {
      for (auto [mlp, name] : {std::pair{&p.encoder, "encoder"}, std::pair{&p.decoder, "decoder"}}) {
        const auto& w = ck.record(std::string(name) + "." + std::to_string(i) + ".weight");
        const auto& b = ck.record(std::string(name) + "." + std::to_string(i) + ".bias");
        Linear l;
        l.weight = Tensor(w.shape, w.values, true);
        l.bias = Tensor(b.shape, b.values, true);
        mlp->layers.push_back(std::move(l));
      }
    }
    p.validate();
    return p;
  }
};

struct AutoencoderTrainConfig {
  AutoencoderDims dims;
  std::vector<std::size_t> hidden{64};
  Activation activation = Activation::tanh;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  AdamWConfig optimizer{};
  bool cosine = true;
  double holdout_fraction = 0.0;
  std::uint64_t seed = 0;
};

struct TrainedAutoencoder {
  AutoencoderParams params;
  double train_loss = 0.0;                // final-epoch MSE over the training rows
  std::optional<double> heldout_loss;      // MSE over held-out rows, when any
  double initial_train_loss = 0.0;         // MSE of the untrained model
  std::vector<double> step_losses;         // per minibatch
};

inline double reconstruction_mse(const AutoencoderParams& p, const std::vector<double>& rows, std::size_t n) {
  if (n == 0) return 0.0;
  Tensor x({n, p.dims.input_dim()}, rows);
  return mean(square(sub(p.decode(p.encode(x)), x))).item();
}

// rows: n x input_dim, row-major.
inline TrainedAutoencoder train_autoencoder(const std::vector<double>& rows, const AutoencoderTrainConfig& cfg) {
  const std::size_t d = cfg.dims.input_dim();
  if (rows.empty() || rows.size() % d != 0) {
    throw ContractError("train_autoencoder: dataset is empty or not a multiple of input_dim=" + std::to_string(d));
  }
  const std::size_t n = rows.size() / d;
  Rng rng(cfg.seed);
  TrainedAutoencoder out;
  out.params = AutoencoderParams(cfg.dims, cfg.hidden, cfg.activation, rng);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_hold = static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(n));
  if (n_hold >= n) n_hold = n - 1;
  std::vector<double> train_rows, hold_rows;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_hold ? hold_rows : train_rows;
    dst.insert(dst.end(), rows.begin() + static_cast<std::ptrdiff_t>(order[i] * d),
               rows.begin() + static_cast<std::ptrdiff_t>((order[i] + 1) * d));
  }
  const std::size_t n_train = n - n_hold;
  out.initial_train_loss = reconstruction_mse(out.params, train_rows, n_train);

  ParameterList params = out.params.parameters();
  AdamW opt(params, cfg.optimizer);
  const std::size_t batch = std::max<std::size_t>(1, std::min(cfg.batch_size, n_train));
  const std::size_t steps_per_epoch = (n_train + batch - 1) / batch;
  if (cfg.cosine) opt.use_cosine_schedule(std::max<std::size_t>(1, cfg.epochs * steps_per_epoch));
  std::vector<std::size_t> idx(n_train);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t start = 0; start < n_train; start += batch) {
      const std::size_t end = std::min(n_train, start + batch);
      std::vector<double> xb;
      xb.reserve((end - start) * d);
      for (std::size_t i = start; i < end; ++i)
        xb.insert(xb.end(), train_rows.begin() + static_cast<std::ptrdiff_t>(idx[i] * d),
                  train_rows.begin() + static_cast<std::ptrdiff_t>((idx[i] + 1) * d));
      Tensor x({end - start, d}, std::move(xb));
      opt.zero_grad();
      Tensor loss = mean(square(sub(out.params.decode(out.params.encode(x)), x)));
      backward(loss);
      opt.set_progress(step++);
      opt.step();
      out.step_losses.push_back(loss.item());
    }
  }
  out.train_loss = reconstruction_mse(out.params, train_rows, n_train);
  if (n_hold > 0) out.heldout_loss = reconstruction_mse(out.params, hold_rows, n_hold);
  return out;
}

inline TrainedAutoencoder train_autoencoder(const EmbeddingCollection& images, const AutoencoderTrainConfig& cfg) {
  if (images.dim != cfg.dims.input_dim()) {
    throw ContractError("train_autoencoder: image dim " + std::to_string(images.dim) + " != configured input dim " +
                        std::to_string(cfg.dims.input_dim()));
  }
  return train_autoencoder(images.data, cfg);
}

}  // namespace protodiff
