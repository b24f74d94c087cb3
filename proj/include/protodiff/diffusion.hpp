#pragma once

// Latent diffusion: noise schedules, the closed-form forward marginal, an
// epsilon-predicting denoiser, a noisy-latent prototype classifier, and
// classifier-guided ancestral sampling with fixed variance beta_t.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protodiff/autoencoder.hpp"
#include "protodiff/checkpoint.hpp"
#include "protodiff/io.hpp"
#include "protodiff/nn.hpp"
#include "protodiff/optim.hpp"
#include "protodiff/parallel.hpp"
#include "protodiff/random.hpp"

namespace protodiff {

enum class NoiseKind { linear, cosine };

inline const char* noise_kind_name(NoiseKind k) { return k == NoiseKind::linear ? "linear" : "cosine"; }

inline NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "linear") return NoiseKind::linear;
  if (s == "cosine") return NoiseKind::cosine;
  throw ContractError("unknown schedule kind '" + s + "'");
}

struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;
  NoiseKind kind = NoiseKind::linear;
  double beta_min = 0.0;
  double beta_max = 0.0;

  void check_step(std::size_t t) const {
    if (t >= T) throw BoundsError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
  }
};

// Cosine kind follows the squared-cosine alpha_bar curve (offset 0.008) with
// each beta clipped into [beta_min, beta_max].
inline NoiseSchedule build_schedule(std::size_t T, double beta_min, double beta_max,
                                    NoiseKind kind = NoiseKind::linear) {
  if (T < 1) throw ContractError("schedule needs T >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
    throw ContractError("schedule needs 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.kind = kind;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.beta.resize(T);
  if (kind == NoiseKind::linear) {
    for (std::size_t t = 0; t < T; ++t) {
      s.beta[t] = T == 1 ? beta_min
                         : beta_min + (beta_max - beta_min) * static_cast<double>(t) / static_cast<double>(T - 1);
    }
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / static_cast<double>(T) + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (std::size_t t = 0; t < T; ++t) {
      const double b = 1.0 - f(static_cast<double>(t + 1)) / f(static_cast<double>(t));
      s.beta[t] = std::clamp(b, beta_min, beta_max);
    }
  }
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (std::size_t t = 0; t < T; ++t) {
    prod *= 1.0 - s.beta[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

inline void schedule_to_checkpoint(Checkpoint& ck, const NoiseSchedule& s) {
  ck.set("schedule.T", s.T);
  ck.set("schedule.kind", noise_kind_name(s.kind));
  ck.set("schedule.beta_min", s.beta_min);
  ck.set("schedule.beta_max", s.beta_max);
}

inline NoiseSchedule schedule_from_checkpoint(const Checkpoint& ck) {
  return build_schedule(ck.require_u64("schedule.T"), ck.require_double("schedule.beta_min"),
                        ck.require_double("schedule.beta_max"), parse_noise_kind(ck.require("schedule.kind")));
}

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) noise
inline std::vector<double> forward_diffuse(std::span<const double> z0, std::size_t t, std::span<const double> noise,
                                           const NoiseSchedule& s) {
  s.check_step(t);
  if (noise.size() != z0.size()) throw DimensionError("forward_diffuse: noise size differs from latent size");
  const double a = std::sqrt(s.alpha_bar[t]);
  const double b = std::sqrt(1.0 - s.alpha_bar[t]);
  std::vector<double> out(z0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * noise[i];
  return out;
}

// One transition of the stepwise kernel q(z_t | z_{t-1}).
inline std::vector<double> forward_step(std::span<const double> z_prev, std::size_t t, std::span<const double> noise,
                                        const NoiseSchedule& s) {
  s.check_step(t);
  if (noise.size() != z_prev.size()) throw DimensionError("forward_step: noise size differs from latent size");
  const double a = std::sqrt(1.0 - s.beta[t]);
  const double b = std::sqrt(s.beta[t]);
  std::vector<double> out(z_prev.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z_prev[i] + b * noise[i];
  return out;
}

// Sinusoidal timestep features, one row per timestep.
inline std::vector<double> time_embedding_table(std::size_t T, std::size_t dim) {
  std::vector<double> table(T * dim);
  const std::size_t half = dim / 2;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double angle = static_cast<double>(t) * freq;
      table[t * dim + 2 * i] = std::sin(angle);
      table[t * dim + 2 * i + 1] = std::cos(angle);
    }
    if (dim % 2 == 1) table[t * dim + dim - 1] = static_cast<double>(t) / static_cast<double>(T);
  }
  return table;
}

namespace detail {

// Time-conditioned MLP over concat(z, embedding(t)); shared by the denoiser
// and the classifier.
struct TimeConditionedNet {
  std::size_t latent_dim = 0;
  std::size_t timesteps = 0;
  std::size_t embed_dim = 0;
  Mlp net;
  std::vector<double> table;

  void build_table() { table = time_embedding_table(timesteps, embed_dim); }

  Tensor forward(const Tensor& z, std::span<const std::size_t> t) const {
    if (z.rank() != 2 || z.dim(1) != latent_dim) {
      throw ContractError("expected latents [n, " + std::to_string(latent_dim) + "], got " + shape_string(z.shape()));
    }
    const std::size_t n = z.dim(0);
    if (t.size() != n && t.size() != 1) throw DimensionError("timestep count does not match batch size");
    std::vector<double> emb(n * embed_dim);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t step = t.size() == 1 ? t[0] : t[r];
      if (step >= timesteps) throw BoundsError("timestep " + std::to_string(step) + " outside model range");
      std::copy_n(table.begin() + static_cast<std::ptrdiff_t>(step * embed_dim), embed_dim,
                  emb.begin() + static_cast<std::ptrdiff_t>(r * embed_dim));
    }
    return net(concat_columns(z, Tensor({n, embed_dim}, std::move(emb))));
  }

  void write(Checkpoint& ck, const std::string& kind) const {
    ck.set("kind", kind);
    ck.set("latent_dim", latent_dim);
    ck.set("timesteps", timesteps);
    ck.set("embed_dim", embed_dim);
    ck.set("layers", net.layers.size());
    ck.set("activation", activation_name(net.activation));
    ParameterList p;
    net.collect("net", p);
    ck.add(p);
  }

  static TimeConditionedNet read(const Checkpoint& ck, const std::string& kind) {
    if (ck.require("kind") != kind) throw ContractError("checkpoint is not a " + kind);
    TimeConditionedNet m;
    m.latent_dim = ck.require_u64("latent_dim");
    m.timesteps = ck.require_u64("timesteps");
    m.embed_dim = ck.require_u64("embed_dim");
    m.net = mlp_from_records(ck, "net", ck.require_u64("layers"), parse_activation(ck.require("activation")));
    if (m.net.layers.empty() || m.net.in_features() != m.latent_dim + m.embed_dim) {
      throw DimensionError(kind + " checkpoint: input width does not match latent_dim + embed_dim");
    }
    m.build_table();
    return m;
  }
};

}  // namespace detail

class DenoiserParams {
 public:
  DenoiserParams() = default;

  // The output layer starts at zero, so the untrained model predicts no noise.
  DenoiserParams(std::size_t latent_dim, std::size_t timesteps, std::size_t embed_dim,
                 const std::vector<std::size_t>& hidden, Activation act, Rng& rng) {
    m_.latent_dim = latent_dim;
    m_.timesteps = timesteps;
    m_.embed_dim = embed_dim;
    std::vector<std::size_t> widths{latent_dim + embed_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(latent_dim);
    m_.net = Mlp(widths, act, rng);
    const Linear& last = m_.net.layers.back();
    m_.net.layers.back() = Linear::zeros(last.in_features(), last.out_features());
    m_.build_table();
  }

  std::size_t latent_dim() const { return m_.latent_dim; }
  std::size_t timesteps() const { return m_.timesteps; }

  Tensor predict(const Tensor& z, std::span<const std::size_t> t) const { return m_.forward(z, t); }

  Tensor predict_noise(const Tensor& z, std::size_t t) const { return m_.forward(z, std::span(&t, 1)); }

  ParameterList parameters() const {
    ParameterList p;
    m_.net.collect("net", p);
    return p;
  }

  DenoiserParams frozen() const {
    DenoiserParams d = *this;
    d.m_.net = m_.net.frozen();
    return d;
  }

  Checkpoint to_checkpoint(const NoiseSchedule& s) const {
    Checkpoint ck;
    m_.write(ck, "denoiser");
    schedule_to_checkpoint(ck, s);
    return ck;
  }

  static DenoiserParams from_checkpoint(const Checkpoint& ck) {
    DenoiserParams d;
    d.m_ = detail::TimeConditionedNet::read(ck, "denoiser");
    if (d.m_.net.out_features() != d.m_.latent_dim) throw DimensionError("denoiser output width != latent_dim");
    return d;
  }

 private:
  detail::TimeConditionedNet m_;
};

class GuidanceClassifierParams {
 public:
  GuidanceClassifierParams() = default;

  GuidanceClassifierParams(std::size_t latent_dim, std::size_t num_classes, std::size_t timesteps,
                           std::size_t embed_dim, const std::vector<std::size_t>& hidden, Activation act, Rng& rng) {
    m_.latent_dim = latent_dim;
    m_.timesteps = timesteps;
    m_.embed_dim = embed_dim;
    std::vector<std::size_t> widths{latent_dim + embed_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(num_classes);
    m_.net = Mlp(widths, act, rng);
    m_.build_table();
  }

  std::size_t latent_dim() const { return m_.latent_dim; }
  std::size_t num_classes() const { return m_.net.out_features(); }
  std::size_t timesteps() const { return m_.timesteps; }

  // Zeroes the output layer: every class gets the same logit.
  void make_uniform() {
    const Linear& last = m_.net.layers.back();
    m_.net.layers.back() = Linear::zeros(last.in_features(), last.out_features());
  }

  Tensor logits(const Tensor& z, std::span<const std::size_t> t) const { return m_.forward(z, t); }
  Tensor logits(const Tensor& z, std::size_t t) const { return m_.forward(z, std::span(&t, 1)); }

  Tensor log_probs(const Tensor& z, std::size_t t) const { return log_softmax(logits(z, t)); }

  void check_class(std::size_t y) const {
    if (y >= num_classes()) {
      throw ContractError("prototype id " + std::to_string(y) + " outside [0, " + std::to_string(num_classes()) + ")");
    }
  }

  // d/dz log C(y | z, t) for every row of z ([n, latent_dim], flattened).
  std::vector<double> grad_logprob(const Tensor& z, std::size_t t, std::size_t y) const {
    check_class(y);
    Tensor input(z.shape(), z.values(), true);
    const std::vector<std::size_t> idx(input.dim(0), y);
    Tensor lp = sum(gather_last(log_softmax(logits(input, t)), idx));
    return gradients(lp, {input})[0];
  }

  std::vector<double> grad_logprob(std::span<const double> z, std::size_t t, std::size_t y) const {
    return grad_logprob(Tensor({1, z.size()}, std::vector<double>(z.begin(), z.end())), t, y);
  }

  ParameterList parameters() const {
    ParameterList p;
    m_.net.collect("net", p);
    return p;
  }

  GuidanceClassifierParams frozen() const {
    GuidanceClassifierParams c = *this;
    c.m_.net = m_.net.frozen();
    return c;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    m_.write(ck, "guidance_classifier");
    return ck;
  }

  static GuidanceClassifierParams from_checkpoint(const Checkpoint& ck) {
    GuidanceClassifierParams c;
    c.m_ = detail::TimeConditionedNet::read(ck, "guidance_classifier");
    return c;
  }

 private:
  detail::TimeConditionedNet m_;
};

// Anything mapping a latent batch [n, d] at step t to predicted noise [n, d].
template <typename D>
concept NoisePredictor = requires(const D& d, const Tensor& z, std::size_t t) {
  { d.predict_noise(z, t) } -> std::convertible_to<Tensor>;
};

// Anything returning d/dz log p(y | z, t) for a latent batch, flattened.
template <typename C>
concept GuidanceModel = requires(const C& c, const Tensor& z, std::size_t t, std::size_t y) {
  { c.grad_logprob(z, t, y) } -> std::convertible_to<std::vector<double>>;
  { c.num_classes() } -> std::convertible_to<std::size_t>;
};

namespace detail {

inline std::size_t batch_rows(std::span<const double> z, std::size_t dim, std::span<Rng> rngs) {
  if (dim == 0 || z.size() % dim != 0) throw DimensionError("latent batch is not a multiple of the latent dim");
  const std::size_t rows = z.size() / dim;
  if (rngs.size() != 1 && rngs.size() != rows) throw DimensionError("need one RNG stream or one per row");
  return rows;
}

// Posterior mean from predicted noise.
template <NoisePredictor D>
std::vector<double> posterior_mean(std::span<const double> z, std::size_t rows, std::size_t dim, std::size_t t,
                                   const D& denoiser, const NoiseSchedule& s) {
  Tensor eps = denoiser.predict_noise(Tensor({rows, dim}, std::vector<double>(z.begin(), z.end())), t);
  if (eps.size() != z.size()) throw DimensionError("noise predictor output does not match latent batch");
  const double coef = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
  const double inv = 1.0 / std::sqrt(1.0 - s.beta[t]);
  std::vector<double> mu(z.size());
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = (z[i] - coef * eps[i]) * inv;
  return mu;
}

inline void add_step_noise(std::vector<double>& mu, std::size_t dim, std::size_t t, const NoiseSchedule& s,
                           std::span<Rng> rngs) {
  if (t == 0) return;
  const double sigma = std::sqrt(s.beta[t]);
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += sigma * standard_normal(rngs.size() == 1 ? rngs[0] : rngs[i / dim]);
}

}  // namespace detail

// z: rows x dim latents (flattened). Row r draws its noise from rngs[r], or
// every row from rngs[0] when a single stream is given. No noise at t = 0.
template <NoisePredictor D>
std::vector<double> reverse_step(std::span<const double> z, std::size_t dim, std::size_t t, const D& denoiser,
                                 const NoiseSchedule& s, std::span<Rng> rngs) {
  s.check_step(t);
  const std::size_t rows = detail::batch_rows(z, dim, rngs);
  auto mu = detail::posterior_mean(z, rows, dim, t, denoiser, s);
  detail::add_step_noise(mu, dim, t, s, rngs);
  return mu;
}

template <NoisePredictor D>
std::vector<double> reverse_step(std::span<const double> z, std::size_t t, const D& denoiser, const NoiseSchedule& s,
                                 Rng& rng) {
  return reverse_step(z, z.size(), t, denoiser, s, std::span<Rng>(&rng, 1));
}

// Mean shifted by w * beta_t * grad log C(y | z_t, t). The classifier is not
// consulted when w == 0, so that case is the unguided step exactly.
template <NoisePredictor D, GuidanceModel C>
std::vector<double> guided_reverse_step(std::span<const double> z, std::size_t dim, std::size_t t, std::size_t y,
                                        const D& denoiser, const C& classifier, double w, const NoiseSchedule& s,
                                        std::span<Rng> rngs) {
  s.check_step(t);
  if (!(w >= 0.0) || !std::isfinite(w)) throw ContractError("guidance scale must be finite and >= 0");
  if (y >= classifier.num_classes()) throw ContractError("prototype id " + std::to_string(y) + " is not a class");
  const std::size_t rows = detail::batch_rows(z, dim, rngs);
  auto mu = detail::posterior_mean(z, rows, dim, t, denoiser, s);
  if (w != 0.0) {
    const auto g = classifier.grad_logprob(Tensor({rows, dim}, std::vector<double>(z.begin(), z.end())), t, y);
    if (g.size() != mu.size()) throw DimensionError("classifier gradient does not match latent batch");
    const double shift = w * s.beta[t];
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += shift * g[i];
  }
  detail::add_step_noise(mu, dim, t, s, rngs);
  return mu;
}

template <NoisePredictor D, GuidanceModel C>
std::vector<double> guided_reverse_step(std::span<const double> z, std::size_t t, std::size_t y, const D& denoiser,
                                        const C& classifier, double w, const NoiseSchedule& s, Rng& rng) {
  return guided_reverse_step(z, z.size(), t, y, denoiser, classifier, w, s, std::span<Rng>(&rng, 1));
}

struct SampleRequest {
  std::size_t prototype = 0;
  double guidance_w = 0.0;
  std::uint64_t seed = 0;
  std::size_t count = 0;
};

namespace detail {

// Runs the full chain for samples [first, first + rows) of a request.
template <NoisePredictor D, GuidanceModel C>
std::vector<double> run_chain(const D& denoiser, const C* classifier, std::size_t dim, const NoiseSchedule& s,
                              const SampleRequest& req, std::size_t first, std::size_t rows) {
  std::vector<double> z(rows * dim);
  for (std::size_t r = 0; r < rows; ++r) {
    Rng init = make_stream(req.seed, {first + r, s.T});
    for (std::size_t j = 0; j < dim; ++j) z[r * dim + j] = standard_normal(init);
  }
  std::vector<Rng> rngs(rows);
  for (std::size_t t = s.T; t-- > 0;) {
    for (std::size_t r = 0; r < rows; ++r) rngs[r] = make_stream(req.seed, {first + r, t});
    z = classifier ? guided_reverse_step(z, dim, t, req.prototype, denoiser, *classifier, req.guidance_w, s, rngs)
                   : reverse_step(z, dim, t, denoiser, s, std::span<Rng>(rngs));
  }
  return z;
}

struct NoGuidance {
  std::vector<double> grad_logprob(const Tensor&, std::size_t, std::size_t) const { return {}; }
  std::size_t num_classes() const { return 0; }
};

}  // namespace detail

// Final z_0 latents (count x dim), chunked across threads; each sample's
// noise depends only on (seed, sample index, timestep).
template <NoisePredictor D, GuidanceModel C>
std::vector<double> sample_latents(const D& denoiser, const C* classifier, std::size_t dim, const NoiseSchedule& s,
                                   const SampleRequest& req) {
  if (!classifier && req.guidance_w != 0.0) throw ContractError("guided sampling needs a classifier");
  if (classifier && req.prototype >= classifier->num_classes()) {
    throw ContractError("prototype id " + std::to_string(req.prototype) + " is not a class");
  }
  constexpr std::size_t chunk = 64;
  const std::size_t chunks = (req.count + chunk - 1) / chunk;
  std::vector<std::vector<double>> parts(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t first = c * chunk;
    parts[c] = detail::run_chain(denoiser, classifier, dim, s, req, first, std::min(chunk, req.count - first));
  });
  std::vector<double> out;
  out.reserve(req.count * dim);
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

template <NoisePredictor D>
std::vector<double> sample_latents(const D& denoiser, std::size_t dim, const NoiseSchedule& s,
                                   const SampleRequest& req) {
  return sample_latents(denoiser, static_cast<const detail::NoGuidance*>(nullptr), dim, s, req);
}

// Decoded samples with their prototype ids.
struct SampleBatch {
  std::size_t dim = 0;
  std::vector<double> data;
  std::vector<std::uint32_t> prototype_ids;

  std::size_t rows() const { return prototype_ids.size(); }
  std::span<const double> row(std::size_t i) const { return std::span(data).subspan(i * dim, dim); }

  void append(const SampleBatch& other) {
    if (rows() == 0) dim = other.dim;
    if (other.rows() > 0 && other.dim != dim) throw DimensionError("sample batches differ in dim");
    data.insert(data.end(), other.data.begin(), other.data.end());
    prototype_ids.insert(prototype_ids.end(), other.prototype_ids.begin(), other.prototype_ids.end());
  }
};

class LatentDiffusionSampler {
 public:
  LatentDiffusionSampler(const DenoiserParams& denoiser, const GuidanceClassifierParams& classifier,
                         NoiseSchedule schedule, const AutoencoderParams& ae)
      : denoiser_(denoiser.frozen()),
        classifier_(classifier.frozen()),
        schedule_(std::move(schedule)),
        ae_(ae) {
    const std::size_t d = denoiser_.latent_dim();
    if (classifier_.latent_dim() != d || ae_.dims.latent_dim() != d) {
      throw ContractError("sampler: latent dims disagree (denoiser " + std::to_string(d) + ", classifier " +
                          std::to_string(classifier_.latent_dim()) + ", autoencoder " +
                          std::to_string(ae_.dims.latent_dim()) + ")");
    }
    if (denoiser_.timesteps() != schedule_.T || classifier_.timesteps() != schedule_.T) {
      throw ContractError("sampler: model timestep ranges do not match the schedule");
    }
    ae_.validate();
  }

  std::size_t latent_dim() const { return denoiser_.latent_dim(); }
  std::size_t num_classes() const { return classifier_.num_classes(); }
  const NoiseSchedule& schedule() const { return schedule_; }

  std::vector<double> latents(const SampleRequest& req) const {
    return sample_latents(denoiser_, &classifier_, latent_dim(), schedule_, req);
  }

  SampleBatch sample(const SampleRequest& req) const {
    classifier_.check_class(req.prototype);
    SampleBatch out;
    out.dim = ae_.dims.input_dim();
    if (req.count == 0) return out;
    auto z = latents(req);
    out.data = ae_.decode(Tensor({req.count, latent_dim()}, std::move(z))).values();
    out.prototype_ids.assign(req.count, static_cast<std::uint32_t>(req.prototype));
    return out;
  }

 private:
  DenoiserParams denoiser_;
  GuidanceClassifierParams classifier_;
  NoiseSchedule schedule_;
  AutoencoderParams ae_;
};

struct DiffusionTrainConfig {
  std::vector<std::size_t> hidden{128, 128};
  std::size_t embed_dim = 32;
  Activation activation = Activation::relu;
  std::size_t steps = 2000;
  std::size_t batch_size = 128;
  AdamWConfig optimizer{};
  bool cosine = true;
  std::uint64_t seed = 0;
};

struct TrainedDenoiser {
  DenoiserParams params;
  std::vector<double> step_losses;
};

namespace detail {

struct NoisyBatch {
  std::vector<double> z0;
  std::vector<double> zt;
  std::vector<double> noise;
  std::vector<std::size_t> t;
  std::vector<std::size_t> index;
};

inline NoisyBatch draw_noisy_batch(std::span<const double> latents, std::size_t dim, std::size_t batch,
                                   const NoiseSchedule& s, Rng& rng) {
  const std::size_t n = latents.size() / dim;
  NoisyBatch b;
  b.z0.resize(batch * dim);
  b.zt.resize(batch * dim);
  b.noise.resize(batch * dim);
  for (std::size_t r = 0; r < batch; ++r) {
    const std::size_t i = uniform_index(rng, n);
    const std::size_t t = uniform_index(rng, s.T);
    b.index.push_back(i);
    b.t.push_back(t);
    const double a = std::sqrt(s.alpha_bar[t]), c = std::sqrt(1.0 - s.alpha_bar[t]);
    for (std::size_t j = 0; j < dim; ++j) {
      const double x = latents[i * dim + j], e = standard_normal(rng);
      b.z0[r * dim + j] = x;
      b.noise[r * dim + j] = e;
      b.zt[r * dim + j] = a * x + c * e;
    }
  }
  return b;
}

inline void check_latents(std::span<const double> latents, std::size_t dim, const char* who) {
  if (latents.empty()) throw ContractError(std::string(who) + ": empty latent dataset");
  if (dim == 0 || latents.size() % dim != 0) throw DimensionError(std::string(who) + ": latents not a multiple of dim");
}

}  // namespace detail

// Minimizes E || noise - predicted_noise(z_t, t) ||^2 over uniform t.
inline TrainedDenoiser train_denoiser(std::span<const double> latents, std::size_t dim, const NoiseSchedule& s,
                                      const DiffusionTrainConfig& cfg) {
  detail::check_latents(latents, dim, "train_denoiser");
  Rng rng(cfg.seed);
  TrainedDenoiser out;
  out.params = DenoiserParams(dim, s.T, cfg.embed_dim, cfg.hidden, cfg.activation, rng);
  ParameterList params = out.params.parameters();
  AdamW opt(params, cfg.optimizer);
  if (cfg.cosine) opt.use_cosine_schedule(std::max<std::size_t>(1, cfg.steps));
  const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto b = detail::draw_noisy_batch(latents, dim, batch, s, rng);
    opt.zero_grad();
    Tensor pred = out.params.predict(Tensor({batch, dim}, std::move(b.zt)), b.t);
    Tensor loss = scale(sum(square(sub(pred, Tensor({batch, dim}, std::move(b.noise))))), 1.0 / batch);
    backward(loss);
    opt.set_progress(step);
    opt.step();
    out.step_losses.push_back(loss.item());
  }
  return out;
}

struct TrainedClassifier {
  GuidanceClassifierParams params;
  double clean_accuracy = 0.0;
  std::vector<double> step_losses;
};

// Accuracy of argmax logits on latents noised to step t (t = 0 with
// noise_rng == nullptr scores the clean latents).
inline double classifier_accuracy(const GuidanceClassifierParams& c, std::span<const double> latents,
                                  std::span<const std::size_t> labels, std::size_t t, Rng* noise_rng,
                                  const NoiseSchedule* s = nullptr) {
  const std::size_t dim = c.latent_dim();
  const std::size_t n = labels.size();
  if (n == 0) return 0.0;
  std::vector<double> z(latents.begin(), latents.end());
  if (noise_rng) {
    if (!s) throw ContractError("classifier_accuracy: noising needs a schedule");
    for (std::size_t r = 0; r < n; ++r) {
      std::vector<double> e(dim);
      for (double& v : e) v = standard_normal(*noise_rng);
      auto zt = forward_diffuse(std::span(latents).subspan(r * dim, dim), t, e, *s);
      std::copy(zt.begin(), zt.end(), z.begin() + static_cast<std::ptrdiff_t>(r * dim));
    }
  }
  Tensor logits = c.frozen().logits(Tensor({n, dim}, std::move(z)), t);
  const std::size_t k = c.num_classes();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[r * k + j] > logits[r * k + best]) best = j;
    correct += best == labels[r];
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// Cross-entropy over noised latents with t uniform.
inline TrainedClassifier train_guidance_classifier(std::span<const double> latents, std::size_t dim,
                                                   std::span<const std::size_t> labels, std::size_t num_classes,
                                                   const NoiseSchedule& s, const DiffusionTrainConfig& cfg) {
  detail::check_latents(latents, dim, "train_guidance_classifier");
  if (labels.size() != latents.size() / dim) throw DimensionError("train_guidance_classifier: one label per latent");
  std::vector<std::size_t> seen;
  for (std::size_t y : labels) {
    if (y >= num_classes) throw ContractError("label " + std::to_string(y) + " >= class count");
    if (std::find(seen.begin(), seen.end(), y) == seen.end()) seen.push_back(y);
  }
  if (seen.size() < 2) throw ContractError("train_guidance_classifier: need at least two distinct labels");
  Rng rng(cfg.seed);
  TrainedClassifier out;
  out.params = GuidanceClassifierParams(dim, num_classes, s.T, cfg.embed_dim, cfg.hidden, cfg.activation, rng);
  ParameterList params = out.params.parameters();
  AdamW opt(params, cfg.optimizer);
  if (cfg.cosine) opt.use_cosine_schedule(std::max<std::size_t>(1, cfg.steps));
  const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto b = detail::draw_noisy_batch(latents, dim, batch, s, rng);
    std::vector<std::size_t> y(batch);
    for (std::size_t r = 0; r < batch; ++r) y[r] = labels[b.index[r]];
    opt.zero_grad();
    Tensor lp = log_softmax(out.params.logits(Tensor({batch, dim}, std::move(b.zt)), b.t));
    Tensor loss = scale(sum(gather_last(lp, y)), -1.0 / batch);
    backward(loss);
    opt.set_progress(step);
    opt.step();
    out.step_losses.push_back(loss.item());
  }
  out.clean_accuracy = classifier_accuracy(out.params, latents, labels, 0, nullptr);
  return out;
}

// PSMP sample container: magic, version, rows, dim, f32 payload, then one
// u32 prototype id per row.
inline constexpr std::uint32_t kSampleVersion = 1;

inline std::vector<char> encode_samples(const SampleBatch& b) {
  io::ByteWriter w;
  w.bytes("PSMP");
  w.u32(kSampleVersion);
  w.u64(b.rows());
  w.u32(static_cast<std::uint32_t>(b.dim));
  for (double x : b.data) w.f32(static_cast<float>(x));
  for (std::uint32_t id : b.prototype_ids) w.u32(id);
  return w.take();
}

inline SampleBatch decode_samples(std::vector<char> bytes) {
  io::ByteReader r(std::move(bytes), "sample file");
  r.expect_magic("PSMP");
  const std::uint32_t version = r.u32();
  if (version != kSampleVersion) throw ContractError("unsupported sample version " + std::to_string(version));
  SampleBatch b;
  const std::uint64_t rows = r.u64();
  b.dim = r.u32();
  if (r.remaining() / (4 * b.dim + 4) < rows) throw ContractError("sample file: truncated payload");
  b.data.resize(rows * b.dim);
  for (double& x : b.data) x = static_cast<double>(r.f32());
  b.prototype_ids.resize(rows);
  for (auto& id : b.prototype_ids) id = r.u32();
  if (!r.at_end()) throw ContractError("sample file: trailing bytes");
  return b;
}

inline void save_samples(const std::filesystem::path& path, const SampleBatch& b) {
  io::write_file(path, encode_samples(b));
}

inline SampleBatch load_samples(const std::filesystem::path& path) { return decode_samples(io::read_file(path)); }

}  // namespace protodiff
