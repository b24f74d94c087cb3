#pragma once

// Small synthetic inputs for the full pipeline: two cohorts of 2-D patch
// embeddings with planted clusters, a subtyping task and a survival task.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "protodiff/embeddings.hpp"
#include "protodiff/io.hpp"
#include "protodiff/random.hpp"

namespace protodiff::toy {

using Point = std::array<double, 2>;

inline constexpr double kClusterSd = 0.35;

inline const std::vector<Point>& lung_centers() {
  static const std::vector<Point> c{{-2.5, 0.0}, {2.5, 0.0}, {0.0, 2.5}};
  return c;
}

inline const std::vector<Point>& prad_centers() {
  static const std::vector<Point> c{{0.0, -2.5}, {2.5, -2.5}};
  return c;
}

inline void push_point(std::vector<double>& out, const Point& center, Rng& rng) {
  out.push_back(center[0] + kClusterSd * standard_normal(rng));
  out.push_back(center[1] + kClusterSd * standard_normal(rng));
}

inline EmbeddingCollection cohort(const std::string& id, const std::vector<Point>& centers, std::size_t per_center,
                                  Rng& rng) {
  std::vector<double> data;
  std::vector<std::string> refs;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    for (std::size_t i = 0; i < per_center; ++i) {
      push_point(data, centers[c], rng);
      refs.push_back(id + "/patch_" + std::to_string(refs.size()));
    }
  }
  return EmbeddingCollection(id, 2, std::move(data), std::move(refs));
}

// Bag of `patches` points, each from `primary` with probability `mix`,
// otherwise from `secondary`.
inline EmbeddingCollection bag(const std::string& slide, const Point& primary, const Point& secondary, double mix,
                               std::size_t patches, Rng& rng) {
  std::vector<double> data;
  std::vector<std::string> refs;
  for (std::size_t i = 0; i < patches; ++i) {
    push_point(data, uniform01(rng) < mix ? primary : secondary, rng);
    refs.push_back(slide + "/patch_" + std::to_string(i));
  }
  return EmbeddingCollection(slide, 2, std::move(data), std::move(refs));
}

inline nlohmann::ordered_json config(std::uint64_t seed) {
  using J = nlohmann::ordered_json;
  return J{{"seed", seed},
           {"output", "runs"},
           {"inputs", {{"cohorts", "cohorts"}}},
           {"curate", {{"k_min", 1}, {"k_max", 6}, {"subsample", 10000}, {"restarts", 8}}},
           {"autoencoder",
            {{"latent_dim", 2}, {"hidden", {16}}, {"activation", "tanh"}, {"epochs", 60}, {"batch_size", 32}, {"lr", 5e-3}}},
           {"diffusion",
            {{"timesteps", 100},
             {"beta_min", 1e-3},
             {"beta_max", 0.2},
             {"schedule", "linear"},
             {"hidden", {64, 64}},
             {"embed_dim", 16},
             {"steps", 1500},
             {"batch_size", 128},
             {"lr", 2e-3}}},
           {"classifier", {{"hidden", {32, 32}}, {"embed_dim", 16}, {"steps", 600}, {"batch_size", 128}, {"lr", 2e-3}}},
           {"dataset", {{"mode", "hybrid"}, {"n_per", 100}, {"n_per_real", 100}, {"guidance_w", 2.0}}},
           {"mil",
            {{"variants", J::array({J{{"name", "abmil-32"}, {"hidden", 32}}, J{{"name", "abmil-64"}, {"hidden", 64}}})},
             {"ratios", {{"train", 0.6}, {"val", 0.2}, {"test", 0.2}}},
             {"max_epochs", 20},
             {"patience", 10},
             {"lr", 1e-3}}},
           {"tasks", J::array({J{{"name", "lung"}, {"type", "subtyping"}, {"bags", "tasks/lung/bags"}, {"table", "tasks/lung/labels.csv"}},
                               J{{"name", "prad"}, {"type", "survival"}, {"bags", "tasks/prad/bags"}, {"table", "tasks/prad/labels.csv"}}})}};
}

// Writes cohorts/, tasks/ and config.json under dir.
inline void write_inputs(const std::filesystem::path& dir, std::uint64_t seed, std::size_t slides = 60) {
  Rng rng = make_stream(seed, {0});
  save_embeddings(dir / "cohorts" / "lung.pemb", cohort("lung", lung_centers(), 100, rng));
  save_embeddings(dir / "cohorts" / "prad.pemb", cohort("prad", prad_centers(), 100, rng));

  // Subtyping: consecutive slides share a patient; the class sets which
  // cluster dominates the bag.
  Rng lung_rng = make_stream(seed, {1});
  std::ostringstream lung;
  lung << "slide_id,patient_id,label\n";
  const auto& lc = lung_centers();
  for (std::size_t i = 0; i < slides; ++i) {
    const std::size_t patient = i * 5 / 6;
    const bool luad = patient % 2 == 0;
    const std::string slide = "lung-" + std::to_string(i);
    save_embeddings(dir / "tasks" / "lung" / "bags" / (slide + ".pemb"),
                    bag(slide, luad ? lc[0] : lc[1], lc[2], 0.6, 24, lung_rng));
    lung << slide << ",lung-p" << patient << ',' << (luad ? "LUAD" : "LUSC") << '\n';
  }
  io::write_text(dir / "tasks" / "lung" / "labels.csv", lung.str());

  // Survival: the share of patches from the second cluster raises the hazard.
  Rng prad_rng = make_stream(seed, {2});
  std::ostringstream prad;
  prad << std::fixed << std::setprecision(6) << "slide_id,patient_id,duration,event\n";
  const auto& pc = prad_centers();
  for (std::size_t i = 0; i < slides; ++i) {
    const double risk = uniform01(prad_rng);
    const std::string slide = "prad-" + std::to_string(i);
    save_embeddings(dir / "tasks" / "prad" / "bags" / (slide + ".pemb"), bag(slide, pc[1], pc[0], risk, 24, prad_rng));
    const double hazard = 0.15 * std::exp(4.0 * risk);
    const double event_time = -std::log(1.0 - uniform01(prad_rng)) / hazard;
    const double censor_time = 12.0 * uniform01(prad_rng);
    const bool event = event_time <= censor_time;
    prad << slide << ",prad-p" << i << ',' << std::min(event_time, censor_time) << ',' << (event ? 1 : 0) << '\n';
  }
  io::write_text(dir / "tasks" / "prad" / "labels.csv", prad.str());

  io::write_text(dir / "config.json", config(seed).dump(2) + "\n");
}

}  // namespace protodiff::toy
