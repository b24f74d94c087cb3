#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "protodiff/autoencoder.hpp"
#include "protodiff/dataset.hpp"
#include "protodiff/diffusion.hpp"
#include "protodiff/mil.hpp"
#include "protodiff/prototypes.hpp"
#include "protodiff/stats.hpp"

namespace protodiff {

inline constexpr std::string_view kCodeVersion = "protodiff 0.1.0";

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 failed");
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) os << std::setw(2) << static_cast<unsigned>(md[i]);
  return os.str();
}

inline std::string file_sha256(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return sha256_hex({bytes.data(), bytes.size()});
}

enum class Stage { curate, train_ae, train_diffusion, train_classifier, build_dataset, train_mil, evaluate };

inline constexpr std::array<Stage, 7> kStages{Stage::curate,           Stage::train_ae,      Stage::train_diffusion,
                                              Stage::train_classifier, Stage::build_dataset, Stage::train_mil,
                                              Stage::evaluate};

inline const char* stage_name(Stage s) {
  static constexpr std::array<const char*, 7> names{"curate",        "train-ae",  "train-diffusion", "train-classifier",
                                                    "build-dataset", "train-mil", "evaluate"};
  return names[static_cast<std::size_t>(s)];
}

inline Stage parse_stage(std::string_view name) {
  for (Stage s : kStages)
    if (name == stage_name(s)) return s;
  throw ConfigError("unknown stage '" + std::string(name) + "'");
}

// Stages whose artifacts a stage reads.
inline std::vector<Stage> stage_dependencies(Stage s) {
  switch (s) {
    case Stage::train_diffusion:
      return {Stage::curate, Stage::train_ae};
    case Stage::train_classifier:
      return {Stage::curate, Stage::train_ae, Stage::train_diffusion};
    case Stage::build_dataset:
      return {Stage::curate, Stage::train_ae, Stage::train_diffusion, Stage::train_classifier};
    case Stage::evaluate:
      return {Stage::train_mil};
    default:
      return {};
  }
}

enum class TaskKind { subtyping, survival };

struct CurateSection {
  std::size_t k_min = 1;
  std::size_t k_max = 8;
  std::size_t subsample = 10000;
  std::size_t restarts = 32;
  std::size_t max_iter = 300;
  std::optional<std::uint64_t> seed;
};

struct AutoencoderSection {
  std::size_t latent_dim = 64;
  std::vector<std::size_t> hidden{64};
  Activation activation = Activation::tanh;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double holdout_fraction = 0.0;
  AdamWConfig optimizer{};
  std::optional<std::uint64_t> seed;
};

struct DiffusionSection {
  std::size_t timesteps = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  NoiseKind schedule = NoiseKind::linear;
  DiffusionTrainConfig train{};
  std::optional<std::uint64_t> seed;
};

struct ClassifierSection {
  DiffusionTrainConfig train{};
  std::optional<std::uint64_t> seed;
};

struct DatasetSection {
  bool hybrid = true;
  std::size_t n_per = 3000;
  std::size_t n_per_real = 3000;
  double guidance_w = 2.0;
  std::optional<std::uint64_t> seed;
};

struct MilVariant {
  std::string name;
  std::size_t hidden = 256;
};

struct MilSection {
  MilTrainConfig train{};
  SplitRatios ratios{};
  std::vector<MilVariant> variants{{"abmil-256", 256}};
  std::optional<std::uint64_t> seed;
};

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::subtyping;
  std::filesystem::path bags;
  std::filesystem::path table;
};

namespace detail {

inline bool is_safe_name(const std::string& s) {
  if (s.empty() || s.front() == '.') return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.';
  });
}

// Typed reader over one JSON object; every key must be consumed.
class ConfigSection {
 public:
  ConfigSection(const nlohmann::json* j, std::string name) : j_(j), name_(std::move(name)) {
    if (j_ && !j_->is_object()) throw ConfigError(name_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_ && j_->contains(key); }

  const nlohmann::json* child(const std::string& key) {
    used_.insert(key);
    return has(key) ? &j_->at(key) : nullptr;
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    if (!has(key)) return fallback;
    return convert<T>(j_->at(key), key);
  }

  template <typename T>
  T require(const std::string& key) {
    used_.insert(key);
    if (!has(key)) throw ConfigError(name_ + "." + key + " is required");
    return convert<T>(j_->at(key), key);
  }

  std::optional<std::uint64_t> seed() {
    used_.insert("seed");
    if (!has("seed")) return std::nullopt;
    return convert<std::uint64_t>(j_->at("seed"), "seed");
  }

  void finish() const {
    if (!j_) return;
    for (const auto& item : j_->items())
      if (!used_.count(item.key())) throw ConfigError(name_ + ": unknown key '" + item.key() + "'");
  }

  template <typename T>
  T convert(const nlohmann::json& v, const std::string& key) const {
    const std::string where = name_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError(where + ": expected a non-negative integer");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      if (!v.is_array()) throw ConfigError(where + ": expected an array of integers");
      T out;
      for (const auto& x : v) {
        if (!x.is_number_unsigned() || x.get<std::size_t>() == 0) throw ConfigError(where + ": expected positive integers");
        out.push_back(x.get<std::size_t>());
      }
      return out;
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

 private:
  const nlohmann::json* j_;
  std::string name_;
  std::set<std::string> used_;
};

template <typename T>
T parse_or_config_error(const std::string& where, const std::string& text, T (*parse)(const std::string&)) {
  try {
    return parse(text);
  } catch (const ContractError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline Activation config_activation(ConfigSection& s, Activation fallback, const std::string& where) {
  if (!s.has("activation")) {
    s.get<std::string>("activation", "");
    return fallback;
  }
  return parse_or_config_error(where + ".activation", s.require<std::string>("activation"), &parse_activation);
}

inline AdamWConfig config_optimizer(ConfigSection& s, const std::string& where) {
  AdamWConfig o;
  o.lr = s.get("lr", o.lr);
  o.weight_decay = s.get("weight_decay", o.weight_decay);
  if (!(o.lr > 0.0) || !(o.weight_decay >= 0.0)) throw ConfigError(where + ": lr must be > 0 and weight_decay >= 0");
  return o;
}

inline void require_positive(std::size_t v, const std::string& where) {
  if (v == 0) throw ConfigError(where + " must be >= 1");
}

inline DiffusionTrainConfig config_network(ConfigSection& s, const std::string& where) {
  DiffusionTrainConfig t;
  t.hidden = s.get("hidden", t.hidden);
  t.embed_dim = s.get("embed_dim", t.embed_dim);
  t.activation = config_activation(s, t.activation, where);
  t.steps = s.get("steps", t.steps);
  t.batch_size = s.get("batch_size", t.batch_size);
  t.optimizer = config_optimizer(s, where);
  require_positive(t.embed_dim, where + ".embed_dim");
  require_positive(t.steps, where + ".steps");
  require_positive(t.batch_size, where + ".batch_size");
  return t;
}

}  // namespace detail

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output = "runs";
  std::filesystem::path cohorts;
  std::optional<std::filesystem::path> images;  // defaults to cohorts
  CurateSection curate;
  AutoencoderSection autoencoder;
  DiffusionSection diffusion;
  ClassifierSection classifier;
  DatasetSection dataset;
  MilSection mil;
  std::vector<TaskSpec> tasks;
  std::string config_hash;  // SHA-256 of the canonical config without "output"
  std::string run_id;       // prefix of SHA-256(config_hash, code version)

  std::uint64_t stage_seed(Stage s) const {
    std::optional<std::uint64_t> explicit_seed;
    switch (s) {
      case Stage::curate:
        explicit_seed = curate.seed;
        break;
      case Stage::train_ae:
        explicit_seed = autoencoder.seed;
        break;
      case Stage::train_diffusion:
        explicit_seed = diffusion.seed;
        break;
      case Stage::train_classifier:
        explicit_seed = classifier.seed;
        break;
      case Stage::build_dataset:
        explicit_seed = dataset.seed;
        break;
      case Stage::train_mil:
        explicit_seed = mil.seed;
        break;
      case Stage::evaluate:
        break;
    }
    return explicit_seed.value_or(stream_seed(seed, {static_cast<std::uint64_t>(s) + 1}));
  }

  std::filesystem::path image_dir() const { return images.value_or(cohorts); }

  // Relative paths resolve against base_dir (the config file's directory).
  static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    using detail::ConfigSection;
    PipelineConfig c;
    ConfigSection top(&j, "config");
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path path(p);
      return path.is_absolute() ? path : base_dir / path;
    };
    c.seed = top.get<std::uint64_t>("seed", 0);
    c.output = resolve(top.get<std::string>("output", "runs"));

    ConfigSection inputs(top.child("inputs"), "inputs");
    c.cohorts = resolve(inputs.require<std::string>("cohorts"));
    if (inputs.has("images")) c.images = resolve(inputs.require<std::string>("images"));
    inputs.finish();

    ConfigSection cu(top.child("curate"), "curate");
    c.curate.k_min = cu.get("k_min", c.curate.k_min);
    c.curate.k_max = cu.get("k_max", c.curate.k_max);
    c.curate.subsample = cu.get("subsample", c.curate.subsample);
    c.curate.restarts = cu.get("restarts", c.curate.restarts);
    c.curate.max_iter = cu.get("max_iter", c.curate.max_iter);
    c.curate.seed = cu.seed();
    cu.finish();
    detail::require_positive(c.curate.k_min, "curate.k_min");
    if (c.curate.k_max < c.curate.k_min + 2) throw ConfigError("curate: k_max must be at least k_min + 2");
    detail::require_positive(c.curate.subsample, "curate.subsample");
    detail::require_positive(c.curate.restarts, "curate.restarts");
    detail::require_positive(c.curate.max_iter, "curate.max_iter");

    ConfigSection ae(top.child("autoencoder"), "autoencoder");
    c.autoencoder.latent_dim = ae.get("latent_dim", c.autoencoder.latent_dim);
    c.autoencoder.hidden = ae.get("hidden", c.autoencoder.hidden);
    c.autoencoder.activation = detail::config_activation(ae, c.autoencoder.activation, "autoencoder");
    c.autoencoder.epochs = ae.get("epochs", c.autoencoder.epochs);
    c.autoencoder.batch_size = ae.get("batch_size", c.autoencoder.batch_size);
    c.autoencoder.holdout_fraction = ae.get("holdout_fraction", c.autoencoder.holdout_fraction);
    c.autoencoder.optimizer = detail::config_optimizer(ae, "autoencoder");
    c.autoencoder.seed = ae.seed();
    ae.finish();
    detail::require_positive(c.autoencoder.latent_dim, "autoencoder.latent_dim");
    detail::require_positive(c.autoencoder.epochs, "autoencoder.epochs");
    detail::require_positive(c.autoencoder.batch_size, "autoencoder.batch_size");
    if (!(c.autoencoder.holdout_fraction >= 0.0 && c.autoencoder.holdout_fraction < 1.0)) {
      throw ConfigError("autoencoder.holdout_fraction must be in [0, 1)");
    }

    ConfigSection df(top.child("diffusion"), "diffusion");
    c.diffusion.timesteps = df.get("timesteps", c.diffusion.timesteps);
    c.diffusion.beta_min = df.get("beta_min", c.diffusion.beta_min);
    c.diffusion.beta_max = df.get("beta_max", c.diffusion.beta_max);
    if (df.has("schedule")) {
      c.diffusion.schedule =
          detail::parse_or_config_error("diffusion.schedule", df.require<std::string>("schedule"), &parse_noise_kind);
    } else {
      df.get<std::string>("schedule", "");
    }
    c.diffusion.train = detail::config_network(df, "diffusion");
    c.diffusion.seed = df.seed();
    df.finish();
    try {
      build_schedule(c.diffusion.timesteps, c.diffusion.beta_min, c.diffusion.beta_max, c.diffusion.schedule);
    } catch (const ContractError& e) {
      throw ConfigError(std::string("diffusion: ") + e.what());
    }

    ConfigSection cl(top.child("classifier"), "classifier");
    c.classifier.train = detail::config_network(cl, "classifier");
    c.classifier.seed = cl.seed();
    cl.finish();

    ConfigSection ds(top.child("dataset"), "dataset");
    const auto mode = ds.get<std::string>("mode", "hybrid");
    if (mode != "hybrid" && mode != "synthetic") throw ConfigError("dataset.mode must be 'synthetic' or 'hybrid'");
    c.dataset.hybrid = mode == "hybrid";
    c.dataset.n_per = ds.get("n_per", c.dataset.n_per);
    c.dataset.n_per_real = ds.get("n_per_real", c.dataset.n_per);
    c.dataset.guidance_w = ds.get("guidance_w", c.dataset.guidance_w);
    c.dataset.seed = ds.seed();
    ds.finish();
    detail::require_positive(c.dataset.n_per, "dataset.n_per");
    if (!(c.dataset.guidance_w >= 0.0)) throw ConfigError("dataset.guidance_w must be >= 0");

    ConfigSection mi(top.child("mil"), "mil");
    auto& mt = c.mil.train;
    mt.dropout = mi.get("dropout", mt.dropout);
    mt.max_epochs = mi.get("max_epochs", mt.max_epochs);
    mt.patience = mi.get("patience", mt.patience);
    mt.survival_bins = mi.get("survival_bins", mt.survival_bins);
    mt.optimizer = detail::config_optimizer(mi, "mil");
    if (const auto* r = mi.child("ratios")) {
      ConfigSection rs(r, "mil.ratios");
      c.mil.ratios.train = rs.require<double>("train");
      c.mil.ratios.val = rs.require<double>("val");
      c.mil.ratios.test = rs.require<double>("test");
      rs.finish();
    }
    if (const auto* v = mi.child("variants")) {
      if (!v->is_array() || v->empty()) throw ConfigError("mil.variants must be a non-empty array");
      c.mil.variants.clear();
      for (const auto& item : *v) {
        ConfigSection vs(&item, "mil.variants[]");
        MilVariant variant{vs.require<std::string>("name"), vs.get<std::size_t>("hidden", 256)};
        vs.finish();
        if (!detail::is_safe_name(variant.name)) throw ConfigError("mil variant name '" + variant.name + "' is not a safe file name");
        detail::require_positive(variant.hidden, "mil.variants[].hidden");
        c.mil.variants.push_back(variant);
      }
    }
    c.mil.seed = mi.seed();
    mi.finish();
    if (!(mt.dropout >= 0.0 && mt.dropout < 1.0)) throw ConfigError("mil.dropout must be in [0, 1)");
    detail::require_positive(mt.max_epochs, "mil.max_epochs");
    detail::require_positive(mt.survival_bins, "mil.survival_bins");
    const auto& ra = c.mil.ratios;
    if (ra.train < 0 || ra.val < 0 || ra.test < 0 || std::abs(ra.train + ra.val + ra.test - 1.0) > 1e-9) {
      throw ConfigError("mil.ratios must be non-negative and sum to 1");
    }
    std::set<std::string> variant_names;
    for (const auto& v : c.mil.variants)
      if (!variant_names.insert(v.name).second) throw ConfigError("duplicate mil variant '" + v.name + "'");

    if (const auto* t = top.child("tasks")) {
      if (!t->is_array()) throw ConfigError("tasks must be an array");
      std::set<std::string> names;
      for (const auto& item : *t) {
        ConfigSection ts(&item, "tasks[]");
        TaskSpec spec;
        spec.name = ts.require<std::string>("name");
        const auto type = ts.require<std::string>("type");
        if (type == "subtyping") {
          spec.kind = TaskKind::subtyping;
        } else if (type == "survival") {
          spec.kind = TaskKind::survival;
        } else {
          throw ConfigError("task '" + spec.name + "': type must be 'subtyping' or 'survival'");
        }
        spec.bags = resolve(ts.require<std::string>("bags"));
        spec.table = resolve(ts.require<std::string>("table"));
        ts.finish();
        if (!detail::is_safe_name(spec.name)) throw ConfigError("task name '" + spec.name + "' is not a safe file name");
        if (!names.insert(spec.name).second) throw ConfigError("duplicate task '" + spec.name + "'");
        c.tasks.push_back(std::move(spec));
      }
    }
    top.finish();

    nlohmann::json canonical = j;
    canonical.erase("output");
    c.config_hash = sha256_hex(canonical.dump());
    c.run_id = sha256_hex(c.config_hash + "\n" + std::string(kCodeVersion)).substr(0, 16);
    return c;
  }
};

inline nlohmann::json read_config_json(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file '" + path.string() + "' not found");
  try {
    return nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.what());
  }
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  return PipelineConfig::from_json(read_config_json(path), path.parent_path());
}

// Writes one stage into a scratch directory and moves it into place only
// after every artifact and the provenance record are on disk.
class StageRun {
 public:
  StageRun(const PipelineConfig& cfg, std::filesystem::path run_dir, Stage stage, std::ostream* log)
      : cfg_(cfg),
        run_dir_(std::move(run_dir)),
        stage_(stage),
        log_(log),
        partial_(run_dir_ / ("." + std::string(stage_name(stage)) + ".partial")) {
    std::filesystem::remove_all(partial_);
    std::filesystem::create_directories(partial_);
  }

  StageRun(const StageRun&) = delete;
  StageRun& operator=(const StageRun&) = delete;

  ~StageRun() {
    std::error_code ec;
    if (!committed_) std::filesystem::remove_all(partial_, ec);
  }

  const std::filesystem::path& dir() const { return partial_; }
  std::filesystem::path artifact(Stage s) const { return run_dir_ / stage_name(s); }
  std::uint64_t seed() const { return cfg_.stage_seed(stage_); }
  const std::string& config_hash() const { return cfg_.config_hash; }

  void input(const std::string& label, const std::filesystem::path& path) { inputs_[label] = file_sha256(path); }

  // Records an artifact of an earlier stage as an input and returns its path.
  std::filesystem::path upstream(Stage s, const std::string& rel) {
    const auto path = artifact(s) / rel;
    if (!std::filesystem::exists(path)) {
      throw DependencyError(std::string("stage '") + stage_name(stage_) + "' needs '" + rel + "' from stage '" +
                            stage_name(s) + "'");
    }
    input(std::string(stage_name(s)) + "/" + rel, path);
    return path;
  }

  void log(const std::string& msg) const {
    if (log_) *log_ << '[' << stage_name(stage_) << "] " << msg << '\n';
  }

  void warn(const std::string& msg) {
    warnings_.push_back(msg);
    log("warning: " + msg);
  }

  // Text artifacts get a leading "# config_hash=..." line.
  void write_text(const std::string& rel, const std::string& text) const {
    io::write_text(partial_ / rel, "# config_hash=" + cfg_.config_hash + "\n" + text);
  }

  void write_json(const std::string& rel, const nlohmann::ordered_json& body) const {
    nlohmann::ordered_json j;
    j["config_hash"] = cfg_.config_hash;
    j["stage"] = stage_name(stage_);
    for (const auto& item : body.items()) j[item.key()] = item.value();
    io::write_text(partial_ / rel, j.dump(2) + "\n");
  }

  void save_checkpoint(const std::string& rel, Checkpoint ck) const {
    ck.set("config_hash", cfg_.config_hash);
    ck.set("stage_seed", seed());
    ck.save(partial_ / rel);
  }

  void commit() {
    nlohmann::ordered_json p;
    p["stage"] = stage_name(stage_);
    p["run_id"] = cfg_.run_id;
    p["config_hash"] = cfg_.config_hash;
    p["code_version"] = kCodeVersion;
    p["seed"] = seed();
    p["inputs"] = nlohmann::ordered_json(inputs_);
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(partial_))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    nlohmann::ordered_json outputs = nlohmann::ordered_json::object();
    for (const auto& f : files) outputs[f.lexically_relative(partial_).generic_string()] = file_sha256(f);
    p["outputs"] = outputs;
    p["warnings"] = warnings_;
    io::write_text(partial_ / "provenance.json", p.dump(2) + "\n");
    const auto final_dir = artifact(stage_);
    std::filesystem::remove_all(final_dir);
    std::filesystem::rename(partial_, final_dir);
    committed_ = true;
  }

 private:
  const PipelineConfig& cfg_;
  std::filesystem::path run_dir_;
  Stage stage_;
  std::ostream* log_;
  std::filesystem::path partial_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> warnings_;
  bool committed_ = false;
};

namespace detail {

inline std::string fixed17(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::vector<EmbeddingCollection> load_cohort_dir(StageRun& run, const std::filesystem::path& dir,
                                                        const std::string& label) {
  if (!std::filesystem::is_directory(dir)) throw DependencyError(label + " directory '" + dir.string() + "' not found");
  auto cols = load_embedding_dir(dir);
  if (cols.empty()) throw DependencyError(label + " directory '" + dir.string() + "' has no .pemb files");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".pemb") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) run.input(label + "/" + f.filename().string(), f);
  std::set<std::string> ids;
  for (const auto& c : cols) {
    if (!is_safe_name(c.cohort_id)) throw ContractError("cohort id '" + c.cohort_id + "' is not a safe file name");
    if (!ids.insert(c.cohort_id).second) throw ContractError("duplicate cohort id '" + c.cohort_id + "'");
    if (c.dim != cols.front().dim) throw DimensionError("cohorts in '" + dir.string() + "' differ in dim");
  }
  return cols;
}

// Patch images paired row-for-row with the cohort embeddings.
inline std::vector<EmbeddingCollection> load_images(StageRun& run, const PipelineConfig& cfg,
                                                    const std::vector<EmbeddingCollection>* cohorts) {
  if (!cfg.images) return cohorts ? *cohorts : load_cohort_dir(run, cfg.cohorts, "cohorts");
  auto images = load_cohort_dir(run, *cfg.images, "images");
  if (cohorts) {
    if (images.size() != cohorts->size()) throw ConfigError("images and cohorts directories hold different cohorts");
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (images[i].cohort_id != (*cohorts)[i].cohort_id || images[i].rows() != (*cohorts)[i].rows()) {
        throw ConfigError("images for cohort '" + (*cohorts)[i].cohort_id + "' do not pair with its embeddings");
      }
    }
  }
  return images;
}

struct LatentData {
  PrototypeTable table;
  AutoencoderParams ae;
  std::vector<EmbeddingCollection> cohorts;
  std::vector<EmbeddingCollection> images;
  std::size_t dim = 0;
  std::vector<double> latents;
  std::vector<std::size_t> labels;  // global prototype id per latent
};

inline LatentData load_latent_data(StageRun& run, const PipelineConfig& cfg) {
  LatentData d;
  run.upstream(Stage::curate, "prototypes.pdck");
  run.upstream(Stage::curate, "prototypes.csv");
  d.table = load_prototype_table(run.artifact(Stage::curate));
  d.ae = AutoencoderParams::from_checkpoint(Checkpoint::load(run.upstream(Stage::train_ae, "autoencoder.pdck")));
  d.cohorts = load_cohort_dir(run, cfg.cohorts, "cohorts");
  d.images = load_images(run, cfg, &d.cohorts);
  if (d.images.front().dim != d.ae.dims.input_dim()) {
    throw ContractError("autoencoder input dim " + std::to_string(d.ae.dims.input_dim()) + " != image dim " +
                        std::to_string(d.images.front().dim));
  }
  d.dim = d.ae.dims.latent_dim();
  for (std::size_t i = 0; i < d.cohorts.size(); ++i) {
    const auto ids = d.table.assign(d.cohorts[i]);
    d.labels.insert(d.labels.end(), ids.begin(), ids.end());
    const auto& img = d.images[i];
    const auto z = d.ae.encode(Tensor({img.rows(), img.dim}, img.data)).values();
    d.latents.insert(d.latents.end(), z.begin(), z.end());
  }
  for (double v : d.latents)
    if (!std::isfinite(v)) throw NumericError("encoded latents contain non-finite values");
  return d;
}

inline double tail_mean(const std::vector<double>& losses, std::size_t window) {
  if (losses.empty()) return 0.0;
  const std::size_t n = std::min(window, losses.size());
  double s = 0.0;
  for (std::size_t i = losses.size() - n; i < losses.size(); ++i) s += losses[i];
  const double m = s / static_cast<double>(n);
  if (!std::isfinite(m)) throw NumericError("training loss diverged");
  return m;
}

inline std::string loss_csv(const std::vector<double>& losses) {
  std::ostringstream os;
  os << std::setprecision(17) << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
  return os.str();
}

}  // namespace detail

// Model outputs for one split, as written by train-mil.
struct Predictions {
  bool survival = false;
  std::vector<std::string> class_names;  // subtyping columns, in file order
  std::vector<std::string> slide_ids;
  std::vector<double> values;  // rows x class_names.size(), or one risk per row

  std::size_t width() const { return survival ? 1 : class_names.size(); }
};

inline std::string format_predictions(const Predictions& p) {
  std::ostringstream os;
  os << std::setprecision(17) << "slide_id";
  if (p.survival) {
    os << ",risk";
  } else {
    for (const auto& c : p.class_names) os << ",p_" << c;
  }
  os << '\n';
  for (std::size_t i = 0; i < p.slide_ids.size(); ++i) {
    os << p.slide_ids[i];
    for (std::size_t j = 0; j < p.width(); ++j) os << ',' << p.values[i * p.width() + j];
    os << '\n';
  }
  return os.str();
}

// Header slide_id,risk or slide_id,p_<class>...; '#' lines are skipped.
inline Predictions parse_predictions(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  if (rows.empty() || rows.front().size() < 2 || rows.front().front() != "slide_id") {
    throw ContractError("predictions need a header starting with slide_id");
  }
  Predictions p;
  const auto& header = rows.front();
  p.survival = header.size() == 2 && header[1] == "risk";
  if (!p.survival) {
    for (std::size_t j = 1; j < header.size(); ++j) {
      if (header[j].rfind("p_", 0) != 0) throw ContractError("prediction column '" + header[j] + "' is not p_<class>");
      p.class_names.push_back(header[j].substr(2));
    }
  }
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != header.size()) throw ContractError("predictions row " + std::to_string(r) + ": wrong cell count");
    p.slide_ids.push_back(rows[r][0]);
    for (std::size_t j = 1; j < header.size(); ++j) {
      try {
        p.values.push_back(std::stod(rows[r][j]));
      } catch (const std::logic_error&) {
        throw ContractError("predictions row " + std::to_string(r) + ": bad number '" + rows[r][j] + "'");
      }
    }
  }
  return p;
}

struct Evaluation {
  std::vector<MetricReport> reports;
  std::vector<std::string> warnings;
};

// Metrics for every model on one task's test split. Models after the first
// are compared against the first.
inline Evaluation evaluate_task(const std::string& task, const BagTable& truth,
                                const std::vector<std::pair<std::string, Predictions>>& models) {
  if (models.empty()) throw ContractError("evaluate: no models for task '" + task + "'");
  const std::size_t n = truth.rows.size();
  if (n == 0) throw ContractError("evaluate: task '" + task + "' has no test slides");
  // Prediction rows reordered to truth order.
  auto aligned = [&](const Predictions& p, const std::string& model) {
    std::map<std::string, std::size_t> row_of;
    for (std::size_t i = 0; i < p.slide_ids.size(); ++i) row_of[p.slide_ids[i]] = i;
    std::vector<double> out;
    out.reserve(n * p.width());
    for (const auto& row : truth.rows) {
      auto it = row_of.find(row.slide_id);
      if (it == row_of.end()) throw ContractError("model '" + model + "' has no prediction for slide '" + row.slide_id + "'");
      for (std::size_t j = 0; j < p.width(); ++j) out.push_back(p.values[it->second * p.width() + j]);
    }
    return out;
  };
  Evaluation ev;
  const auto& reference = models.front();
  if (truth.survival) {
    std::vector<double> times;
    std::vector<bool> events;
    for (const auto& row : truth.rows) {
      times.push_back(row.survival->duration);
      events.push_back(row.survival->event);
    }
    std::vector<std::vector<double>> risks;
    for (const auto& [name, p] : models) {
      if (!p.survival) throw ContractError("model '" + name + "' has class probabilities for a survival task");
      risks.push_back(aligned(p, name));
    }
    for (std::size_t m = 0; m < models.size(); ++m) {
      MetricReport r{task, models[m].first, "c_index", 0.0, n, {}, {}};
      try {
        r.value = c_index(risks[m], times, events);
      } catch (const UndefinedMetricError& e) {
        ev.warnings.push_back(task + "/" + models[m].first + ": " + e.what());
        continue;
      }
      if (m > 0) {
        r.notes.push_back("DeLong applied to event vs censored discrimination of risk scores");
        try {
          r.comparisons.push_back(
              {reference.first, delong_test(risks[m], risks[0], events).p_value, "DeLong (event discrimination)"});
        } catch (const Error& e) {
          r.notes.push_back(std::string("comparison skipped: ") + e.what());
        }
      }
      r.validate();
      ev.reports.push_back(std::move(r));
    }
    return ev;
  }

  const auto& classes = reference.second.class_names;
  std::vector<std::size_t> labels;
  for (const auto& row : truth.rows) {
    auto it = std::find(classes.begin(), classes.end(), *row.label);
    if (it == classes.end()) throw ContractError("truth label '" + *row.label + "' is not a predicted class");
    labels.push_back(static_cast<std::size_t>(it - classes.begin()));
  }
  const std::size_t k = classes.size();
  if (k < 2) throw ContractError("evaluate: need at least two classes");
  std::vector<std::vector<double>> probs;
  for (const auto& [name, p] : models) {
    if (p.survival || p.class_names != classes) throw ContractError("model '" + name + "' predicts different classes");
    probs.push_back(aligned(p, name));
  }
  auto true_class_prob = [&](std::size_t m) {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = probs[m][i * k + labels[i]];
    return out;
  };
  for (std::size_t m = 0; m < models.size(); ++m) {
    const auto& name = models[m].first;
    MetricReport auc{task, name, "macro_auroc", 0.0, n, {}, {}};
    bool have_auc = true;
    try {
      auc.value = macro_auroc(probs[m], labels, k);
    } catch (const UndefinedMetricError& e) {
      ev.warnings.push_back(task + "/" + name + ": " + e.what());
      have_auc = false;
    }
    if (have_auc && m > 0) {
      try {
        if (k == 2) {
          std::vector<double> a(n), b(n);
          std::vector<bool> y(n);
          for (std::size_t i = 0; i < n; ++i) {
            a[i] = probs[m][i * 2 + 1];
            b[i] = probs[0][i * 2 + 1];
            y[i] = labels[i] == 1;
          }
          auc.comparisons.push_back({reference.first, delong_test(a, b, y).p_value, "DeLong"});
        } else {
          auc.comparisons.push_back(
              {reference.first, wilcoxon_signed_rank(true_class_prob(m), true_class_prob(0)).p_value, "Wilcoxon"});
          auc.notes.push_back("Wilcoxon signed-rank on per-slide true-class probabilities");
        }
      } catch (const Error& e) {
        auc.notes.push_back(std::string("comparison skipped: ") + e.what());
      }
    }
    if (have_auc) {
      auc.validate();
      ev.reports.push_back(std::move(auc));
    }
    std::vector<std::size_t> pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = probs[m].data() + i * k;
      pred[i] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    }
    MetricReport f1{task, name, "macro_f1", macro_f1(pred, labels, k), n, {}, {}};
    f1.notes.push_back("per-class F1 with a zero denominator counts as 0");
    f1.validate();
    ev.reports.push_back(std::move(f1));
  }
  return ev;
}

namespace stages {

inline void curate(StageRun& run, const PipelineConfig& cfg) {
  const auto cols = detail::load_cohort_dir(run, cfg.cohorts, "cohorts");
  const KMeansOptions opt{cfg.curate.restarts, cfg.curate.max_iter};
  std::vector<PrototypeSet> sets;
  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < cols.size(); ++i) {
    const auto& c = cols[i];
    const std::size_t m = std::min(cfg.curate.subsample, c.rows());
    const auto sub = subsample_uniform(c, m, stream_seed(run.seed(), {i, 0}));
    const std::size_t k_max = std::min(cfg.curate.k_max, sub.rows());
    if (k_max < cfg.curate.k_min + 2) {
      throw ConfigError("cohort '" + c.cohort_id + "' has too few rows for the curate k range");
    }
    const auto curve = wcss_curve(sub, cfg.curate.k_min, k_max, stream_seed(run.seed(), {i, 1}), opt);
    const auto elbow = select_elbow(curve);
    const std::size_t k = elbow.distinct ? elbow.k : cfg.curate.k_min;
    if (!elbow.distinct) run.warn("cohort '" + c.cohort_id + "': no distinct elbow, using k=" + std::to_string(k));
    PrototypeSet set = curve.solution_for(k);
    set.cohort_id = c.cohort_id;
    run.write_text("wcss_" + c.cohort_id + ".csv", wcss_csv(curve));
    run.log(c.cohort_id + ": " + std::to_string(c.rows()) + " rows, k=" + std::to_string(k));
    summary.push_back({{"cohort", c.cohort_id},
                       {"rows", c.rows()},
                       {"subsample", m},
                       {"k", k},
                       {"elbow_distinct", elbow.distinct},
                       {"elbow_score", elbow.score},
                       {"wcss", set.wcss}});
    sets.push_back(std::move(set));
  }
  const auto table = merge_prototype_sets(sets);
  save_prototype_table(run.dir(), table);
  Checkpoint ck = Checkpoint::load(run.dir() / "prototypes.pdck");
  run.save_checkpoint("prototypes.pdck", std::move(ck));
  run.write_json("summary.json", {{"prototypes", table.size()}, {"cohorts", summary}});
}

inline void train_ae(StageRun& run, const PipelineConfig& cfg) {
  const auto images = detail::load_images(run, cfg, nullptr);
  std::vector<double> rows;
  for (const auto& c : images) rows.insert(rows.end(), c.data.begin(), c.data.end());
  AutoencoderTrainConfig t;
  t.dims = AutoencoderDims::flat(images.front().dim, cfg.autoencoder.latent_dim);
  t.hidden = cfg.autoencoder.hidden;
  t.activation = cfg.autoencoder.activation;
  t.epochs = cfg.autoencoder.epochs;
  t.batch_size = cfg.autoencoder.batch_size;
  t.optimizer = cfg.autoencoder.optimizer;
  t.holdout_fraction = cfg.autoencoder.holdout_fraction;
  t.seed = run.seed();
  const auto trained = train_autoencoder(rows, t);
  if (!std::isfinite(trained.train_loss)) throw NumericError("autoencoder training diverged");
  Checkpoint ck = trained.params.to_checkpoint();
  record_optimizer_config(ck, t.optimizer);
  run.save_checkpoint("autoencoder.pdck", std::move(ck));
  run.write_text("loss.csv", detail::loss_csv(trained.step_losses));
  nlohmann::ordered_json s{{"rows", rows.size() / t.dims.input_dim()},
                           {"input_dim", t.dims.input_dim()},
                           {"latent_dim", t.dims.latent_dim()},
                           {"initial_mse", trained.initial_train_loss},
                           {"train_mse", trained.train_loss}};
  if (trained.heldout_loss) s["heldout_mse"] = *trained.heldout_loss;
  run.log("reconstruction mse " + detail::fixed17(trained.train_loss));
  run.write_json("summary.json", s);
}

inline void train_diffusion(StageRun& run, const PipelineConfig& cfg) {
  const auto data = detail::load_latent_data(run, cfg);
  const auto schedule =
      build_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_min, cfg.diffusion.beta_max, cfg.diffusion.schedule);
  auto t = cfg.diffusion.train;
  t.seed = run.seed();
  const auto trained = train_denoiser(data.latents, data.dim, schedule, t);
  const double final_loss = detail::tail_mean(trained.step_losses, 50);
  Checkpoint ck = trained.params.to_checkpoint(schedule);
  record_optimizer_config(ck, t.optimizer);
  run.save_checkpoint("denoiser.pdck", std::move(ck));
  run.write_text("loss.csv", detail::loss_csv(trained.step_losses));
  run.log("final loss " + detail::fixed17(final_loss));
  run.write_json("summary.json", {{"latents", data.labels.size()},
                                  {"latent_dim", data.dim},
                                  {"timesteps", schedule.T},
                                  {"schedule", noise_kind_name(schedule.kind)},
                                  {"final_loss", final_loss}});
}

inline void train_classifier(StageRun& run, const PipelineConfig& cfg) {
  const auto data = detail::load_latent_data(run, cfg);
  const auto schedule = schedule_from_checkpoint(Checkpoint::load(run.upstream(Stage::train_diffusion, "denoiser.pdck")));
  auto t = cfg.classifier.train;
  t.seed = run.seed();
  const auto trained = train_guidance_classifier(data.latents, data.dim, data.labels, data.table.size(), schedule, t);
  const double final_loss = detail::tail_mean(trained.step_losses, 50);
  Checkpoint ck = trained.params.to_checkpoint();
  record_optimizer_config(ck, t.optimizer);
  run.save_checkpoint("classifier.pdck", std::move(ck));
  run.write_text("loss.csv", detail::loss_csv(trained.step_losses));
  run.log("clean accuracy " + detail::fixed17(trained.clean_accuracy));
  run.write_json("summary.json", {{"classes", data.table.size()},
                                  {"clean_accuracy", trained.clean_accuracy},
                                  {"final_loss", final_loss}});
}

inline void build_dataset(StageRun& run, const PipelineConfig& cfg) {
  const auto data = detail::load_latent_data(run, cfg);
  const Checkpoint den_ck = Checkpoint::load(run.upstream(Stage::train_diffusion, "denoiser.pdck"));
  const auto cls = GuidanceClassifierParams::from_checkpoint(
      Checkpoint::load(run.upstream(Stage::train_classifier, "classifier.pdck")));
  const LatentDiffusionSampler sampler(DenoiserParams::from_checkpoint(den_ck), cls, schedule_from_checkpoint(den_ck),
                                       data.ae);
  if (sampler.num_classes() != data.table.size()) {
    throw ContractError("guidance classifier has " + std::to_string(sampler.num_classes()) + " classes, prototype table " +
                        std::to_string(data.table.size()));
  }
  SampleBatch all;
  auto generate = [&](std::size_t p, std::size_t n, std::uint64_t seed) {
    const auto batch = sampler.sample({p, cfg.dataset.guidance_w, seed, n});
    for (double v : batch.data)
      if (!std::isfinite(v)) throw NumericError("prototype " + std::to_string(p) + ": non-finite samples");
    save_samples(run.dir() / "samples" / ("prototype_" + std::to_string(p) + ".psmp"), batch);
    all.append(batch);
  };
  const auto synthetic = build_synthetic_corpus(data.table.size(), cfg.dataset.n_per, stream_seed(run.seed(), {0}), generate);
  CorpusManifest manifest = synthetic;
  if (cfg.dataset.hybrid) {
    manifest = build_hybrid_corpus(synthetic, real_pool(data.cohorts, data.table), cfg.dataset.n_per_real,
                                   stream_seed(run.seed(), {1}));
  }
  manifest.validate();
  for (const auto& w : manifest.warnings) run.warn(w);
  nlohmann::ordered_json m{{"mode", cfg.dataset.hybrid ? "hybrid" : "synthetic"},
                           {"guidance_w", cfg.dataset.guidance_w},
                           {"synthetic", manifest.count(SampleSource::synthetic)},
                           {"real", manifest.count(SampleSource::real)}};
  const auto body = manifest.to_json();
  for (const auto& item : body.items()) m[item.key()] = item.value();
  run.write_json("manifest.json", m);

  std::vector<double> real;
  for (const auto& c : data.images) real.insert(real.end(), c.data.begin(), c.data.end());
  const std::size_t dim = data.images.front().dim;
  nlohmann::ordered_json f{{"feature_space", "image rows (autoencoder input)"},
                           {"synthetic_rows", all.rows()},
                           {"real_rows", real.size() / dim}};
  if (all.rows() >= 2 && real.size() / dim >= 2) {
    const double value = fid(feature_stats(all.data, dim), feature_stats(real, dim));
    f["fid"] = value;
    run.log(std::to_string(manifest.size()) + " entries, FID " + detail::fixed17(value));
  } else {
    run.warn("FID needs at least two synthetic and two real rows");
  }
  run.write_json("fid.json", f);
}

inline void train_mil(StageRun& run, const PipelineConfig& cfg) {
  if (cfg.tasks.empty()) throw ConfigError("train-mil: config has no tasks");
  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  for (std::size_t ti = 0; ti < cfg.tasks.size(); ++ti) {
    const auto& task = cfg.tasks[ti];
    if (!std::filesystem::exists(task.table)) throw DependencyError("task '" + task.name + "': table not found");
    run.input("tasks/" + task.name + "/table", task.table);
    const auto table = parse_bag_table(io::read_text(task.table));
    const bool survival = task.kind == TaskKind::survival;
    if (survival != table.survival) {
      throw ConfigError("task '" + task.name + "': table columns do not match task type");
    }
    const auto bags = load_bags(task.bags, table);
    for (const auto& row : table.rows) run.input("tasks/" + task.name + "/bags/" + row.slide_id, task.bags / (row.slide_id + ".pemb"));

    std::vector<SplitItem> items;
    for (const auto& b : bags) items.push_back({b.patient_id, survival ? std::size_t{b.survival->event} : *b.label});
    const auto split = stratified_split(items, cfg.mil.ratios, stream_seed(run.seed(), {ti}));
    for (const auto& w : split.warnings) run.warn(task.name + ": " + w);
    auto subset = [&](const std::vector<std::size_t>& idx) {
      std::vector<SlideBag> out;
      for (std::size_t i : idx) out.push_back(bags[i]);
      return out;
    };
    const auto train = subset(split.train), val = subset(split.val), test = subset(split.test);
    auto ids = [&](const std::vector<std::size_t>& idx) {
      std::vector<std::string> out;
      for (std::size_t i : idx) out.push_back(bags[i].slide_id);
      return out;
    };
    const std::string prefix = task.name + "/";
    std::filesystem::create_directories(run.dir() / task.name);
    run.write_json(prefix + "split.json", {{"task", task.name},
                                           {"train", ids(split.train)},
                                           {"val", ids(split.val)},
                                           {"test", ids(split.test)},
                                           {"warnings", split.warnings}});
    std::ostringstream truth;
    truth << std::setprecision(17) << (survival ? "slide_id,patient_id,duration,event\n" : "slide_id,patient_id,label\n");
    for (std::size_t i : split.test) {
      const auto& row = table.rows[i];
      truth << row.slide_id << ',' << row.patient_id << ',';
      if (survival) {
        truth << row.survival->duration << ',' << (row.survival->event ? 1 : 0) << '\n';
      } else {
        truth << *row.label << '\n';
      }
    }
    run.write_text(prefix + "truth.csv", truth.str());

    for (std::size_t vi = 0; vi < cfg.mil.variants.size(); ++vi) {
      const auto& variant = cfg.mil.variants[vi];
      MilTrainConfig mc = cfg.mil.train;
      mc.hidden = variant.hidden;
      mc.seed = stream_seed(run.seed(), {ti, vi + 1});
      const auto trained =
          survival ? train_survival(train, val, mc) : train_subtyping(train, val, table.class_names.size(), mc);
      for (const auto& e : trained.log)
        if (!std::isfinite(e.train_loss) || !std::isfinite(e.val_loss)) throw NumericError(task.name + ": MIL loss diverged");
      Checkpoint ck = trained.params.to_checkpoint();
      record_optimizer_config(ck, mc.optimizer);
      ck.set("task", task.name);
      ck.set("best_epoch", trained.best_epoch);
      if (survival) {
        std::ostringstream edges;
        edges << std::setprecision(17);
        for (std::size_t i = 0; i < trained.bin_edges.size(); ++i) edges << (i ? " " : "") << trained.bin_edges[i];
        ck.set("bin_edges", edges.str());
      } else {
        std::string names;
        for (std::size_t i = 0; i < table.class_names.size(); ++i) names += (i ? " " : "") + table.class_names[i];
        ck.set("class_names", names);
      }
      run.save_checkpoint(prefix + variant.name + ".pdck", std::move(ck));
      std::ostringstream log;
      log << std::setprecision(17) << "epoch,train_loss,val_loss,lr\n";
      for (const auto& e : trained.log) log << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << '\n';
      run.write_text(prefix + variant.name + ".log.csv", log.str());

      Predictions pred;
      pred.survival = survival;
      pred.class_names = table.class_names;
      for (const auto& b : test) {
        pred.slide_ids.push_back(b.slide_id);
        if (survival) {
          pred.values.push_back(survival_risk(trained.params, b));
        } else {
          const auto p = class_probabilities(trained.params, b);
          pred.values.insert(pred.values.end(), p.begin(), p.end());
        }
      }
      run.write_text(prefix + variant.name + ".predictions.csv", format_predictions(pred));
      run.log(task.name + "/" + variant.name + ": " + std::to_string(trained.log.size()) + " epochs, best " +
              std::to_string(trained.best_epoch));
      summary.push_back({{"task", task.name},
                         {"model", variant.name},
                         {"train", train.size()},
                         {"val", val.size()},
                         {"test", test.size()},
                         {"epochs", trained.log.size()},
                         {"best_epoch", trained.best_epoch},
                         {"stopped_early", trained.stopped_early}});
    }
  }
  run.write_json("summary.json", {{"models", summary}});
}

inline void evaluate(StageRun& run, const PipelineConfig& cfg) {
  if (cfg.tasks.empty()) throw ConfigError("evaluate: config has no tasks");
  std::vector<MetricReport> reports;
  std::vector<std::string> warnings;
  for (const auto& task : cfg.tasks) {
    const auto truth = parse_bag_table(io::read_text(run.upstream(Stage::train_mil, task.name + "/truth.csv")));
    std::vector<std::pair<std::string, Predictions>> models;
    for (const auto& v : cfg.mil.variants) {
      const auto path = run.upstream(Stage::train_mil, task.name + "/" + v.name + ".predictions.csv");
      models.emplace_back(v.name, parse_predictions(io::read_text(path)));
    }
    auto ev = evaluate_task(task.name, truth, models);
    reports.insert(reports.end(), ev.reports.begin(), ev.reports.end());
    warnings.insert(warnings.end(), ev.warnings.begin(), ev.warnings.end());
  }
  for (const auto& w : warnings) run.warn(w);
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  run.write_json("report.json", {{"reports", arr}, {"warnings", warnings}});
  const auto table = format_report_table(reports);
  run.write_text("report.txt", table);
  run.log("\n" + table);
}

}  // namespace stages

struct RunOptions {
  std::filesystem::path output_root;  // empty: the config's output
  bool force = false;                 // rerun stages that already completed
  std::ostream* log = nullptr;
};

struct StageOutcome {
  Stage stage;
  bool cached = false;
};

struct RunResult {
  std::filesystem::path run_dir;
  std::vector<StageOutcome> stages;
};

inline std::filesystem::path run_directory(const PipelineConfig& cfg, const RunOptions& opt) {
  return (opt.output_root.empty() ? cfg.output : opt.output_root) / cfg.run_id;
}

inline bool stage_complete(const std::filesystem::path& run_dir, Stage s) {
  return std::filesystem::exists(run_dir / stage_name(s) / "provenance.json");
}

// Runs the requested stages in pipeline order. A stage whose output already
// exists under this run id is reused unless opt.force is set. A failing stage
// leaves every earlier stage's artifacts untouched.
inline RunResult run_pipeline(const PipelineConfig& cfg, std::vector<Stage> stages, const RunOptions& opt = {}) {
  if (stages.empty()) stages.assign(kStages.begin(), kStages.end());
  std::sort(stages.begin(), stages.end());
  stages.erase(std::unique(stages.begin(), stages.end()), stages.end());
  RunResult result;
  result.run_dir = run_directory(cfg, opt);
  std::filesystem::create_directories(result.run_dir);
  for (Stage s : stages) {
    if (!opt.force && stage_complete(result.run_dir, s)) {
      if (opt.log) *opt.log << '[' << stage_name(s) << "] reusing " << (result.run_dir / stage_name(s)).string() << '\n';
      result.stages.push_back({s, true});
      continue;
    }
    for (Stage dep : stage_dependencies(s)) {
      if (!stage_complete(result.run_dir, dep)) {
        throw DependencyError(std::string("stage '") + stage_name(s) + "' needs stage '" + stage_name(dep) +
                              "' to have completed in run " + cfg.run_id);
      }
    }
    StageRun run(cfg, result.run_dir, s, opt.log);
    switch (s) {
      case Stage::curate:
        stages::curate(run, cfg);
        break;
      case Stage::train_ae:
        stages::train_ae(run, cfg);
        break;
      case Stage::train_diffusion:
        stages::train_diffusion(run, cfg);
        break;
      case Stage::train_classifier:
        stages::train_classifier(run, cfg);
        break;
      case Stage::build_dataset:
        stages::build_dataset(run, cfg);
        break;
      case Stage::train_mil:
        stages::train_mil(run, cfg);
        break;
      case Stage::evaluate:
        stages::evaluate(run, cfg);
        break;
    }
    run.commit();
    result.stages.push_back({s, false});
  }
  return result;
}

// Draws samples from the trained components of a completed run.
inline SampleBatch sample_from_run(const std::filesystem::path& run_dir, const SampleRequest& req) {
  for (Stage s : {Stage::train_ae, Stage::train_diffusion, Stage::train_classifier}) {
    if (!stage_complete(run_dir, s)) throw DependencyError(std::string("sampling needs stage '") + stage_name(s) + "'");
  }
  const auto den_ck = Checkpoint::load(run_dir / "train-diffusion" / "denoiser.pdck");
  const LatentDiffusionSampler sampler(
      DenoiserParams::from_checkpoint(den_ck),
      GuidanceClassifierParams::from_checkpoint(Checkpoint::load(run_dir / "train-classifier" / "classifier.pdck")),
      schedule_from_checkpoint(den_ck),
      AutoencoderParams::from_checkpoint(Checkpoint::load(run_dir / "train-ae" / "autoencoder.pdck")));
  return sampler.sample(req);
}

// 2 config, 3 dependency, 4 numeric, 1 anything else.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DependencyError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

}  // namespace protodiff
