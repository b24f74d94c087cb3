#pragma once

// Gated-attention multiple instance learning over slide bags, with
// cross-entropy (subtyping) and discrete-time hazard (survival) training.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "protodiff/checkpoint.hpp"
#include "protodiff/embeddings.hpp"
#include "protodiff/nn.hpp"
#include "protodiff/optim.hpp"
#include "protodiff/random.hpp"

namespace protodiff {

struct SurvivalRecord {
  double duration = 0.0;
  bool event = false;
};

struct SlideBag {
  std::string slide_id;
  std::string patient_id;
  std::size_t dim = 0;
  std::vector<double> embeddings;  // rows x dim
  std::optional<std::size_t> label;
  std::optional<SurvivalRecord> survival;

  std::size_t rows() const { return dim == 0 ? 0 : embeddings.size() / dim; }

  void validate() const {
    if (dim == 0 || embeddings.empty()) throw ContractError("bag '" + slide_id + "' is empty");
    if (embeddings.size() % dim != 0) throw DimensionError("bag '" + slide_id + "' is not a multiple of its dim");
    if (survival && !(survival->duration >= 0.0)) throw ContractError("bag '" + slide_id + "' has negative duration");
  }
};

struct AbmilConfig {
  std::size_t in_dim = 0;
  std::size_t hidden = 256;
  std::size_t attention_dim = 0;  // 0: hidden / 2
  std::size_t outputs = 2;
  double dropout = 0.25;
};

struct AbmilOutput {
  std::vector<double> attention;  // one weight per patch, in bag order
  std::vector<double> features;   // transformed patches, rows x hidden, in bag order
  Tensor slide;                   // [1, hidden]
  Tensor logits;                  // [1, outputs]
};

class AbmilParams {
 public:
  AbmilParams() = default;

  AbmilParams(const AbmilConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg_.in_dim == 0 || cfg_.hidden == 0 || cfg_.outputs == 0) throw ContractError("abmil: zero-sized layer");
    if (cfg_.attention_dim == 0) cfg_.attention_dim = std::max<std::size_t>(1, cfg_.hidden / 2);
    fc1_ = Linear(cfg_.in_dim, cfg_.hidden, rng);
    fc2_ = Linear(cfg_.hidden, cfg_.hidden, rng);
    for (Tensor* g : {&gain1_, &gain2_}) *g = Tensor(Shape{cfg_.hidden}, std::vector<double>(cfg_.hidden, 1.0), true);
    for (Tensor* b : {&shift1_, &shift2_}) *b = Tensor::zeros({cfg_.hidden}, true);
    att_tanh_ = Linear(cfg_.hidden, cfg_.attention_dim, rng);
    att_gate_ = Linear(cfg_.hidden, cfg_.attention_dim, rng);
    att_score_ = Linear(cfg_.attention_dim, 1, rng);
    head_ = Linear(cfg_.hidden, cfg_.outputs, rng);
  }

  const AbmilConfig& config() const { return cfg_; }

  ParameterList parameters() const {
    ParameterList p;
    fc1_.collect("pre.0", p);
    p.push_back({"pre.0.norm.gain", gain1_});
    p.push_back({"pre.0.norm.shift", shift1_});
    fc2_.collect("pre.1", p);
    p.push_back({"pre.1.norm.gain", gain2_});
    p.push_back({"pre.1.norm.shift", shift2_});
    att_tanh_.collect("attention.tanh", p);
    att_gate_.collect("attention.gate", p);
    att_score_.collect("attention.score", p);
    head_.collect("head", p);
    return p;
  }

  // Patches are processed in a canonical (lexicographic) order so that the
  // result does not depend on how the bag is stored; weights are reported
  // back in bag order. rng is only used when training.
  AbmilOutput forward(const SlideBag& bag, bool training = false, Rng* rng = nullptr) const {
    bag.validate();
    if (bag.dim != cfg_.in_dim) {
      throw DimensionError("bag '" + bag.slide_id + "' has dim " + std::to_string(bag.dim) + ", model expects " +
                           std::to_string(cfg_.in_dim));
    }
    if (training && !rng) throw ContractError("abmil: training forward needs an RNG");
    const std::size_t n = bag.rows(), d = bag.dim;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* x = bag.embeddings.data();
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::lexicographical_compare(x + a * d, x + (a + 1) * d, x + b * d, x + (b + 1) * d);
    });
    std::vector<double> sorted(n * d);
    for (std::size_t r = 0; r < n; ++r) std::copy_n(x + order[r] * d, d, sorted.begin() + static_cast<std::ptrdiff_t>(r * d));

    Rng dummy(0);
    Rng& drop_rng = rng ? *rng : dummy;
    const double p = cfg_.dropout;
    Tensor h(Shape{n, d}, std::move(sorted));
    h = dropout(relu(add(mul(layer_norm(fc1_(h)), gain1_), shift1_)), p, drop_rng, training);
    h = dropout(relu(add(mul(layer_norm(fc2_(h)), gain2_), shift2_)), p, drop_rng, training);
    Tensor gated = dropout(mul(tanh(att_tanh_(h)), sigmoid(att_gate_(h))), p, drop_rng, training);
    Tensor weights = softmax(reshape(att_score_(gated), {1, n}));
    AbmilOutput out;
    out.slide = matmul(weights, h);
    out.logits = head_(out.slide);
    out.attention.resize(n);
    out.features.resize(n * cfg_.hidden);
    for (std::size_t r = 0; r < n; ++r) {
      out.attention[order[r]] = weights[r];
      std::copy_n(h.values().begin() + static_cast<std::ptrdiff_t>(r * cfg_.hidden), cfg_.hidden,
                  out.features.begin() + static_cast<std::ptrdiff_t>(order[r] * cfg_.hidden));
    }
    return out;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.set("kind", "abmil");
    ck.set("in_dim", cfg_.in_dim);
    ck.set("hidden", cfg_.hidden);
    ck.set("attention_dim", cfg_.attention_dim);
    ck.set("outputs", cfg_.outputs);
    ck.set("dropout", cfg_.dropout);
    ck.add(parameters());
    return ck;
  }

  static AbmilParams from_checkpoint(const Checkpoint& ck) {
    if (ck.require("kind") != "abmil") throw ContractError("checkpoint is not an abmil model");
    AbmilConfig cfg;
    cfg.in_dim = ck.require_u64("in_dim");
    cfg.hidden = ck.require_u64("hidden");
    cfg.attention_dim = ck.require_u64("attention_dim");
    cfg.outputs = ck.require_u64("outputs");
    cfg.dropout = ck.require_double("dropout");
    Rng rng(0);
    AbmilParams p(cfg, rng);
    auto params = p.parameters();
    ck.load_into(params);
    return p;
  }

 private:
  AbmilConfig cfg_;
  Linear fc1_, fc2_;
  Tensor gain1_, shift1_, gain2_, shift2_;
  Linear att_tanh_, att_gate_, att_score_;
  Linear head_;
};

inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  return neg(sum(gather_last(log_softmax(logits), {label})));
}

// Hazards h = sigmoid(logits) over time bins. An event in bin b contributes
// log h_b plus log(1 - h_b') for every earlier bin; a censored record in bin
// b contributes only the survival terms of the earlier bins.
inline Tensor survival_nll(const Tensor& logits, std::size_t bin, bool event) {
  const std::size_t bins = logits.size();
  if (bin >= bins) throw BoundsError("survival bin " + std::to_string(bin) + " >= " + std::to_string(bins));
  std::vector<double> hazard_coef(bins, 0.0), survival_coef(bins, 0.0);
  if (event) hazard_coef[bin] = 1.0;
  for (std::size_t b = 0; b < bin; ++b) survival_coef[b] = 1.0;
  const Shape shape = logits.shape();
  Tensor ll = add(sum(mul(log_sigmoid(logits), Tensor(shape, hazard_coef))),
                  sum(mul(log_sigmoid(neg(logits)), Tensor(shape, survival_coef))));
  return neg(ll);
}

// Cumulative hazard -sum log(1 - h_b); increasing in every hazard.
inline double risk_score(std::span<const double> logits) {
  double r = 0.0;
  for (double l : logits) r += std::max(l, 0.0) + std::log1p(std::exp(-std::abs(l)));
  return r;
}

// Interior cut points at the j/bins quantiles (linear interpolation) of the
// event times.
inline std::vector<double> quantile_bin_edges(std::vector<double> event_times, std::size_t bins) {
  if (event_times.empty()) throw ContractError("quantile_bin_edges: no event times");
  if (bins == 0) throw ContractError("quantile_bin_edges: need at least one bin");
  std::sort(event_times.begin(), event_times.end());
  std::vector<double> edges;
  for (std::size_t j = 1; j < bins; ++j) {
    const double pos = static_cast<double>(j) / static_cast<double>(bins) * static_cast<double>(event_times.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, event_times.size() - 1);
    edges.push_back(event_times[lo] + (pos - static_cast<double>(lo)) * (event_times[hi] - event_times[lo]));
  }
  return edges;
}

inline std::size_t time_bin(double duration, const std::vector<double>& edges) {
  return static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), duration) - edges.begin());
}

struct MilTrainConfig {
  std::size_t hidden = 256;
  double dropout = 0.25;
  std::size_t max_epochs = 20;
  std::size_t patience = 10;
  AdamWConfig optimizer{};
  bool cosine = true;
  std::size_t survival_bins = 4;
  std::uint64_t seed = 0;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainedMil {
  AbmilParams params;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  std::vector<double> bin_edges;  // survival only
};

namespace detail {

template <typename LossFn>
TrainedMil train_abmil(const std::vector<SlideBag>& train, const std::vector<SlideBag>& val, const AbmilConfig& arch,
                       const MilTrainConfig& cfg, LossFn&& loss_of) {
  if (train.empty() || val.empty()) throw ContractError("train_mil: train and validation splits must be non-empty");
  Rng rng(cfg.seed);
  TrainedMil out;
  out.params = AbmilParams(arch, rng);
  ParameterList params = out.params.parameters();
  AdamW opt(params, cfg.optimizer);
  if (cfg.cosine) opt.use_cosine_schedule(std::max<std::size_t>(1, cfg.max_epochs));

  auto val_loss = [&] {
    double total = 0.0;
    for (const auto& bag : val) total += loss_of(bag, out.params.forward(bag).logits).item();
    return total / static_cast<double>(val.size());
  };

  double best = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_values = snapshot(params);
  std::size_t stale = 0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    opt.set_progress(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double train_total = 0.0;
    for (std::size_t i : order) {
      opt.zero_grad();
      Tensor loss = loss_of(train[i], out.params.forward(train[i], true, &rng).logits);
      backward(loss);
      opt.step();
      train_total += loss.item();
    }
    EpochLog entry{epoch + 1, train_total / static_cast<double>(train.size()), val_loss(), opt.current_lr()};
    out.log.push_back(entry);
    if (best - entry.val_loss > 1e-12) {
      best = entry.val_loss;
      best_values = snapshot(params);
      out.best_epoch = entry.epoch;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      out.stopped_early = true;
      break;
    }
  }
  restore(params, best_values);
  return out;
}

inline void require_same_dim(const std::vector<SlideBag>& a, const std::vector<SlideBag>& b) {
  const std::size_t d = a.front().dim;
  for (const auto* set : {&a, &b})
    for (const auto& bag : *set)
      if (bag.dim != d) throw DimensionError("bags differ in embedding dim");
}

}  // namespace detail

inline TrainedMil train_subtyping(const std::vector<SlideBag>& train, const std::vector<SlideBag>& val,
                                  std::size_t num_classes, const MilTrainConfig& cfg) {
  if (train.empty() || val.empty()) throw ContractError("train_subtyping: empty split");
  std::vector<bool> present(num_classes, false);
  for (const auto* set : {&train, &val}) {
    for (const auto& bag : *set) {
      if (!bag.label) throw ContractError("train_subtyping: bag '" + bag.slide_id + "' has no label");
      if (*bag.label >= num_classes) throw ContractError("train_subtyping: label out of range");
    }
  }
  for (const auto& bag : train) present[*bag.label] = true;
  if (std::count(present.begin(), present.end(), true) < 2) {
    throw ContractError("train_subtyping: training split needs at least two classes");
  }
  detail::require_same_dim(train, val);
  AbmilConfig arch{train.front().dim, cfg.hidden, 0, num_classes, cfg.dropout};
  return detail::train_abmil(train, val, arch, cfg,
                             [](const SlideBag& bag, const Tensor& logits) { return cross_entropy(logits, *bag.label); });
}

inline TrainedMil train_survival(const std::vector<SlideBag>& train, const std::vector<SlideBag>& val,
                                 const MilTrainConfig& cfg) {
  if (train.empty() || val.empty()) throw ContractError("train_survival: empty split");
  std::vector<double> event_times;
  for (const auto* set : {&train, &val})
    for (const auto& bag : *set)
      if (!bag.survival) throw ContractError("train_survival: bag '" + bag.slide_id + "' has no survival record");
  for (const auto& bag : train)
    if (bag.survival->event) event_times.push_back(bag.survival->duration);
  if (event_times.empty()) throw ContractError("train_survival: training split has no events");
  detail::require_same_dim(train, val);
  const auto edges = quantile_bin_edges(event_times, cfg.survival_bins);
  AbmilConfig arch{train.front().dim, cfg.hidden, 0, cfg.survival_bins, cfg.dropout};
  auto out = detail::train_abmil(train, val, arch, cfg, [&](const SlideBag& bag, const Tensor& logits) {
    return survival_nll(logits, time_bin(bag.survival->duration, edges), bag.survival->event);
  });
  out.bin_edges = edges;
  return out;
}

inline std::vector<double> class_probabilities(const AbmilParams& p, const SlideBag& bag) {
  return softmax(p.forward(bag).logits).values();
}

inline double survival_risk(const AbmilParams& p, const SlideBag& bag) { return risk_score(p.forward(bag).logits.data()); }

struct SplitItem {
  std::string patient_id;  // empty: the item is its own patient
  std::size_t label = 0;
};

struct SplitRatios {
  double train = 0.7, val = 0.1, test = 0.2;
};

struct DataSplit {
  std::vector<std::size_t> train, val, test;  // item indices, ascending
  std::vector<std::string> warnings;
};

// Patient-level, label-stratified split. Per class, patient counts come from
// largest-remainder rounding (ties favour train, then test, then val). A
// class with fewer than three patients fills train, then test, then val.
inline DataSplit stratified_split(const std::vector<SplitItem>& items, const SplitRatios& ratios, std::uint64_t seed) {
  const double total = ratios.train + ratios.val + ratios.test;
  if (std::abs(total - 1.0) > 1e-9 || ratios.train < 0 || ratios.val < 0 || ratios.test < 0) {
    throw ContractError("stratified_split: ratios must be non-negative and sum to 1");
  }
  // Group items into patients, in first-appearance order; a patient takes
  // the label of its first item.
  std::vector<std::vector<std::size_t>> patients;
  std::vector<std::size_t> patient_label;
  std::map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& id = items[i].patient_id;
    auto it = id.empty() ? index_of.end() : index_of.find(id);
    if (it == index_of.end()) {
      if (!id.empty()) index_of[id] = patients.size();
      patients.push_back({i});
      patient_label.push_back(items[i].label);
    } else {
      patients[it->second].push_back(i);
    }
  }
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t p = 0; p < patients.size(); ++p) by_class[patient_label[p]].push_back(p);

  DataSplit out;
  // Priority order for ties and small classes: train, test, val.
  const std::array<std::vector<std::size_t>*, 3> dest{&out.train, &out.test, &out.val};
  const std::array<double, 3> ratio{ratios.train, ratios.test, ratios.val};
  for (auto& [label, members] : by_class) {
    Rng rng = make_stream(seed, {label});
    std::shuffle(members.begin(), members.end(), rng);
    const std::size_t n = members.size();
    std::array<std::size_t, 3> count{};
    if (n < 3) {
      out.warnings.push_back("class " + std::to_string(label) + " has only " + std::to_string(n) +
                             " patient(s); filling train, then test, then val");
      for (std::size_t k = 0; k < n; ++k) count[k] = 1;
    } else {
      std::array<double, 3> frac{};
      std::size_t assigned = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        const double exact = ratio[k] * static_cast<double>(n);
        count[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        frac[k] = exact - static_cast<double>(count[k]);
        assigned += count[k];
      }
      std::array<std::size_t, 3> rank{0, 1, 2};
      std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b] + 1e-12; });
      for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++count[rank[k % 3]];
    }
    std::size_t pos = 0;
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t c = 0; c < count[k]; ++c, ++pos)
        for (std::size_t item : patients[members[pos]]) dest[k]->push_back(item);
  }
  for (auto* d : dest) std::sort(d->begin(), d->end());
  return out;
}

// One row of the bag label table.
struct BagLabel {
  std::string slide_id;
  std::string patient_id;
  std::optional<std::string> label;
  std::optional<SurvivalRecord> survival;
};

struct BagTable {
  std::vector<BagLabel> rows;
  std::vector<std::string> class_names;  // sorted; index = class id
  bool survival = false;
};

// CSV with header slide_id,patient_id and either label or duration,event.
// Blank lines and lines starting with '#' are skipped.
inline BagTable parse_bag_table(const std::string& text) {
  std::istringstream in(text);
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) {
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
      while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
      cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  std::string line;
  std::size_t line_no = 0;
  // Lines starting with '#' are comments.
  auto next_line = [&] {
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty() || line == "\r" || line.front() == '#') continue;
      return true;
    }
    return false;
  };
  if (!next_line()) throw ContractError("bag table is empty");
  const auto header = split(line);
  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto slide = column("slide_id"), patient = column("patient_id"), label = column("label"),
             duration = column("duration"), event = column("event");
  if (!slide) throw ContractError("bag table needs a slide_id column");
  BagTable table;
  table.survival = duration && event;
  if (!label && !table.survival) throw ContractError("bag table needs a label column or duration and event columns");
  while (next_line()) {
    const auto cells = split(line);
    if (cells.size() != header.size()) throw ContractError("bag table line " + std::to_string(line_no) + ": wrong cell count");
    BagLabel row;
    row.slide_id = cells[*slide];
    if (patient) row.patient_id = cells[*patient];
    if (table.survival) {
      try {
        row.survival = SurvivalRecord{std::stod(cells[*duration]), std::stoi(cells[*event]) != 0};
      } catch (const std::logic_error&) {
        throw ContractError("bag table line " + std::to_string(line_no) + ": bad duration/event");
      }
      if (!(row.survival->duration >= 0.0)) throw ContractError("bag table line " + std::to_string(line_no) + ": negative duration");
    } else {
      row.label = cells[*label];
      table.class_names.push_back(*row.label);
    }
    table.rows.push_back(std::move(row));
  }
  std::sort(table.class_names.begin(), table.class_names.end());
  table.class_names.erase(std::unique(table.class_names.begin(), table.class_names.end()), table.class_names.end());
  return table;
}

// Loads <dir>/<slide_id>.pemb for every row of the table.
inline std::vector<SlideBag> load_bags(const std::filesystem::path& dir, const BagTable& table) {
  std::vector<SlideBag> bags;
  for (const auto& row : table.rows) {
    const auto path = dir / (row.slide_id + ".pemb");
    if (!std::filesystem::exists(path)) throw DependencyError("missing bag file '" + path.string() + "'");
    auto c = load_embeddings(path);
    SlideBag bag;
    bag.slide_id = row.slide_id;
    bag.patient_id = row.patient_id;
    bag.dim = c.dim;
    bag.embeddings = std::move(c.data);
    if (row.label) {
      bag.label = static_cast<std::size_t>(
          std::lower_bound(table.class_names.begin(), table.class_names.end(), *row.label) - table.class_names.begin());
    }
    bag.survival = row.survival;
    bag.validate();
    bags.push_back(std::move(bag));
  }
  return bags;
}

}  // namespace protodiff
