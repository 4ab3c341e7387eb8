#pragma once

// Training orchestration and per-horizon evaluation: features from generated
// sequences, train/validate loops with best-snapshot selection, accuracy and
// confusion reports, and on-disk model directories.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmlstm/datagen.hpp"
#include "mmlstm/descriptors.hpp"
#include "mmlstm/model.hpp"
#include "mmlstm/serialize.hpp"

namespace mmlstm {

// ---------------------------------------------------------------------------
// Features

enum class Modality : std::size_t { appearance = 0, motion = 1, steering = 2, speed = 3 };

inline Modality modality_from_string(const std::string& s) {
  for (std::size_t m = 0; m < kSignalModalities; ++m)
    if (s == kSignalModalityNames[m]) return static_cast<Modality>(m);
  throw std::invalid_argument("unknown modality '" + s + "' (expected appearance, motion, steering or speed)");
}

inline const char* to_string(Modality m) { return kSignalModalityNames[static_cast<std::size_t>(m)]; }

inline const std::vector<Modality>& all_modalities() {
  static const std::vector<Modality> all = {Modality::appearance, Modality::motion, Modality::steering,
                                            Modality::speed};
  return all;
}

/// Maps a Sequence to model inputs: the selected modalities in order, with
/// steering and speed passed through their frozen embedders.
struct FeaturePipeline {
  std::vector<Modality> modalities = all_modalities();
  std::size_t delta = 1;
  std::optional<DynamicsEmbedder> steering;
  std::optional<DynamicsEmbedder> speed;

  bool uses(Modality m) const { return std::find(modalities.begin(), modalities.end(), m) != modalities.end(); }

  ModelInputs<float> features(const Sequence& s) const {
    ModelInputs<float> out;
    for (Modality m : modalities) {
      switch (m) {
        case Modality::appearance:
        case Modality::motion: {
          const std::size_t i = static_cast<std::size_t>(m);
          if (i >= s.features.size()) throw ShapeError("sequence '" + s.id + "' lacks " + to_string(m) + " features");
          out.push_back(s.features[i]);
          break;
        }
        case Modality::steering: out.push_back(embed(require(steering, m), dynamics_triples(s.steering, delta))); break;
        case Modality::speed: out.push_back(embed(require(speed, m), dynamics_triples(s.speed, delta))); break;
      }
    }
    return out;
  }

  std::vector<std::size_t> dims(const Sequence& s) const {
    std::vector<std::size_t> out;
    for (Modality m : modalities) {
      switch (m) {
        case Modality::appearance:
        case Modality::motion: out.push_back(s.features.at(static_cast<std::size_t>(m)).cols()); break;
        case Modality::steering: out.push_back(require(steering, m).hidden()); break;
        case Modality::speed: out.push_back(require(speed, m).hidden()); break;
      }
    }
    return out;
  }

 private:
  static const DynamicsEmbedder& require(const std::optional<DynamicsEmbedder>& e, Modality m) {
    if (!e) throw std::logic_error(std::string("feature pipeline has no ") + to_string(m) + " embedder");
    return *e;
  }
};

/// Trains the embedders the pipeline needs on the given sequences only.
inline FeaturePipeline fit_pipeline(std::span<const Sequence> seqs, std::span<const std::size_t> indices,
                                    std::vector<Modality> modalities, const EmbedderOptions& opt,
                                    std::size_t delta = 1) {
  FeaturePipeline p;
  p.modalities = std::move(modalities);
  p.delta = delta;
  if (p.modalities.empty()) throw std::invalid_argument("feature pipeline needs at least one modality");
  auto fit = [&](auto signal_of, std::uint64_t salt) {
    std::vector<Matrix<float>> triples;
    std::vector<std::size_t> labels;
    for (auto i : indices) {
      triples.push_back(dynamics_triples(signal_of(seqs[i]), delta));
      labels.push_back(seqs[i].class_label);
    }
    EmbedderOptions o = opt;
    o.seed = opt.seed ^ salt;
    return train_embedder(triples, labels, o).embedder;
  };
  if (p.uses(Modality::steering)) p.steering = fit([](const Sequence& s) { return s.steering; }, 0x5151);
  if (p.uses(Modality::speed)) p.speed = fit([](const Sequence& s) { return s.speed; }, 0x5353);
  return p;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  std::vector<double> horizons = {1, 2, 3, 4, 5};
  bool per_frame = false;  // decide on the unpooled distribution instead
  std::size_t batch_size = 64;
};

struct EvalReport {
  std::vector<double> horizons;
  std::size_t num_classes = 0;
  std::size_t num_test_sequences = 0;
  std::vector<double> accuracy_at;
  std::vector<std::vector<double>> per_class_accuracy_at;  // [h][class]; 0 for classes absent from the test set
  std::vector<std::vector<std::vector<std::size_t>>> confusion_at;  // [h][true][predicted]

  bool operator==(const EvalReport&) const = default;

  double mean_accuracy() const {
    return accuracy_at.empty() ? 0.0
                               : std::accumulate(accuracy_at.begin(), accuracy_at.end(), 0.0) / accuracy_at.size();
  }
  double accuracy_at_horizon(double h) const {
    for (std::size_t i = 0; i < horizons.size(); ++i)
      if (horizons[i] == h) return accuracy_at[i];
    throw std::out_of_range("report has no horizon " + std::to_string(h));
  }
};

/// Number of frames observed by horizon h seconds: ceil(h * fps).
inline std::size_t frames_for_horizon(double h, double fps) {
  if (!(h > 0)) throw std::invalid_argument("horizon must be positive");
  return static_cast<std::size_t>(std::ceil(h * fps - 1e-9));
}

/// Decisions of every horizon for each sequence. Each horizon feeds the model
/// only the first ceil(h * fps) frames.
template <std::floating_point S>
std::vector<std::vector<std::size_t>> horizon_decisions(const AnyModel<S>& model,
                                                        std::span<const ModelInputs<S>> inputs,
                                                        const EvalOptions& opt) {
  const double fps = config_of(model).fps;
  std::vector<std::vector<std::size_t>> out(inputs.size(), std::vector<std::size_t>(opt.horizons.size()));
  for (std::size_t hi = 0; hi < opt.horizons.size(); ++hi) {
    const std::size_t n = frames_for_horizon(opt.horizons[hi], fps);
    for (std::size_t start = 0; start < inputs.size(); start += opt.batch_size) {
      const std::size_t end = std::min(inputs.size(), start + opt.batch_size);
      std::vector<ModelInputs<S>> cut;
      for (std::size_t i = start; i < end; ++i) {
        ModelInputs<S> c;
        for (const auto& m : inputs[i]) {
          if (n > m.rows())
            throw std::out_of_range("horizon " + std::to_string(opt.horizons[hi]) + "s needs " + std::to_string(n) +
                                    " frames, sequence has " + std::to_string(m.rows()));
          c.push_back(m.row_block(0, n));
        }
        cut.push_back(std::move(c));
      }
      std::vector<const ModelInputs<S>*> ptrs;
      for (const auto& c : cut) ptrs.push_back(&c);
      const auto timelines = predict_timelines(model, make_batch<S>(ptrs));
      for (std::size_t k = 0; k < timelines.size(); ++k) {
        const auto& tl = timelines[k];
        out[start + k][hi] = opt.per_frame ? argmax(tl.per_frame.row(n - 1)) : tl.predicted_class_at[n - 1];
      }
    }
  }
  return out;
}

inline EvalReport assemble_report(const std::vector<double>& horizons, std::size_t num_classes,
                                  std::span<const std::size_t> labels,
                                  const std::vector<std::vector<std::size_t>>& decisions) {
  if (labels.empty()) throw std::invalid_argument("evaluation needs at least one test sequence");
  EvalReport r;
  r.horizons = horizons;
  r.num_classes = num_classes;
  r.num_test_sequences = labels.size();
  std::vector<std::size_t> class_count(num_classes, 0);
  for (auto l : labels) {
    if (l >= num_classes) throw std::out_of_range("label " + std::to_string(l) + " out of range");
    ++class_count[l];
  }
  for (std::size_t hi = 0; hi < horizons.size(); ++hi) {
    std::vector<std::vector<std::size_t>> conf(num_classes, std::vector<std::size_t>(num_classes, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) ++conf[labels[i]][decisions[i][hi]];
    std::size_t trace = 0;
    std::vector<double> per_class(num_classes, 0.0);
    for (std::size_t c = 0; c < num_classes; ++c) {
      trace += conf[c][c];
      if (class_count[c]) per_class[c] = static_cast<double>(conf[c][c]) / static_cast<double>(class_count[c]);
    }
    r.accuracy_at.push_back(static_cast<double>(trace) / static_cast<double>(labels.size()));
    r.per_class_accuracy_at.push_back(std::move(per_class));
    r.confusion_at.push_back(std::move(conf));
  }
  return r;
}

template <std::floating_point S>
EvalReport evaluate(const AnyModel<S>& model, std::span<const ModelInputs<S>> inputs,
                    std::span<const std::size_t> labels, const EvalOptions& opt = {}) {
  if (inputs.size() != labels.size()) throw std::invalid_argument("evaluate: input/label count mismatch");
  if (inputs.empty()) throw std::invalid_argument("evaluation needs at least one test sequence");
  return assemble_report(opt.horizons, config_of(model).num_classes, labels, horizon_decisions(model, inputs, opt));
}

/// Earliest frame t whose pooled decision is `label` on every frame of
/// [t, t + sustain); the window must fit inside the timeline.
inline std::optional<std::size_t> time_to_first_sustained_correct(const PredictionTimeline& tl, std::size_t label,
                                                                  std::size_t sustain = 10) {
  if (sustain == 0) throw std::invalid_argument("sustain must be at least 1 frame");
  std::size_t run = 0;
  for (std::size_t t = 0; t < tl.predicted_class_at.size(); ++t) {
    run = tl.predicted_class_at[t] == label ? run + 1 : 0;
    if (run == sustain) return t + 1 - sustain;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  ModelKind kind = ModelKind::mm_lstm;
  std::size_t hidden = 64;
  WeightingFn weighting = WeightingFn::sigmoid(3.0, 6.0, 5.0);
  double intermediate_loss_weight = 1.0;
  std::vector<Modality> modalities = all_modalities();
  std::vector<std::vector<std::size_t>> stage_groups;  // two-stage only, indices into `modalities`
  std::size_t epochs = 10;
  double learning_rate = 0.001;
  double clip_norm = 5.0;
  std::size_t batch_size = 16;
  double validation_fraction = 0.1;
  std::vector<double> horizons = {1, 2, 3, 4, 5};
  EmbedderOptions embedder;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const TrainOptions& o) {
  std::vector<std::string> mods;
  for (auto m : o.modalities) mods.emplace_back(to_string(m));
  return {{"kind", to_string(o.kind)},
          {"hidden", o.hidden},
          {"weighting", to_json(o.weighting)},
          {"intermediate_loss_weight", o.intermediate_loss_weight},
          {"modalities", mods},
          {"stage_groups", o.stage_groups},
          {"epochs", o.epochs},
          {"learning_rate", o.learning_rate},
          {"clip_norm", o.clip_norm},
          {"batch_size", o.batch_size},
          {"validation_fraction", o.validation_fraction},
          {"horizons", o.horizons},
          {"embedder",
           {{"hidden", o.embedder.hidden},
            {"epochs", o.embedder.epochs},
            {"learning_rate", o.embedder.learning_rate},
            {"batch_size", o.embedder.batch_size}}},
          {"seed", o.seed}};
}

struct TrainLog {
  std::vector<double> epoch_loss;                         // mean training batch loss
  std::vector<std::vector<double>> epoch_val_accuracy;    // [epoch][horizon]
  std::vector<double> epoch_seconds;
  std::optional<std::size_t> best_epoch;                   // snapshot kept; none = initial model
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  nlohmann::json config;

  /// Everything except timing.
  bool same_outcome(const TrainLog& o) const {
    return epoch_loss == o.epoch_loss && epoch_val_accuracy == o.epoch_val_accuracy && best_epoch == o.best_epoch &&
           seed == o.seed && config == o.config;
  }
};

struct TrainedModel {
  AnyModel<float> model;
  FeaturePipeline pipeline;
  TrainLog log;
};

/// Stratified, seeded carve of `fraction` of each class out of `indices`.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> carve_validation(
    std::span<const Sequence> seqs, std::span<const std::size_t> indices, double fraction, std::uint64_t seed) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (auto i : indices) by_class[seqs[i].class_label].push_back(i);
  std::vector<std::size_t> fit, val;
  for (auto& [label, idx] : by_class) {
    auto rng = stream_for(seed, "validation/" + std::to_string(label));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    val.insert(val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    fit.insert(fit.end(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
  }
  std::sort(fit.begin(), fit.end());
  std::sort(val.begin(), val.end());
  return {fit, val};
}

inline ModelConfig model_config_for(const TrainOptions& opt, const FeaturePipeline& p, const Sequence& sample,
                                    std::size_t num_classes) {
  ModelConfig cfg;
  cfg.modality_dims = p.dims(sample);
  cfg.hidden = opt.hidden;
  cfg.num_classes = num_classes;
  cfg.fps = sample.fps;
  cfg.loss.num_classes = num_classes;
  cfg.loss.weighting = opt.weighting;
  cfg.loss.weighting.duration = static_cast<double>(sample.frames) / sample.fps;
  cfg.loss.intermediate_loss_weight = opt.intermediate_loss_weight;
  cfg.stage_groups = opt.stage_groups;
  return cfg;
}

inline std::size_t class_count(std::span<const Sequence> seqs) {
  std::size_t n = 0;
  for (const auto& s : seqs) n = std::max(n, s.class_label + 1);
  return n;
}

inline std::vector<ModelInputs<float>> features_of(const FeaturePipeline& p, std::span<const Sequence> seqs,
                                                   std::span<const std::size_t> indices) {
  std::vector<ModelInputs<float>> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(p.features(seqs[i]));
  return out;
}

inline std::vector<std::size_t> labels_of(std::span<const Sequence> seqs, std::span<const std::size_t> indices) {
  std::vector<std::size_t> out;
  for (auto i : indices) out.push_back(seqs[i].class_label);
  return out;
}

/// Trains on `train_indices`, holding out a stratified validation slice for
/// model selection by mean horizon accuracy. Deterministic given the seed.
inline TrainedModel train(std::span<const Sequence> seqs, std::span<const std::size_t> train_indices,
                          const TrainOptions& opt, std::ostream* progress = nullptr) {
  if (train_indices.empty()) throw std::invalid_argument("train: no training sequences");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t num_classes = class_count(seqs);
  auto [fit_idx, val_idx] = carve_validation(seqs, train_indices, opt.validation_fraction, opt.seed);
  if (fit_idx.empty()) throw std::invalid_argument("train: validation carve left no training sequences");

  EmbedderOptions eo = opt.embedder;
  eo.num_classes = num_classes;
  eo.fps = seqs[fit_idx.front()].fps;
  eo.weighting = opt.weighting;
  eo.weighting.duration = static_cast<double>(seqs[fit_idx.front()].frames) / eo.fps;
  eo.seed = opt.seed;
  FeaturePipeline pipeline = fit_pipeline(seqs, fit_idx, opt.modalities, eo);

  const ModelConfig cfg = model_config_for(opt, pipeline, seqs[fit_idx.front()], num_classes);
  TrainedModel out{build_model<float>(opt.kind, cfg, opt.seed), std::move(pipeline), {}};
  out.log.seed = opt.seed;
  out.log.config = to_json(opt);

  const auto fit_x = features_of(out.pipeline, seqs, fit_idx);
  const auto fit_y = labels_of(seqs, fit_idx);
  const auto val_x = features_of(out.pipeline, seqs, val_idx);
  const auto val_y = labels_of(seqs, val_idx);
  EvalOptions eval_opt;
  eval_opt.horizons = opt.horizons;

  std::vector<std::size_t> order(fit_x.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(opt.seed ^ 0xD1B54A32D192ED03ull);
  const SGDOptions sgd{opt.learning_rate, opt.clip_norm};
  AnyModel<float> best = out.model;
  double best_score = -1.0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto e0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    const double loss = train_epoch(out.model, std::span<const ModelInputs<float>>(fit_x), fit_y, order,
                                    opt.batch_size, sgd);
    out.log.epoch_loss.push_back(loss);
    std::vector<double> acc;
    double score = 0.0;
    if (!val_x.empty()) {
      const EvalReport r = evaluate(out.model, std::span<const ModelInputs<float>>(val_x), val_y, eval_opt);
      acc = r.accuracy_at;
      score = r.mean_accuracy();
    }
    out.log.epoch_val_accuracy.push_back(acc);
    // Without validation data the latest epoch wins.
    if (val_x.empty() || score > best_score) {
      best_score = score;
      best = out.model;
      out.log.best_epoch = epoch;
    }
    out.log.epoch_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - e0).count());
    if (progress) {
      *progress << "epoch " << epoch << " loss " << loss;
      if (!val_x.empty()) *progress << " val_mean_acc " << score;
      *progress << " (" << out.log.epoch_seconds.back() << " s)\n";
    }
  }
  out.model = std::move(best);
  out.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Timelines of full sequences (all frames observed).
inline std::vector<PredictionTimeline> full_timelines(const AnyModel<float>& model,
                                                      std::span<const ModelInputs<float>> inputs,
                                                      std::size_t batch_size = 64) {
  std::vector<PredictionTimeline> out;
  for (std::size_t start = 0; start < inputs.size(); start += batch_size) {
    std::vector<const ModelInputs<float>*> ptrs;
    for (std::size_t i = start; i < std::min(inputs.size(), start + batch_size); ++i) ptrs.push_back(&inputs[i]);
    for (auto& tl : predict_timelines(model, make_batch<float>(ptrs))) out.push_back(std::move(tl));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV reports

/// Shortest decimal text that reads back to the same double.
inline std::string format_real(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string confusion_file_name(double horizon) { return "confusion_h" + format_real(horizon) + ".csv"; }

inline void write_report(const EvalReport& r, const std::filesystem::path& dir) {
  if (r.num_test_sequences == 0) throw std::invalid_argument("write_report: empty test set");
  std::filesystem::create_directories(dir);
  auto open = [&](const std::string& name) {
    std::ofstream f(dir / name, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + (dir / name).string() + "'");
    return f;
  };
  {
    auto f = open("accuracy.csv");
    f << "horizon_s,accuracy\n";
    for (std::size_t i = 0; i < r.horizons.size(); ++i)
      f << format_real(r.horizons[i]) << ',' << format_real(r.accuracy_at[i]) << '\n';
  }
  {
    auto f = open("per_class.csv");
    f << "horizon_s,class,accuracy\n";
    for (std::size_t i = 0; i < r.horizons.size(); ++i)
      for (std::size_t c = 0; c < r.num_classes; ++c)
        f << format_real(r.horizons[i]) << ',' << c << ',' << format_real(r.per_class_accuracy_at[i][c]) << '\n';
  }
  for (std::size_t i = 0; i < r.horizons.size(); ++i) {
    auto f = open(confusion_file_name(r.horizons[i]));
    for (std::size_t c = 0; c < r.num_classes; ++c) f << (c ? "," : "") << "pred_" << c;
    f << '\n';
    for (const auto& row : r.confusion_at[i]) {
      for (std::size_t c = 0; c < row.size(); ++c) f << (c ? "," : "") << row[c];
      f << '\n';
    }
  }
}

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace detail

/// Parses a directory written by write_report.
inline EvalReport read_report(const std::filesystem::path& dir) {
  EvalReport r;
  for (const auto& row : detail::read_csv(dir / "accuracy.csv")) {
    r.horizons.push_back(std::stod(row.at(0)));
    r.accuracy_at.push_back(std::stod(row.at(1)));
  }
  r.per_class_accuracy_at.resize(r.horizons.size());
  for (const auto& row : detail::read_csv(dir / "per_class.csv")) {
    const double h = std::stod(row.at(0));
    const auto it = std::find(r.horizons.begin(), r.horizons.end(), h);
    if (it == r.horizons.end()) throw std::runtime_error("per_class.csv names unknown horizon " + row.at(0));
    r.per_class_accuracy_at[it - r.horizons.begin()].push_back(std::stod(row.at(2)));
  }
  for (double h : r.horizons) {
    std::vector<std::vector<std::size_t>> conf;
    for (const auto& row : detail::read_csv(dir / confusion_file_name(h))) {
      std::vector<std::size_t> vals;
      for (const auto& c : row) vals.push_back(std::stoul(c));
      conf.push_back(std::move(vals));
    }
    r.confusion_at.push_back(std::move(conf));
  }
  r.num_classes = r.confusion_at.empty() ? 0 : r.confusion_at.front().size();
  if (!r.confusion_at.empty())
    for (const auto& row : r.confusion_at.front())
      r.num_test_sequences += std::accumulate(row.begin(), row.end(), std::size_t{0});
  return r;
}

// ---------------------------------------------------------------------------
// Model directories: model.mmw + model.json, plus one MMW1 file per embedder.

inline void save_trained(const TrainedModel& t, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> mods;
  for (auto m : t.pipeline.modalities) mods.emplace_back(to_string(m));
  const ModelConfig& cfg = config_of(t.model);
  nlohmann::json j = {{"format", "MMW1"},
                      {"kind", to_string(kind_of(t.model))},
                      {"config", to_json(cfg)},
                      {"modalities", mods},
                      {"delta", t.pipeline.delta},
                      {"train", t.log.config}};
  std::visit([&](const auto& m) { save_params(m, dir / "model.mmw"); }, t.model);
  if (t.pipeline.steering) {
    save_params(*t.pipeline.steering, dir / "steering.mmw");
    j["steering_embedder"] = to_json(t.pipeline.steering->net.config);
  }
  if (t.pipeline.speed) {
    save_params(*t.pipeline.speed, dir / "speed.mmw");
    j["speed_embedder"] = to_json(t.pipeline.speed->net.config);
  }
  std::ofstream(dir / "model.json") << j.dump(2) << '\n';
}

inline TrainedModel load_trained(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw std::runtime_error("no model.json in '" + dir.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw WeightFormatError("model.json: " + std::string(e.what()));
  }
  const ModelKind kind = [&] {
    const std::string k = j.at("kind").get<std::string>();
    for (auto c : {ModelKind::mm_lstm, ModelKind::single_stream, ModelKind::ms_lstm_two_stage})
      if (k == to_string(c)) return c;
    throw WeightFormatError("model.json: unknown kind '" + k + "'");
  }();
  const ModelConfig cfg = model_config_from_json(j.at("config"));
  TrainedModel t{build_model<float>(kind, cfg, 0), {}, {}};
  std::visit([&](auto& m) { load_params(m, dir / "model.mmw"); }, t.model);
  t.pipeline.modalities.clear();
  for (const auto& m : j.at("modalities")) t.pipeline.modalities.push_back(modality_from_string(m.get<std::string>()));
  t.pipeline.delta = j.at("delta").get<std::size_t>();
  auto load_embedder = [&](const char* key, const char* file) -> std::optional<DynamicsEmbedder> {
    if (!j.contains(key)) return std::nullopt;
    DynamicsEmbedder e(SingleStreamModel<float>(model_config_from_json(j.at(key))));
    load_params(e, dir / file);
    return e;
  };
  t.pipeline.steering = load_embedder("steering_embedder", "steering.mmw");
  t.pipeline.speed = load_embedder("speed_embedder", "speed.mmw");
  if (j.contains("train")) t.log.config = j.at("train");
  return t;
}

}  // namespace mmlstm
