#pragma once

// Synthetic driving-scenario sequences. Every clip starts in a shared neutral
// "driving forward" regime; at a late onset frame the class signature ramps in
// across appearance/motion feature vectors and the steering/speed traces.
// Also the VAD1 dataset format and train/test partitioning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mmlstm/binary.hpp"
#include "mmlstm/numerics.hpp"

namespace mmlstm {

enum class Daytime { day, night };
enum class Weather { clear, adverse };

inline const char* to_string(Daytime d) { return d == Daytime::day ? "day" : "night"; }
inline const char* to_string(Weather w) { return w == Weather::clear ? "clear" : "adverse"; }

inline Daytime daytime_from_string(const std::string& s) {
  if (s == "day") return Daytime::day;
  if (s == "night") return Daytime::night;
  throw std::invalid_argument("unknown daytime '" + s + "'");
}
inline Weather weather_from_string(const std::string& s) {
  if (s == "clear") return Weather::clear;
  if (s == "adverse") return Weather::adverse;
  throw std::invalid_argument("unknown weather '" + s + "'");
}

struct Sequence {
  std::string id;
  std::string scenario;
  std::size_t class_label = 0;
  std::size_t frames = 0;
  double fps = 30.0;
  std::vector<Matrix<float>> features;  // appearance, motion: T x dim each
  std::vector<float> steering;          // degrees, positive = left
  std::vector<float> speed;             // km/h
  std::size_t onset_frame = 0;
  Daytime daytime = Daytime::day;
  Weather weather = Weather::clear;
  std::string user;

  bool operator==(const Sequence&) const = default;
};

// ---------------------------------------------------------------------------
// Scenario presets

enum class SteeringShape { flat, ramp_left, ramp_right, swerve_left, swerve_right };
enum class SpeedShape { steady, stop, slow_down, speed_up };

struct ClassKinematics {
  SteeringShape steering = SteeringShape::flat;
  SpeedShape speed = SpeedShape::steady;
};

struct ScenarioPreset {
  std::string name;
  std::vector<std::string> class_names;
  std::vector<ClassKinematics> kinematics;
  double kinematic_gain = 1.0;  // reactions to other road users are milder
};

inline const std::vector<ScenarioPreset>& scenario_presets() {
  using K = ClassKinematics;
  using St = SteeringShape;
  using Sp = SpeedShape;
  static const std::vector<ScenarioPreset> presets = {
      {"DM",
       {"FF", "SS", "LL", "RR", "CL", "CR"},
       {K{St::flat, Sp::steady}, K{St::flat, Sp::stop}, K{St::ramp_left, Sp::slow_down},
        K{St::ramp_right, Sp::slow_down}, K{St::swerve_left, Sp::steady}, K{St::swerve_right, Sp::steady}},
       1.0},
      {"TR",
       {"SR", "PR", "WD", "CD", "DO"},
       {K{St::flat, Sp::stop}, K{St::flat, Sp::speed_up}, K{St::swerve_left, Sp::steady}, K{St::flat, Sp::steady},
        K{St::ramp_right, Sp::slow_down}},
       1.0},
      {"AC",
       {"AC", "AP", "AA", "NA"},
       {K{St::flat, Sp::stop}, K{St::swerve_right, Sp::stop}, K{St::ramp_left, Sp::stop}, K{St::flat, Sp::steady}},
       1.0},
      {"PI",
       {"CR", "SS", "AS", "NP"},
       {K{St::flat, Sp::stop}, K{St::flat, Sp::slow_down}, K{St::flat, Sp::steady}, K{St::flat, Sp::speed_up}},
       0.6},
      {"FCI",
       {"FF", "SS", "LL", "RR", "CL", "CR"},
       {K{St::flat, Sp::steady}, K{St::flat, Sp::stop}, K{St::ramp_left, Sp::slow_down},
        K{St::ramp_right, Sp::slow_down}, K{St::swerve_left, Sp::steady}, K{St::swerve_right, Sp::steady}},
       0.4},
  };
  return presets;
}

inline const ScenarioPreset& scenario_preset(const std::string& name) {
  for (const auto& p : scenario_presets())
    if (p.name == name) return p;
  throw std::invalid_argument("unknown scenario '" + name + "' (expected DM, TR, AC, PI or FCI)");
}

// ---------------------------------------------------------------------------
// Configuration

struct GeneratorConfig {
  std::string scenario = "DM";
  std::size_t num_classes = 6;
  std::size_t samples_per_class = 600;
  std::size_t frames = 150;
  double fps = 30.0;
  std::size_t appearance_dim = 32;
  std::size_t motion_dim = 32;
  double noise_sigma = 1.0;           // feature noise
  double dynamics_noise_sigma = 0.5;  // steering (deg) and speed (km/h) sensor noise
  double night_snr_penalty = 0.5;
  double adverse_weather_snr_penalty = 0.7;
  double day_fraction = 2.0 / 3.0;
  double clear_fraction = 2.0 / 3.0;
  bool cross_modal_coding = false;
  double onset_mean_s = 4.0;
  double onset_std_s = 0.3;
  std::size_t ramp_frames = 15;
  std::size_t num_users = 4;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("GeneratorConfig: " + m); };
    scenario_preset(scenario);
    if (num_classes == 0) fail("num_classes must be positive");
    if (samples_per_class == 0) fail("samples_per_class must be at least 1");
    if (frames < 2) fail("need at least 2 frames");
    if (!(fps > 0)) fail("fps must be positive");
    if (appearance_dim == 0 || motion_dim == 0) fail("feature widths must be positive");
    if (!(noise_sigma >= 0) || !(dynamics_noise_sigma >= 0)) fail("noise must be nonnegative");
    if (!(night_snr_penalty > 0 && night_snr_penalty <= 1)) fail("night_snr_penalty must lie in (0, 1]");
    if (!(adverse_weather_snr_penalty > 0 && adverse_weather_snr_penalty <= 1))
      fail("adverse_weather_snr_penalty must lie in (0, 1]");
    if (!(day_fraction >= 0 && day_fraction <= 1) || !(clear_fraction >= 0 && clear_fraction <= 1))
      fail("condition fractions must lie in [0, 1]");
    if (cross_modal_coding && num_classes < 3) fail("cross-modal coding needs at least 3 classes");
    if (!(onset_std_s >= 0) || !std::isfinite(onset_mean_s)) fail("bad onset distribution");
    if (ramp_frames == 0) fail("ramp_frames must be positive");
    if (num_users == 0) fail("num_users must be positive");
  }

  std::size_t onset_min() const noexcept { return (frames + 1) / 2; }
  std::size_t onset_max() const noexcept {
    return frames > ramp_frames ? std::max(onset_min(), frames - ramp_frames) : onset_min();
  }
};

inline nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"scenario", c.scenario},
          {"num_classes", c.num_classes},
          {"samples_per_class", c.samples_per_class},
          {"frames", c.frames},
          {"fps", c.fps},
          {"appearance_dim", c.appearance_dim},
          {"motion_dim", c.motion_dim},
          {"noise_sigma", c.noise_sigma},
          {"dynamics_noise_sigma", c.dynamics_noise_sigma},
          {"night_snr_penalty", c.night_snr_penalty},
          {"adverse_weather_snr_penalty", c.adverse_weather_snr_penalty},
          {"day_fraction", c.day_fraction},
          {"clear_fraction", c.clear_fraction},
          {"cross_modal_coding", c.cross_modal_coding},
          {"onset_mean_s", c.onset_mean_s},
          {"onset_std_s", c.onset_std_s},
          {"ramp_frames", c.ramp_frames},
          {"num_users", c.num_users},
          {"seed", c.seed}};
}

inline std::string class_name(const GeneratorConfig& cfg, std::size_t c) {
  const auto& names = scenario_preset(cfg.scenario).class_names;
  return c < names.size() ? names[c] : "C" + std::to_string(c);
}

// ---------------------------------------------------------------------------
// Seeding

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char ch : s) h = (h ^ ch) * 0x100000001B3ull;
  return h;
}

/// Every sequence draws from its own stream, keyed by (seed, id), so the
/// order in which sequences are produced cannot matter.
inline std::mt19937_64 stream_for(std::uint64_t seed, std::string_view key) {
  return std::mt19937_64(splitmix64(seed ^ fnv1a(key)));
}

inline std::string sequence_id(const GeneratorConfig& cfg, std::size_t label, std::size_t index) {
  std::string num = std::to_string(index);
  if (num.size() < 5) num.insert(0, 5 - num.size(), '0');
  return cfg.scenario + "-" + class_name(cfg, label) + "-" + num;
}

// ---------------------------------------------------------------------------
// Class signatures

/// Modality order used throughout: appearance, motion, steering, speed.
inline constexpr std::size_t kSignalModalities = 4;
inline constexpr const char* kSignalModalityNames[kSignalModalities] = {"appearance", "motion", "steering", "speed"};

/// Signature index of class `c` in modality `m`. With cross-modal coding the
/// classes of each modality are paired off along a different perfect matching
/// of the complete graph (round-robin schedule), so a single modality sees
/// pairs of identical classes while no two classes share every modality.
inline std::size_t signature_of(const GeneratorConfig& cfg, std::size_t m, std::size_t c) {
  if (!cfg.cross_modal_coding) return c;
  const std::size_t n = cfg.num_classes + (cfg.num_classes % 2);  // add a bye for odd counts
  const std::size_t rounds = n - 1;
  const std::size_t r = m % rounds;
  if (c == n - 1) return 0;
  // Pair 0 is (r, n-1); pair i >= 1 is (r+i, r-i) modulo n-1.
  const std::size_t d = (c + rounds - r) % rounds;  // offset of c from r
  return d == 0 ? 0 : std::min(d, rounds - d);
}

inline std::size_t signature_count(const GeneratorConfig& cfg) {
  return cfg.cross_modal_coding ? (cfg.num_classes + 1) / 2 : cfg.num_classes;
}

inline ClassKinematics kinematics_of(const GeneratorConfig& cfg, std::size_t c, double* steer_scale,
                                     double* speed_scale) {
  const auto& preset = scenario_preset(cfg.scenario);
  *steer_scale = *speed_scale = 1.0;
  if (!cfg.cross_modal_coding && c < preset.kinematics.size()) return preset.kinematics[c];
  const std::size_t ks = signature_of(cfg, 2, c), kv = signature_of(cfg, 3, c);
  *steer_scale = 1.0 + static_cast<double>(ks / 5);
  *speed_scale = 1.0 + static_cast<double>(kv / 4);
  return {static_cast<SteeringShape>(ks % 5), static_cast<SpeedShape>(kv % 4)};
}

struct TemplateBank {
  // [modality][signature] and [modality] for the shared pre-onset regime;
  // modality 0 = appearance, 1 = motion.
  std::vector<std::vector<std::vector<double>>> signatures;
  std::vector<std::vector<double>> neutral;
};

inline TemplateBank build_templates(const GeneratorConfig& cfg) {
  TemplateBank bank;
  auto rng = stream_for(cfg.seed, "templates/" + cfg.scenario);
  std::normal_distribution<double> z(0.0, 1.0);
  const std::size_t dims[2] = {cfg.appearance_dim, cfg.motion_dim};
  for (std::size_t m = 0; m < 2; ++m) {
    std::vector<double> neutral(dims[m]);
    for (double& v : neutral) v = z(rng);
    bank.neutral.push_back(std::move(neutral));
    std::vector<std::vector<double>> sig(signature_count(cfg), std::vector<double>(dims[m]));
    for (auto& t : sig)
      for (double& v : t) v = z(rng);
    bank.signatures.push_back(std::move(sig));
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Rendering

/// Per-sequence nuisance variables, independent of the class.
struct SequenceLatents {
  std::size_t onset = 0;
  Daytime daytime = Daytime::day;
  Weather weather = Weather::clear;
  std::size_t user = 0;
  double base_speed = 45.0;
  double steer_gain = 1.0;
  double speed_gain = 1.0;
};

/// Draws the latents; must be the first use of a sequence's stream.
inline SequenceLatents draw_latents(const GeneratorConfig& cfg, std::mt19937_64& rng) {
  SequenceLatents l;
  std::normal_distribution<double> onset_s(cfg.onset_mean_s, cfg.onset_std_s);
  const double f = std::round(onset_s(rng) * cfg.fps);
  const double lo = static_cast<double>(cfg.onset_min()), hi = static_cast<double>(cfg.onset_max());
  l.onset = static_cast<std::size_t>(std::clamp(std::isfinite(f) ? f : lo, lo, hi));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  l.daytime = u(rng) < cfg.day_fraction ? Daytime::day : Daytime::night;
  l.weather = u(rng) < cfg.clear_fraction ? Weather::clear : Weather::adverse;
  l.user = std::uniform_int_distribution<std::size_t>(0, cfg.num_users - 1)(rng);
  l.base_speed = std::uniform_real_distribution<double>(30.0, 60.0)(rng);
  l.steer_gain = std::uniform_real_distribution<double>(0.8, 1.2)(rng);
  l.speed_gain = std::uniform_real_distribution<double>(0.8, 1.2)(rng);
  return l;
}

inline double snr_factor(const GeneratorConfig& cfg, const SequenceLatents& l) {
  return (l.daytime == Daytime::night ? cfg.night_snr_penalty : 1.0) *
         (l.weather == Weather::adverse ? cfg.adverse_weather_snr_penalty : 1.0);
}

/// Fraction of the class signature present at frame t.
inline double ramp_at(const GeneratorConfig& cfg, const SequenceLatents& l, std::size_t t) {
  if (t < l.onset) return 0.0;
  return std::min(1.0, static_cast<double>(t - l.onset + 1) / static_cast<double>(cfg.ramp_frames));
}

/// Noise-free signals of a sequence with the given latents and class.
struct CleanSignals {
  std::vector<Matrix<double>> features;
  std::vector<double> steering;
  std::vector<double> speed;
};

inline double steering_profile(SteeringShape s, double tau) {
  constexpr double kTurnDeg = 30.0, kSwerveDeg = 8.0, kTurnS = 1.0, kSwerveS = 2.0;
  const double pi = std::acos(-1.0);
  switch (s) {
    case SteeringShape::flat: return 0.0;
    case SteeringShape::ramp_left: return kTurnDeg * std::min(1.0, tau / kTurnS);
    case SteeringShape::ramp_right: return -kTurnDeg * std::min(1.0, tau / kTurnS);
    case SteeringShape::swerve_left: return tau < kSwerveS ? kSwerveDeg * std::sin(2 * pi * tau / kSwerveS) : 0.0;
    case SteeringShape::swerve_right: return tau < kSwerveS ? -kSwerveDeg * std::sin(2 * pi * tau / kSwerveS) : 0.0;
  }
  return 0.0;
}

/// Multiplier on the cruising speed.
inline double speed_profile(SpeedShape s, double tau) {
  switch (s) {
    case SpeedShape::steady: return 1.0;
    case SpeedShape::stop: return std::max(0.0, 1.0 - tau / 1.5);
    case SpeedShape::slow_down: return 1.0 - 0.4 * std::min(1.0, tau / 1.0);
    case SpeedShape::speed_up: return 1.0 + 0.3 * std::min(1.0, tau / 1.0);
  }
  return 1.0;
}

inline CleanSignals render_clean(const GeneratorConfig& cfg, const TemplateBank& bank, const SequenceLatents& l,
                                 std::size_t label) {
  CleanSignals out;
  const double snr = snr_factor(cfg, l);
  for (std::size_t m = 0; m < 2; ++m) {
    const auto& neutral = bank.neutral[m];
    const auto& sig = bank.signatures[m][signature_of(cfg, m, label)];
    Matrix<double> x(cfg.frames, neutral.size());
    for (std::size_t t = 0; t < cfg.frames; ++t) {
      const double r = ramp_at(cfg, l, t);
      for (std::size_t j = 0; j < neutral.size(); ++j) x(t, j) = snr * ((1 - r) * neutral[j] + r * sig[j]);
    }
    out.features.push_back(std::move(x));
  }
  double steer_scale = 1, speed_scale = 1;
  const ClassKinematics k = kinematics_of(cfg, label, &steer_scale, &speed_scale);
  const double gain = scenario_preset(cfg.scenario).kinematic_gain;
  out.steering.resize(cfg.frames);
  out.speed.resize(cfg.frames);
  for (std::size_t t = 0; t < cfg.frames; ++t) {
    const double tau = t < l.onset ? -1.0 : static_cast<double>(t - l.onset) / cfg.fps;
    const double steer = tau < 0 ? 0.0 : steering_profile(k.steering, tau) * steer_scale;
    const double mult = tau < 0 ? 1.0 : speed_profile(k.speed, tau);
    out.steering[t] = gain * l.steer_gain * steer;
    out.speed[t] = l.base_speed * (1.0 + gain * l.speed_gain * speed_scale * (mult - 1.0));
  }
  return out;
}

inline Sequence generate_sequence(const GeneratorConfig& cfg, const TemplateBank& bank, std::size_t label,
                                  std::size_t index) {
  Sequence s;
  s.id = sequence_id(cfg, label, index);
  s.scenario = cfg.scenario;
  s.class_label = label;
  s.frames = cfg.frames;
  s.fps = cfg.fps;
  auto rng = stream_for(cfg.seed, s.id);
  const SequenceLatents l = draw_latents(cfg, rng);
  s.onset_frame = l.onset;
  s.daytime = l.daytime;
  s.weather = l.weather;
  s.user = "user" + std::to_string(l.user);

  const CleanSignals clean = render_clean(cfg, bank, l, label);
  std::normal_distribution<double> z(0.0, 1.0);
  for (const auto& x : clean.features) {
    Matrix<float> f(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i)
      f.values()[i] = static_cast<float>(x.values()[i] + cfg.noise_sigma * z(rng));
    s.features.push_back(std::move(f));
  }
  s.steering.resize(cfg.frames);
  s.speed.resize(cfg.frames);
  for (std::size_t t = 0; t < cfg.frames; ++t) {
    s.steering[t] = static_cast<float>(clean.steering[t] + cfg.dynamics_noise_sigma * z(rng));
    s.speed[t] = static_cast<float>(std::max(0.0, clean.speed[t] + cfg.dynamics_noise_sigma * z(rng)));
  }
  return s;
}

/// All sequences, class-major (class 0 samples first). With cfg.threads > 1
/// the work is split across threads; the result is identical either way.
inline std::vector<Sequence> generate_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  const TemplateBank bank = build_templates(cfg);
  const std::size_t total = cfg.num_classes * cfg.samples_per_class;
  std::vector<Sequence> out(total);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i)
      out[i] = generate_sequence(cfg, bank, i / cfg.samples_per_class, i % cfg.samples_per_class);
  };
  const std::size_t threads = std::clamp<std::size_t>(cfg.threads, 1, std::max<std::size_t>(total, 1));
  if (threads == 1) {
    work(0, total);
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(work, total * k / threads, total * (k + 1) / threads);
  for (auto& t : pool) t.join();
  return out;
}

// ---------------------------------------------------------------------------
// Brute-force nearest-template oracle

/// Frames an oracle may look at.
enum class OracleWindow { full, before_onset };

/// Class whose noise-free rendering (with this sequence's own latents) is
/// closest to the sequence, summing noise-normalized squared distances over
/// the chosen modalities (indices into kSignalModalityNames). Ties go to the
/// lowest class.
inline std::size_t nearest_template_class(const GeneratorConfig& cfg, const TemplateBank& bank, const Sequence& s,
                                          std::span<const std::size_t> modalities, OracleWindow window) {
  auto rng = stream_for(cfg.seed, s.id);
  const SequenceLatents l = draw_latents(cfg, rng);
  const std::size_t end = window == OracleWindow::full ? s.frames : std::min(s.frames, s.onset_frame);
  const double fvar = std::max(cfg.noise_sigma * cfg.noise_sigma, 1e-12);
  const double dvar = std::max(cfg.dynamics_noise_sigma * cfg.dynamics_noise_sigma, 1e-12);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    const CleanSignals clean = render_clean(cfg, bank, l, c);
    double d = 0;
    for (std::size_t m : modalities) {
      for (std::size_t t = 0; t < end; ++t) {
        if (m < 2) {
          for (std::size_t j = 0; j < clean.features[m].cols(); ++j) {
            const double e = s.features[m](t, j) - clean.features[m](t, j);
            d += e * e / fvar;
          }
        } else {
          const double e = m == 2 ? s.steering[t] - clean.steering[t] : s.speed[t] - std::max(0.0, clean.speed[t]);
          d += e * e / dvar;
        }
      }
    }
    if (d < best_d) best_d = d, best = c;
  }
  return best;
}

inline double nearest_template_accuracy(const GeneratorConfig& cfg, std::span<const Sequence> seqs,
                                        std::span<const std::size_t> modalities, OracleWindow window) {
  if (seqs.empty()) throw std::invalid_argument("nearest_template_accuracy: no sequences");
  const TemplateBank bank = build_templates(cfg);
  std::size_t hits = 0;
  for (const auto& s : seqs) hits += nearest_template_class(cfg, bank, s, modalities, window) == s.class_label;
  return static_cast<double>(hits) / static_cast<double>(seqs.size());
}

// ---------------------------------------------------------------------------
// VAD1 files + manifest.jsonl

class DatasetFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public DatasetFormatError {
 public:
  using DatasetFormatError::DatasetFormatError;
};
class TruncatedFileError : public DatasetFormatError {
 public:
  using DatasetFormatError::DatasetFormatError;
};
class ManifestMismatchError : public DatasetFormatError {
 public:
  using DatasetFormatError::DatasetFormatError;
};

inline constexpr char kSequenceMagic[4] = {'V', 'A', 'D', '1'};

inline binary::Writer encode_sequence(const Sequence& s) {
  binary::Writer w;
  w.bytes(kSequenceMagic, 4);
  w.u32(static_cast<std::uint32_t>(s.frames));
  w.u32(static_cast<std::uint32_t>(s.features.size()));
  for (const auto& f : s.features) w.u32(static_cast<std::uint32_t>(f.cols()));
  for (const auto& f : s.features) w.f32s(f.values());
  w.f32s(s.steering);
  w.f32s(s.speed);
  w.u32(static_cast<std::uint32_t>(s.onset_frame));
  return w;
}

/// Fills the binary payload of `s` (frames, features, signals, onset).
inline void decode_sequence(binary::Reader& r, Sequence& s) {
  try {
    if (r.str(4) != std::string(kSequenceMagic, 4)) throw BadMagicError("'" + r.name() + "' is not a VAD1 file");
    s.frames = r.u32();
    const std::uint32_t m = r.u32();
    std::vector<std::uint32_t> dims(m);
    for (auto& d : dims) d = r.u32();
    s.features.clear();
    for (auto d : dims) {
      Matrix<float> f(s.frames, d);
      r.f32s(f.values());
      s.features.push_back(std::move(f));
    }
    s.steering.resize(s.frames);
    s.speed.resize(s.frames);
    r.f32s(s.steering);
    r.f32s(s.speed);
    s.onset_frame = r.u32();
  } catch (const binary::Truncated& e) {
    throw TruncatedFileError(e.what());
  }
  if (r.remaining() != 0)
    throw DatasetFormatError("'" + r.name() + "' has " + std::to_string(r.remaining()) + " trailing bytes");
}

inline std::string sequence_file_name(const Sequence& s) { return s.id + ".vad"; }

inline nlohmann::json manifest_record(const Sequence& s) {
  return {{"id", s.id},       {"scenario", s.scenario}, {"class", s.class_label},
          {"daytime", to_string(s.daytime)}, {"weather", to_string(s.weather)}, {"user", s.user},
          {"fps", s.fps},     {"T", s.frames},          {"file", sequence_file_name(s)}};
}

inline void write_dataset(std::span<const Sequence> seqs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write manifest in '" + dir.string() + "'");
  for (const auto& s : seqs) {
    encode_sequence(s).save((dir / sequence_file_name(s)).string());
    manifest << manifest_record(s).dump() << '\n';
  }
  if (!manifest) throw std::runtime_error("failed writing manifest in '" + dir.string() + "'");
}

inline std::vector<Sequence> read_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw std::runtime_error("no manifest.jsonl in '" + dir.string() + "'");
  std::vector<Sequence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    Sequence s;
    std::string file;
    std::size_t frames = 0;
    try {
      const auto j = nlohmann::json::parse(line);
      s.id = j.at("id").get<std::string>();
      s.scenario = j.at("scenario").get<std::string>();
      s.class_label = j.at("class").get<std::size_t>();
      s.daytime = daytime_from_string(j.at("daytime").get<std::string>());
      s.weather = weather_from_string(j.at("weather").get<std::string>());
      s.user = j.at("user").get<std::string>();
      s.fps = j.at("fps").get<double>();
      frames = j.at("T").get<std::size_t>();
      file = j.at("file").get<std::string>();
    } catch (const std::exception& e) {
      throw DatasetFormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    auto reader = binary::Reader::open((dir / file).string());
    decode_sequence(reader, s);
    if (s.frames != frames)
      throw ManifestMismatchError("'" + file + "' holds " + std::to_string(s.frames) + " frames, manifest says " +
                                  std::to_string(frames));
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Partitions

enum class SplitKind { random, daytime, weather };

inline const char* to_string(SplitKind k) {
  switch (k) {
    case SplitKind::random: return "random";
    case SplitKind::daytime: return "daytime";
    case SplitKind::weather: return "weather";
  }
  return "?";
}

inline SplitKind split_kind_from_string(const std::string& s) {
  if (s == "random") return SplitKind::random;
  if (s == "daytime") return SplitKind::daytime;
  if (s == "weather") return SplitKind::weather;
  throw std::invalid_argument("unknown split '" + s + "' (expected random, daytime or weather)");
}

struct SplitSpec {
  SplitKind kind = SplitKind::random;
  double train_fraction = 0.7;
  std::uint64_t seed = 0;
};

/// Indices into the dataset, ascending.
struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Random: per class, a seeded shuffle and a cut at round(fraction * n).
/// Daytime/weather: day (clear) sequences train, night (adverse) test.
inline DatasetSplit split(std::span<const Sequence> seqs, const SplitSpec& spec) {
  if (seqs.empty()) throw std::invalid_argument("split: empty dataset");
  DatasetSplit out;
  if (spec.kind == SplitKind::random) {
    if (!(spec.train_fraction > 0 && spec.train_fraction < 1))
      throw std::invalid_argument("split: train_fraction must lie in (0, 1)");
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < seqs.size(); ++i) by_class[seqs[i].class_label].push_back(i);
    for (auto& [label, idx] : by_class) {
      auto rng = stream_for(spec.seed, "split/" + std::to_string(label));
      std::shuffle(idx.begin(), idx.end(), rng);
      const auto cut = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(idx.size())));
      out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut));
      out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
    }
  } else {
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const bool train = spec.kind == SplitKind::daytime ? seqs[i].daytime == Daytime::day
                                                         : seqs[i].weather == Weather::clear;
      (train ? out.train : out.test).push_back(i);
    }
    if (out.train.empty() || out.test.empty())
      throw std::invalid_argument(std::string("split: dataset lacks ") +
                                  (spec.kind == SplitKind::daytime ? (out.train.empty() ? "day" : "night")
                                                                   : (out.train.empty() ? "clear" : "adverse")) +
                                  " sequences");
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

}  // namespace mmlstm
