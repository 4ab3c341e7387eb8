// mmlstm: generate synthetic datasets, train and evaluate anticipation models,
// and run the gradient-check suite.

#include <chrono>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmlstm/mmlstm.hpp"

namespace {

using namespace mmlstm;

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<double> parse_horizons(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s, ',')) {
    std::size_t used = 0;
    const double h = std::stod(item, &used);
    if (used != item.size() || !(h > 0)) throw std::invalid_argument("bad horizon '" + item + "'");
    out.push_back(h);
  }
  if (out.empty()) throw std::invalid_argument("no horizons given");
  return out;
}

struct GenArgs {
  GeneratorConfig cfg;
  std::string out;
  std::size_t feature_dim = 32;
};

struct TrainArgs {
  TrainOptions opt;
  std::string data, out, split = "random", model = "mm", weighting = "sigmoid", modalities;
  double alpha = 3.0, beta = 6.0, train_fraction = 0.7;
  std::uint64_t split_seed = 0;
  std::size_t stage1 = 0;
};

struct EvalArgs {
  std::string model, data, split = "random", horizons = "1,2,3,4,5", report_dir;
  double train_fraction = 0.7;
  std::uint64_t split_seed = 0;
  bool per_frame = false;
};

int run_gen(GenArgs& a) {
  a.cfg.appearance_dim = a.cfg.motion_dim = a.feature_dim;
  a.cfg.validate();
  nlohmann::json echo = {{"command", "gen"}, {"out", a.out}, {"config", to_json(a.cfg)}};
  std::cout << echo.dump() << std::endl;
  const auto seqs = generate_dataset(a.cfg);
  write_dataset(seqs, a.out);
  std::cout << "wrote " << seqs.size() << " sequences to " << a.out << "\n";
  return 0;
}

SplitSpec split_spec(const std::string& kind, double fraction, std::uint64_t seed) {
  return SplitSpec{split_kind_from_string(kind), fraction, seed};
}

int run_train(TrainArgs& a) {
  TrainOptions& o = a.opt;
  o.kind = model_kind_from_string(a.model);
  const auto wk = weighting_from_string(a.weighting);
  o.weighting = wk == WeightingKind::sigmoid ? WeightingFn::sigmoid(a.alpha, a.beta, 5.0)
                : wk == WeightingKind::linear ? WeightingFn::linear(5.0)
                                              : WeightingFn::uniform(5.0);
  if (!a.modalities.empty()) {
    o.modalities.clear();
    for (const auto& m : split_list(a.modalities, ',')) o.modalities.push_back(modality_from_string(m));
  }
  if (o.kind == ModelKind::ms_lstm_two_stage) {
    const std::size_t n = o.modalities.size();
    const std::size_t k = a.stage1 ? a.stage1 : n / 2;
    if (n < 2 || k == 0 || k >= n) throw std::invalid_argument("ms2 needs two nonempty modality groups");
    o.stage_groups = {{}, {}};
    for (std::size_t i = 0; i < n; ++i) o.stage_groups[i < k ? 0 : 1].push_back(i);
  }
  const SplitSpec spec = split_spec(a.split, a.train_fraction, a.split_seed);
  nlohmann::json echo = {{"command", "train"},
                         {"data", a.data},
                         {"out", a.out},
                         {"split", {{"kind", a.split}, {"train_fraction", a.train_fraction}, {"seed", a.split_seed}}},
                         {"train", to_json(o)}};
  std::cout << echo.dump() << std::endl;
  const auto seqs = read_dataset(a.data);
  if (seqs.empty()) throw std::invalid_argument("dataset '" + a.data + "' is empty");
  const auto parts = split(seqs, spec);
  TrainedModel t = train(seqs, parts.train, o, &std::cerr);
  save_trained(t, a.out);
  nlohmann::json log = {{"epoch_loss", t.log.epoch_loss},
                        {"epoch_val_accuracy", t.log.epoch_val_accuracy},
                        {"epoch_seconds", t.log.epoch_seconds},
                        {"best_epoch", t.log.best_epoch ? nlohmann::json(*t.log.best_epoch) : nlohmann::json()},
                        {"wall_seconds", t.log.wall_seconds},
                        {"seed", t.log.seed},
                        {"config", t.log.config}};
  std::ofstream(std::filesystem::path(a.out) / "train_log.json") << log.dump(2) << '\n';
  std::cout << "trained " << to_string(o.kind) << " on " << parts.train.size() << " sequences in "
            << t.log.wall_seconds << " s; saved to " << a.out << "\n";
  return 0;
}

int run_eval(EvalArgs& a) {
  EvalOptions opt;
  opt.horizons = parse_horizons(a.horizons);
  opt.per_frame = a.per_frame;
  nlohmann::json echo = {{"command", "eval"},
                         {"model", a.model},
                         {"data", a.data},
                         {"split", {{"kind", a.split}, {"train_fraction", a.train_fraction}, {"seed", a.split_seed}}},
                         {"horizons", opt.horizons},
                         {"per_frame", opt.per_frame},
                         {"report_dir", a.report_dir}};
  std::cout << echo.dump() << std::endl;
  const TrainedModel t = load_trained(a.model);
  const auto seqs = read_dataset(a.data);
  if (seqs.empty()) throw std::invalid_argument("dataset '" + a.data + "' is empty");
  const auto parts = split(seqs, split_spec(a.split, a.train_fraction, a.split_seed));
  const auto x = features_of(t.pipeline, seqs, parts.test);
  const auto y = labels_of(seqs, parts.test);
  const EvalReport r = evaluate(t.model, std::span<const ModelInputs<float>>(x), y, opt);
  for (std::size_t i = 0; i < r.horizons.size(); ++i)
    std::cout << "horizon " << format_real(r.horizons[i]) << " s: accuracy " << format_real(r.accuracy_at[i])
              << "\n";
  if (!a.report_dir.empty()) {
    write_report(r, a.report_dir);
    std::cout << "report written to " << a.report_dir << "\n";
  }
  return 0;
}

int run_gradcheck(std::size_t seeds) {
  std::cout << nlohmann::json{{"command", "gradcheck"}, {"seeds", seeds}}.dump() << std::endl;
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  for (const auto& e : gradcheck::run_suite(seeds)) {
    ok = ok && e.worst.passed;
    std::cout << (e.worst.passed ? "ok   " : "FAIL ") << e.name << " worst relative error "
              << e.worst.max_relative_error << " over " << e.runs << " seeds";
    if (!e.worst.passed) std::cout << " (" << e.worst.diagnostic << ")";
    std::cout << "\n";
  }
  std::cout << "elapsed " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
  if (!ok) std::cerr << "error: gradient check failed\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal action anticipation toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--scenario", gen.cfg.scenario, "Scenario preset: DM, TR, AC, PI, FCI")->capture_default_str();
  g->add_option("--classes", gen.cfg.num_classes, "Number of classes")->capture_default_str();
  g->add_option("--per-class", gen.cfg.samples_per_class, "Sequences per class")->capture_default_str();
  g->add_option("--seed", gen.cfg.seed, "Random seed")->capture_default_str();
  g->add_flag("--cross-modal", gen.cfg.cross_modal_coding, "Code classes jointly across modalities");
  g->add_option("--noise", gen.cfg.noise_sigma, "Feature noise sigma")->capture_default_str();
  g->add_option("--feature-dim", gen.feature_dim, "Appearance and motion feature width")->capture_default_str();
  g->add_option("--frames", gen.cfg.frames, "Frames per sequence")->capture_default_str();
  g->add_option("--fps", gen.cfg.fps, "Frames per second")->capture_default_str();
  g->add_option("--onset-mean", gen.cfg.onset_mean_s, "Mean action onset in seconds")->capture_default_str();
  g->add_option("--threads", gen.cfg.threads, "Generator threads")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Model output directory")->required();
  t->add_option("--split", tr.split, "random, daytime or weather")->capture_default_str();
  t->add_option("--train-fraction", tr.train_fraction, "Random split training fraction")->capture_default_str();
  t->add_option("--split-seed", tr.split_seed, "Random split seed")->capture_default_str();
  t->add_option("--model", tr.model, "mm, single or ms2")->capture_default_str();
  t->add_option("--modalities", tr.modalities, "Comma list of appearance,motion,steering,speed");
  t->add_option("--stage1", tr.stage1, "ms2: number of leading modalities in stage 1");
  t->add_option("--weighting", tr.weighting, "sigmoid, linear or uniform")->capture_default_str();
  t->add_option("--alpha", tr.alpha, "Sigmoid weighting slope")->capture_default_str();
  t->add_option("--beta", tr.beta, "Sigmoid weighting offset")->capture_default_str();
  t->add_option("--epochs", tr.opt.epochs, "Training epochs")->capture_default_str();
  t->add_option("--lr", tr.opt.learning_rate, "SGD learning rate")->capture_default_str();
  t->add_option("--batch", tr.opt.batch_size, "Mini-batch size")->capture_default_str();
  t->add_option("--hidden", tr.opt.hidden, "LSTM hidden size")->capture_default_str();
  t->add_option("--embedder-epochs", tr.opt.embedder.epochs, "Dynamics embedder epochs")->capture_default_str();
  t->add_option("--seed", tr.opt.seed, "Training seed")->capture_default_str();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a trained model on the test split");
  e->add_option("--model", ev.model, "Model directory")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--split", ev.split, "random, daytime or weather")->capture_default_str();
  e->add_option("--train-fraction", ev.train_fraction, "Random split training fraction")->capture_default_str();
  e->add_option("--split-seed", ev.split_seed, "Random split seed")->capture_default_str();
  e->add_option("--horizons", ev.horizons, "Comma list of horizons in seconds")->capture_default_str();
  e->add_option("--report-dir", ev.report_dir, "Write CSV reports here");
  e->add_flag("--per-frame", ev.per_frame, "Decide on unpooled per-frame predictions");

  std::size_t seeds = 20;
  auto* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  gc->add_option("--seeds", seeds, "Random seeds per check")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }

  try {
    if (*g) return run_gen(gen);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*gc) return run_gradcheck(seeds);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}
