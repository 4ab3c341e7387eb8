#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include <gtest/gtest.h>

#include "mmlstm/datagen.hpp"

using mmlstm::GeneratorConfig;
using mmlstm::Sequence;

namespace {

namespace fs = std::filesystem;

GeneratorConfig small_config(std::uint64_t seed = 3) {
  GeneratorConfig cfg;
  cfg.samples_per_class = 10;
  cfg.appearance_dim = 8;
  cfg.motion_dim = 6;
  cfg.seed = seed;
  return cfg;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mmlstm_test_datagen_" + name);
  fs::remove_all(dir);
  return dir;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(Generate, DefaultConfigGives600PerClass) {
  GeneratorConfig cfg;
  cfg.appearance_dim = cfg.motion_dim = 2;
  const auto seqs = mmlstm::generate_dataset(cfg);
  ASSERT_EQ(seqs.size(), 3600u);
  std::vector<std::size_t> count(6, 0);
  for (const auto& s : seqs) ++count[s.class_label];
  for (auto c : count) EXPECT_EQ(c, 600u);
}

TEST(Generate, OnsetFallsInSecondHalf) {
  GeneratorConfig cfg = small_config();
  cfg.samples_per_class = 200;
  cfg.onset_std_s = 2.0;  // push the clamp hard in both directions
  for (const auto& s : mmlstm::generate_dataset(cfg)) {
    ASSERT_GE(s.onset_frame, 75u);
    ASSERT_LE(s.onset_frame, 135u);
  }
}

TEST(Generate, ShapesAndMetadata) {
  const auto seqs = mmlstm::generate_dataset(small_config());
  std::set<std::string> ids;
  for (const auto& s : seqs) {
    ASSERT_EQ(s.features.size(), 2u);
    EXPECT_EQ(s.features[0].rows(), 150u);
    EXPECT_EQ(s.features[0].cols(), 8u);
    EXPECT_EQ(s.features[1].cols(), 6u);
    EXPECT_EQ(s.steering.size(), 150u);
    EXPECT_EQ(s.speed.size(), 150u);
    EXPECT_TRUE(mmlstm::all_finite(s.features[0]) && mmlstm::all_finite(s.features[1]));
    for (float v : s.speed) EXPECT_GE(v, 0.0f);
    ids.insert(s.id);
  }
  EXPECT_EQ(ids.size(), seqs.size());
  EXPECT_EQ(seqs.front().id, "DM-FF-00000");
}

TEST(Generate, NoiselessFeaturesAreRampedTemplates) {
  GeneratorConfig cfg = small_config();
  cfg.noise_sigma = 0;
  cfg.day_fraction = cfg.clear_fraction = 1.0;
  const auto bank = mmlstm::build_templates(cfg);
  for (const auto& s : mmlstm::generate_dataset(cfg)) {
    for (std::size_t m = 0; m < 2; ++m) {
      const auto& sig = bank.signatures[m][s.class_label];
      const auto& neutral = bank.neutral[m];
      for (std::size_t t = 0; t < s.frames; ++t) {
        const double r = t < s.onset_frame ? 0.0 : std::min(1.0, (t - s.onset_frame + 1) / 15.0);
        for (std::size_t j = 0; j < sig.size(); ++j)
          ASSERT_EQ(s.features[m](t, j), static_cast<float>((1 - r) * neutral[j] + r * sig[j]))
              << s.id << " t=" << t;
      }
      // Fully ramped from 15 frames after onset.
      if (s.onset_frame + 15 <= s.frames)
        for (std::size_t j = 0; j < sig.size(); ++j)
          EXPECT_EQ(s.features[m](s.frames - 1, j), static_cast<float>(sig[j]));
    }
  }
}

TEST(Generate, NightAndAdverseScaleTheSignal) {
  GeneratorConfig cfg = small_config();
  cfg.noise_sigma = 0;
  const auto bank = mmlstm::build_templates(cfg);
  for (const auto& s : mmlstm::generate_dataset(cfg)) {
    const double k = (s.daytime == mmlstm::Daytime::night ? 0.5 : 1.0) *
                     (s.weather == mmlstm::Weather::adverse ? 0.7 : 1.0);
    EXPECT_EQ(s.features[0](0, 0), static_cast<float>(k * bank.neutral[0][0])) << s.id;
  }
}

TEST(Generate, ConditionMixIsRoughlyTwoThirds) {
  GeneratorConfig cfg = small_config();
  cfg.samples_per_class = 300;
  cfg.appearance_dim = cfg.motion_dim = 1;
  std::size_t day = 0, clear = 0;
  const auto seqs = mmlstm::generate_dataset(cfg);
  for (const auto& s : seqs) {
    day += s.daytime == mmlstm::Daytime::day;
    clear += s.weather == mmlstm::Weather::clear;
  }
  EXPECT_NEAR(day / double(seqs.size()), 2.0 / 3.0, 0.03);
  EXPECT_NEAR(clear / double(seqs.size()), 2.0 / 3.0, 0.03);
}

TEST(Generate, FixedSeedIsDeterministicAndSeedsDiffer) {
  EXPECT_EQ(mmlstm::generate_dataset(small_config(5)), mmlstm::generate_dataset(small_config(5)));
  EXPECT_NE(mmlstm::generate_dataset(small_config(5)), mmlstm::generate_dataset(small_config(6)));
}

TEST(Generate, ThreadedMatchesSerial) {
  GeneratorConfig cfg = small_config();
  const auto serial = mmlstm::generate_dataset(cfg);
  for (unsigned threads : {2u, 3u, 7u}) {
    cfg.threads = threads;
    EXPECT_EQ(mmlstm::generate_dataset(cfg), serial) << threads << " threads";
  }
}

TEST(Generate, InvalidConfigsAreRejected) {
  auto bad = [](auto edit) {
    GeneratorConfig cfg = small_config();
    edit(cfg);
    return cfg;
  };
  EXPECT_THROW(mmlstm::generate_dataset(bad([](auto& c) { c.samples_per_class = 0; })), std::invalid_argument);
  EXPECT_THROW(mmlstm::generate_dataset(bad([](auto& c) { c.night_snr_penalty = 0; })), std::invalid_argument);
  EXPECT_THROW(mmlstm::generate_dataset(bad([](auto& c) { c.adverse_weather_snr_penalty = 1.5; })),
               std::invalid_argument);
  EXPECT_THROW(mmlstm::generate_dataset(bad([](auto& c) { c.scenario = "XX"; })), std::invalid_argument);
  EXPECT_THROW(mmlstm::generate_dataset(bad([](auto& c) {
                 c.cross_modal_coding = true;
                 c.num_classes = 2;
               })),
               std::invalid_argument);
}

TEST(Generate, PresetsCoverTheFiveScenarios) {
  std::size_t total = 0;
  for (const auto& p : mmlstm::scenario_presets()) {
    GeneratorConfig cfg = small_config();
    cfg.scenario = p.name;
    cfg.num_classes = p.class_names.size();
    cfg.samples_per_class = 2;
    const auto seqs = mmlstm::generate_dataset(cfg);
    EXPECT_EQ(seqs.size(), 2 * p.class_names.size());
    EXPECT_EQ(seqs.back().scenario, p.name);
    total += p.class_names.size();
  }
  EXPECT_EQ(total, 25u);
}

TEST(CrossModalCoding, EveryModalityPairsClassesAndJointCodesAreUnique) {
  for (std::size_t n : {3u, 4u, 5u, 6u, 7u, 8u}) {
    GeneratorConfig cfg;
    cfg.num_classes = n;
    cfg.cross_modal_coding = true;
    std::set<std::vector<std::size_t>> codes;
    for (std::size_t m = 0; m < mmlstm::kSignalModalities; ++m) {
      std::vector<std::size_t> per_sig(mmlstm::signature_count(cfg), 0);
      for (std::size_t c = 0; c < n; ++c) ++per_sig.at(mmlstm::signature_of(cfg, m, c));
      // Each signature is shared by two classes (one left alone when n is odd).
      for (auto k : per_sig) EXPECT_TRUE(k == 2 || (n % 2 && k == 1)) << "n=" << n << " m=" << m;
    }
    for (std::size_t c = 0; c < n; ++c) {
      std::vector<std::size_t> code;
      for (std::size_t m = 0; m < mmlstm::kSignalModalities; ++m) code.push_back(mmlstm::signature_of(cfg, m, c));
      codes.insert(code);
    }
    EXPECT_EQ(codes.size(), n) << "n=" << n;
  }
}

// Brute-force oracle checks with the default 6-class coding and sigma > 0.
class OracleTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new GeneratorConfig();
    cfg_->cross_modal_coding = true;
    cfg_->samples_per_class = 100;
    cfg_->seed = 11;
    seqs_ = new std::vector<Sequence>(mmlstm::generate_dataset(*cfg_));
  }
  static void TearDownTestSuite() {
    delete seqs_;
    delete cfg_;
  }
  static GeneratorConfig* cfg_;
  static std::vector<Sequence>* seqs_;
};
GeneratorConfig* OracleTest::cfg_ = nullptr;
std::vector<Sequence>* OracleTest::seqs_ = nullptr;

TEST_F(OracleTest, BeforeOnsetIsChance) {
  const std::size_t all[] = {0, 1, 2, 3};
  const double acc = mmlstm::nearest_template_accuracy(*cfg_, *seqs_, all, mmlstm::OracleWindow::before_onset);
  EXPECT_NEAR(acc, 1.0 / 6.0, 0.05);
}

TEST_F(OracleTest, SingleModalityCeiling) {
  for (std::size_t m = 0; m < mmlstm::kSignalModalities; ++m) {
    const std::size_t one[] = {m};
    EXPECT_LE(mmlstm::nearest_template_accuracy(*cfg_, *seqs_, one, mmlstm::OracleWindow::full), 0.70)
        << mmlstm::kSignalModalityNames[m];
  }
}

TEST_F(OracleTest, JointModalitiesRecoverTheClass) {
  const std::size_t all[] = {0, 1, 2, 3};
  EXPECT_GT(mmlstm::nearest_template_accuracy(*cfg_, *seqs_, all, mmlstm::OracleWindow::full), 0.95);
}

TEST(Dataset, RoundTripIsBitIdentical) {
  const auto dir = scratch_dir("roundtrip");
  GeneratorConfig cfg = small_config();
  cfg.samples_per_class = 3;
  const auto seqs = mmlstm::generate_dataset(cfg);
  mmlstm::write_dataset(seqs, dir);
  EXPECT_EQ(mmlstm::read_dataset(dir), seqs);
  fs::remove_all(dir);
}

TEST(Dataset, BinaryLayoutMatchesFormat) {
  GeneratorConfig cfg = small_config();
  cfg.samples_per_class = 1;
  const auto s = mmlstm::generate_dataset(cfg).front();
  const auto writer = mmlstm::encode_sequence(s);
  const auto& bytes = writer.buffer();
  const std::size_t expected = 4 + 4 + 4 + 2 * 4 + 150 * (8 + 6) * 4 + 2 * 150 * 4 + 4;
  ASSERT_EQ(bytes.size(), expected);
  EXPECT_EQ(std::string(bytes.data(), 4), "VAD1");
  auto u32_at = [&](std::size_t off) {
    return std::uint32_t(std::uint8_t(bytes[off])) | std::uint32_t(std::uint8_t(bytes[off + 1])) << 8 |
           std::uint32_t(std::uint8_t(bytes[off + 2])) << 16 | std::uint32_t(std::uint8_t(bytes[off + 3])) << 24;
  };
  EXPECT_EQ(u32_at(4), 150u);
  EXPECT_EQ(u32_at(8), 2u);
  EXPECT_EQ(u32_at(12), 8u);
  EXPECT_EQ(u32_at(16), 6u);
  EXPECT_EQ(u32_at(expected - 4), s.onset_frame);
}

TEST(Dataset, ManifestRecordsEveryField) {
  const auto dir = scratch_dir("manifest");
  GeneratorConfig cfg = small_config();
  cfg.samples_per_class = 1;
  const auto seqs = mmlstm::generate_dataset(cfg);
  mmlstm::write_dataset(seqs, dir);
  std::ifstream in(dir / "manifest.jsonl");
  std::string line;
  std::getline(in, line);
  const auto j = nlohmann::json::parse(line);
  for (const char* key : {"id", "scenario", "class", "daytime", "weather", "user", "fps", "T", "file"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["file"], seqs[0].id + ".vad");
  fs::remove_all(dir);
}

TEST(Dataset, CorruptedMagicIsReported) {
  const auto dir = scratch_dir("magic");
  GeneratorConfig cfg = small_config();
  cfg.samples_per_class = 1;
  const auto seqs = mmlstm::generate_dataset(cfg);
  mmlstm::write_dataset(seqs, dir);
  {
    std::fstream f(dir / (seqs[0].id + ".vad"), std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(mmlstm::read_dataset(dir), mmlstm::BadMagicError);
  fs::remove_all(dir);
}

TEST(Dataset, TruncatedFileIsReported) {
  const auto dir = scratch_dir("truncated");
  GeneratorConfig cfg = small_config();
  cfg.samples_per_class = 1;
  const auto seqs = mmlstm::generate_dataset(cfg);
  mmlstm::write_dataset(seqs, dir);
  const auto file = dir / (seqs[2].id + ".vad");
  fs::resize_file(file, fs::file_size(file) - 7);
  EXPECT_THROW(mmlstm::read_dataset(dir), mmlstm::TruncatedFileError);
  fs::remove_all(dir);
}

TEST(Dataset, ManifestDisagreementIsReported) {
  const auto dir = scratch_dir("mismatch");
  GeneratorConfig cfg = small_config();
  cfg.samples_per_class = 1;
  mmlstm::write_dataset(mmlstm::generate_dataset(cfg), dir);
  std::ifstream in(dir / "manifest.jsonl");
  std::stringstream buf;
  buf << in.rdbuf();
  in.close();
  std::string text = buf.str();
  const auto pos = text.find("\"T\":150");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 7, "\"T\":149");
  std::ofstream(dir / "manifest.jsonl", std::ios::trunc) << text;
  EXPECT_THROW(mmlstm::read_dataset(dir), mmlstm::ManifestMismatchError);
  fs::remove_all(dir);
}

TEST(Dataset, ErrorKindsAreDistinct) {
  EXPECT_FALSE((std::is_base_of_v<mmlstm::BadMagicError, mmlstm::TruncatedFileError>));
  EXPECT_FALSE((std::is_base_of_v<mmlstm::TruncatedFileError, mmlstm::ManifestMismatchError>));
  EXPECT_TRUE((std::is_base_of_v<mmlstm::DatasetFormatError, mmlstm::ManifestMismatchError>));
}

TEST(Dataset, EmptyDatasetRoundTrips) {
  const auto dir = scratch_dir("empty");
  mmlstm::write_dataset(std::vector<Sequence>{}, dir);
  EXPECT_TRUE(fs::exists(dir / "manifest.jsonl"));
  EXPECT_EQ(fs::file_size(dir / "manifest.jsonl"), 0u);
  EXPECT_TRUE(mmlstm::read_dataset(dir).empty());
  fs::remove_all(dir);
}

TEST(Dataset, SameSeedWritesSameBytes) {
  const auto a = scratch_dir("bytes_a"), b = scratch_dir("bytes_b");
  GeneratorConfig cfg = small_config();
  cfg.samples_per_class = 2;
  mmlstm::write_dataset(mmlstm::generate_dataset(cfg), a);
  cfg.threads = 4;
  mmlstm::write_dataset(mmlstm::generate_dataset(cfg), b);
  for (const auto& entry : fs::directory_iterator(a))
    EXPECT_EQ(slurp(entry.path()), slurp(b / entry.path().filename())) << entry.path().filename();
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Split, RandomIsSeventyThirtyPerClass) {
  const auto seqs = mmlstm::generate_dataset(small_config());
  const auto parts = mmlstm::split(seqs, {mmlstm::SplitKind::random, 0.7, 9});
  std::vector<std::size_t> train(6, 0), test(6, 0);
  for (auto i : parts.train) ++train[seqs[i].class_label];
  for (auto i : parts.test) ++test[seqs[i].class_label];
  for (std::size_t c = 0; c < 6; ++c) {
    EXPECT_EQ(train[c], 7u);
    EXPECT_EQ(test[c], 3u);
  }
}

TEST(Split, DisjointExhaustiveAndDeterministic) {
  const auto seqs = mmlstm::generate_dataset(small_config());
  for (auto kind : {mmlstm::SplitKind::random, mmlstm::SplitKind::daytime, mmlstm::SplitKind::weather}) {
    const auto a = mmlstm::split(seqs, {kind, 0.7, 4});
    const auto b = mmlstm::split(seqs, {kind, 0.7, 4});
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
    std::set<std::size_t> all(a.train.begin(), a.train.end());
    for (auto i : a.test) EXPECT_TRUE(all.insert(i).second);
    EXPECT_EQ(all.size(), seqs.size());
  }
  EXPECT_NE(mmlstm::split(seqs, {mmlstm::SplitKind::random, 0.7, 4}).train,
            mmlstm::split(seqs, {mmlstm::SplitKind::random, 0.7, 5}).train);
}

TEST(Split, DaytimeKeepsNightOutOfTraining) {
  const auto seqs = mmlstm::generate_dataset(small_config());
  const auto parts = mmlstm::split(seqs, {mmlstm::SplitKind::daytime, 0.7, 0});
  for (auto i : parts.train) EXPECT_EQ(seqs[i].daytime, mmlstm::Daytime::day);
  for (auto i : parts.test) EXPECT_EQ(seqs[i].daytime, mmlstm::Daytime::night);
  const auto w = mmlstm::split(seqs, {mmlstm::SplitKind::weather, 0.7, 0});
  for (auto i : w.train) EXPECT_EQ(seqs[i].weather, mmlstm::Weather::clear);
}

TEST(Split, MissingTagValueIsAnError) {
  GeneratorConfig cfg = small_config();
  cfg.day_fraction = 1.0;
  const auto seqs = mmlstm::generate_dataset(cfg);
  EXPECT_THROW(mmlstm::split(seqs, {mmlstm::SplitKind::daytime, 0.7, 0}), std::invalid_argument);
  EXPECT_NO_THROW(mmlstm::split(seqs, {mmlstm::SplitKind::weather, 0.7, 0}));
  EXPECT_THROW(mmlstm::split(std::vector<Sequence>{}, {}), std::invalid_argument);
  EXPECT_THROW(mmlstm::split(seqs, {mmlstm::SplitKind::random, 1.0, 0}), std::invalid_argument);
}

}  // namespace
