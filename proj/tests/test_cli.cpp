#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>

#include "ssem/ssem.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ssem;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("ssem_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  /// Runs the CLI with `args`, returning its exit code; stdout goes to `out`.
  int run(const std::string& args, std::string* out = nullptr) const {
    const std::string log = path("stdout.txt");
    const std::string cmd = std::string(SSEM_CLI_PATH) + " " + args + " > " + log + " 2> " + path("stderr.txt");
    const int status = std::system(cmd.c_str());
    if (out) {
      std::ifstream f(log);
      std::stringstream ss;
      ss << f.rdbuf();
      *out = ss.str();
    }
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string toy(const std::string& name, int seed = 1, const std::string& dims = "toy") const {
    const std::string p = path(name);
    EXPECT_EQ(run("toy --seed " + std::to_string(seed) + " --dims " + dims + " -o " + p), 0);
    return p;
  }

  std::string wav(const std::string& name, const std::vector<double>& x, std::uint32_t rate = 16000) const {
    const std::string p = path(name);
    write_wav(p, {rate, x});
    return p;
  }

  static std::vector<std::uint8_t> read_pgm(const std::string& p, std::size_t& w, std::size_t& h) {
    std::ifstream f(p, std::ios::binary);
    std::string magic;
    int maxv = 0;
    f >> magic >> w >> h >> maxv;
    f.get();
    EXPECT_EQ(magic, "P5");
    std::vector<std::uint8_t> px(w * h);
    f.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
    EXPECT_EQ(static_cast<std::size_t>(f.gcount()), px.size());
    return px;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, EnhanceWritesSameLengthOutput) {
  const auto m = toy("m.ssem");
  std::mt19937_64 rng(1);
  const auto x = oracle::random_signal(rng, 5000, 0.3);
  ASSERT_EQ(run("enhance -m " + m + " -i " + wav("in.wav", x) + " -o " + path("out.wav")), 0);
  const auto y = read_wav(path("out.wav"));
  EXPECT_EQ(y.sample_rate, 16000u);
  EXPECT_EQ(y.samples.size(), x.size());
}

TEST_F(Cli, SilenceInSilenceOut) {
  const auto m = toy("m.ssem");
  ASSERT_EQ(run("enhance -m " + m + " -i " + wav("in.wav", std::vector<double>(4000, 0.0)) + " -o " + path("o.wav")), 0);
  for (double v : read_wav(path("o.wav")).samples) ASSERT_EQ(v, 0.0);
}

TEST_F(Cli, RateMismatchExitsTwo) {
  const auto m = toy("m.ssem");
  EXPECT_EQ(run("enhance -m " + m + " -i " + wav("in.wav", std::vector<double>(4000, 0.1), 8000) + " -o " + path("o.wav")), 2);
  std::ifstream err(path("stderr.txt"));
  std::stringstream ss;
  ss << err.rdbuf();
  EXPECT_NE(ss.str().find("8000"), std::string::npos);
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("prune -m " + toy("m.ssem") + " -o " + path("p.ssem")), 1);
  EXPECT_EQ(run("prune -m " + toy("m2.ssem") + " -o " + path("p.ssem") + " -t 0.333"), 1);
}

TEST_F(Cli, CorruptModelExitsFour) {
  const auto m = toy("m.ssem");
  {
    std::fstream f(m, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    f.put('\x5a');
  }
  EXPECT_EQ(run("report -m " + m), 4);
  std::ofstream(path("junk.ssem")) << "not a model";
  EXPECT_EQ(run("hash -m " + path("junk.ssem")), 4);
}

TEST_F(Cli, BlockPruneHitsTargetWindow) {
  const auto m = toy("m.ssem", 3, "full");
  ASSERT_EQ(run("prune -m " + m + " -o " + path("p.ssem") + " -s block --target 0.7 --report " + path("r.json")), 0);
  const auto model = load_file(path("p.ssem"));
  const auto s = measure_sparsity(model, StructureKind::Block);
  EXPECT_GE(s.overall, 0.7);
  EXPECT_LT(s.overall, 0.8);
  std::ifstream f(path("r.json"));
  const json j = json::parse(f);
  EXPECT_EQ(j["structure"], "block");
  EXPECT_NEAR(j["sparsity"]["overall"].get<double>(), s.overall, 1e-12);
  EXPECT_TRUE(j["constraints"].contains("deadline_s"));
}

TEST_F(Cli, UnitPruneLeavesFinalLayerAlone) {
  const auto m = toy("m.ssem", 4);
  ASSERT_EQ(run("prune -m " + m + " -o " + path("u.ssem") + " -s unit --target 0.5"), 0);
  const auto base = load_file(m);
  const auto pruned = load_file(path("u.ssem"));
  EXPECT_TRUE(pruned.dense2.kept.empty());
  EXPECT_EQ(pruned.dense2.outputs, base.dense2.outputs);
  EXPECT_FALSE(pruned.lstm1.kept.empty());
  // Output rows of the final layer are all still present.
  const auto mask = stored_mask(pruned.dense2.weight);
  EXPECT_EQ(mask.rows, base.dense2.outputs);
  EXPECT_EQ(run("prune -m " + m + " -o " + path("x.ssem") + " -s unit --plan 0.5,0.5,0.5,0.5"), 3);
}

TEST_F(Cli, SparsityMapsShowStructure) {
  const auto m = toy("m.ssem", 5);
  std::size_t w = 0, h = 0;
  ASSERT_EQ(run("sparsity-map -m " + m + " -l lstm1 -o " + path("d.pgm")), 0);
  auto px = read_pgm(path("d.pgm"), w, h);
  EXPECT_EQ(w, 16u + 16u);
  EXPECT_EQ(h, 4u * 16u);
  for (auto p : px) ASSERT_EQ(p, 255);

  ASSERT_EQ(run("prune -m " + m + " -o " + path("b.ssem") + " -s block --block-width 8 --plan 0.5,0.5,0.5,0.5"), 0);
  ASSERT_EQ(run("sparsity-map -m " + path("b.ssem") + " -l dense1 -o " + path("b.pgm")), 0);
  px = read_pgm(path("b.pgm"), w, h);
  std::size_t black = 0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; c += 8) {
      // Each aligned run of 8 is uniformly kept or pruned.
      for (std::size_t k = 1; k < 8 && c + k < w; ++k) ASSERT_EQ(px[r * w + c + k], px[r * w + c]);
      black += px[r * w + c] == 0;
    }
  }
  EXPECT_GT(black, 0u);

  ASSERT_EQ(run("prune -m " + m + " -o " + path("u.ssem") + " -s unit --plan 0.5,0.5,0.5,0"), 0);
  ASSERT_EQ(run("sparsity-map -m " + path("u.ssem") + " -l lstm2 -o " + path("u.pgm")), 0);
  px = read_pgm(path("u.pgm"), w, h);
  // Pruned units are entirely black rows in every gate band.
  std::size_t black_rows = 0;
  for (std::size_t r = 0; r < h; ++r) {
    bool all_black = true;
    for (std::size_t c = 0; c < w; ++c) all_black = all_black && px[r * w + c] == 0;
    black_rows += all_black;
  }
  EXPECT_EQ(black_rows % 4, 0u);
  EXPECT_GT(black_rows, 0u);
}

TEST_F(Cli, HashSidecarRoundTrip) {
  const auto m = toy("m.ssem", 6);
  std::string out;
  ASSERT_EQ(run("hash -m " + m + " -o " + path("m.sha256"), &out), 0);
  EXPECT_EQ(out.substr(0, 64), weight_digest(load_file(m)));
  EXPECT_EQ(run("hash -m " + m + " --check " + path("m.sha256")), 0);
  const auto other = toy("n.ssem", 7);
  EXPECT_EQ(run("hash -m " + other + " --check " + path("m.sha256")), 2);
}

TEST_F(Cli, SearchWithExternalMetrics) {
  const auto m = toy("m.ssem", 8);
  fs::create_directories(dir_ / "eval" / "noisy");
  fs::create_directories(dir_ / "eval" / "clean");
  std::mt19937_64 rng(9);
  for (int u = 0; u < 2; ++u) {
    const auto clean = oracle::random_signal(rng, 4000, 0.3);
    auto noisy = clean;
    const auto n = oracle::random_signal(rng, 4000, 0.05);
    for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += n[i];
    write_wav((dir_ / "eval" / "noisy" / ("u" + std::to_string(u) + ".wav")).string(), {16000, noisy});
    write_wav((dir_ / "eval" / "clean" / ("u" + std::to_string(u) + ".wav")).string(), {16000, clean});
  }
  std::ofstream(path("metrics.csv")) << "plan,utterance,stoi,pesq\n,u0,0.9,2.5\n,u1,0.8,2.0\n";
  ASSERT_EQ(run("search -m " + m + " -t 0.3 -s block --block-width 4 -e " + path("eval") + " --metrics " +
                path("metrics.csv") + " --report " + path("s.json") + " -o " + path("w.ssem")),
            0);
  std::ifstream f(path("s.json"));
  const json j = json::parse(f);
  EXPECT_GT(j["plans"].size(), 1u);
  EXPECT_EQ(j["q_basis"], "0.1*stoi+0.2*pesq+0.6*si_sdr");
  EXPECT_NEAR(j["winner"]["stoi"].get<double>(), 0.85, 1e-12);
  double best = -1e300;
  for (const auto& p : j["plans"]) best = std::max(best, p["q"].get<double>());
  EXPECT_EQ(j["winner"]["q"].get<double>(), best);
  EXPECT_TRUE(fs::exists(path("w.ssem")));

  // Without the CSV the score falls back to SI-SDR alone.
  ASSERT_EQ(run("search -m " + m + " -t 0.3 -s block --block-width 4 -e " + path("eval") + " --report " + path("t.json")), 0);
  std::ifstream g(path("t.json"));
  EXPECT_NE(json::parse(g)["q_basis"].get<std::string>().find("unavailable"), std::string::npos);
}

TEST_F(Cli, GoldenVectorsCoverEveryCode) {
  ASSERT_EQ(run("golden -o " + path("g.csv")), 0);
  std::ifstream f(path("g.csv"));
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "bits,input,code");
  std::size_t rows = 0, q8 = 0;
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::string bits, input, code;
    std::getline(ss, bits, ',');
    std::getline(ss, input, ',');
    std::getline(ss, code, ',');
    const QuantFormat fmt = bits == "8" ? kQ8 : kQ16;
    ASSERT_EQ(quantize(std::stod(input), fmt), std::stoi(code)) << line;
    q8 += bits == "8";
    ++rows;
  }
  EXPECT_EQ(q8, 2u * 256 + 4);
  EXPECT_EQ(rows, 2u * 256 + 4 + 2u * 65536 + 4);
}

TEST_F(Cli, MixWritesMixture) {
  std::mt19937_64 rng(10);
  const auto s = wav("s.wav", oracle::random_signal(rng, 16000, 0.3));
  const auto n = wav("n.wav", oracle::random_signal(rng, 16000, 0.1));
  std::string out;
  ASSERT_EQ(run("mix --speech " + s + " --noise " + n + " --snr 5 -o " + path("mix.wav"), &out), 0);
  EXPECT_GT(json::parse(out)["noise_gain"].get<double>(), 0.0);
  EXPECT_EQ(read_wav(path("mix.wav")).samples.size(), 16000u);
}
