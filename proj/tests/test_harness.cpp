#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "drarmor/config.hpp"
#include "drarmor/data.hpp"
#include "drarmor/errors.hpp"
#include "drarmor/harness.hpp"
#include "drarmor/image.hpp"
#include "drarmor/nn.hpp"
#include "drarmor/rng.hpp"
#include "drarmor/serialize.hpp"
#include "test_support.hpp"

#include <json.hpp>

using namespace drarmor;
namespace fs = std::filesystem;

namespace {

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

std::string idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols, unsigned char fill) {
  return be32(0x803) + be32(n) + be32(rows) + be32(cols) + std::string(n * rows * cols, static_cast<char>(fill));
}

std::string idx_labels(std::uint32_t n) {
  std::string s = be32(0x801) + be32(n);
  for (std::uint32_t i = 0; i < n; ++i) s.push_back(static_cast<char>(i % 10));
  return s;
}

// SSIM with a single uniform window covering the whole image and population moments.
double global_ssim_oracle(const Tensor& a, const Tensor& b, double range) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double va = 0.0, vb = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
    cov += (a[i] - ma) * (b[i] - mb);
  }
  va /= n;
  vb /= n;
  cov /= n;
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  return (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

Tensor random_image(std::uint64_t seed, std::size_t h, std::size_t w) {
  Rng rng(seed);
  Tensor t({h, w});
  for (double& v : t.values()) v = rng.uniform();
  return t;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("drarmor_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DRARMOR_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_text(e.path());
  return out;
}

}  // namespace

TEST_CASE("idx: exact-size file parses and 255 maps to 1.0") {
  const Split s = parse_idx(idx_images(10, 28, 28, 255), idx_labels(10));
  CHECK(s.size() == 10);
  CHECK(s.images.shape() == Shape{10, 1, 28, 28});
  for (double v : s.images.values()) CHECK(v == 1.0);
  CHECK(s.labels[3] == 3);
}

TEST_CASE("idx: round trip through the encoder is exact on the 8-bit grid") {
  Tensor images({6, 1, 5, 4});
  Rng rng(3);
  for (double& v : images.values()) v = static_cast<double>(rng.index(256)) / 255.0;
  const std::vector<int> labels{0, 1, 2, 7, 8, 9};
  const Split s = parse_idx(encode_idx_images(images), encode_idx_labels(labels));
  CHECK(s.images == images);
  CHECK(s.labels == labels);
}

TEST_CASE("idx: truncation, count mismatch and bad labels carry offsets") {
  const std::string img = idx_images(4, 3, 3, 7), lab = idx_labels(4);
  CHECK_THROWS_AS(parse_idx(img.substr(0, img.size() - 1), lab), IngestionError);
  CHECK_THROWS_AS(parse_idx(img.substr(0, 6), lab), IngestionError);
  CHECK_THROWS_AS(parse_idx(img, idx_labels(3)), IngestionError);
  std::string bad = lab;
  bad[9] = 12;
  try {
    parse_idx(img, bad);
    FAIL("expected an ingestion error");
  } catch (const IngestionError& e) {
    CHECK(e.offset() == 9);
  }
}

TEST_CASE("idx: every magic corruption is rejected") {
  const std::string img = idx_images(3, 4, 4, 9), lab = idx_labels(3);
  Rng rng(99);
  int rejected = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::string i = img, l = lab;
    std::string& target = trial % 2 ? i : l;
    const std::size_t byte = rng.index(4);
    const char flip = static_cast<char>(1 + rng.index(255));
    target[byte] = static_cast<char>(target[byte] ^ flip);
    try {
      parse_idx(i, l);
    } catch (const IngestionError&) {
      ++rejected;
    }
  }
  CHECK(rejected == 100);
}

TEST_CASE("synthetic data: deterministic per seed") {
  const Split a = synth_split(SynthKind::stripes, 50, 12, 4, 5);
  const Split b = synth_split(SynthKind::stripes, 50, 12, 4, 5);
  const Split c = synth_split(SynthKind::stripes, 50, 12, 4, 6);
  CHECK(dataset_hash(a) == dataset_hash(b));
  CHECK(dataset_hash(a) != dataset_hash(c));
  for (double v : a.images.values()) CHECK((v >= 0.0 && v <= 1.0));
  CHECK_THROWS_AS(synth_split(SynthKind::blobs, 1, 8, 2, 1), ConfigError);
}

TEST_CASE("synthetic data: well separated blobs admit a perfect linear probe") {
  const Split s = synth_split(SynthKind::blobs, 200, 6, 2, 8, 0.02);
  const Tensor flat = s.images.reshaped({200, 36});
  Model probe = init_model({Dense{36, 2}, LogSoftmax{}}, {36}, 1);
  for (int step = 0; step < 300; ++step) probe = sgd_step(probe, backward(probe, forward(probe, flat), s.labels), 0.5);
  const Tensor lp = forward(probe, flat).output;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < 200; ++b) correct += (lp[b * 2 + 1] > lp[b * 2]) == (s.labels[b] == 1);
  CHECK(correct == 200);
}

TEST_CASE("split_dataset: 60/30/10 by default with consistent classes") {
  const auto bundle = synth_dataset(SynthKind::blobs, 1000, 8, 5, 3);
  CHECK(bundle.train.size() == 600);
  CHECK(bundle.test.size() == 300);
  CHECK(bundle.validation.size() == 100);
  CHECK(bundle.classes == 5);
  CHECK(bundle.sample_shape == Shape{1, 8, 8});
}

TEST_CASE("ssim: identities and a single-window oracle") {
  const Tensor a = random_image(1, 6, 6), b = random_image(2, 6, 6);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(ssim(a, b) - ssim(b, a)) < 1e-12);
  CHECK(ssim(a, b) == doctest::Approx(global_ssim_oracle(a, b, 1.0)).epsilon(1e-9));
  Tensor neg = a;
  for (double& v : neg.values()) v = 1.0 - v;
  CHECK(ssim(a, neg) < 0.0);
  const Tensor big1 = random_image(3, 12, 12), big2 = random_image(4, 12, 12);
  CHECK(std::abs(ssim(big1, big2) - ssim(big2, big1)) < 1e-12);
  CHECK(ssim(big1, big1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("pgm: encode and decode round trip") {
  Tensor img({3, 4});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i * 17 % 256) / 255.0;
  img[0] = 0.0;
  img[1] = 1.0;
  const std::string bytes = encode_pgm(img);
  CHECK(bytes.rfind("P5", 0) == 0);
  const Tensor back = decode_pgm(bytes);
  CHECK(back.shape() == Shape{3, 4});
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(back[i] == doctest::Approx(img[i]).epsilon(1.0 / 255.0));
  const Tensor tiles = decode_pgm(encode_pgm(Tensor({2, 2, 3}, 0.5)));
  CHECK(tiles.shape() == Shape{2, 6});
}

TEST_CASE("config: parse, serialize, parse is the identity") {
  for (const auto& name : preset_names()) {
    const ExperimentConfig c = preset_config(name);
    CHECK(parse_config(serialize_config(c)) == c);
  }
  const std::string text = R"(
preset = "mnist-deep-3mal"   # start from a preset
seed = 17
defense = "pixelate"
block = 4
tau_D = 2.5
lr = 0.01
dataset = "synthetic"
synth_kind = "blobs"
)";
  const ExperimentConfig c = parse_config(text);
  CHECK(c.seed() == 17);
  CHECK(c.round.defense.mode == DefenseMode::pixelate);
  CHECK(c.round.attack.placement == Placement::deep);
  CHECK(c.round.detector.tau_D == 2.5);
  CHECK(c.synth_kind == SynthKind::blobs);
  CHECK(parse_config(serialize_config(c)) == c);
}

TEST_CASE("config: errors name what is wrong") {
  try {
    parse_config("rounds = 3\nbogus = 1\nalso_bogus = true\n");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("bogus") != std::string::npos);
    CHECK(msg.find("also_bogus") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("rounds = 3\nrounds = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("rounds 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("tau = 2.0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("defense = \"magic\"\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("preset = \"nope\"\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("dataset = \"idx\"\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.txt"), ConfigError);
}

TEST_CASE("load_dataset reads IDX files") {
  const fs::path dir = scratch("idx");
  Tensor images({20, 1, 4, 4});
  Rng rng(1);
  for (double& v : images.values()) v = static_cast<double>(rng.index(256)) / 255.0;
  std::vector<int> labels;
  for (int i = 0; i < 20; ++i) labels.push_back(i % 3);
  write_file(dir / "img", encode_idx_images(images));
  write_file(dir / "lab", encode_idx_labels(labels));
  ExperimentConfig c;
  c.dataset = "idx";
  c.idx_images = (dir / "img").string();
  c.idx_labels = (dir / "lab").string();
  const DatasetBundle b = load_dataset(c);
  CHECK(b.classes == 3);
  CHECK(b.train.size() + b.test.size() + b.validation.size() == 20);
  c.idx_labels = (dir / "missing").string();
  CHECK_THROWS_AS(load_dataset(c), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("cli: exit codes") {
  const fs::path dir = scratch("cli_codes");
  const fs::path log = dir / "log.txt";
  CHECK(run_cli("version", log) == 0);
  CHECK(read_text(log).find("drarmor") != std::string::npos);
  CHECK(run_cli("frobnicate", log) == 2);
  CHECK(read_text(log).find("simulate") != std::string::npos);
  CHECK(run_cli("", log) == 2);
  CHECK(run_cli("simulate --defense magic", log) == 2);
  CHECK(run_cli("simulate --config " + (dir / "missing.txt").string(), log) == 2);
  write_file(dir / "bad.txt", "rounds = 0\n");
  CHECK(run_cli("simulate --config " + (dir / "bad.txt").string() + " --out " + (dir / "o").string(), log) == 2);
  write_file(dir / "garbage.bin", "not a model");
  CHECK(run_cli("detect --model " + (dir / "garbage.bin").string() + " --batch " + (dir / "garbage.bin").string() +
                    " --out " + (dir / "o").string(),
                log) == 3);
  fs::remove_all(dir);
}

TEST_CASE("cli: simulate writes only under --out and reruns are byte-identical") {
  const fs::path dir = scratch("cli_sim");
  write_file(dir / "c.txt",
             "preset = \"mnist-start-3mal\"\nsynth_n = 400\nsynth_side = 8\nrounds = 2\nnum_clients = 4\n"
             "clients_per_round = 2\nbatch_size = 16\nlocal_steps = 1\n");
  const std::string base = "simulate --config " + (dir / "c.txt").string() + " --seed 1 --defense noise --out ";
  REQUIRE(run_cli(base + (dir / "a").string(), dir / "log_a") == 0);
  REQUIRE(run_cli(base + (dir / "b").string(), dir / "log_b") == 0);
  const auto a = tree(dir / "a"), b = tree(dir / "b");
  CHECK(a == b);
  CHECK(a.count("metrics.csv") == 1);
  CHECK(a.count("summary.json") == 1);
  CHECK(a.count("baseline_metrics.csv") == 1);
  CHECK(a.count("rounds/round_000/report.json") == 1);
  CHECK(a.at("metrics.csv").rfind("round,acc,loss,leak_rate,images_leaked,tpr,tnr,fpr,fnr,fp,fn,ssim_mean,ssim_max,delta_acc\n", 0) == 0);
  const auto summary = nlohmann::json::parse(a.at("summary.json"));
  CHECK(summary.at("rounds") == 2);
  CHECK(summary.contains("delta_acc"));

  std::set<std::string> top;
  for (const auto& e : fs::directory_iterator(dir)) top.insert(e.path().filename().string());
  CHECK(top == std::set<std::string>{"a", "b", "c.txt", "log_a", "log_b"});
  fs::remove_all(dir);
}

TEST_CASE("cli: attack-demo dumps exact reconstructions and pixelation hides them") {
  const fs::path dir = scratch("cli_demo");
  REQUIRE(run_cli("attack-demo --seed 2 --defense none --out " + (dir / "none").string(), dir / "log") == 0);
  const auto demo = nlohmann::json::parse(read_text(dir / "none" / "demo.json"));
  CHECK(demo.at("images_leaked").get<int>() > 0);
  const auto rec = nlohmann::json::parse(read_text(dir / "none" / "reconstruction.json"));
  bool any_pgm = false;
  for (const auto& bin : rec.at("bins")) {
    if (!bin.at("active").get<bool>()) continue;
    any_pgm = any_pgm || fs::exists(dir / "none" / bin.at("file").get<std::string>());
  }
  CHECK(any_pgm);

  REQUIRE(run_cli("attack-demo --seed 2 --defense pixelate --out " + (dir / "pix").string(), dir / "log") == 0);
  const auto pix = nlohmann::json::parse(read_text(dir / "pix" / "demo.json"));
  CHECK(pix.at("images_leaked").get<int>() == 0);
  REQUIRE(pix.at("ssim_mean").is_number());
  CHECK(pix.at("ssim_mean").get<double>() < 0.45);
  fs::remove_all(dir);
}

TEST_CASE("cli: detect reads the model and batch containers") {
  const fs::path dir = scratch("cli_detect");
  const auto data = synth_dataset(SynthKind::stripes, 200, 8, 4, 1);
  const Model m = init_model({Conv2D{1, 2, 3, 1, Padding::same}, ReLU{}, Flatten{}, Dense{128, 4}, LogSoftmax{}},
                             data.sample_shape, 1);
  save_model(m, dir / "m.bin");
  const Split b = subset(data.train, 0, 8);
  save_batch({b.images, b.labels}, dir / "b.bin");
  REQUIRE(run_cli("detect --model " + (dir / "m.bin").string() + " --batch " + (dir / "b.bin").string() + " --out " +
                      (dir / "o").string(),
                  dir / "log") == 0);
  const auto report = nlohmann::json::parse(read_text(dir / "o" / "detection.json"));
  CHECK(report.contains("tau_D"));
  fs::remove_all(dir);
}
