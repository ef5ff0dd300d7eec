#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "temp_dir.hpp"

#include "cae/checkpoint.hpp"
#include "cae/volume.hpp"
#include "cli.hpp"
#include "json.hpp"

using namespace cae;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cae");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t count_lines(const std::string& s) { return std::size_t(std::count(s.begin(), s.end(), '\n')); }

// Phantoms at S=16 plus their manifest, written by the CLI itself.
std::filesystem::path phantoms(const TempDir& dir, std::size_t per_class) {
  auto r = run_cli({"--threads", "1", "phantom-gen", "--per-class", std::to_string(per_class), "--size", "16",
                "--seed", "5", "--output-dir", (dir / "ph").string()});
  REQUIRE(r.code == 0);
  return dir / "ph";
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit 2") {
  CHECK(run_cli({}).code == cli::usage);
  CHECK(run_cli({"frobnicate"}).code == cli::usage);
  CHECK(run_cli({"encode", "--output", "x.csv"}).code == cli::usage);  // --checkpoint missing
  CHECK(run_cli({"phantom-gen", "--output-dir", "x", "--bogus", "1"}).code == cli::usage);
  CHECK(run_cli({"train", "--model", "cnn", "--manifest", "m.csv", "--output", "o"}).code != cli::ok);
  CHECK(run_cli({"--help"}).code == cli::ok);
}

TEST_CASE("config file: unknown keys rejected, flags take precedence") {
  TempDir dir;
  std::ofstream(dir / "bad.toml") << "[phantom-gen]\nper-class = 1\nsizee = 16\n";
  CHECK(run_cli({"--config", (dir / "bad.toml").string(), "phantom-gen", "--output-dir", (dir / "a").string()}).code ==
        cli::usage);

  std::ofstream(dir / "ok.toml") << "threads = 1\n[phantom-gen]\nper-class = 2\nsize = 16\nseed = 9\n";
  auto r = run_cli({"--config", (dir / "ok.toml").string(), "phantom-gen", "--seed", "4", "--output-dir",
                (dir / "b").string()});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(slurp(dir / "b" / "phantom-gen.config.json"));
  CHECK(j["options"]["per-class"] == "2");
  CHECK(j["options"]["seed"] == "4");
  CHECK(j["options"]["size"] == "16");
  CHECK(j["threads"] == 1);
  CHECK(count_lines(slurp(dir / "b" / "manifest.csv")) == 5);
}

TEST_CASE("data errors exit 3") {
  TempDir dir;
  CHECK(run_cli({"encode", "--checkpoint", (dir / "none.ckpt").string(), "--input", "x.rvol", "--output",
             (dir / "e.csv").string()})
            .code == cli::data_error);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint\n";
  auto r = run_cli({"encode", "--checkpoint", (dir / "junk.ckpt").string(), "--input", "x.rvol", "--output",
                (dir / "e.csv").string()});
  CHECK(r.code == cli::data_error);
  CHECK(r.err.find("bad_magic") != std::string::npos);

  // a 16^3 volume against a model built for 32^3
  auto ph = phantoms(dir, 1);
  auto d = ArchitectureDescriptor::defaults(ModelKind::cae3d, 32, 8);
  save_checkpoint({build<float>(d, 1), std::nullopt, {}}, dir / "m32.ckpt");
  CHECK(run_cli({"encode", "--checkpoint", (dir / "m32.ckpt").string(), "--manifest", (ph / "manifest.csv").string(),
             "--output", (dir / "e.csv").string()})
            .code == cli::data_error);
}

TEST_CASE("non-finite training data exits 4") {
  TempDir dir;
  Volume v{Tensor<float>({16, 16, 16}, 10.0f), "nan", 0, {}};
  v.data[100] = std::numeric_limits<float>::quiet_NaN();
  write_rvol(v, dir / "a.rvol");
  write_rvol(v, dir / "b.rvol");
  write_manifest({{"a.rvol", 0, "a", ""}, {"b.rvol", 1, "b", ""}}, dir / "m.csv");
  auto r = run_cli({"train", "--model", "3d", "--manifest", (dir / "m.csv").string(), "--output",
                (dir / "o.ckpt").string(), "--epochs", "1", "--batch-size", "2", "--validation-fraction", "0"});
  CHECK(r.code == cli::numeric_failure);
  CHECK(r.err.find("last finite loss") != std::string::npos);
}

TEST_CASE("encode emits id plus E columns") {
  TempDir dir;
  auto ph = phantoms(dir, 2);
  auto d = ArchitectureDescriptor::defaults(ModelKind::cae3d, 16, 50);
  save_checkpoint({build<float>(d, 1), std::nullopt, {}}, dir / "m.ckpt");
  auto args = std::vector<std::string>{"--threads", "1", "encode", "--checkpoint", (dir / "m.ckpt").string(),
                                       "--manifest", (ph / "manifest.csv").string(), "--output",
                                       (dir / "e.csv").string()};
  REQUIRE(run_cli(args).code == 0);
  const auto text = slurp(dir / "e.csv");
  std::stringstream in(text);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') == 50);
    ++rows;
  }
  CHECK(rows == 5);
  CHECK(text.rfind("id,e0,e1,", 0) == 0);
  // idempotent
  REQUIRE(run_cli(args).code == 0);
  CHECK(slurp(dir / "e.csv") == text);
  CHECK(std::filesystem::exists(dir / "encode.config.json"));
}

TEST_CASE("augment on three inputs emits 273 volumes") {
  TempDir dir;
  auto ph = phantoms(dir, 2);
  auto r = run_cli({"augment", "--input", (ph / "phantom_0000_a.rvol").string(), (ph / "phantom_0001_b.rvol").string(),
                (ph / "phantom_0002_a.rvol").string(), "--output-dir", (dir / "aug").string()});
  REQUIRE(r.code == 0);
  std::size_t rvols = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "aug")) rvols += e.path().extension() == ".rvol";
  CHECK(rvols == 273);
  CHECK(count_lines(slurp(dir / "aug" / "manifest.csv")) == 274);

  r = run_cli({"augment", "--manifest", (ph / "manifest.csv").string(), "--output-dir", (dir / "fly").string(),
           "--on-the-fly"});
  REQUIRE(r.code == 0);
  CHECK(count_lines(slurp(dir / "fly" / "manifest.csv")) == 4 * 91 + 1);
  // entries load straight from the originals with the tag applied
  const auto rows = read_manifest(dir / "fly" / "manifest.csv");
  CHECK(load_entry(rows[5], "").tag == AugmentTag::parse(rows[5].path.substr(rows[5].path.find('#') + 1)));
}

TEST_CASE("data directory from the environment") {
  TempDir dir;
  auto ph = phantoms(dir, 1);
  auto manifest = slurp(ph / "manifest.csv");
  std::ofstream(dir / "elsewhere.csv") << manifest;
  ::setenv("CAE_DATA_DIR", ph.c_str(), 1);
  auto r = run_cli({"prep", "--manifest", (dir / "elsewhere.csv").string(), "--crop", "16", "--no-downsample",
                "--output-dir", (dir / "p").string()});
  ::unsetenv("CAE_DATA_DIR");
  CHECK(r.code == 0);
  CHECK(std::filesystem::exists(dir / "p" / "phantom_0001_b.rvol"));
  r = run_cli({"prep", "--manifest", (dir / "elsewhere.csv").string(), "--crop", "16", "--output-dir",
           (dir / "q").string()});
  CHECK(r.code == cli::data_error);
}

TEST_CASE("train, reconstruct, saliency, eval, bench") {
  TempDir dir;
  auto ph = phantoms(dir, 10);
  const auto m = (ph / "manifest.csv").string();
  auto r = run_cli({"--threads", "1", "train", "--model", "3d", "--manifest", m, "--output", (dir / "c.ckpt").string(),
                "--epochs", "2", "--batch-size", "4", "--embedding", "8", "--checkpoint-every", "1"});
  REQUIRE(r.code == 0);
  CHECK(count_lines(slurp(dir / "c.ckpt.history.csv")) == 4);
  CHECK(load_checkpoint(dir / "c.ckpt").optimizer);

  r = run_cli({"reconstruct", "--checkpoint", (dir / "c.ckpt").string(), "--input", (ph / "phantom_0000_a.rvol").string(),
           "--output", (dir / "r.rvol").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("mse ", 0) == 0);
  CHECK(read_rvol(dir / "r.rvol").shape() == Shape{16, 16, 16});

  r = run_cli({"saliency", "--checkpoint", (dir / "c.ckpt").string(), "--input", (ph / "phantom_0000_a.rvol").string(),
           "--nodes", "0,1", "--output-dir", (dir / "s").string()});
  REQUIRE(r.code == 0);
  CHECK(slurp(dir / "s" / "saliency_node1.pgm").size() == std::string("P5\n80 16\n255\n").size() + 5 * 16 * 16);
  CHECK(run_cli({"saliency", "--checkpoint", (dir / "c.ckpt").string(), "--input", (ph / "phantom_0000_a.rvol").string(),
             "--nodes", "8", "--output-dir", (dir / "s").string()})
            .code == cli::usage);

  REQUIRE(run_cli({"encode", "--checkpoint", (dir / "c.ckpt").string(), "--manifest", m, "--output",
               (dir / "e.csv").string()})
              .code == 0);
  r = run_cli({"eval", "--embeddings", (dir / "e.csv").string(), "--manifest", m, "--seeds", "1,2", "--task", "ab",
           "--feature-set", "CAE-3D", "--output", (dir / "report.csv").string()});
  REQUIRE(r.code == 0);
  const auto report = slurp(dir / "report.csv");
  CHECK(count_lines(report) == 5);
  CHECK(report.find("ab,CAE-3D,rf,") != std::string::npos);

  r = run_cli({"bench-encode", "--checkpoint", (dir / "c.ckpt").string(), "--count", "2", "--output",
           (dir / "bench.csv").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("mean_seconds_per_volume") != std::string::npos);
  CHECK(count_lines(slurp(dir / "bench.csv")) == 2);
}

}  // TEST_SUITE
