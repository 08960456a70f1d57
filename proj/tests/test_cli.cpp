#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "bnnq/config.hpp"
#include "bnnq/data.hpp"
#include "doctest.h"

namespace fs = std::filesystem;
using namespace bnnq;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

const fs::path& work() {
  static const fs::path dir = [] {
    const fs::path d = fs::current_path() / "cli-test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Run cli(const std::string& args) {
  const fs::path log = work() / "last.log";
  const std::string cmd = "env -u BNNQ_CIFAR10_DIR '" + std::string(BNNQ_CLI) + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

std::string mnist_flags() {
  return "--dataset mnist --data-dir '" + (fs::path(BNNQ_FIXTURES) / "mnist-100").string() +
         "' --config '" + (work() / "lenet.txt").string() + "' --batch 20 --seed 5 --no-augment";
}

void write_lenet_config() {
  std::ofstream(work() / "lenet.txt") << "model.topology = lenet-mnist\nmodel.ste = htanh\nreg.kind = r1\nreg.lambda = 1e-5\n";
}

/// "top-1 12.34%" from an eval or infer report.
std::string top1_field(const std::string& out) {
  const auto at = out.find("top-1 ");
  return at == std::string::npos ? "" : out.substr(at, out.find('%', at) - at + 1);
}

}  // namespace

TEST_CASE("usage errors and help") {
  CHECK(cli("").code == 1);
  CHECK(cli("frobnicate").code == 1);
  CHECK(cli("train --epochs").code == 1);
  const Run help = cli("--help");
  CHECK(help.code == 0);
  CHECK(help.out.find("train") != std::string::npos);
}

TEST_CASE("preset listing") {
  const Run list = cli("presets");
  CHECK(list.code == 0);
  std::string expected;
  for (const auto& n : preset_names()) expected += n + "\n";
  CHECK(list.out == expected);
  const Run one = cli("presets conv4-bnn");
  CHECK(one.code == 0);
  CHECK(one.out == to_text(preset_config("conv4-bnn")));
  CHECK(cli("presets conv4-nope").code == 1);
}

TEST_CASE("train, resume, eval, export, infer and bench on MNIST-format data") {
  write_lenet_config();
  const fs::path a = work() / "a", b = work() / "b", c = work() / "c";
  const Run ra = cli("train " + mnist_flags() + " --epochs 2 --out '" + a.string() + "'");
  REQUIRE_MESSAGE(ra.code == 0, ra.out);
  CHECK(ra.out.find("epoch 2/2") != std::string::npos);
  for (const char* f : {"config.txt", "metrics.csv", "stats.txt", "checkpoint.bnnq", "final.bnnq"})
    CHECK_MESSAGE(fs::exists(a / f), f);
  const RunConfig written = load_config(a / "config.txt");
  CHECK(written.train.topology == "lenet-mnist");
  CHECK(written.train.seed == 5);
  CHECK(written.train.epochs == 2);
  const std::string metrics = slurp(a / "metrics.csv");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);

  // Same seed, same metrics; resuming from epoch 1 reproduces epoch 2.
  REQUIRE(cli("train " + mnist_flags() + " --epochs 2 --out '" + b.string() + "'").code == 0);
  CHECK(slurp(b / "metrics.csv") == metrics);
  CHECK(slurp(b / "final.bnnq") == slurp(a / "final.bnnq"));
  REQUIRE(cli("train " + mnist_flags() + " --epochs 1 --out '" + c.string() + "'").code == 0);
  const Run rc = cli("train " + mnist_flags() + " --epochs 2 --resume '" + (c / "final.bnnq").string() + "'");
  REQUIRE_MESSAGE(rc.code == 0, rc.out);
  CHECK(slurp(c / "metrics.csv") == metrics);
  CHECK(slurp(c / "final.bnnq") == slurp(a / "final.bnnq"));

  const Run ev = cli("eval " + mnist_flags() + " --checkpoint '" + (a / "final.bnnq").string() + "'");
  REQUIRE_MESSAGE(ev.code == 0, ev.out);
  CHECK(ev.out.find("(20 images)") != std::string::npos);

  const Run ex = cli("export --checkpoint '" + (a / "final.bnnq").string() + "'");
  REQUIRE_MESSAGE(ex.code == 0, ex.out);
  REQUIRE(fs::exists(a / "final.bnnp"));
  const Run inf = cli("infer " + mnist_flags() + " --model '" + (a / "final.bnnp").string() + "'");
  REQUIRE_MESSAGE(inf.code == 0, inf.out);
  CHECK(!top1_field(ev.out).empty());
  CHECK(top1_field(inf.out) == top1_field(ev.out));

  const Run bench = cli("bench --model '" + (a / "final.bnnp").string() + "' --batch 4 --reps 1");
  CHECK(bench.code == 0);
  CHECK(bench.out.find("outputs identical") != std::string::npos);
  CHECK(cli("bench --model '" + (a / "final.bnnp").string() + "' --batch 4 --reps 1 --min-speedup 1e9").code == 4);

  // An empty test split has nothing to run on.
  const fs::path empty = work() / "empty";
  const DatasetSplit fixture = load_mnist(fs::path(BNNQ_FIXTURES) / "mnist-100");
  fs::create_directories(empty);
  write_mnist_pair(empty / "train-images-idx3-ubyte", empty / "train-labels-idx1-ubyte", fixture.train);
  write_mnist_pair(empty / "t10k-images-idx3-ubyte", empty / "t10k-labels-idx1-ubyte", fixture.test.head(0));
  const Run none = cli("infer --dataset mnist --data-dir '" + empty.string() + "' --model '" + (a / "final.bnnp").string() + "'");
  CHECK(none.code == 2);
  CHECK(none.out.find("no images") != std::string::npos);
}

TEST_CASE("synthetic smoke run with conv4") {
  const fs::path s = work() / "synthetic";
  const Run r = cli("train --preset conv4-ss-r1 --dataset synthetic --epochs 1 --limit 256 --test-limit 64 --out '" + s.string() + "'");
  REQUIRE_MESSAGE(r.code == 0, r.out);
  CHECK(r.out.find("4227215 parameters") != std::string::npos);
  CHECK(r.out.find("epoch 1/1") != std::string::npos);
}

TEST_CASE("failures map to exit codes") {
  write_lenet_config();
  CHECK(cli("train " + mnist_flags() + " --batch 1").code == 1);
  CHECK(cli("train " + mnist_flags() + " --ste sign").code == 1);
  CHECK(cli("train " + mnist_flags() + " --ste ss:5 --clip-latent").code == 1);
  CHECK(cli("train --dataset cifar10 --epochs 1").code == 2);
  CHECK(cli("eval " + mnist_flags() + " --checkpoint '" + (work() / "missing.bnnq").string() + "'").code == 2);
  std::ofstream(work() / "junk.bnnp") << "not a model";
  CHECK(cli("bench --model '" + (work() / "junk.bnnp").string() + "'").code == 2);
  const Run div = cli("train " + mnist_flags() + " --epochs 2 --lr 1e38 --out '" + (work() / "div").string() + "'");
  CHECK(div.code == 3);
  CHECK(div.out.find("diverged") != std::string::npos);
}

TEST_CASE("gradcheck self-test") {
  const Run ok = cli("gradcheck");
  CHECK(ok.code == 0);
  CHECK(ok.out.find("gradcheck passed") != std::string::npos);
  const Run bad = cli("gradcheck --mutate-swish");
  CHECK(bad.code == 4);
  CHECK(bad.out.find("gradcheck FAILED") != std::string::npos);
}
