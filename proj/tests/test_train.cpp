#include <fstream>
#include <numeric>
#include <sstream>

#include "bnnq/config.hpp"
#include "bnnq/errors.hpp"
#include "bnnq/serialize.hpp"
#include "bnnq/train.hpp"
#include "doctest.h"

using namespace bnnq;

namespace {

const char* kSmallTopology = "fconv:4:3:1:1,bn,act,pool:2:2,bconv:8:3:1:1,bn,act,pool:2:2,flat,blin:16,bn,act,flin:10";

const DatasetSplit& small_data() {
  static const DatasetSplit d = make_synthetic_cifar({7, 96, 40});
  return d;
}

TrainConfig small_config(SteKind ste = SteKind::swish_trainable(5.0), RegKind reg = RegKind::R1) {
  TrainConfig c;
  c.topology = kSmallTopology;
  c.ste = ste;
  c.reg.kind = reg;
  c.reg.lambda = reg == RegKind::None ? 0.0 : 1e-3;
  c.batch = 16;
  c.epochs = 3;
  c.seed = 11;
  c.lr = LrSchedule(0.01, {{1, 0.5}});
  return c;
}

Shape cifar_shape() { return {3, 32, 32}; }

}  // namespace

TEST_CASE("training is deterministic in the seed") {
  const auto& d = small_data();
  const ChannelStats stats = compute_stats(d.train);
  Trainer a(small_config(), cifar_shape()), b(small_config(), cifar_shape());
  for (int e = 0; e < 2; ++e) {
    const EpochMetrics ma = a.train_epoch(d.train, stats), mb = b.train_epoch(d.train, stats);
    CHECK(metrics_row(ma) == metrics_row(mb));
  }
  CHECK(a.checkpoint_bytes() == b.checkpoint_bytes());

  TrainConfig other = small_config();
  other.seed = 12;
  Trainer c(other, cifar_shape());
  c.train_epoch(d.train, stats);
  c.train_epoch(d.train, stats);
  CHECK(c.checkpoint_bytes() != a.checkpoint_bytes());
}

TEST_CASE("epoch metrics report the schedule and the regularizer") {
  const auto& d = small_data();
  const ChannelStats stats = compute_stats(d.train);
  Trainer t(small_config(), cifar_shape());
  const EpochMetrics m0 = t.train_epoch(d.train, stats);
  const EpochMetrics m1 = t.train_epoch(d.train, stats);
  CHECK(m0.epoch == 1);
  CHECK(m1.epoch == 2);
  CHECK(t.epoch() == 2);
  CHECK(m0.lr == 0.01);
  CHECK(m1.lr == doctest::Approx(0.005));
  CHECK(m0.reg_term > 0.0);
  CHECK(m0.train_loss > m0.reg_term);
  CHECK(m0.train_top1 >= 0.0);
  CHECK(m0.train_top1 <= 100.0);
  CHECK(m1.betas.size() == 5);  // two binary layers and three binary activations
  CHECK(m1.mean_alpha == doctest::Approx(mean_scale(t.network())));
  CHECK(t.optimizer().steps() == 2 * (96 / 16));

  Trainer plain(small_config(SteKind::htanh(), RegKind::None), cifar_shape());
  const EpochMetrics mp = plain.train_epoch(d.train, stats);
  CHECK(mp.reg_term == 0.0);
  CHECK(mp.betas.empty());
}

TEST_CASE("checkpoints resume bit-exactly") {
  const auto& d = small_data();
  const ChannelStats stats = compute_stats(d.train);
  Trainer straight(small_config(), cifar_shape());
  straight.train_epoch(d.train, stats);
  const auto mid = straight.checkpoint_bytes();
  straight.train_epoch(d.train, stats);

  Trainer resumed = Trainer::from_checkpoint_bytes(mid);
  CHECK(resumed.epoch() == 1);
  CHECK(resumed.checkpoint_bytes() == mid);
  CHECK_THROWS_AS(resumed.set_epochs(0), ConfigError);
  resumed.set_epochs(7);
  CHECK(resumed.config().epochs == 7);
  resumed.set_epochs(3);
  resumed.train_epoch(d.train, stats);
  CHECK(resumed.checkpoint_bytes() == straight.checkpoint_bytes());

  const auto dir = std::filesystem::current_path() / "train-test";
  std::filesystem::remove_all(dir);
  straight.save_checkpoint(dir / "ck.bin");
  CHECK(Trainer::load_checkpoint(dir / "ck.bin").checkpoint_bytes() == straight.checkpoint_bytes());

  // A fresh trainer has no optimizer moments yet and still round-trips.
  Trainer fresh(small_config(SteKind::htanh(), RegKind::R2), cifar_shape());
  CHECK(Trainer::from_checkpoint_bytes(fresh.checkpoint_bytes()).checkpoint_bytes() == fresh.checkpoint_bytes());
}

TEST_CASE("damaged checkpoints are rejected") {
  Trainer t(small_config(), cifar_shape());
  const auto bytes = t.checkpoint_bytes();
  for (std::size_t n : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 3, bytes.size() / 2,
                        bytes.size() - 1})
    CHECK_THROWS_AS(Trainer::from_checkpoint_bytes(std::span(bytes).first(n)), FormatError);

  const auto dir = std::filesystem::current_path() / "train-test";
  write_binary_file(dir / "short.bin", std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 40));
  CHECK_THROWS_WITH_AS(Trainer::load_checkpoint(dir / "short.bin"), doctest::Contains("short.bin"), FormatError);

  // A config describing a different model: parameters no longer line up.
  auto segs = decode_segments(bytes, "BNNQ", kCheckpointVersion);
  std::string text(segs[0].payload.begin(), segs[0].payload.end());
  const std::string from = "blin:16", to = "blin:24";
  text.replace(text.find(from), from.size(), to);
  segs[0].payload.assign(text.begin(), text.end());
  CHECK_THROWS_AS(Trainer::from_checkpoint_bytes(encode_segments("BNNQ", kCheckpointVersion, segs)), StateError);

  auto missing = decode_segments(bytes, "BNNQ", kCheckpointVersion);
  missing.pop_back();
  CHECK_THROWS_AS(Trainer::from_checkpoint_bytes(encode_segments("BNNQ", kCheckpointVersion, missing)), FormatError);
}

TEST_CASE("evaluate matches a single eval-mode forward pass") {
  const auto& d = small_data();
  const ChannelStats stats = compute_stats(d.train);
  Trainer t(small_config(), cifar_shape());
  t.train_epoch(d.train, stats);
  const EvalResult r = evaluate(t.network(), d.test, stats, 7);

  std::vector<Index> all(static_cast<std::size_t>(d.test.size()));
  std::iota(all.begin(), all.end(), 0);
  const Batch b = make_batch(d.test, all, stats, nullptr);
  const Tensor<float> logits = t.network().forward(b.images, {false, false});
  int correct = 0, top5 = 0;
  for (Index i = 0; i < d.test.size(); ++i) {
    const float* row = logits.data() + i * 10;
    const int pred = static_cast<int>(std::max_element(row, row + 10) - row);
    CHECK(r.predictions[static_cast<std::size_t>(i)] == pred);
    correct += pred == b.labels[static_cast<std::size_t>(i)];
    int above = 0;
    for (int c = 0; c < 10; ++c) above += row[c] > row[b.labels[static_cast<std::size_t>(i)]];
    top5 += above < 5;
  }
  CHECK(r.count == 40);
  CHECK(r.top1 == doctest::Approx(100.0 * correct / 40));
  CHECK(r.top5 == doctest::Approx(100.0 * top5 / 40));
  CHECK(r.loss == doctest::Approx(softmax_cross_entropy<float>(logits, b.labels).loss).epsilon(1e-5));
  // Evaluation leaves the model untouched.
  CHECK(evaluate(t.network(), d.test, stats, 40).predictions == r.predictions);

  CHECK_THROWS_AS(evaluate(t.network(), d.test.head(0), stats), DomainError);
  Dataset gray = d.test;
  gray.channels = 1;
  gray.pixels.resize(static_cast<std::size_t>(gray.size() * gray.image_size()));
  CHECK_THROWS_AS(evaluate(t.network(), gray, stats), ShapeError);
}

TEST_CASE("training rejects unusable inputs") {
  const auto& d = small_data();
  const ChannelStats stats = compute_stats(d.train);
  Trainer t(small_config(), cifar_shape());
  CHECK_THROWS_AS(t.train_epoch(d.train.head(15), stats), ConfigError);
  TrainConfig bad = small_config(SteKind::swish(5.0));
  bad.clip_latent = true;
  CHECK_THROWS_AS(Trainer(bad, cifar_shape()), ConfigError);
}

TEST_CASE("a non-finite loss stops training with its location") {
  const auto& d = small_data();
  const ChannelStats stats = compute_stats(d.train);
  Trainer t(small_config(), cifar_shape());
  t.set_last_checkpoint("runs/x/epoch-0.ckpt");
  t.network().params().back()->value[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(t.train_epoch(d.train, stats),
                       doctest::Contains("epoch 1, batch 1; last checkpoint: runs/x/epoch-0.ckpt"), DivergenceError);
}

TEST_CASE("total loss adds the weighted regularizer") {
  Trainer t(small_config(), cifar_shape());
  const RegConfig& reg = t.config().reg;
  const double r = t.network().reg_value();
  CHECK(r > 0.0);
  CHECK(total_loss(2.0, t.network(), reg) == doctest::Approx(2.0 + 1e-3 * r));
  RegConfig scheduled = reg;
  scheduled.lambda_multiplier = [](int epoch) { return epoch < 2 ? 0.0 : 1.0; };
  CHECK(total_loss(2.0, t.network(), scheduled, 0) == 2.0);
  CHECK(total_loss(2.0, t.network(), scheduled, 5) == doctest::Approx(2.0 + 1e-3 * r));
  RegConfig none;
  CHECK(total_loss(2.0, t.network(), none) == 2.0);
}

TEST_CASE("weight diagnostics against hand-set weights") {
  Trainer t(small_config(SteKind::htanh(), RegKind::R1), cifar_shape());
  Network<float>& net = t.network();
  std::vector<BinaryParam<float>*> bins;
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (auto* c = dynamic_cast<BinConv<float>*>(&net.layer(i))) bins.push_back(&c->weights());
    if (auto* l = dynamic_cast<BinLinear<float>*>(&net.layer(i))) bins.push_back(&l->weights());
  }
  REQUIRE(bins.size() == 2);
  // Channel c gets alpha = 0.5 * (c + 1); entries cycle through
  // alpha * {1, -1.05, 0.85, 1.2, 0}: the first two are within 10%.
  const double mult[5] = {1.0, -1.05, 0.85, 1.2, 0.0};
  Index total = 0, near = 0, in_band = 0;
  for (auto* w : bins) {
    Param<float>& alpha = *w->alpha_param();
    Tensor<float>& v = w->latent().value;
    for (Index c = 0; c < w->channels(); ++c) alpha.value[c] = 0.5f * static_cast<float>(c + 1);
    for (Index i = 0; i < v.size(); ++i) {
      const double a = 0.5 * static_cast<double>(i / w->fan() + 1);
      const double m = mult[i % 5];
      v[i] = static_cast<float>(a * m);
      near += std::abs(std::abs(m) - 1.0) <= 0.1;
      const double mag = std::abs(static_cast<double>(v[i]));
      in_band += mag >= 0.5 && mag <= 1.0;
      ++total;
    }
  }
  CHECK(fraction_near_scale(net) == doctest::Approx(static_cast<double>(near) / total));
  CHECK(fraction_abs_in(net, 0.5, 1.0) == doctest::Approx(static_cast<double>(in_band) / total));
  CHECK(binary_latent_weights(net).size() == static_cast<std::size_t>(total));
}

TEST_CASE("metrics CSV layout") {
  EpochMetrics m;
  m.epoch = 3;
  m.lr = 0.005;
  m.train_loss = 1.25;
  m.train_top1 = 50.5;
  m.reg_term = 1e-4;
  m.mean_alpha = 0.0625;
  m.betas = {5.0, 4.5};
  CHECK(metrics_header() == "epoch,lr,train_loss,train_top1,test_top1,reg_term,mean_alpha,betas");
  CHECK(metrics_row(m) == "3,0.005,1.25,50.5,,0.0001,0.0625,5;4.5");
  m.test_top1 = 48.0;
  m.betas.clear();
  CHECK(metrics_row(m) == "3,0.005,1.25,50.5,48,0.0001,0.0625,");

  const auto file = std::filesystem::current_path() / "train-test" / "metrics.csv";
  std::filesystem::remove(file);
  append_metrics(file, m);
  append_metrics(file, m);
  std::ifstream in(file);
  std::stringstream s;
  s << in.rdbuf();
  CHECK(s.str() == metrics_header() + "\n" + metrics_row(m) + "\n" + metrics_row(m) + "\n");
}
