#include <numeric>
#include <random>

#include "bnnq/bitinfer.hpp"
#include "bnnq/errors.hpp"
#include "bnnq/train.hpp"
#include "doctest.h"

using namespace bnnq;

namespace {

std::vector<float> random_signs(std::mt19937_64& rng, Index n) {
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = (rng() & 1) ? 1.0f : -1.0f;
  return v;
}

const char* kSmallTopology = "fconv:8:3:1:1,bn,act,pool:2:2,bconv:70:3:1:1,bn,act,pool:2:2,flat,blin:33,bn,act,flin:10";

struct Trained {
  Trainer trainer;
  DatasetSplit data;
  ChannelStats stats;
};

/// One epoch on synthetic images so every batchnorm has running statistics.
Trained trained(ScaleMode mode, RegKind reg, SteKind ste = SteKind::swish_trainable(5.0)) {
  TrainConfig c;
  c.topology = kSmallTopology;
  c.ste = ste;
  c.reg.kind = reg;
  c.reg.lambda = 1e-4;
  c.reg.scale_mode = mode;
  c.batch = 16;
  c.seed = 3;
  c.lr = LrSchedule(0.01, {});
  Trained t{Trainer(c, {3, 32, 32}), make_synthetic_cifar({5, 64, 48}), {}};
  t.stats = compute_stats(t.data.train);
  t.trainer.train_epoch(t.data.train, t.stats);
  return t;
}

}  // namespace

TEST_CASE("pack and unpack are inverse") {
  std::mt19937_64 rng(1);
  for (Index n : {1, 2, 63, 64, 65, 127, 128, 129, 300}) {
    const auto v = random_signs(rng, n);
    const BitRow r = pack(v);
    CHECK(r.bits == n);
    CHECK(static_cast<Index>(r.words.size()) == words_for(n));
    CHECK(unpack(r) == v);
    if (n % 64) CHECK((r.words.back() >> (n % 64)) == 0);
    for (Index i = 0; i < n; ++i) CHECK(((r.words[static_cast<std::size_t>(i / 64)] >> (i % 64)) & 1) == (v[static_cast<std::size_t>(i)] > 0));
  }
  const std::vector<float> bad{1.0f, 0.0f};
  CHECK_THROWS_AS(pack(bad), DomainError);
  const Tensor<float> t({2, 3}, {1, -1, 1, -1, -1, 1});
  const auto rows = pack_rows(t);
  REQUIRE(rows.size() == 2);
  CHECK(unpack(rows[1]) == std::vector<float>{-1, -1, 1});
}

TEST_CASE("xnor dot equals the float dot product") {
  std::mt19937_64 rng(2);
  for (Index n : {1, 7, 64, 65, 200, 577}) {
    for (int rep = 0; rep < 20; ++rep) {
      const auto a = random_signs(rng, n), b = random_signs(rng, n);
      const float ref = std::inner_product(a.begin(), a.end(), b.begin(), 0.0f);
      CHECK(xnor_dot(pack(a), pack(b)) == static_cast<int>(ref));
    }
  }
  // Bits past n never count, whatever the words hold.
  const std::vector<std::uint64_t> ones{~0ULL, ~0ULL}, zeros{0, ~0ULL};
  CHECK(xnor_dot(ones, zeros, 64) == -64);
  CHECK(xnor_dot(ones, zeros, 70) == -64 + 6);
  CHECK(xnor_dot(ones, ones, 3) == 3);
  CHECK_THROWS_AS(xnor_dot(std::span(ones).first(1), ones, 65), ShapeError);
  CHECK_THROWS_AS(xnor_dot(pack(std::vector<float>{1}), pack(std::vector<float>{1, 1})), ShapeError);
}

TEST_CASE("thresholds reproduce the folded affine sign at every reachable pre-activation") {
  for (ScaleMode mode : {ScaleMode::TrainablePerFilter, ScaleMode::NoScale, ScaleMode::DynamicXnor}) {
    CAPTURE(to_string(mode));
    Trained t = trained(mode, mode == ScaleMode::TrainablePerFilter ? RegKind::R1 : RegKind::None);
    const PackedModel pm = fold_and_export(t.trainer.network());
    int binary = 0;
    for (const PackedLayer& L : pm.layers) {
      if (L.kind != PackedKind::BinConvSign && L.kind != PackedKind::BinLinearSign) continue;
      ++binary;
      for (Index f = 0; f < L.out_c; ++f) {
        const auto u = static_cast<std::size_t>(f);
        if (mode == ScaleMode::NoScale) CHECK(L.alpha[u] == 1.0f);
        // y shares the parity of the fan-in; skip values within rounding of the boundary.
        for (Index y = -L.fan_bits; y <= L.fan_bits; y += 2) {
          const double v = static_cast<double>(L.bn_scale[u]) * L.alpha[u] * static_cast<double>(y) + L.bn_shift[u];
          const double margin = 1e-5 * (std::abs(static_cast<double>(L.bn_scale[u]) * L.alpha[u]) * L.fan_bits + std::abs(L.bn_shift[u]));
          if (std::abs(v) > margin) CHECK(L.thresholds[u].fire(static_cast<std::int32_t>(y)) == (v > 0));
        }
      }
    }
    CHECK(binary == 2);
  }
}

TEST_CASE("packed inference matches the float network in eval mode") {
  for (ScaleMode mode : {ScaleMode::TrainablePerFilter, ScaleMode::DynamicXnor}) {
    CAPTURE(to_string(mode));
    Trained t = trained(mode, RegKind::R2);
    Network<float>& net = t.trainer.network();
    const PackedModel pm = fold_and_export(net);
    CHECK(pm.num_classes == 10);
    CHECK(pm.input_shape == Shape{3, 32, 32});

    std::vector<Index> all(static_cast<std::size_t>(t.data.test.size()));
    std::iota(all.begin(), all.end(), 0);
    const Batch b = make_batch(t.data.test, all, t.stats, nullptr);
    const Tensor<float> ref = net.forward(b.images, {false, false});
    const Tensor<float> got = infer(pm, b.images);
    REQUIRE(got.shape() == ref.shape());
    double worst = 0, scale = 0;
    for (Index i = 0; i < ref.size(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(got[i]) - ref[i]));
      scale = std::max(scale, std::abs(static_cast<double>(ref[i])));
    }
    CHECK(worst <= 1e-5 * scale);
    CHECK(predict(pm, t.data.test, t.stats, 7) == evaluate(net, t.data.test, t.stats).predictions);
    CHECK_THROWS_AS(infer(pm, Tensor<float>({2, 1, 32, 32})), ShapeError);
  }
}

TEST_CASE("packed model bytes round-trip and reject damage") {
  Trained t = trained(ScaleMode::TrainablePerFilter, RegKind::R1);
  const PackedModel pm = fold_and_export(t.trainer.network());
  const auto bytes = pm.to_bytes();
  CHECK(PackedModel::from_bytes(bytes) == pm);
  for (std::size_t n = 0; n < bytes.size(); n += 1 + n / 8)
    CHECK_THROWS_AS(PackedModel::from_bytes(std::span(bytes).first(n)), FormatError);
  CHECK_THROWS_AS(PackedModel::from_bytes(std::span(bytes).first(bytes.size() - 1)), FormatError);
  auto longer = bytes;
  longer.push_back(0);
  CHECK_THROWS_AS(PackedModel::from_bytes(longer), FormatError);
  auto magic = bytes;
  magic[0] ^= 1;
  CHECK_THROWS_AS(PackedModel::from_bytes(magic), FormatError);

  std::mt19937_64 rng(4);
  for (int i = 0; i < 300; ++i) {
    auto b = bytes;
    b[rng() % b.size()] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
    try {
      PackedModel::from_bytes(b);
    } catch (const FormatError&) {
    }
  }

  const auto file = std::filesystem::current_path() / "bitinfer-test" / "m.bnnp";
  pm.save(file);
  CHECK(PackedModel::load(file) == pm);
}

TEST_CASE("both engines agree on the binary layers") {
  Trained t = trained(ScaleMode::TrainablePerFilter, RegKind::R1);
  const PackedModel pm = fold_and_export(t.trainer.network());
  for (Index batch : {1, 5, 8}) {
    const BenchResult r = bench_binary_layers(pm, batch, 2, 9);
    CHECK(r.outputs_match);
    CHECK(r.batch == batch);
    CHECK(r.reps == 2);
    CHECK(r.packed_ms > 0.0);
    CHECK(r.dense_ms > 0.0);
  }
}

TEST_CASE("export refuses networks it cannot fold") {
  TrainConfig c;
  c.topology = kSmallTopology;
  c.ste = SteKind::htanh();
  c.batch = 16;
  Trainer fresh(c, {3, 32, 32});
  CHECK_THROWS_AS(fold_and_export(fresh.network()), StateError);  // no running statistics

  c.binarize_activations = false;
  Trainer relaxed(c, {3, 32, 32});
  const auto d = make_synthetic_cifar({5, 32, 8});
  relaxed.train_epoch(d.train, compute_stats(d.train));
  CHECK_THROWS_AS(fold_and_export(relaxed.network()), StateError);

  c.binarize_activations = true;
  c.topology = "fconv:4:3:1:1,bn,flat,flin:10";  // no activation after the convolution
  Trainer open(c, {3, 32, 32});
  open.train_epoch(d.train, compute_stats(d.train));
  CHECK_THROWS_AS(fold_and_export(open.network()), StateError);
}

TEST_CASE("export on the MNIST topology") {
  TrainConfig c;
  c.topology = "lenet-mnist";
  c.ste = SteKind::htanh();
  c.reg.scale_mode = ScaleMode::NoScale;
  c.batch = 20;
  c.augment = false;
  Trainer t(c, {1, 28, 28});
  const DatasetSplit d = load_mnist(std::filesystem::path(BNNQ_FIXTURES) / "mnist-100");
  const ChannelStats stats = compute_stats(d.train);
  t.train_epoch(d.train, stats);
  const PackedModel pm = fold_and_export(t.network());
  CHECK(predict(pm, d.test, stats) == evaluate(t.network(), d.test, stats).predictions);
}
