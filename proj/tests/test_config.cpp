#include <fstream>
#include <map>
#include <set>

#include "bnnq/config.hpp"
#include "bnnq/errors.hpp"
#include "doctest.h"

using namespace bnnq;

TEST_CASE("preset catalogue") {
  const auto names = preset_names();
  CHECK(names.size() == 7 * 4 + 1);
  CHECK(std::set<std::string>(names.begin(), names.end()).size() == names.size());
  for (const auto& n : names) {
    CAPTURE(n);
    const RunConfig c = preset_config(n);
    CHECK(c.preset == n);
    CHECK(c.train.topology == "conv4");
    CHECK(c.train.epochs == 55);
    CHECK(c.train.batch == 64);
    CHECK(c.train.lr.base == 0.005);
    CHECK(c.train.lr.lr_at(29) == 0.005);
    CHECK(c.train.lr.lr_at(30) == doctest::Approx(5e-4));
    CHECK(c.train.lr.lr_at(45) == doctest::Approx(5e-5));
    CHECK(c.train.augment);
    CHECK_NOTHROW(c.train.validate());
  }
  CHECK_THROWS_AS(preset_config("conv4-relu-r1"), ConfigError);
}

TEST_CASE("preset contents") {
  const RunConfig ss = preset_config("conv4-ss-r1");
  CHECK(ss.train.ste == SteKind::swish_trainable(5.0));
  CHECK(ss.train.activation_ste() == ss.train.ste);
  CHECK(ss.train.reg.kind == RegKind::R1);
  CHECK(ss.train.reg.lambda == 5e-7);
  CHECK(ss.train.reg.scale_mode == ScaleMode::TrainablePerFilter);
  CHECK_FALSE(ss.train.clip_latent);

  CHECK(preset_config("conv4-ss10-r2").train.ste == SteKind::swish(10.0));
  CHECK(preset_config("conv4-ss10-r2").train.reg.kind == RegKind::R2);
  CHECK(preset_config("conv4-htanh3-none").train.ste == SteKind::htanh_scaled(3.0));
  CHECK(preset_config("conv4-htanh3-none").train.reg.scale_mode == ScaleMode::NoScale);
  const RunConfig xnor = preset_config("conv4-bireal-xnor");
  CHECK(xnor.train.reg.kind == RegKind::None);
  CHECK(xnor.train.reg.scale_mode == ScaleMode::DynamicXnor);

  const RunConfig bnn = preset_config("conv4-bnn");
  CHECK(bnn.train.ste == SteKind::htanh());
  CHECK(bnn.train.reg.kind == RegKind::None);
  CHECK(bnn.train.reg.scale_mode == ScaleMode::NoScale);
  CHECK(bnn.train.clip_latent);
}

TEST_CASE("config text round-trips through parse_config") {
  for (const auto& n : {"conv4-ss-r1", "conv4-bnn", "conv4-tanh-xnor"}) {
    RunConfig c = preset_config(n);
    c.train.seed = 18446744073709551615ULL;
    c.train.act_ste = SteKind::htanh_scaled(2.5);
    c.train.reg.lambda = 1.0 / 3.0;
    c.train.lr = LrSchedule(0.0123456789, {{3, 0.5}, {7, 0.25}});
    c.data.limit = 17;
    c.out_dir = "some/dir";
    const RunConfig back = parse_config(to_text(c));
    CHECK(to_text(back) == to_text(c));
    CHECK(back.preset == c.preset);
    CHECK(back.train.reg.lambda == c.train.reg.lambda);  // %.17g is exact
    CHECK(back.train.lr.base == c.train.lr.base);
    CHECK(back.train.seed == c.train.seed);
    CHECK(parse_train_config(train_config_text(c.train)).act_ste == c.train.act_ste);
  }
}

TEST_CASE("preset lines apply before other keys") {
  const RunConfig c = parse_config("train.epochs = 3\n# comment\npreset = conv4-ss-r2   # trailing\n\n  reg.lambda=1e-6 \n");
  CHECK(c.train.epochs == 3);
  CHECK(c.train.reg.kind == RegKind::R2);
  CHECK(c.train.reg.lambda == 1e-6);
}

TEST_CASE("every documented key is accepted") {
  const std::map<std::string, std::string> samples{
      {"preset", "conv4-bnn"},        {"model.topology", "lenet-mnist"}, {"model.ste", "bireal"},
      {"model.act_ste", "htanh"},     {"model.binarize_activations", "false"}, {"reg.kind", "r2"},
      {"reg.lambda", "0.5"},          {"reg.scale_mode", to_string(ScaleMode::DynamicXnor)},
      {"train.epochs", "2"},          {"train.batch", "8"},              {"train.seed", "5"},
      {"train.lr", "0.1"},            {"train.milestones", "1:0.5"},     {"train.clip_latent", "yes"},
      {"train.augment", "off"},       {"data.dataset", "mnist"},         {"data.dir", "/tmp/x"},
      {"data.limit", "10"},           {"data.test_limit", "5"},          {"data.synthetic_seed", "9"},
      {"out.dir", "o"},               {"out.checkpoint_every", "0"}};
  for (const auto& k : config_keys()) {
    CAPTURE(k);
    REQUIRE(samples.count(k) == 1);
    RunConfig c;
    CHECK_NOTHROW(apply_setting(c, k, samples.at(k)));
  }
  CHECK(samples.size() == config_keys().size());
}

TEST_CASE("malformed settings raise ConfigError") {
  RunConfig c;
  CHECK_THROWS_AS(apply_setting(c, "train.epoch", "3"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "train.epochs", "0"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "train.epochs", "3x"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "train.batch", "1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "train.seed", "-1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "train.lr", "0"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "train.milestones", "30"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "train.milestones", "30:0.1,20:0.1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "train.milestones", "30:-1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "reg.lambda", "-1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "reg.kind", "l1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "model.ste", "ss:0"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "model.topology", "conv9"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "train.augment", "maybe"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "data.dataset", "imagenet"), ConfigError);
  CHECK_THROWS_AS(parse_config("train.epochs 3"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.txt"), ConfigError);
}

TEST_CASE("train config validation") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.clip_latent = true;
  CHECK_THROWS_AS(t.validate(), ConfigError);  // swish estimator default
  t.ste = SteKind::htanh();
  CHECK_NOTHROW(t.validate());
  t.act_ste = SteKind::swish(5.0);
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.batch = 1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.reg.lambda = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("config files and data locations") {
  const auto dir = std::filesystem::current_path() / "config-test";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "c.txt") << "preset = conv4-htanh-r1\ntrain.epochs = 4\n";
  const RunConfig c = load_config(dir / "c.txt");
  CHECK(c.train.ste == SteKind::htanh());
  CHECK(c.train.epochs == 4);

  DataConfig d;
  d.dir = "/data/cifar";
  CHECK(cifar10_dir(d) == "/data/cifar");
  DataConfig syn;
  syn.dataset = "synthetic";
  syn.limit = 30;
  syn.test_limit = 20;
  const DatasetSplit s = load_dataset(syn);
  CHECK(s.train.size() == 30);
  CHECK(s.test.size() == 20);
  DataConfig mnist;
  mnist.dataset = "mnist";
  CHECK_THROWS_AS(load_dataset(mnist), FormatError);
  mnist.dir = std::filesystem::path(BNNQ_FIXTURES) / "mnist-100";
  mnist.limit = 40;
  const DatasetSplit m = load_dataset(mnist);
  CHECK(m.train.size() == 40);
  CHECK(m.test.size() == 20);
}
