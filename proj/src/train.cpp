#include "bnnq/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "bnnq/config.hpp"
#include "bnnq/errors.hpp"
#include "bnnq/serialize.hpp"

namespace bnnq {

namespace {

constexpr std::uint32_t kAugmentStream = 0xa06u;

template <typename F>
void for_each_binary(const Network<float>& net, F&& f) {
  for (std::size_t i = 0; i < net.size(); ++i) {
    const Layer<float>& l = net.layer(i);
    if (const auto* c = dynamic_cast<const BinConv<float>*>(&l)) f(c->weights());
    if (const auto* d = dynamic_cast<const BinLinear<float>*>(&l)) f(d->weights());
  }
}

int argmax_row(const float* row, Index n) { return static_cast<int>(std::max_element(row, row + n) - row); }

bool in_top_k(const float* row, Index n, int label, int k) {
  // Rank = number of classes scoring strictly higher, ties resolved toward lower index.
  int better = 0;
  for (Index c = 0; c < n; ++c)
    if (row[c] > row[label] || (row[c] == row[label] && c < label)) ++better;
  return better < k;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void check_geometry(const Dataset& d, const Shape& input) {
  if (d.channels != input[0] || d.height != input[1] || d.width != input[2])
    throw ShapeError("dataset images are " + shape_string({d.channels, d.height, d.width}) + " but the model expects " +
                     shape_string(input));
}

}  // namespace

ModelOptions TrainConfig::model_options() const {
  return {ste, activation_ste(), reg, binarize_activations, seed};
}

void TrainConfig::validate() const {
  if (batch < 2) throw ConfigError("batch size must be >= 2 (batchnorm statistics)");
  if (epochs < 1) throw ConfigError("epoch count must be >= 1");
  if (!(reg.lambda >= 0.0) || !std::isfinite(reg.lambda)) throw ConfigError("lambda must be finite and >= 0");
  lr.validate();
  if (clip_latent && (ste.is_swish() || activation_ste().is_swish()))
    throw ConfigError("latent clipping cannot be combined with a SignSwish estimator");
  named_topology(topology);
}

double total_loss(double ce, const Network<float>& net, const RegConfig& reg, int epoch) {
  if (reg.kind == RegKind::None) return ce;
  return ce + reg.lambda_at(epoch) * static_cast<double>(net.reg_value());
}

EvalResult evaluate(Network<float>& net, const Dataset& d, const ChannelStats& stats, Index batch) {
  if (d.size() == 0) throw DomainError("cannot evaluate on an empty dataset");
  check_geometry(d, net.input_shape());
  EvalResult r;
  r.count = d.size();
  r.predictions.reserve(static_cast<std::size_t>(d.size()));
  Index top1 = 0, top5 = 0;
  double loss = 0;
  const PassContext ctx{false, false};
  for (const auto& idx : batch_stream(d.size(), batch, 0, 0, false)) {
    const Batch b = make_batch(d, idx, stats, nullptr);
    const Tensor<float> logits = net.forward(b.images, ctx);
    const Index classes = logits.dim(1);
    loss += static_cast<double>(softmax_cross_entropy<float>(logits, b.labels).loss) * static_cast<double>(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* row = logits.data() + static_cast<Index>(i) * classes;
      const int pred = argmax_row(row, classes);
      r.predictions.push_back(pred);
      top1 += pred == b.labels[i];
      top5 += in_top_k(row, classes, b.labels[i], 5);
    }
  }
  r.top1 = 100.0 * static_cast<double>(top1) / static_cast<double>(r.count);
  r.top5 = 100.0 * static_cast<double>(top5) / static_cast<double>(r.count);
  r.loss = loss / static_cast<double>(r.count);
  return r;
}

Trainer::Trainer(TrainConfig cfg, Shape input_chw)
    : cfg_((cfg.validate(), std::move(cfg))),
      net_(build_network<float>(named_topology(cfg_.topology), input_chw, cfg_.model_options())),
      adam_(AdamHyper{}, cfg_.clip_latent) {}

void Trainer::set_epochs(int epochs) {
  if (epochs < 1) throw ConfigError("epoch count must be >= 1");
  cfg_.epochs = epochs;
}

EpochMetrics Trainer::train_epoch(const Dataset& train, const ChannelStats& stats) {
  check_geometry(train, net_.input_shape());
  const auto batches = batch_stream(train.size(), cfg_.batch, cfg_.seed, epoch_, true);
  if (batches.empty())
    throw ConfigError("training set of " + std::to_string(train.size()) + " records is smaller than one batch of " +
                      std::to_string(cfg_.batch));
  EpochMetrics m;
  m.lr = cfg_.lr.lr_at(epoch_);
  const double lambda = cfg_.reg.lambda_at(epoch_);
  net_.set_lambda(lambda);
  const bool reg_on = cfg_.reg.kind != RegKind::None && lambda != 0.0;
  std::mt19937_64 aug = stream_rng(cfg_.seed, epoch_, kAugmentStream);
  const auto params = net_.params();
  const PassContext ctx{true, false};

  double loss_sum = 0, reg_sum = 0;
  Index correct = 0, seen = 0;
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const Batch b = make_batch(train, batches[bi], stats, cfg_.augment ? &aug : nullptr);
    net_.zero_grad();
    const Tensor<float> logits = net_.forward(b.images, ctx);
    const auto ce = softmax_cross_entropy<float>(logits, b.labels);
    const double reg = reg_on ? lambda * static_cast<double>(net_.reg_value()) : 0.0;
    const double j = static_cast<double>(ce.loss) + reg;
    const std::string where = "epoch " + std::to_string(epoch_ + 1) + ", batch " + std::to_string(bi + 1);
    const std::string resume = last_checkpoint_.empty() ? "" : "; last checkpoint: " + last_checkpoint_;
    if (!std::isfinite(j)) throw DivergenceError("loss diverged at " + where + resume);
    net_.backward(ce.dlogits);
    try {
      adam_.step(params, m.lr);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + " at " + where + resume);
    }
    loss_sum += j;
    reg_sum += reg;
    const Index classes = logits.dim(1);
    for (std::size_t i = 0; i < b.labels.size(); ++i)
      correct += argmax_row(logits.data() + static_cast<Index>(i) * classes, classes) == b.labels[i];
    seen += static_cast<Index>(b.labels.size());
  }
  ++epoch_;
  m.epoch = epoch_;
  m.train_loss = loss_sum / static_cast<double>(batches.size());
  m.reg_term = reg_sum / static_cast<double>(batches.size());
  m.train_top1 = 100.0 * static_cast<double>(correct) / static_cast<double>(seen);
  m.mean_alpha = mean_scale(net_);
  m.betas = swish_betas(net_);
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints. The lambda multiplier callback is not serialized.

std::vector<std::uint8_t> Trainer::checkpoint_bytes() const {
  auto& self = const_cast<Trainer&>(*this);
  std::vector<Segment> segs;
  const std::string text = train_config_text(cfg_);
  segs.push_back({"config", {text.begin(), text.end()}});

  ByteWriter meta;
  for (Index d : net_.input_shape()) meta.u32(static_cast<std::uint32_t>(d));
  meta.i32(epoch_);
  meta.i64(adam_.steps());
  segs.push_back({"meta", meta.take()});

  const auto params = self.net_.params();
  const bool has_moments = !self.adam_.first_moments().empty();
  ByteWriter pw;
  pw.u32(static_cast<std::uint32_t>(params.size()));
  pw.u8(has_moments ? 1 : 0);
  for (std::size_t k = 0; k < params.size(); ++k) {
    pw.str(params[k]->name);
    write_tensor(pw, params[k]->value);
    if (has_moments) {
      write_tensor(pw, self.adam_.first_moments()[k]);
      write_tensor(pw, self.adam_.second_moments()[k]);
    }
  }
  segs.push_back({"params", pw.take()});

  const auto bufs = self.net_.buffers();
  ByteWriter bw;
  bw.u32(static_cast<std::uint32_t>(bufs.size()));
  for (const auto& b : bufs) {
    bw.str(b.name);
    write_tensor(bw, *b.tensor);
  }
  segs.push_back({"buffers", bw.take()});
  return encode_segments("BNNQ", kCheckpointVersion, segs);
}

void Trainer::save_checkpoint(const std::filesystem::path& file) const { write_binary_file(file, checkpoint_bytes()); }

Trainer Trainer::from_checkpoint_bytes(std::span<const std::uint8_t> bytes) {
  const auto segs = decode_segments(bytes, "BNNQ", kCheckpointVersion);
  auto find = [&](const std::string& name) -> const Segment& {
    for (const auto& s : segs)
      if (s.name == name) return s;
    throw FormatError("checkpoint lacks segment '" + name + "'");
  };
  const Segment& cs = find("config");
  TrainConfig cfg = parse_train_config(std::string(cs.payload.begin(), cs.payload.end()));

  ByteReader meta(find("meta").payload);
  Shape input;
  for (int i = 0; i < 3; ++i) input.push_back(meta.u32());
  const int epoch = meta.i32();
  const long long steps = meta.i64();

  Trainer t(std::move(cfg), input);
  t.epoch_ = epoch;
  const auto params = t.net_.params();
  ByteReader pr(find("params").payload);
  const std::uint32_t count = pr.u32();
  if (count != params.size())
    throw StateError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                     std::to_string(params.size()));
  const bool has_moments = pr.u8() != 0;
  if (has_moments) t.adam_.ensure_state(params);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::string name = pr.str();
    if (name != params[k]->name) throw StateError("checkpoint parameter '" + name + "' where model has '" + params[k]->name + "'");
    auto load = [&](Tensor<float>& dst) {
      Tensor<float> v = read_tensor(pr);
      if (v.shape() != dst.shape())
        throw StateError("shape " + shape_string(v.shape()) + " for '" + name + "', model has " +
                         shape_string(dst.shape()));
      dst = std::move(v);
    };
    load(params[k]->value);
    if (has_moments) {
      load(t.adam_.first_moments()[k]);
      load(t.adam_.second_moments()[k]);
    }
  }
  t.adam_.set_steps(steps);

  const auto bufs = t.net_.buffers();
  ByteReader br(find("buffers").payload);
  if (br.u32() != bufs.size()) throw StateError("checkpoint buffer count does not match the model");
  for (const auto& b : bufs) {
    const std::string name = br.str();
    if (name != b.name) throw StateError("checkpoint buffer '" + name + "' where model has '" + b.name + "'");
    Tensor<float> v = read_tensor(br);
    if (v.shape() != b.tensor->shape()) throw StateError("buffer shape mismatch for '" + name + "'");
    *b.tensor = std::move(v);
  }
  return t;
}

Trainer Trainer::load_checkpoint(const std::filesystem::path& file) {
  const auto bytes = read_binary_file(file);
  try {
    return from_checkpoint_bytes(bytes);
  } catch (const FormatError& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

std::vector<float> binary_latent_weights(const Network<float>& net) {
  std::vector<float> out;
  for_each_binary(net, [&](const BinaryParam<float>& w) {
    const auto& v = w.latent().value;
    out.insert(out.end(), v.data(), v.data() + v.size());
  });
  return out;
}

double fraction_near_scale(const Network<float>& net, double rel) {
  Index hit = 0, total = 0;
  for_each_binary(net, [&](const BinaryParam<float>& w) {
    const Tensor<float> a = w.scales();
    const auto& v = w.latent().value;
    const Index fan = w.fan();
    for (Index i = 0; i < v.size(); ++i) {
      const double alpha = a[i / fan];
      hit += std::abs(std::abs(static_cast<double>(v[i])) - alpha) <= rel * alpha;
    }
    total += v.size();
  });
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

double fraction_abs_in(const Network<float>& net, double lo, double hi) {
  const auto w = binary_latent_weights(net);
  if (w.empty()) return 0.0;
  const auto hit = std::count_if(w.begin(), w.end(), [&](float x) {
    const double a = std::abs(static_cast<double>(x));
    return a >= lo && a <= hi;
  });
  return static_cast<double>(hit) / static_cast<double>(w.size());
}

double mean_scale(const Network<float>& net) {
  double sum = 0;
  Index n = 0;
  for_each_binary(net, [&](const BinaryParam<float>& w) {
    const Tensor<float> a = w.scales();
    for (Index i = 0; i < a.size(); ++i) sum += a[i];
    n += a.size();
  });
  return n ? sum / static_cast<double>(n) : 0.0;
}

std::vector<double> swish_betas(const Network<float>& net) {
  std::vector<double> out;
  for (std::size_t i = 0; i < net.size(); ++i)
    for (const auto* p : net.layer(i).params())
      if (p->role == ParamRole::SwishBeta) out.push_back(p->value[0]);
  return out;
}

std::string metrics_header() { return "epoch,lr,train_loss,train_top1,test_top1,reg_term,mean_alpha,betas"; }

std::string metrics_row(const EpochMetrics& m) {
  std::string betas;
  for (double b : m.betas) {
    if (!betas.empty()) betas += ";";
    betas += fmt(b);
  }
  return std::to_string(m.epoch) + "," + fmt(m.lr) + "," + fmt(m.train_loss) + "," + fmt(m.train_top1) + "," +
         (m.test_top1 ? fmt(*m.test_top1) : std::string()) + "," + fmt(m.reg_term) + "," + fmt(m.mean_alpha) + "," +
         betas;
}

void append_metrics(const std::filesystem::path& file, const EpochMetrics& m) {
  const bool fresh = !std::filesystem::exists(file) || std::filesystem::file_size(file) == 0;
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::app);
  if (!out) throw FormatError("cannot append to " + file.string());
  if (fresh) out << metrics_header() << "\n";
  out << metrics_row(m) << "\n";
}

}  // namespace bnnq
