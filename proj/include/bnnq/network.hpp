#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bnnq/layers.hpp"

namespace bnnq {

/// One entry of a topology description. Text form, comma separated:
///   fconv:OUT:K:STRIDE:PAD  bconv:OUT:K:STRIDE:PAD  flin:OUT  blin:OUT
///   bn  act  pool:K:STRIDE  flat
/// `act` becomes a binary activation, or HardTanh when activations are not
/// binarized.
struct LayerSpec {
  LayerKind kind = LayerKind::Flatten;
  Index out = 0;
  Index kernel = 0;
  Index stride = 1;
  Index pad = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct TopologySpec {
  std::vector<LayerSpec> layers;

  static TopologySpec parse(const std::string& text);
  std::string to_string() const;
  friend bool operator==(const TopologySpec&, const TopologySpec&) = default;
};

/// conv(32) -> conv(64) -> fc(1024) -> fc(10) with 3x3/pad-1 convolutions and
/// 2x2 pooling; first and last layers in full precision.
inline const char* kConv4Topology =
    "fconv:32:3:1:1,bn,act,pool:2:2,bconv:64:3:1:1,bn,act,pool:2:2,flat,blin:1024,bn,act,flin:10";
inline const char* kLenetMnistTopology =
    "fconv:32:3:1:1,bn,act,pool:2:2,bconv:64:3:1:1,bn,act,pool:2:2,flat,blin:512,bn,act,flin:10";

/// Named topology lookup (conv4, lenet-mnist); anything containing ':' or ','
/// is parsed as a custom description.
TopologySpec named_topology(const std::string& name);

struct ModelOptions {
  SteKind weight_ste = SteKind::htanh();
  SteKind act_ste = SteKind::htanh();
  RegConfig reg;
  bool binarize_activations = true;
  std::uint64_t seed = 0;
};

template <typename Scalar>
class Network {
 public:
  Network() = default;
  Network(const Network& other) : input_shape_(other.input_shape_), topology_(other.topology_) {
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  Network& operator=(const Network& other) {
    if (this != &other) *this = Network(other);
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  /// (C, H, W) of a single input sample.
  const Shape& input_shape() const { return input_shape_; }
  void set_input_shape(Shape s) { input_shape_ = std::move(s); }
  const TopologySpec& topology() const { return topology_; }
  void set_topology(TopologySpec t) { topology_ = std::move(t); }

  void add(std::unique_ptr<Layer<Scalar>> layer) { layers_.push_back(std::move(layer)); }
  std::size_t size() const { return layers_.size(); }
  Layer<Scalar>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<Scalar>& layer(std::size_t i) const { return *layers_.at(i); }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const PassContext& ctx) {
    return forward_range(x, ctx, 0, layers_.size());
  }

  /// Run layers [begin, end).
  Tensor<Scalar> forward_range(const Tensor<Scalar>& x, const PassContext& ctx, std::size_t begin, std::size_t end) {
    Tensor<Scalar> h = x;
    for (std::size_t i = begin; i < end; ++i) h = layers_[i]->forward(h, ctx);
    return h;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dlogits) {
    Tensor<Scalar> g = dlogits;
    for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g);
    return g;
  }

  std::vector<Param<Scalar>*> params() {
    std::vector<Param<Scalar>*> out;
    for (auto& l : layers_)
      for (auto* p : l->params()) out.push_back(p);
    return out;
  }

  std::vector<NamedTensor<Scalar>> buffers() {
    std::vector<NamedTensor<Scalar>> out;
    for (auto& l : layers_)
      for (auto& b : l->buffers()) out.push_back(b);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  /// Sum over binary layers of the unweighted regularizer.
  Scalar reg_value() const {
    Scalar total = 0;
    for (const auto& l : layers_) total += l->reg_value();
    return total;
  }

  void set_lambda(double lambda) {
    for (auto& l : layers_) l->set_lambda(lambda);
  }

 private:
  std::vector<std::unique_ptr<Layer<Scalar>>> layers_;
  Shape input_shape_;
  TopologySpec topology_;
};

/// Instantiate a topology for (C, H, W) inputs. Weights get uniform Glorot
/// initialization from `opts.seed`; trainable scales are initialized from the
/// latent weights according to the regularizer kind.
template <typename Scalar>
Network<Scalar> build_network(const TopologySpec& topo, const Shape& input_chw, const ModelOptions& opts) {
  if (input_chw.size() != 3) throw ConfigError("input shape must be (C, H, W)");
  // First and last learnable layers stay in full precision.
  std::vector<std::size_t> learnable;
  for (std::size_t i = 0; i < topo.layers.size(); ++i)
    if (is_learnable(topo.layers[i].kind)) learnable.push_back(i);
  if (learnable.empty()) throw ConfigError("topology has no learnable layers");
  if (is_binary(topo.layers[learnable.front()].kind) || is_binary(topo.layers[learnable.back()].kind))
    throw ConfigError("first and last learnable layers must be full precision");

  std::seed_seq seq{static_cast<std::uint32_t>(opts.seed), static_cast<std::uint32_t>(opts.seed >> 32), 0x1417u};
  std::mt19937_64 rng(seq);
  auto glorot = [&](Shape shape, Index fan_in, Index fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor<Scalar> t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
    return t;
  };

  Network<Scalar> net;
  net.set_input_shape(input_chw);
  net.set_topology(topo);
  Shape cur = input_chw;  // per-sample shape
  for (std::size_t i = 0; i < topo.layers.size(); ++i) {
    const LayerSpec& s = topo.layers[i];
    const std::string prefix = "L" + std::to_string(i);
    switch (s.kind) {
      case LayerKind::FloatConv:
      case LayerKind::BinConv: {
        if (cur.size() != 3) throw ConfigError(prefix + ": convolution needs a (C, H, W) input");
        const ConvGeometry g{cur[0], cur[1], cur[2], s.kernel, s.kernel, s.stride, s.pad};
        try {
          g.validate();
        } catch (const ShapeError& e) {
          throw ConfigError(prefix + ": " + e.what());
        }
        Tensor<Scalar> w = glorot({s.out, cur[0], s.kernel, s.kernel}, cur[0] * s.kernel * s.kernel,
                                  s.out * s.kernel * s.kernel);
        if (s.kind == LayerKind::FloatConv)
          net.add(std::make_unique<FloatConv<Scalar>>(prefix, std::move(w), s.stride, s.pad));
        else
          net.add(std::make_unique<BinConv<Scalar>>(prefix, std::move(w), s.stride, s.pad, opts.weight_ste, opts.reg));
        cur = {s.out, g.out_h(), g.out_w()};
        break;
      }
      case LayerKind::FloatLinear:
      case LayerKind::BinLinear: {
        if (cur.size() != 1) throw ConfigError(prefix + ": linear layer needs a flattened input");
        Tensor<Scalar> w = glorot({s.out, cur[0]}, cur[0], s.out);
        if (s.kind == LayerKind::FloatLinear)
          net.add(std::make_unique<FloatLinear<Scalar>>(prefix, std::move(w)));
        else
          net.add(std::make_unique<BinLinear<Scalar>>(prefix, std::move(w), opts.weight_ste, opts.reg));
        cur = {s.out};
        break;
      }
      case LayerKind::BatchNorm:
        net.add(std::make_unique<BatchNorm<Scalar>>(prefix, cur[0]));
        break;
      case LayerKind::MaxPool: {
        if (cur.size() != 3 || s.kernel > cur[1] || s.kernel > cur[2])
          throw ConfigError(prefix + ": pool window does not fit the input");
        net.add(std::make_unique<MaxPool<Scalar>>(s.kernel, s.stride));
        cur = {cur[0], (cur[1] - s.kernel) / s.stride + 1, (cur[2] - s.kernel) / s.stride + 1};
        break;
      }
      case LayerKind::BinActivation:
      case LayerKind::HardTanh:
        if (opts.binarize_activations)
          net.add(std::make_unique<BinActivation<Scalar>>(prefix, opts.act_ste));
        else
          net.add(std::make_unique<HardTanh<Scalar>>());
        break;
      case LayerKind::Flatten:
        net.add(std::make_unique<Flatten<Scalar>>());
        cur = {shape_size(cur)};
        break;
    }
  }
  return net;
}

/// Number of trainable scalars (latent weights, scales, betas, batchnorm
/// affine, float weights and biases).
template <typename Scalar>
Index parameter_count(Network<Scalar>& net) {
  Index n = 0;
  for (auto* p : net.params()) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------------------

inline TopologySpec TopologySpec::parse(const std::string& text) {
  TopologySpec spec;
  std::stringstream ss(text);
  std::string token;
  auto fields = [](const std::string& t) {
    std::vector<std::string> out;
    std::stringstream ts(t);
    std::string f;
    while (std::getline(ts, f, ':')) out.push_back(f);
    return out;
  };
  auto num = [&](const std::string& tok, const std::string& f) -> Index {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(f, &used);
      if (used != f.size() || v < 0) throw std::invalid_argument(f);
      return static_cast<Index>(v);
    } catch (const std::exception&) {
      throw ConfigError("bad number '" + f + "' in topology token '" + tok + "'");
    }
  };
  while (std::getline(ss, token, ',')) {
    const auto f = fields(token);
    if (f.empty()) throw ConfigError("empty topology token");
    const std::string& k = f[0];
    LayerSpec s;
    auto need = [&](std::size_t n) {
      if (f.size() != n) throw ConfigError("topology token '" + token + "' expects " + std::to_string(n - 1) + " fields");
    };
    if (k == "fconv" || k == "bconv") {
      need(5);
      s = {k == "fconv" ? LayerKind::FloatConv : LayerKind::BinConv, num(token, f[1]), num(token, f[2]),
           num(token, f[3]), num(token, f[4])};
      if (s.out < 1 || s.kernel < 1 || s.stride < 1) throw ConfigError("degenerate convolution '" + token + "'");
    } else if (k == "flin" || k == "blin") {
      need(2);
      s = {k == "flin" ? LayerKind::FloatLinear : LayerKind::BinLinear, num(token, f[1])};
      if (s.out < 1) throw ConfigError("degenerate linear layer '" + token + "'");
    } else if (k == "bn") {
      need(1);
      s.kind = LayerKind::BatchNorm;
    } else if (k == "act") {
      need(1);
      s.kind = LayerKind::BinActivation;
    } else if (k == "pool") {
      need(3);
      s = {LayerKind::MaxPool, 0, num(token, f[1]), num(token, f[2])};
      if (s.kernel < 1 || s.stride < 1) throw ConfigError("degenerate pooling '" + token + "'");
    } else if (k == "flat") {
      need(1);
      s.kind = LayerKind::Flatten;
    } else {
      throw ConfigError("unknown topology token '" + token + "'");
    }
    spec.layers.push_back(s);
  }
  if (spec.layers.empty()) throw ConfigError("empty topology");
  return spec;
}

inline std::string TopologySpec::to_string() const {
  std::string out;
  for (const auto& s : layers) {
    if (!out.empty()) out += ",";
    switch (s.kind) {
      case LayerKind::FloatConv:
      case LayerKind::BinConv:
        out += (s.kind == LayerKind::FloatConv ? "fconv:" : "bconv:") + std::to_string(s.out) + ":" +
               std::to_string(s.kernel) + ":" + std::to_string(s.stride) + ":" + std::to_string(s.pad);
        break;
      case LayerKind::FloatLinear: out += "flin:" + std::to_string(s.out); break;
      case LayerKind::BinLinear: out += "blin:" + std::to_string(s.out); break;
      case LayerKind::BatchNorm: out += "bn"; break;
      case LayerKind::BinActivation:
      case LayerKind::HardTanh: out += "act"; break;
      case LayerKind::MaxPool: out += "pool:" + std::to_string(s.kernel) + ":" + std::to_string(s.stride); break;
      case LayerKind::Flatten: out += "flat"; break;
    }
  }
  return out;
}

inline TopologySpec named_topology(const std::string& name) {
  if (name == "conv4") return TopologySpec::parse(kConv4Topology);
  if (name == "lenet-mnist") return TopologySpec::parse(kLenetMnistTopology);
  if (name.find(':') != std::string::npos || name.find(',') != std::string::npos) return TopologySpec::parse(name);
  throw ConfigError("unknown topology '" + name + "'");
}

}  // namespace bnnq
