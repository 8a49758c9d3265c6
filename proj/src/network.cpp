#include "owps/network.hpp"

#include <cmath>

#include "owps/ops.hpp"

namespace owps::net {

void ModelConfig::validate() const {
    if (depth < 2) throw Error(ErrorKind::InvalidConfig, "model.depth must be >= 2");
    if (base_channels < 4) throw Error(ErrorKind::InvalidConfig, "model.base_channels must be >= 4");
    if (input_channels < 1) throw Error(ErrorKind::InvalidConfig, "model.input_channels must be >= 1");
    if (refine_enabled && base_channels < 8) {
        throw Error(ErrorKind::InvalidConfig, "model.base_channels must be >= 8 when refine is enabled");
    }
    norm.validate();
}

std::vector<int> ModelConfig::encoder_channels() const {
    std::vector<int> channels;
    for (int l = 0; l < depth; ++l) channels.push_back(base_channels << l);
    return channels;
}

std::string ModelConfig::display_name() const {
    if (!edge_branch) return "U_Net";
    if (!refine_enabled) return "OWSNet-without-refine";
    if (norm.variant == norm::Variant::None) return "OWSNet";
    return "OWSNet-" + norm::to_string(norm.variant);
}

// --- parameter store ---------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor tensor, bool trainable) {
    if (contains(name)) throw Error(ErrorKind::InvalidConfig, "duplicate parameter name " + name);
    tensor.set_requires_grad(trainable);
    index_.emplace(name, entries_.size());
    entries_.push_back({name, std::move(tensor), trainable});
    return entries_.back().tensor;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorKind::State, "no parameter named " + name);
    return entries_[it->second].tensor;
}

const Tensor& ParamStore::get(const std::string& name) const {
    return const_cast<ParamStore*>(this)->get(name);
}

std::size_t ParamStore::trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
        if (e.trainable) n += e.tensor.numel();
    }
    return n;
}

void ParamStore::zero_grad() {
    for (auto& e : entries_) e.tensor.clear_grad();
}

ParamStore ParamStore::deep_copy() const {
    ParamStore copy;
    for (const auto& e : entries_) copy.add(e.name, e.tensor.clone(), e.trainable);
    return copy;
}

// --- construction ------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

bool uses_batch_stats(norm::Variant v) {
    return v == norm::Variant::BN || v == norm::Variant::IN_BN || v == norm::Variant::BN_IN;
}

class Builder {
public:
    Builder(Model& model, std::uint64_t seed) : model_(model), seed_(seed) {}

    void he(const std::string& name, const Shape& shape, std::int64_t fan_in) {
        const Real bound = static_cast<Real>(std::sqrt(6.0 / static_cast<double>(fan_in)));
        model_.params.add(name, Tensor::uniform(shape, splitmix64(seed_ + counter_++), -bound, bound));
    }

    void zeros(const std::string& name, const Shape& shape) { model_.params.add(name, Tensor::zeros(shape)); }

    void norm_layer(const std::string& prefix, int channels) {
        const auto& ncfg = model_.cfg.norm;
        if (ncfg.variant == norm::Variant::None) return;
        model_.params.add(prefix + ".gamma", Tensor::full({channels}, 1.0f));
        model_.params.add(prefix + ".beta", Tensor::zeros({channels}));
        if (uses_batch_stats(ncfg.variant)) {
            auto stats = norm::RunningStats::create(channels);
            model_.params.add(prefix + ".running_mean", stats.mean, false);
            model_.params.add(prefix + ".running_var", stats.var, false);
            model_.params.add(prefix + ".updates", stats.updates, false);
        }
    }

    // conv3x3 -> norm -> relu, twice
    void double_conv(const std::string& prefix, int in, int out) {
        conv_norm(prefix + ".conv1", prefix + ".norm1", in, out);
        conv_norm(prefix + ".conv2", prefix + ".norm2", out, out);
    }

    void conv_norm(const std::string& conv, const std::string& norm_name, int in, int out) {
        he(conv + ".weight", {out, in, 3, 3}, static_cast<std::int64_t>(in) * 9);
        // A bias ahead of a normalization stage has no effect on the output.
        if (model_.cfg.norm.variant == norm::Variant::None) zeros(conv + ".bias", {out});
        norm_layer(norm_name, out);
    }

    void decoder(const std::string& branch) {
        const auto ch = model_.cfg.encoder_channels();
        for (int l = model_.cfg.depth - 1; l >= 0; --l) {
            const int below = (l == model_.cfg.depth - 1) ? ch[l] * 2 : ch[l + 1];
            const std::string up = branch + ".up" + std::to_string(l + 1);
            he(up + ".weight", {below, ch[l], 2, 2}, below);
            zeros(up + ".bias", {ch[l]});
            double_conv(branch + ".dec" + std::to_string(l + 1), 2 * ch[l], ch[l]);
        }
    }

private:
    Model& model_;
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

}  // namespace

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model model{cfg, {}};
    Builder b(model, seed);
    const auto ch = cfg.encoder_channels();
    int in = cfg.input_channels;
    for (int l = 0; l < cfg.depth; ++l) {
        b.double_conv("enc" + std::to_string(l + 1), in, ch[l]);
        in = ch[l];
    }
    b.double_conv("bottleneck", in, in * 2);
    b.decoder("region");
    if (cfg.edge_branch) b.decoder("edge");

    const int base = cfg.base_channels;
    if (cfg.refine_enabled) {
        const int cat = base + base * (cfg.edge_branch ? 2 : 1);
        b.conv_norm("refine.conv", "refine.norm", cat, base);
        const int reduced = std::max(1, base / 8);
        b.he("refine.sa.query.weight", {reduced, base, 1, 1}, base);
        b.he("refine.sa.key.weight", {reduced, base, 1, 1}, base);
        b.he("refine.sa.value.weight", {base, base, 1, 1}, base);
        b.zeros("refine.sa.value.bias", {base});
        b.zeros("refine.sa.gamma", {1});
        b.zeros("refine.ca.gamma", {1});
    }
    b.he("head.region.weight", {1, base, 1, 1}, base);
    b.zeros("head.region.bias", {1});
    if (cfg.edge_branch) {
        b.he("head.edge.weight", {1, base, 1, 1}, base);
        b.zeros("head.edge.bias", {1});
    }
    return model;
}

// --- forward -----------------------------------------------------------------

namespace {

class Runner {
public:
    Runner(Model& model, Mode mode) : p_(model.params), cfg_(model.cfg), mode_(mode) {}

    Tensor opt(const std::string& name) { return p_.contains(name) ? p_.get(name) : Tensor{}; }

    Tensor normalize(const Tensor& x, const std::string& prefix) {
        if (cfg_.norm.variant == norm::Variant::None) return x;
        norm::RunningStats stats;
        if (uses_batch_stats(cfg_.norm.variant)) {
            stats = {p_.get(prefix + ".running_mean"), p_.get(prefix + ".running_var"), p_.get(prefix + ".updates")};
        }
        return norm::apply(x, cfg_.norm, mode_, stats, p_.get(prefix + ".gamma"), p_.get(prefix + ".beta"));
    }

    Tensor conv_norm_relu(const Tensor& x, const std::string& conv, const std::string& norm_name) {
        Tensor y = ops::conv2d(x, p_.get(conv + ".weight"), opt(conv + ".bias"), 1, 1);
        return ops::relu(normalize(y, norm_name));
    }

    Tensor double_conv(const Tensor& x, const std::string& prefix) {
        Tensor y = conv_norm_relu(x, prefix + ".conv1", prefix + ".norm1");
        return conv_norm_relu(y, prefix + ".conv2", prefix + ".norm2");
    }

    Tensor decode(const Tensor& bottom, const std::vector<Tensor>& skips, const std::string& branch) {
        Tensor y = bottom;
        for (int l = cfg_.depth - 1; l >= 0; --l) {
            const std::string up = branch + ".up" + std::to_string(l + 1);
            y = ops::transposed_conv2d(y, p_.get(up + ".weight"), p_.get(up + ".bias"));
            y = ops::concat_channels(skips[static_cast<std::size_t>(l)], y);
            y = double_conv(y, branch + ".dec" + std::to_string(l + 1));
        }
        return y;
    }

    Tensor head(const Tensor& features, const std::string& name) {
        return ops::sigmoid(ops::conv2d(features, p_.get("head." + name + ".weight"),
                                        p_.get("head." + name + ".bias"), 1, 0));
    }

private:
    ParamStore& p_;
    const ModelConfig& cfg_;
    Mode mode_;
};

Tensor gated_residual(const Tensor& attended, const Tensor& gamma, const Tensor& f) {
    return ops::add(ops::scale(ops::reshape(attended, f.shape()), gamma), f);
}

}  // namespace

Tensor spatial_attention(const Tensor& f, const Tensor& w_query, const Tensor& w_key, const Tensor& w_value,
                         const Tensor& b_value, const Tensor& gamma, Tensor* affinity) {
    if (f.rank() != 4) throw Error(ErrorKind::InvalidShape, "spatial_attention expects NCHW");
    const std::int64_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
    if (c < 8) throw Error(ErrorKind::InvalidShape, "spatial_attention needs at least 8 channels");
    const std::int64_t reduced = w_query.dim(0);
    Tensor q = ops::reshape(ops::conv2d(f, w_query, {}, 1, 0), {n, reduced, hw});
    Tensor k = ops::reshape(ops::conv2d(f, w_key, {}, 1, 0), {n, reduced, hw});
    Tensor v = ops::reshape(ops::conv2d(f, w_value, b_value, 1, 0), {n, c, hw});
    if (affinity) {
        NoGradGuard no_grad;
        *affinity = ops::softmax_lastdim(ops::matmul(q, k, true, false));  // [n, hw, hw]
    }
    return gated_residual(ops::fused_attention(q, k, v), gamma, f);
}

Tensor channel_attention(const Tensor& f, const Tensor& gamma, Tensor* affinity) {
    if (f.rank() != 4) throw Error(ErrorKind::InvalidShape, "channel_attention expects NCHW");
    const std::int64_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
    Tensor flat = ops::reshape(f, {n, c, hw});
    Tensor attn = ops::softmax_lastdim(ops::matmul(flat, flat, false, true));  // [n, c, c]
    if (affinity) *affinity = attn;
    return gated_residual(ops::matmul(attn, flat), gamma, f);
}

Tensor feature_refine(ParamStore& params, const ModelConfig& cfg, const Tensor& enc_first, const Tensor& dec_last,
                      Mode mode, ForwardProbe* probe) {
    if (enc_first.rank() != 4 || dec_last.rank() != 4 || enc_first.dim(2) != dec_last.dim(2) ||
        enc_first.dim(3) != dec_last.dim(3)) {
        throw Error(ErrorKind::ShapeMismatch, "feature_refine inputs " + shape_str(enc_first.shape()) + " and " +
                                                  shape_str(dec_last.shape()));
    }
    Tensor mixed = ops::conv2d(ops::concat_channels(enc_first, dec_last), params.get("refine.conv.weight"),
                               params.contains("refine.conv.bias") ? params.get("refine.conv.bias") : Tensor{}, 1, 1);
    if (cfg.norm.variant != norm::Variant::None) {
        norm::RunningStats stats;
        if (uses_batch_stats(cfg.norm.variant)) {
            stats = {params.get("refine.norm.running_mean"), params.get("refine.norm.running_var"),
                     params.get("refine.norm.updates")};
        }
        mixed = norm::apply(mixed, cfg.norm, mode, stats, params.get("refine.norm.gamma"),
                            params.get("refine.norm.beta"));
    }
    mixed = ops::relu(mixed);
    Tensor sa = spatial_attention(mixed, params.get("refine.sa.query.weight"), params.get("refine.sa.key.weight"),
                                  params.get("refine.sa.value.weight"), params.get("refine.sa.value.bias"),
                                  params.get("refine.sa.gamma"), probe ? &probe->spatial_affinity : nullptr);
    Tensor ca = channel_attention(mixed, params.get("refine.ca.gamma"), probe ? &probe->channel_affinity : nullptr);
    Tensor out = ops::mul_scalar(ops::add(sa, ca), 0.5f);
    if (probe) {
        probe->refine_mixed = mixed;
        probe->refine_out = out;
    }
    return out;
}

ForwardResult forward(Model& model, const Tensor& image, Mode mode, ForwardProbe* probe) {
    const auto& cfg = model.cfg;
    if (image.rank() != 4 || image.dim(1) != cfg.input_channels) {
        throw Error(ErrorKind::InvalidShape, "forward expects N x " + std::to_string(cfg.input_channels) +
                                                 " x H x W, got " + shape_str(image.shape()));
    }
    const std::int64_t unit = std::int64_t{1} << cfg.depth;
    if (image.dim(2) % unit != 0 || image.dim(3) % unit != 0) {
        throw Error(ErrorKind::InvalidShape, "input extents " + shape_str(image.shape()) + " not divisible by " +
                                                 std::to_string(unit));
    }
    Runner run(model, mode);
    std::vector<Tensor> skips;
    Tensor x = image;
    for (int l = 0; l < cfg.depth; ++l) {
        x = run.double_conv(x, "enc" + std::to_string(l + 1));
        skips.push_back(x);
        x = ops::maxpool2d(x);
    }
    x = run.double_conv(x, "bottleneck");

    Tensor region_last = run.decode(x, skips, "region");
    Tensor edge_last = cfg.edge_branch ? run.decode(x, skips, "edge") : Tensor{};

    ForwardResult result;
    if (cfg.refine_enabled) {
        Tensor refined =
            feature_refine(model.params, cfg, skips.front(), ops::concat_channels(region_last, edge_last), mode, probe);
        result.region_prob = run.head(refined, "region");
        if (cfg.edge_branch) result.edge_prob = run.head(refined, "edge");
    } else {
        result.region_prob = run.head(region_last, "region");
        if (cfg.edge_branch) result.edge_prob = run.head(edge_last, "edge");
    }
    return result;
}

}  // namespace owps::net
