#pragma once

#include <array>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "noforge/checkpoint.hpp"
#include "noforge/interp.hpp"
#include "noforge/layers.hpp"
#include "noforge/spectral_conv.hpp"

namespace noforge {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configs

// Trainable parameters:
//   lift:       in_channels*width + width
//   per layer:  2*width^2*kx*ky*kz   (spectral, complex counted as 2)
//             + width^2*k^3 + width  (bypass convolution)
//   projection: width*out_channels + out_channels
struct FnoConfig {
    std::int64_t in_channels = 9;
    std::int64_t out_channels = 3;
    std::int64_t width = 64;
    std::int64_t n_layers = 4;
    ModeSpec modes{40, 40, 12};
    double dropout_rate = 0.1;
    std::int64_t bypass_kernel = 1;
};

inline void to_json(json& j, const FnoConfig& c) {
    j = json{{"in_channels", c.in_channels}, {"out_channels", c.out_channels},
             {"width", c.width},             {"n_layers", c.n_layers},
             {"modes", {c.modes.kx, c.modes.ky, c.modes.kz}},
             {"dropout_rate", c.dropout_rate}, {"bypass_kernel", c.bypass_kernel}};
}
inline void from_json(const json& j, FnoConfig& c) {
    j.at("in_channels").get_to(c.in_channels);
    j.at("out_channels").get_to(c.out_channels);
    j.at("width").get_to(c.width);
    j.at("n_layers").get_to(c.n_layers);
    c.modes = ModeSpec{j.at("modes").at(0), j.at("modes").at(1), j.at("modes").at(2)};
    j.at("dropout_rate").get_to(c.dropout_rate);
    j.at("bypass_kernel").get_to(c.bypass_kernel);
}

// Trainable parameters:
//   lift:       in_channels*d_model + d_model
//   per layer:  2*d_model^2*(m1+m2+m3) + 2*(d_model^2 + d_model)
//   projection: d_model^2 + d_model + d_model*out_channels + out_channels
struct FfnoConfig {
    std::int64_t in_channels = 9;
    std::int64_t out_channels = 3;
    std::int64_t d_model = 64;
    std::int64_t n_layers = 4;
    std::array<std::int64_t, 3> modes{40, 40, 12};
};

inline void to_json(json& j, const FfnoConfig& c) {
    j = json{{"in_channels", c.in_channels}, {"out_channels", c.out_channels},
             {"d_model", c.d_model},         {"n_layers", c.n_layers},
             {"modes", {c.modes[0], c.modes[1], c.modes[2]}}};
}
inline void from_json(const json& j, FfnoConfig& c) {
    j.at("in_channels").get_to(c.in_channels);
    j.at("out_channels").get_to(c.out_channels);
    j.at("d_model").get_to(c.d_model);
    j.at("n_layers").get_to(c.n_layers);
    c.modes = {j.at("modes").at(0), j.at("modes").at(1), j.at("modes").at(2)};
}

struct MgfnoConfig {
    std::array<std::int64_t, 3> patch_shape{20, 20, 22};
    std::int64_t global_downsample_factor = 4;
    FnoConfig inner{/*in_channels=*/10, /*out_channels=*/3, /*width=*/64, /*n_layers=*/4,
                    ModeSpec{20, 20, 12}, /*dropout_rate=*/0.1, /*bypass_kernel=*/1};
};

inline void to_json(json& j, const MgfnoConfig& c) {
    j = json{{"patch_shape", {c.patch_shape[0], c.patch_shape[1], c.patch_shape[2]}},
             {"global_downsample_factor", c.global_downsample_factor},
             {"inner", c.inner}};
}
inline void from_json(const json& j, MgfnoConfig& c) {
    c.patch_shape = {j.at("patch_shape").at(0), j.at("patch_shape").at(1), j.at("patch_shape").at(2)};
    j.at("global_downsample_factor").get_to(c.global_downsample_factor);
    j.at("inner").get_to(c.inner);
}

struct DeepOnetConfig {
    std::int64_t embedding_dim = 300; // == out_components * basis_per_component
    std::int64_t out_components = 3;
    std::int64_t basis_per_component = 100;
    std::array<std::int64_t, 3> conv_channels{32, 64, 128};
    std::int64_t dense_hidden = 128;
    std::int64_t scalar_hidden = 64;
    std::array<std::int64_t, 3> trunk_hidden{300, 300, 300};
    double dropout_rate = 0.1;
    std::array<std::int64_t, 3> grid{0, 0, 0}; // bound at construction
    bool train_masked_only = true;
};

inline void to_json(json& j, const DeepOnetConfig& c) {
    j = json{{"embedding_dim", c.embedding_dim},
             {"out_components", c.out_components},
             {"basis_per_component", c.basis_per_component},
             {"conv_channels", {c.conv_channels[0], c.conv_channels[1], c.conv_channels[2]}},
             {"dense_hidden", c.dense_hidden},
             {"scalar_hidden", c.scalar_hidden},
             {"trunk_hidden", {c.trunk_hidden[0], c.trunk_hidden[1], c.trunk_hidden[2]}},
             {"dropout_rate", c.dropout_rate},
             {"grid", {c.grid[0], c.grid[1], c.grid[2]}},
             {"train_masked_only", c.train_masked_only}};
}
inline void from_json(const json& j, DeepOnetConfig& c) {
    j.at("embedding_dim").get_to(c.embedding_dim);
    j.at("out_components").get_to(c.out_components);
    j.at("basis_per_component").get_to(c.basis_per_component);
    c.conv_channels = {j.at("conv_channels").at(0), j.at("conv_channels").at(1),
                       j.at("conv_channels").at(2)};
    j.at("dense_hidden").get_to(c.dense_hidden);
    j.at("scalar_hidden").get_to(c.scalar_hidden);
    c.trunk_hidden = {j.at("trunk_hidden").at(0), j.at("trunk_hidden").at(1), j.at("trunk_hidden").at(2)};
    j.at("dropout_rate").get_to(c.dropout_rate);
    c.grid = {j.at("grid").at(0), j.at("grid").at(1), j.at("grid").at(2)};
    j.at("train_masked_only").get_to(c.train_masked_only);
}

// ---------------------------------------------------------------------------
// FNO3d: lift, n_layers x (gelu(spectral + bypass) then dropout), project.

template <typename T>
class Fno3d {
public:
    struct Cache {
        PointwiseCache<T> lift;
        std::vector<SpectralConv3dCache<T>> spectral;
        std::vector<Conv3dCache<T>> bypass;
        std::vector<TensorT<T>> pre; // pre-GELU activations
        std::vector<DropoutCache<T>> drop;
        PointwiseCache<T> proj;
    };

    Fno3d(FnoConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        if (cfg.n_layers < 1) throw InvalidConfig("fno needs n_layers >= 1");
        lift_ = PointwiseLinear<T>(store_, "lift", cfg.in_channels, cfg.width);
        for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
            const std::string prefix = "layers." + std::to_string(l);
            spectral_.emplace_back(store_, prefix + ".spectral", cfg.width, cfg.width, cfg.modes);
            bypass_.emplace_back(store_, prefix + ".bypass", cfg.width, cfg.width, cfg.bypass_kernel);
        }
        proj_ = PointwiseLinear<T>(store_, "proj", cfg.width, cfg.out_channels);
        Rng rng(seed);
        lift_.init(rng);
        for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
            spectral_[static_cast<std::size_t>(l)].init(rng);
            bypass_[static_cast<std::size_t>(l)].init(rng);
        }
        proj_.init(rng);
    }

    const FnoConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    static const char* kind() { return "fno"; }
    json config_json() const { return json(cfg_); }

    TensorT<T> forward(const TensorT<T>& x, Cache* cache, bool training = false,
                       Rng* dropout_rng = nullptr) const {
        if (x.rank() != 4 || x.shape[0] != cfg_.in_channels)
            throw ShapeMismatch("fno input shape " + shape_str(x.shape));
        if (cache) {
            cache->spectral.resize(static_cast<std::size_t>(cfg_.n_layers));
            cache->bypass.resize(static_cast<std::size_t>(cfg_.n_layers));
            cache->pre.resize(static_cast<std::size_t>(cfg_.n_layers));
            cache->drop.resize(static_cast<std::size_t>(cfg_.n_layers));
        }
        if (training && cfg_.dropout_rate > 0.0 && !dropout_rng)
            throw InvalidConfig("training-mode fno forward needs a dropout rng");
        TensorT<T> v = lift_.forward(x, cache ? &cache->lift : nullptr);
        Rng unused(0);
        for (std::int64_t l = 0; l < cfg_.n_layers; ++l) {
            const auto li = static_cast<std::size_t>(l);
            TensorT<T> s = spectral_[li].forward(v, cache ? &cache->spectral[li] : nullptr);
            const TensorT<T> b = bypass_[li].forward(v, cache ? &cache->bypass[li] : nullptr);
            for (std::int64_t i = 0; i < s.size(); ++i) s[i] += b[i];
            TensorT<T> a = gelu(s);
            if (cache) cache->pre[li] = std::move(s);
            v = dropout_forward(a, cfg_.dropout_rate, dropout_rng ? *dropout_rng : unused, training,
                                cache ? &cache->drop[li] : nullptr);
        }
        return proj_.forward(v, cache ? &cache->proj : nullptr);
    }

    TensorT<T> backward(const TensorT<T>& grad_out, Cache& cache) {
        TensorT<T> g = proj_.backward(grad_out, cache.proj);
        for (std::int64_t l = cfg_.n_layers - 1; l >= 0; --l) {
            const auto li = static_cast<std::size_t>(l);
            g = dropout_backward(g, cache.drop[li]);
            g = gelu_backward(g, cache.pre[li]);
            TensorT<T> gs = spectral_[li].backward(g, cache.spectral[li]);
            const TensorT<T> gb = bypass_[li].backward(g, cache.bypass[li]);
            for (std::int64_t i = 0; i < gs.size(); ++i) gs[i] += gb[i];
            g = std::move(gs);
        }
        return lift_.backward(g, cache.lift);
    }

private:
    FnoConfig cfg_;
    ParamStore<T> store_;
    PointwiseLinear<T> lift_;
    std::vector<SpectralConv3d<T>> spectral_;
    std::vector<Conv3d<T>> bypass_;
    PointwiseLinear<T> proj_;
};

// ---------------------------------------------------------------------------
// F-FNO: gelu(lift), n_layers residual factorized layers, two-stage
// projection head.

template <typename T>
class Ffno3d {
public:
    struct Cache {
        PointwiseCache<T> lift;
        TensorT<T> lift_pre;
        std::vector<FfnoLayerCache<T>> layers;
        PointwiseCache<T> proj1, proj2;
        TensorT<T> proj_pre;
    };

    Ffno3d(FfnoConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        if (cfg.n_layers < 1) throw InvalidConfig("ffno needs n_layers >= 1");
        lift_ = PointwiseLinear<T>(store_, "lift", cfg.in_channels, cfg.d_model);
        for (std::int64_t l = 0; l < cfg.n_layers; ++l)
            layers_.emplace_back(store_, "layers." + std::to_string(l), cfg.d_model, cfg.modes);
        proj1_ = PointwiseLinear<T>(store_, "proj1", cfg.d_model, cfg.d_model);
        proj2_ = PointwiseLinear<T>(store_, "proj2", cfg.d_model, cfg.out_channels);
        Rng rng(seed);
        lift_.init(rng);
        for (auto& l : layers_) l.init(rng);
        proj1_.init(rng);
        proj2_.init(rng);
    }

    const FfnoConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    static const char* kind() { return "ffno"; }
    json config_json() const { return json(cfg_); }

    TensorT<T> forward(const TensorT<T>& x, Cache* cache, bool training = false,
                       Rng* dropout_rng = nullptr) const {
        (void)training;
        (void)dropout_rng;
        if (x.rank() != 4 || x.shape[0] != cfg_.in_channels)
            throw ShapeMismatch("ffno input shape " + shape_str(x.shape));
        if (cache) cache->layers.resize(static_cast<std::size_t>(cfg_.n_layers));
        TensorT<T> pre = lift_.forward(x, cache ? &cache->lift : nullptr);
        TensorT<T> v = gelu(pre);
        if (cache) cache->lift_pre = std::move(pre);
        for (std::int64_t l = 0; l < cfg_.n_layers; ++l)
            v = layers_[static_cast<std::size_t>(l)].forward(
                v, cache ? &cache->layers[static_cast<std::size_t>(l)] : nullptr);
        TensorT<T> ppre = proj1_.forward(v, cache ? &cache->proj1 : nullptr);
        const TensorT<T> pact = gelu(ppre);
        if (cache) cache->proj_pre = std::move(ppre);
        return proj2_.forward(pact, cache ? &cache->proj2 : nullptr);
    }

    TensorT<T> backward(const TensorT<T>& grad_out, Cache& cache) {
        TensorT<T> g = proj2_.backward(grad_out, cache.proj2);
        g = gelu_backward(g, cache.proj_pre);
        g = proj1_.backward(g, cache.proj1);
        for (std::int64_t l = cfg_.n_layers - 1; l >= 0; --l)
            g = layers_[static_cast<std::size_t>(l)].backward(g, cache.layers[static_cast<std::size_t>(l)]);
        g = gelu_backward(g, cache.lift_pre);
        return lift_.backward(g, cache.lift);
    }

private:
    FfnoConfig cfg_;
    ParamStore<T> store_;
    PointwiseLinear<T> lift_;
    std::vector<FfnoLayer<T>> layers_;
    PointwiseLinear<T> proj1_;
    PointwiseLinear<T> proj2_;
};

// ---------------------------------------------------------------------------
// Patch decomposition: non-overlapping subdomains in lexicographic
// (ix, iy, iz) order; reassembly is the exact inverse.

template <typename T>
std::vector<TensorT<T>> patch_decompose(const TensorT<T>& volume,
                                        std::span<const std::int64_t> patch_shape) {
    if (volume.rank() != 4) throw InvalidShape("patch_decompose expects [C,W,H,D]");
    const std::int64_t c = volume.shape[0], w = volume.shape[1], h = volume.shape[2],
                       d = volume.shape[3];
    const std::int64_t pw = patch_shape[0], ph = patch_shape[1], pd = patch_shape[2];
    if (pw < 1 || ph < 1 || pd < 1 || w % pw != 0 || h % ph != 0 || d % pd != 0)
        throw InvalidConfig("patch shape " + shape_str(patch_shape) + " does not divide grid " +
                            shape_str(volume.shape));
    std::vector<TensorT<T>> patches;
    for (std::int64_t ix = 0; ix < w / pw; ++ix)
        for (std::int64_t iy = 0; iy < h / ph; ++iy)
            for (std::int64_t iz = 0; iz < d / pd; ++iz) {
                TensorT<T> p({c, pw, ph, pd});
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (std::int64_t x = 0; x < pw; ++x)
                        for (std::int64_t y = 0; y < ph; ++y)
                            for (std::int64_t z = 0; z < pd; ++z)
                                p[((ci * pw + x) * ph + y) * pd + z] =
                                    volume[((ci * w + ix * pw + x) * h + iy * ph + y) * d + iz * pd + z];
                patches.push_back(std::move(p));
            }
    return patches;
}

template <typename T>
TensorT<T> patch_reassemble(const std::vector<TensorT<T>>& patches,
                            std::span<const std::int64_t> full_spatial) {
    if (patches.empty()) throw InvalidShape("patch_reassemble of zero patches");
    const std::int64_t c = patches[0].shape[0];
    const std::int64_t pw = patches[0].shape[1], ph = patches[0].shape[2], pd = patches[0].shape[3];
    const std::int64_t w = full_spatial[0], h = full_spatial[1], d = full_spatial[2];
    const std::int64_t nx = w / pw, ny = h / ph, nz = d / pd;
    if (static_cast<std::int64_t>(patches.size()) != nx * ny * nz)
        throw ShapeMismatch("patch count does not tile the grid");
    TensorT<T> out({c, w, h, d});
    std::size_t idx = 0;
    for (std::int64_t ix = 0; ix < nx; ++ix)
        for (std::int64_t iy = 0; iy < ny; ++iy)
            for (std::int64_t iz = 0; iz < nz; ++iz) {
                const TensorT<T>& p = patches[idx++];
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (std::int64_t x = 0; x < pw; ++x)
                        for (std::int64_t y = 0; y < ph; ++y)
                            for (std::int64_t z = 0; z < pd; ++z)
                                out[((ci * w + ix * pw + x) * h + iy * ph + y) * d + iz * pd + z] =
                                    p[((ci * pw + x) * ph + y) * pd + z];
            }
    return out;
}

// ---------------------------------------------------------------------------
// MG-FNO: one inner FNO shared across all patches, each patch augmented with
// a coarse-then-resized global T1 context channel.

template <typename T>
class Mgfno {
public:
    struct Cache {
        std::vector<typename Fno3d<T>::Cache> patches;
        Shape in_shape;
        Shape coarse_spatial;
    };

    Mgfno(MgfnoConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        if (cfg_.inner.in_channels != 10)
            throw InvalidConfig("mgfno inner network expects 10 input channels");
        // The patch grid is known here, so clamp the inner mode request once.
        cfg_.inner.modes = clamp_modes(cfg_.inner.modes, cfg_.patch_shape[0], cfg_.patch_shape[1],
                                       cfg_.patch_shape[2]);
        inner_ = std::make_unique<Fno3d<T>>(cfg_.inner, seed);
    }

    const MgfnoConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return inner_->params(); }
    const ParamStore<T>& params() const { return inner_->params(); }
    static const char* kind() { return "mgfno"; }
    json config_json() const { return json(cfg_); }

    // Downsampled global context: coarsen the full-resolution T1 channel by
    // the configured factor, then resize to the patch dimensions.
    TensorT<T> global_context(const TensorT<T>& t1) const {
        if (t1.rank() != 4 || t1.shape[0] != 1)
            throw ShapeMismatch("global_context expects [1,W,H,D]");
        const std::int64_t f = cfg_.global_downsample_factor;
        if (t1.shape[1] % f != 0 || t1.shape[2] % f != 0 || t1.shape[3] % f != 0)
            throw InvalidConfig("downsample factor does not divide the grid");
        const std::array<std::int64_t, 3> coarse{t1.shape[1] / f, t1.shape[2] / f, t1.shape[3] / f};
        const TensorT<T> down = resize_trilinear(t1, coarse);
        return resize_trilinear(down, cfg_.patch_shape);
    }

    TensorT<T> forward(const TensorT<T>& x, Cache* cache, bool training = false,
                       Rng* dropout_rng = nullptr) const {
        if (x.rank() != 4 || x.shape[0] != 9) throw ShapeMismatch("mgfno input shape " + shape_str(x.shape));
        const TensorT<T> t1 = channel_slice(x, 0, 1);
        const TensorT<T> context = global_context(t1);
        const auto patches = patch_decompose(x, cfg_.patch_shape);
        if (cache) {
            cache->patches.resize(patches.size());
            cache->in_shape = x.shape;
            const std::int64_t f = cfg_.global_downsample_factor;
            cache->coarse_spatial = {x.shape[1] / f, x.shape[2] / f, x.shape[3] / f};
        }
        std::vector<TensorT<T>> outs;
        outs.reserve(patches.size());
        for (std::size_t p = 0; p < patches.size(); ++p) {
            const TensorT<T> augmented = concat_channels({patches[p], context});
            outs.push_back(inner_->forward(augmented, cache ? &cache->patches[p] : nullptr, training,
                                           dropout_rng));
        }
        const std::span<const std::int64_t> spatial(x.shape.data() + 1, 3);
        return patch_reassemble(outs, spatial);
    }

    TensorT<T> backward(const TensorT<T>& grad_out, Cache& cache) {
        if (cache.in_shape.empty()) throw ContractViolation("mgfno backward with a stale cache");
        const std::span<const std::int64_t> spatial(cache.in_shape.data() + 1, 3);
        Shape gshape = cache.in_shape;
        gshape[0] = grad_out.shape[0];
        const auto gpatches = patch_decompose(grad_out, cfg_.patch_shape);
        std::vector<TensorT<T>> gin_patches;
        gin_patches.reserve(gpatches.size());
        TensorT<T> gcontext({1, cfg_.patch_shape[0], cfg_.patch_shape[1], cfg_.patch_shape[2]});
        for (std::size_t p = 0; p < gpatches.size(); ++p) {
            const TensorT<T> g10 = inner_->backward(gpatches[p], cache.patches[p]);
            gin_patches.push_back(channel_slice(g10, 0, 9));
            const TensorT<T> gctx = channel_slice(g10, 9, 10);
            for (std::int64_t i = 0; i < gcontext.size(); ++i) gcontext[i] += gctx[i];
        }
        TensorT<T> grad_in = patch_reassemble(gin_patches, spatial);
        // Context path: adjoint of (coarsen -> resize to patch), summed over
        // patches, lands on the T1 channel of the input.
        const TensorT<T> gcoarse = resize_trilinear_adjoint(gcontext, cache.coarse_spatial);
        const TensorT<T> gt1 = resize_trilinear_adjoint(gcoarse, spatial);
        const std::int64_t per_channel = gt1.size();
        for (std::int64_t i = 0; i < per_channel; ++i) grad_in[i] += gt1[i];
        return grad_in;
    }

private:
    MgfnoConfig cfg_;
    std::unique_ptr<Fno3d<T>> inner_;
};

// ---------------------------------------------------------------------------
// DeepONet: a CNN branch over the stacked axial T1 slices, five scalar FNN
// branches, multiplicative fusion into one embedding, a coordinate trunk MLP,
// and a per-component inner-product readout.

// Stacked axial slices of a [1, W, H, D] volume as one [D, W, H] image.
template <typename T>
TensorT<T> axial_slice_image(const TensorT<T>& t1) {
    if (t1.rank() != 4 || t1.shape[0] != 1) throw ShapeMismatch("axial_slice_image expects [1,W,H,D]");
    const std::int64_t w = t1.shape[1], h = t1.shape[2], d = t1.shape[3];
    TensorT<T> img({d, w, h});
    for (std::int64_t x = 0; x < w; ++x)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t z = 0; z < d; ++z) img[(z * w + x) * h + y] = t1[(x * h + y) * d + z];
    return img;
}

template <typename T>
class DeepOnet {
public:
    struct Cache {
        Conv2dCache<T> conv[3];
        BatchNorm2dCache<T> bn[3];
        TensorT<T> relu_pre[3];
        MaxPool2dCache<T> pool0, pool1;
        AvgPool2dCache<T> pool2;
        Shape feat_shape;
        DenseCache<T> fc1, fc2;
        TensorT<T> fc1_pre;
        DropoutCache<T> drop;
        DenseCache<T> scalar_a[5], scalar_b[5];
        TensorT<T> scalar_pre[5];
        std::vector<TensorT<T>> factors; // cnn embedding + 5 scalar embeddings
        DenseCache<T> trunk[4];
        TensorT<T> trunk_pre[3];
        TensorT<T> trunk_out;  // [Q, p]
        TensorT<T> fused;      // [N, p]
    };

    DeepOnet(DeepOnetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        if (cfg.embedding_dim != cfg.out_components * cfg.basis_per_component)
            throw InvalidConfig("embedding_dim must equal out_components * basis_per_component");
        const std::int64_t w = cfg.grid[0], h = cfg.grid[1], d = cfg.grid[2];
        if (w < 8 || h < 8 || d < 1)
            throw InvalidConfig("deeponet grid must be at least 8x8 in-plane");
        conv_[0] = Conv2d<T>(store_, "branch.conv0", d, cfg.conv_channels[0]);
        bn_[0] = BatchNorm2d<T>(store_, "branch.bn0", cfg.conv_channels[0]);
        conv_[1] = Conv2d<T>(store_, "branch.conv1", cfg.conv_channels[0], cfg.conv_channels[1]);
        bn_[1] = BatchNorm2d<T>(store_, "branch.bn1", cfg.conv_channels[1]);
        conv_[2] = Conv2d<T>(store_, "branch.conv2", cfg.conv_channels[1], cfg.conv_channels[2]);
        bn_[2] = BatchNorm2d<T>(store_, "branch.bn2", cfg.conv_channels[2]);
        const std::int64_t fw = w / 2 / 2 / 2, fh = h / 2 / 2 / 2;
        flat_ = cfg.conv_channels[2] * fw * fh;
        fc1_ = Dense<T>(store_, "branch.fc1", flat_, cfg.dense_hidden);
        fc2_ = Dense<T>(store_, "branch.fc2", cfg.dense_hidden, cfg.embedding_dim);
        static const char* scalar_names[5] = {"age", "volume", "sex", "frequency", "direction"};
        for (int s = 0; s < 5; ++s) {
            scalar_a_[s] = Dense<T>(store_, std::string("scalar.") + scalar_names[s] + ".fc1", 1,
                                    cfg.scalar_hidden);
            scalar_b_[s] = Dense<T>(store_, std::string("scalar.") + scalar_names[s] + ".fc2",
                                    cfg.scalar_hidden, cfg.embedding_dim);
        }
        trunk_[0] = Dense<T>(store_, "trunk.fc0", 3, cfg.trunk_hidden[0]);
        trunk_[1] = Dense<T>(store_, "trunk.fc1", cfg.trunk_hidden[0], cfg.trunk_hidden[1]);
        trunk_[2] = Dense<T>(store_, "trunk.fc2", cfg.trunk_hidden[1], cfg.trunk_hidden[2]);
        trunk_[3] = Dense<T>(store_, "trunk.fc3", cfg.trunk_hidden[2], cfg.embedding_dim);
        Rng rng(seed);
        for (int i = 0; i < 3; ++i) conv_[i].init(rng);
        fc1_.init(rng);
        fc2_.init(rng);
        for (int s = 0; s < 5; ++s) {
            scalar_a_[s].init(rng);
            scalar_b_[s].init(rng);
        }
        for (int i = 0; i < 4; ++i) trunk_[i].init(rng);
    }

    const DeepOnetConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    static const char* kind() { return "deeponet"; }
    json config_json() const { return json(cfg_); }

    // Batched forward: images [N, D, W, H], scalars [N, 5], coords [Q, 3]
    // shared across the batch; output [N, Q, 3].
    TensorT<T> forward_batch(const TensorT<T>& images, const TensorT<T>& scalars,
                             const TensorT<T>& coords, bool training, Rng* dropout_rng,
                             Cache* cache) {
        if (images.rank() != 4) throw ShapeMismatch("deeponet images must be [N,D,W,H]");
        const std::int64_t n = images.shape[0];
        if (scalars.shape != Shape{n, 5}) throw ShapeMismatch("deeponet scalars must be [N,5]");
        if (coords.rank() != 2 || coords.shape[1] != 3)
            throw ShapeMismatch("deeponet coords must be [Q,3]");
        for (const T v : coords.data)
            if (v < T(0) || v > T(1)) throw InvalidInput("trunk coords must lie in [0,1]^3");
        if (training && cfg_.dropout_rate > 0.0 && !dropout_rng)
            throw InvalidConfig("training-mode deeponet forward needs a dropout rng");
        Rng unused(0);
        Rng& drng = dropout_rng ? *dropout_rng : unused;

        // CNN branch: conv -> batchnorm -> relu -> pool, pools max/max/avg.
        TensorT<T> h = images;
        for (int blk = 0; blk < 3; ++blk) {
            h = conv_[blk].forward(h, cache ? &cache->conv[blk] : nullptr);
            h = bn_[blk].forward(h, training, cache ? &cache->bn[blk] : nullptr);
            TensorT<T> act = relu(h);
            if (cache) cache->relu_pre[blk] = std::move(h);
            if (blk == 0)
                h = maxpool2d_forward(act, cache ? &cache->pool0 : nullptr);
            else if (blk == 1)
                h = maxpool2d_forward(act, cache ? &cache->pool1 : nullptr);
            else
                h = avgpool2d_forward(act, cache ? &cache->pool2 : nullptr);
        }
        if (cache) cache->feat_shape = h.shape;
        TensorT<T> flat({n, flat_});
        std::copy(h.data.begin(), h.data.end(), flat.data.begin());

        TensorT<T> fc1_pre = fc1_.forward(flat, cache ? &cache->fc1 : nullptr);
        TensorT<T> fc1_act = relu(fc1_pre);
        if (cache) cache->fc1_pre = std::move(fc1_pre);
        const TensorT<T> dropped =
            dropout_forward(fc1_act, cfg_.dropout_rate, drng, training, cache ? &cache->drop : nullptr);
        TensorT<T> cnn_emb = fc2_.forward(dropped, cache ? &cache->fc2 : nullptr);

        // Scalar branches.
        std::vector<TensorT<T>> factors;
        factors.push_back(std::move(cnn_emb));
        for (int s = 0; s < 5; ++s) {
            TensorT<T> col({n, 1});
            for (std::int64_t b = 0; b < n; ++b) col[b] = scalars[b * 5 + s];
            TensorT<T> pre = scalar_a_[s].forward(col, cache ? &cache->scalar_a[s] : nullptr);
            TensorT<T> act = relu(pre);
            if (cache) cache->scalar_pre[s] = std::move(pre);
            factors.push_back(scalar_b_[s].forward(act, cache ? &cache->scalar_b[s] : nullptr));
        }

        // Multiplicative fusion of all six embeddings.
        TensorT<T> fused({n, cfg_.embedding_dim});
        fused.fill(T(1));
        for (const auto& f : factors)
            for (std::int64_t i = 0; i < fused.size(); ++i) fused[i] *= f[i];

        // Trunk MLP over the query coordinates.
        TensorT<T> t = trunk_[0].forward(coords, cache ? &cache->trunk[0] : nullptr);
        for (int l = 0; l < 3; ++l) {
            TensorT<T> act = relu(t);
            if (cache) cache->trunk_pre[l] = std::move(t);
            t = trunk_[l + 1].forward(act, cache ? &cache->trunk[l + 1] : nullptr);
        }

        // Inner-product readout per displacement component.
        const std::int64_t q = coords.shape[0];
        const std::int64_t basis = cfg_.basis_per_component;
        TensorT<T> out({n, q, cfg_.out_components});
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t qi = 0; qi < q; ++qi)
                for (std::int64_t c = 0; c < cfg_.out_components; ++c) {
                    T acc = T(0);
                    const T* bf = fused.data.data() + b * cfg_.embedding_dim + c * basis;
                    const T* tf = t.data.data() + qi * cfg_.embedding_dim + c * basis;
                    for (std::int64_t i = 0; i < basis; ++i) acc += bf[i] * tf[i];
                    out[(b * q + qi) * cfg_.out_components + c] = acc;
                }
        if (cache) {
            cache->factors = std::move(factors);
            cache->trunk_out = std::move(t);
            cache->fused = std::move(fused);
        }
        return out;
    }

    // Single-sample inference at query coordinates.
    TensorT<T> forward(const TensorT<T>& t1, const std::array<T, 5>& scalars, const TensorT<T>& coords) {
        TensorT<T> img = axial_slice_image(t1);
        TensorT<T> batch({1, img.shape[0], img.shape[1], img.shape[2]});
        batch.data = img.data;
        TensorT<T> sc({1, 5});
        for (int s = 0; s < 5; ++s) sc[s] = scalars[static_cast<std::size_t>(s)];
        TensorT<T> out = forward_batch(batch, sc, coords, /*training=*/false, nullptr, nullptr);
        TensorT<T> flat({coords.shape[0], cfg_.out_components});
        flat.data = out.data;
        return flat;
    }

    void backward_batch(const TensorT<T>& grad_out, Cache& cache) {
        if (cache.factors.empty()) throw ContractViolation("deeponet backward with a stale cache");
        const std::int64_t n = grad_out.shape[0], q = grad_out.shape[1];
        const std::int64_t basis = cfg_.basis_per_component;
        const std::int64_t p = cfg_.embedding_dim;

        TensorT<T> d_fused({n, p});
        TensorT<T> d_trunk({q, p});
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t qi = 0; qi < q; ++qi)
                for (std::int64_t c = 0; c < cfg_.out_components; ++c) {
                    const T g = grad_out[(b * q + qi) * cfg_.out_components + c];
                    if (g == T(0)) continue;
                    const T* bf = cache.fused.data.data() + b * p + c * basis;
                    const T* tf = cache.trunk_out.data.data() + qi * p + c * basis;
                    T* dbf = d_fused.data.data() + b * p + c * basis;
                    T* dtf = d_trunk.data.data() + qi * p + c * basis;
                    for (std::int64_t i = 0; i < basis; ++i) {
                        dbf[i] += g * tf[i];
                        dtf[i] += g * bf[i];
                    }
                }

        // Trunk chain.
        TensorT<T> gt = trunk_[3].backward(d_trunk, cache.trunk[3]);
        for (int l = 2; l >= 0; --l) {
            gt = relu_backward(gt, cache.trunk_pre[l]);
            gt = trunk_[l].backward(gt, cache.trunk[l]);
        }

        // Fusion: d/d f_k = d_fused * prod_{j != k} f_j via prefix/suffix
        // products (robust to zero factors).
        const std::size_t nf = cache.factors.size();
        std::vector<TensorT<T>> prefix(nf + 1, TensorT<T>({n, p}));
        prefix[0].fill(T(1));
        for (std::size_t k = 0; k < nf; ++k) {
            prefix[k + 1] = prefix[k];
            for (std::int64_t i = 0; i < prefix[k + 1].size(); ++i)
                prefix[k + 1][i] *= cache.factors[k][i];
        }
        TensorT<T> suffix({n, p});
        suffix.fill(T(1));
        std::vector<TensorT<T>> d_factors(nf);
        for (std::size_t k = nf; k-- > 0;) {
            d_factors[k] = TensorT<T>({n, p});
            for (std::int64_t i = 0; i < d_factors[k].size(); ++i)
                d_factors[k][i] = d_fused[i] * prefix[k][i] * suffix[i];
            for (std::int64_t i = 0; i < suffix.size(); ++i) suffix[i] *= cache.factors[k][i];
        }

        // Scalar branches.
        for (int s = 0; s < 5; ++s) {
            TensorT<T> g = scalar_b_[s].backward(d_factors[static_cast<std::size_t>(s + 1)],
                                                 cache.scalar_b[s]);
            g = relu_backward(g, cache.scalar_pre[s]);
            scalar_a_[s].backward(g, cache.scalar_a[s]);
        }

        // CNN branch.
        TensorT<T> g = fc2_.backward(d_factors[0], cache.fc2);
        g = dropout_backward(g, cache.drop);
        g = relu_backward(g, cache.fc1_pre);
        g = fc1_.backward(g, cache.fc1);
        TensorT<T> gfeat(cache.feat_shape);
        std::copy(g.data.begin(), g.data.end(), gfeat.data.begin());
        TensorT<T> gb = avgpool2d_backward(gfeat, cache.pool2);
        gb = relu_backward(gb, cache.relu_pre[2]);
        gb = bn_[2].backward(gb, cache.bn[2]);
        gb = conv_[2].backward(gb, cache.conv[2]);
        gb = maxpool2d_backward(gb, cache.pool1);
        gb = relu_backward(gb, cache.relu_pre[1]);
        gb = bn_[1].backward(gb, cache.bn[1]);
        gb = conv_[1].backward(gb, cache.conv[1]);
        gb = maxpool2d_backward(gb, cache.pool0);
        gb = relu_backward(gb, cache.relu_pre[0]);
        gb = bn_[0].backward(gb, cache.bn[0]);
        conv_[0].backward(gb, cache.conv[0]);
    }

private:
    DeepOnetConfig cfg_;
    ParamStore<T> store_;
    Conv2d<T> conv_[3];
    BatchNorm2d<T> bn_[3];
    Dense<T> fc1_, fc2_;
    Dense<T> scalar_a_[5], scalar_b_[5];
    Dense<T> trunk_[4];
    std::int64_t flat_ = 0;
};

// ---------------------------------------------------------------------------
// Model save/load and the type-erasing wrapper used by the CLI.

template <typename M, typename T = float>
void save_model(const M& model, const std::string& path) {
    save_checkpoint<T>(path, model.params(), M::kind(), model.config_json());
}

template <typename T = float>
using AnyModelVariant = std::variant<Fno3d<T>, Ffno3d<T>, Mgfno<T>, DeepOnet<T>>;

template <typename T = float>
AnyModelVariant<T> make_model(const std::string& kind, const json& config, std::uint64_t seed) {
    if (kind == "fno") return Fno3d<T>(config.get<FnoConfig>(), seed);
    if (kind == "ffno") return Ffno3d<T>(config.get<FfnoConfig>(), seed);
    if (kind == "mgfno") return Mgfno<T>(config.get<MgfnoConfig>(), seed);
    if (kind == "deeponet") return DeepOnet<T>(config.get<DeepOnetConfig>(), seed);
    throw InvalidConfig("unknown model kind '" + kind + "'");
}

template <typename T = float>
AnyModelVariant<T> load_model(const std::string& path) {
    const CheckpointHeader hdr = read_checkpoint_header(path);
    std::string kind;
    json config;
    try {
        kind = hdr.header.at("model_kind").get<std::string>();
        config = hdr.header.at("config");
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint(std::string("checkpoint header missing fields: ") + e.what());
    }
    AnyModelVariant<T> model = make_model<T>(kind, config, /*seed=*/0);
    std::visit([&](auto& m) { load_checkpoint_params<T>(path, hdr, m.params()); }, model);
    return model;
}

template <typename T>
std::string model_kind_name(const AnyModelVariant<T>& model) {
    return std::visit([](const auto& m) { return std::string(m.kind()); }, model);
}

template <typename T>
std::int64_t model_param_count(const AnyModelVariant<T>& model) {
    return std::visit([](const auto& m) { return m.params().param_count(); }, model);
}

} // namespace noforge
