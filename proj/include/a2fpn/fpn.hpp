#pragma once

#include <array>
#include <string>
#include <vector>

#include "a2fpn/nn.hpp"
#include "a2fpn/optim.hpp"
#include "a2fpn/tensor.hpp"

namespace a2fpn {

struct BackboneConfig {
    std::size_t stem_channels = 16;
    std::array<std::size_t, 4> stage_channels = {16, 32, 64, 128};
    std::size_t blocks_per_stage = 2;
    std::size_t pyramid_channels = 64;  // d_p
};

// ---------------------------------------------------------------------------
// Layer building blocks. Each holds its weights and registers them by name.
// ---------------------------------------------------------------------------

struct Conv2dLayer {
    Tensor w, b;
    std::size_t stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(std::size_t cout, std::size_t cin, std::size_t k, std::size_t stride_,
                std::size_t pad_, Rng& rng)
        : w(init_conv_weight(cout, cin, k, rng)),
          b(Tensor::zeros({cout}, true)),
          stride(stride_),
          pad(pad_) {}

    Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }
};

struct NormLayer {
    Tensor gamma, beta;
    mutable BatchNormState state;

    NormLayer() = default;
    explicit NormLayer(std::size_t channels)
        : gamma(Tensor::full({channels}, 1.0, true)),
          beta(Tensor::zeros({channels}, true)),
          state(channels) {}

    Tensor operator()(const Tensor& x, bool train) const {
        return batchnorm2d(x, gamma, beta, state, train);
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
    void collect_buffers(const std::string& prefix,
                         std::vector<std::pair<std::string, std::vector<double>*>>& out) const {
        out.emplace_back(prefix + ".running_mean", &state.running_mean);
        out.emplace_back(prefix + ".running_var", &state.running_var);
    }
};

// conv3x3 -> norm -> relu -> conv3x3 -> norm, additive skip (1x1 projection
// when the channel count or resolution changes), relu after the addition.
// Downsampling blocks halve the extents with a 2x2 average pool on both
// paths; a strided 3x3 convolution cannot produce exact output extents on
// even inputs.
struct ResidualBlock {
    Conv2dLayer conv1, conv2;
    NormLayer norm1, norm2;
    bool downsample = false;
    bool has_projection = false;
    Conv2dLayer proj;
    NormLayer proj_norm;

    ResidualBlock() = default;
    ResidualBlock(std::size_t cin, std::size_t cout, bool downsample_, Rng& rng)
        : conv1(cout, cin, 3, 1, 1, rng),
          conv2(cout, cout, 3, 1, 1, rng),
          norm1(cout),
          norm2(cout),
          downsample(downsample_),
          has_projection(cin != cout || downsample_) {
        if (has_projection) {
            proj = Conv2dLayer(cout, cin, 1, 1, 0, rng);
            proj_norm = NormLayer(cout);
        }
    }

    Tensor operator()(const Tensor& x, bool train) const {
        Tensor in = downsample ? avgpool2x2(x) : x;
        Tensor h = relu(norm1(conv1(in), train));
        h = norm2(conv2(h), train);
        Tensor skip = has_projection ? proj_norm(proj(in), train) : in;
        return relu(add(h, skip));
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
        conv1.collect(prefix + ".conv1", out);
        conv2.collect(prefix + ".conv2", out);
        norm1.collect(prefix + ".norm1", out);
        norm2.collect(prefix + ".norm2", out);
        if (has_projection) {
            proj.collect(prefix + ".proj", out);
            proj_norm.collect(prefix + ".proj_norm", out);
        }
    }
    void collect_buffers(const std::string& prefix,
                         std::vector<std::pair<std::string, std::vector<double>*>>& out) const {
        norm1.collect_buffers(prefix + ".norm1", out);
        norm2.collect_buffers(prefix + ".norm2", out);
        if (has_projection) proj_norm.collect_buffers(prefix + ".proj_norm", out);
    }
};

// ---------------------------------------------------------------------------
// Bottom-up pathway: stride-2 stem plus four stages of residual blocks,
// each stage halving the spatial extents. Yields C2..C5 at 1/4..1/32 of the
// input size; the stem map (1/2 scale) is never kept.
// ---------------------------------------------------------------------------
struct Backbone {
    BackboneConfig cfg;
    Conv2dLayer stem_conv;
    NormLayer stem_norm;
    std::vector<std::vector<ResidualBlock>> stages;  // 4 stages

    Backbone() = default;
    Backbone(const BackboneConfig& config, Rng& rng) : cfg(config) {
        stem_conv = Conv2dLayer(cfg.stem_channels, 3, 3, 1, 1, rng);
        stem_norm = NormLayer(cfg.stem_channels);
        std::size_t cin = cfg.stem_channels;
        for (std::size_t s = 0; s < 4; ++s) {
            std::vector<ResidualBlock> blocks;
            for (std::size_t bidx = 0; bidx < cfg.blocks_per_stage; ++bidx) {
                blocks.emplace_back(cin, cfg.stage_channels[s], bidx == 0, rng);
                cin = cfg.stage_channels[s];
            }
            stages.push_back(std::move(blocks));
        }
    }

    // Returns {C2, C3, C4, C5}.
    std::array<Tensor, 4> operator()(const Tensor& x, bool train) const {
        detail::require_rank(x, 4, "backbone_forward");
        const Shape& s = x.shape();
        if (s[1] != 3)
            throw ConfigError("backbone_forward: expected 3 input channels, got " + s.str());
        if (s[2] % 32 != 0 || s[3] % 32 != 0)
            throw ConfigError("backbone_forward: extents must be divisible by 32, got " +
                              s.str());
        Tensor h = avgpool2x2(relu(stem_norm(stem_conv(x), train)));
        std::array<Tensor, 4> c_maps;
        for (std::size_t st = 0; st < 4; ++st) {
            for (const ResidualBlock& blk : stages[st]) h = blk(h, train);
            c_maps[st] = h;
        }
        return c_maps;
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
        stem_conv.collect(prefix + ".stem.conv", out);
        stem_norm.collect(prefix + ".stem.norm", out);
        for (std::size_t s = 0; s < stages.size(); ++s)
            for (std::size_t bidx = 0; bidx < stages[s].size(); ++bidx)
                stages[s][bidx].collect(
                    prefix + ".stage" + std::to_string(s + 2) + ".block" + std::to_string(bidx),
                    out);
    }
    void collect_buffers(const std::string& prefix,
                         std::vector<std::pair<std::string, std::vector<double>*>>& out) const {
        stem_norm.collect_buffers(prefix + ".stem.norm", out);
        for (std::size_t s = 0; s < stages.size(); ++s)
            for (std::size_t bidx = 0; bidx < stages[s].size(); ++bidx)
                stages[s][bidx].collect_buffers(
                    prefix + ".stage" + std::to_string(s + 2) + ".block" + std::to_string(bidx),
                    out);
    }
};

inline std::array<Tensor, 4> backbone_forward(const Backbone& bb, const Tensor& x, bool train) {
    return bb(x, train);
}

// 1x1 lateral connection reducing a C-map to d_p channels.
inline Tensor lateral_project(const Tensor& c_map, const Conv2dLayer& conv) {
    return conv(c_map);
}

// Nearest-2x upsample of the upper pyramid level plus the lateral map.
inline Tensor topdown_merge(const Tensor& upper, const Tensor& lateral) {
    detail::require_rank(upper, 4, "topdown_merge");
    detail::require_rank(lateral, 4, "topdown_merge");
    if (lateral.shape()[2] != 2 * upper.shape()[2] || lateral.shape()[3] != 2 * upper.shape()[3])
        throw ShapeError("topdown_merge: lateral " + lateral.shape().str() +
                         " is not 2x the spatial extents of upper " + upper.shape().str());
    return add(upsample_nearest2x(upper), lateral);
}

// 3x3 convolution that smooths a merged map into its final P level.
inline Tensor smooth_3x3(const Tensor& merged, const Conv2dLayer& conv) {
    return conv(merged);
}

// ---------------------------------------------------------------------------
// Top-down pathway with lateral connections. P5 is the 1x1 projection of
// C5 and seeds the iteration; every merged level is smoothed by its own
// 3x3 convolution.
// ---------------------------------------------------------------------------
struct Pyramid {
    std::array<Conv2dLayer, 4> laterals;  // C2..C5 -> d_p
    std::array<Conv2dLayer, 3> smooths;   // for P2..P4

    Pyramid() = default;
    Pyramid(const BackboneConfig& cfg, Rng& rng) {
        const std::size_t dp = cfg.pyramid_channels;
        for (std::size_t i = 0; i < 4; ++i)
            laterals[i] = Conv2dLayer(dp, cfg.stage_channels[i], 1, 1, 0, rng);
        for (std::size_t i = 0; i < 3; ++i) smooths[i] = Conv2dLayer(dp, dp, 3, 1, 1, rng);
    }

    // {C2..C5} -> {P2..P5}
    std::array<Tensor, 4> operator()(const std::array<Tensor, 4>& c_maps) const {
        std::array<Tensor, 4> p_maps;
        p_maps[3] = lateral_project(c_maps[3], laterals[3]);  // P5
        for (int i = 2; i >= 0; --i) {
            Tensor merged = topdown_merge(p_maps[i + 1], lateral_project(c_maps[i], laterals[i]));
            p_maps[i] = smooth_3x3(merged, smooths[i]);
        }
        return p_maps;
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
        for (std::size_t i = 0; i < 4; ++i)
            laterals[i].collect(prefix + ".lateral" + std::to_string(i + 2), out);
        for (std::size_t i = 0; i < 3; ++i)
            smooths[i].collect(prefix + ".smooth" + std::to_string(i + 2), out);
    }
};

// ---------------------------------------------------------------------------
// Scale alignment: one 3x3 conv (+ norm + relu) per level, then (i - 2)
// nearest-2x upsamplings so every S level matches the P2 extents.
// ---------------------------------------------------------------------------
struct ScaleHeads {
    std::array<Conv2dLayer, 4> convs;
    std::array<NormLayer, 4> norms;

    ScaleHeads() = default;
    ScaleHeads(const BackboneConfig& cfg, Rng& rng) {
        const std::size_t dp = cfg.pyramid_channels;
        for (std::size_t i = 0; i < 4; ++i) {
            convs[i] = Conv2dLayer(dp, dp, 3, 1, 1, rng);
            norms[i] = NormLayer(dp);
        }
    }

    // stage_index in {2..5}
    Tensor scale_to_finest(const Tensor& p_map, std::size_t stage_index, bool train) const {
        if (stage_index < 2 || stage_index > 5)
            throw ConfigError("scale_to_finest: stage index must be 2..5, got " +
                              std::to_string(stage_index));
        const std::size_t level = stage_index - 2;
        Tensor s = relu(norms[level](convs[level](p_map), train));
        for (std::size_t u = 0; u < level; ++u) s = upsample_nearest2x(s);
        return s;
    }

    std::array<Tensor, 4> operator()(const std::array<Tensor, 4>& p_maps, bool train) const {
        std::array<Tensor, 4> s_maps;
        for (std::size_t i = 0; i < 4; ++i) s_maps[i] = scale_to_finest(p_maps[i], i + 2, train);
        return s_maps;
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
        for (std::size_t i = 0; i < 4; ++i) {
            convs[i].collect(prefix + ".conv" + std::to_string(i + 2), out);
            norms[i].collect(prefix + ".norm" + std::to_string(i + 2), out);
        }
    }
    void collect_buffers(const std::string& prefix,
                         std::vector<std::pair<std::string, std::vector<double>*>>& out) const {
        for (std::size_t i = 0; i < 4; ++i)
            norms[i].collect_buffers(prefix + ".norm" + std::to_string(i + 2), out);
    }
};

// The feature hierarchy: backbone maps C2..C5, pyramid maps P2..P5 and the
// finest-scale aligned maps S2..S5 (all with d_p channels at 1/4 scale).
struct PyramidMaps {
    std::array<Tensor, 4> c;
    std::array<Tensor, 4> p;
    std::array<Tensor, 4> s;
};

}  // namespace a2fpn
