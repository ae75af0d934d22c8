#pragma once

#include <array>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "a2fpn/attention.hpp"
#include "a2fpn/fpn.hpp"
#include "a2fpn/optim.hpp"

namespace a2fpn {

enum class VariantKind { baseline, fpn, a2fpn };

inline std::string to_string(VariantKind k) {
    switch (k) {
        case VariantKind::baseline: return "baseline";
        case VariantKind::fpn: return "fpn";
        case VariantKind::a2fpn: return "a2fpn";
    }
    return "a2fpn";
}

inline VariantKind variant_from_string(const std::string& s) {
    if (s == "baseline") return VariantKind::baseline;
    if (s == "fpn") return VariantKind::fpn;
    if (s == "a2fpn") return VariantKind::a2fpn;
    throw ConfigError("unknown model variant '" + s + "' (want baseline|fpn|a2fpn)");
}

struct ModelConfig {
    VariantKind kind = VariantKind::a2fpn;
    std::size_t num_classes = 4;
    BackboneConfig backbone;
};

// ---------------------------------------------------------------------------
// Attention Aggregation Module: concatenate the scale-aligned maps, fuse
// with a 1x1 convolution, refine with linear attention, then add the
// original concatenated features back.
// ---------------------------------------------------------------------------
struct AamModule {
    Conv2dLayer fuse;  // 4*d_p -> 4*d_p
    LamWeights lam;

    AamModule() = default;
    AamModule(std::size_t d_p, Rng& rng)
        : fuse(4 * d_p, 4 * d_p, 1, 1, 0, rng), lam(LamWeights::init(4 * d_p, rng)) {}

    void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
        fuse.collect(prefix + ".fuse", out);
        out.push_back({prefix + ".lam.w_q", lam.w_q});
        out.push_back({prefix + ".lam.b_q", lam.b_q});
        out.push_back({prefix + ".lam.w_k", lam.w_k});
        out.push_back({prefix + ".lam.b_k", lam.b_k});
        out.push_back({prefix + ".lam.w_v", lam.w_v});
        out.push_back({prefix + ".lam.b_v", lam.b_v});
    }
};

inline Tensor aam_forward(const std::array<Tensor, 4>& s_maps, const AamModule& aam,
                          double eps = 1e-12) {
    const Shape& s0 = s_maps[0].shape();
    for (const Tensor& s : s_maps)
        if (s.shape() != s0)
            throw ShapeError("aam_forward: S-map shapes differ, " + s0.str() + " vs " +
                             s.shape().str());
    Tensor concatenated = concat_channels({s_maps[0], s_maps[1], s_maps[2], s_maps[3]});
    Tensor fused = aam.fuse(concatenated);
    Tensor refined = lam_block(fused, aam.lam, eps);
    return add(refined, concatenated);
}

// 1x1 projection to K classes followed by two nearest-2x upsamplings from
// 1/4 scale back to the input resolution.
inline Tensor classifier_head(const Tensor& fused, const Conv2dLayer& conv) {
    Tensor logits = conv(fused);
    return upsample_nearest2x(upsample_nearest2x(logits));
}

// Plain decoder for the encoder-decoder baseline: three rounds of
// conv3x3 + norm + relu + nearest-2x lift C5 from 1/32 to 1/4 scale.
struct Decoder {
    std::array<Conv2dLayer, 3> convs;
    std::array<NormLayer, 3> norms;

    Decoder() = default;
    Decoder(const BackboneConfig& cfg, Rng& rng) {
        const std::size_t dp = cfg.pyramid_channels;
        std::size_t cin = cfg.stage_channels[3];
        for (std::size_t i = 0; i < 3; ++i) {
            convs[i] = Conv2dLayer(dp, cin, 3, 1, 1, rng);
            norms[i] = NormLayer(dp);
            cin = dp;
        }
    }

    Tensor operator()(const Tensor& c5, bool train) const {
        Tensor h = c5;
        for (std::size_t i = 0; i < 3; ++i)
            h = upsample_nearest2x(relu(norms[i](convs[i](h), train)));
        return h;
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
        for (std::size_t i = 0; i < 3; ++i) {
            convs[i].collect(prefix + ".conv" + std::to_string(i), out);
            norms[i].collect(prefix + ".norm" + std::to_string(i), out);
        }
    }
    void collect_buffers(const std::string& prefix,
                         std::vector<std::pair<std::string, std::vector<double>*>>& out) const {
        for (std::size_t i = 0; i < 3; ++i)
            norms[i].collect_buffers(prefix + ".norm" + std::to_string(i), out);
    }
};

// ---------------------------------------------------------------------------
// The segmentation model in its three ablation variants:
//   baseline: backbone + plain decoder + classifier
//   fpn:      backbone + pyramid + scale alignment + 1x1 fusion + classifier
//   a2fpn:    fpn with the fusion replaced by the full AAM
// ---------------------------------------------------------------------------
struct SegModel {
    ModelConfig cfg;
    std::uint64_t init_seed = 0;
    Backbone backbone;
    Pyramid pyramid;          // fpn, a2fpn
    ScaleHeads scale_heads;   // fpn, a2fpn
    Conv2dLayer fuse_conv;    // fpn only
    AamModule aam;            // a2fpn only
    Decoder decoder;          // baseline only
    Conv2dLayer classifier;

    SegModel() = default;
    SegModel(const ModelConfig& config, std::uint64_t seed) : cfg(config), init_seed(seed) {
        Rng rng(seed);
        backbone = Backbone(cfg.backbone, rng);
        const std::size_t dp = cfg.backbone.pyramid_channels;
        switch (cfg.kind) {
            case VariantKind::baseline:
                decoder = Decoder(cfg.backbone, rng);
                classifier = Conv2dLayer(cfg.num_classes, dp, 1, 1, 0, rng);
                break;
            case VariantKind::fpn:
                pyramid = Pyramid(cfg.backbone, rng);
                scale_heads = ScaleHeads(cfg.backbone, rng);
                fuse_conv = Conv2dLayer(4 * dp, 4 * dp, 1, 1, 0, rng);
                classifier = Conv2dLayer(cfg.num_classes, 4 * dp, 1, 1, 0, rng);
                break;
            case VariantKind::a2fpn:
                pyramid = Pyramid(cfg.backbone, rng);
                scale_heads = ScaleHeads(cfg.backbone, rng);
                aam = AamModule(dp, rng);
                classifier = Conv2dLayer(cfg.num_classes, 4 * dp, 1, 1, 0, rng);
                break;
        }
    }

    Tensor forward(const Tensor& x, bool train) const {
        std::array<Tensor, 4> c_maps = backbone(x, train);
        Tensor fused;
        switch (cfg.kind) {
            case VariantKind::baseline:
                fused = decoder(c_maps[3], train);
                break;
            case VariantKind::fpn:
                fused = fuse_conv(concat_channels(to_vector(scale_heads(pyramid(c_maps), train))));
                break;
            case VariantKind::a2fpn:
                fused = aam_forward(scale_heads(pyramid(c_maps), train), aam);
                break;
        }
        return classifier_head(fused, classifier);
    }

    std::vector<NamedParam> parameters() const {
        std::vector<NamedParam> out;
        backbone.collect("backbone", out);
        switch (cfg.kind) {
            case VariantKind::baseline:
                decoder.collect("decoder", out);
                break;
            case VariantKind::fpn:
                pyramid.collect("pyramid", out);
                scale_heads.collect("scale", out);
                fuse_conv.collect("fuse", out);
                break;
            case VariantKind::a2fpn:
                pyramid.collect("pyramid", out);
                scale_heads.collect("scale", out);
                aam.collect("aam", out);
                break;
        }
        classifier.collect("classifier", out);
        return out;
    }

    std::vector<std::pair<std::string, std::vector<double>*>> buffers() const {
        std::vector<std::pair<std::string, std::vector<double>*>> out;
        backbone.collect_buffers("backbone", out);
        switch (cfg.kind) {
            case VariantKind::baseline:
                decoder.collect_buffers("decoder", out);
                break;
            case VariantKind::fpn:
            case VariantKind::a2fpn:
                scale_heads.collect_buffers("scale", out);
                break;
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const NamedParam& p : parameters()) n += p.tensor.numel();
        return n;
    }

private:
    static std::vector<Tensor> to_vector(const std::array<Tensor, 4>& a) {
        return {a[0], a[1], a[2], a[3]};
    }
};

inline Tensor a2fpn_forward(const SegModel& model, const Tensor& x, bool train) {
    if (model.cfg.kind != VariantKind::a2fpn)
        throw UsageError("a2fpn_forward: model variant is " + to_string(model.cfg.kind));
    return model.forward(x, train);
}

inline Tensor ablation_forward(const SegModel& model, const Tensor& x, bool train) {
    return model.forward(x, train);
}

// ---------------------------------------------------------------------------
// Checkpoint container: one JSON index line (name -> shape, element offset)
// followed by the flat little-endian 64-bit float payload.
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointVersion = "a2fpn-ckpt-v1";

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    return {{"variant", to_string(cfg.kind)},
            {"num_classes", cfg.num_classes},
            {"pyramid_channels", cfg.backbone.pyramid_channels},
            {"stem_channels", cfg.backbone.stem_channels},
            {"stage_channels", cfg.backbone.stage_channels},
            {"blocks_per_stage", cfg.backbone.blocks_per_stage}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.kind = variant_from_string(j.at("variant").get<std::string>());
    cfg.num_classes = j.at("num_classes").get<std::size_t>();
    cfg.backbone.pyramid_channels = j.at("pyramid_channels").get<std::size_t>();
    cfg.backbone.stem_channels = j.at("stem_channels").get<std::size_t>();
    const auto& sc = j.at("stage_channels");
    for (std::size_t i = 0; i < 4; ++i) cfg.backbone.stage_channels[i] = sc.at(i).get<std::size_t>();
    cfg.backbone.blocks_per_stage = j.at("blocks_per_stage").get<std::size_t>();
    return cfg;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const SegModel& model) {
    nlohmann::json index;
    index["version"] = kCheckpointVersion;
    index["config"] = detail::config_to_json(model.cfg);

    std::vector<std::pair<std::string, std::span<const double>>> arrays;
    for (const NamedParam& p : model.parameters()) arrays.emplace_back(p.name, p.tensor.data());
    for (const auto& [name, buf] : model.buffers())
        arrays.emplace_back(name, std::span<const double>(*buf));

    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, span] : arrays) {
        tensors.push_back({{"name", name}, {"offset", offset}, {"count", span.size()}});
        offset += span.size();
    }
    index["tensors"] = tensors;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
    out << index.dump() << '\n';
    for (const auto& [name, span] : arrays)
        out.write(reinterpret_cast<const char*>(span.data()),
                  static_cast<std::streamsize>(span.size() * sizeof(double)));
    if (!out) throw FormatError("short write while saving checkpoint: " + path);
}

inline ModelConfig read_checkpoint_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path);
    std::string header;
    if (!std::getline(in, header)) throw FormatError("checkpoint missing index line: " + path);
    nlohmann::json index = nlohmann::json::parse(header, nullptr, false);
    if (index.is_discarded()) throw FormatError("checkpoint index is not valid JSON: " + path);
    if (index.value("version", "") != kCheckpointVersion)
        throw FormatError("checkpoint version '" + index.value("version", "") +
                          "' unsupported (want " + std::string(kCheckpointVersion) + ")");
    return detail::config_from_json(index.at("config"));
}

inline SegModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path);
    std::string header;
    if (!std::getline(in, header)) throw FormatError("checkpoint missing index line: " + path);
    nlohmann::json index = nlohmann::json::parse(header, nullptr, false);
    if (index.is_discarded()) throw FormatError("checkpoint index is not valid JSON: " + path);
    if (index.value("version", "") != kCheckpointVersion)
        throw FormatError("checkpoint version '" + index.value("version", "") +
                          "' unsupported (want " + std::string(kCheckpointVersion) + ")");

    SegModel model(detail::config_from_json(index.at("config")), 0);

    std::vector<std::pair<std::string, std::span<double>>> slots;
    for (NamedParam& p : model.parameters()) slots.emplace_back(p.name, p.tensor.mutable_data());
    for (const auto& [name, buf] : model.buffers())
        slots.emplace_back(name, std::span<double>(*buf));

    const std::size_t payload_start = static_cast<std::size_t>(header.size()) + 1;
    std::size_t cursor = 0;
    for (const auto& entry : index.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        const std::size_t count = entry.at("count").get<std::size_t>();
        auto it = std::find_if(slots.begin(), slots.end(),
                               [&](const auto& s) { return s.first == name; });
        if (it == slots.end())
            throw FormatError("checkpoint names unknown tensor '" + name + "'");
        if (it->second.size() != count)
            throw FormatError("checkpoint tensor '" + name + "' has " + std::to_string(count) +
                              " elements, model expects " + std::to_string(it->second.size()));
        if (offset != cursor)
            throw FormatError("checkpoint offsets are not contiguous at '" + name + "'");
        in.seekg(static_cast<std::streamoff>(payload_start + offset * sizeof(double)));
        in.read(reinterpret_cast<char*>(it->second.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
        if (!in)
            throw FormatError("checkpoint payload truncated at byte offset " +
                              std::to_string(payload_start + offset * sizeof(double)));
        cursor += count;
    }
    return model;
}

}  // namespace a2fpn
