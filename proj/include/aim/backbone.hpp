// backbone.hpp — the bottom-up convolutional feature hierarchy.
//
// A stack of stages; each stage opens with a strided convolution (a
// patchifying kernel when the stride exceeds 2, 3x3 otherwise) and continues
// with 3x3 stride-1 blocks. Every block is conv -> per-channel spatial
// normalization -> ReLU, so activations are independent of batch composition.
// Stage outputs S_0..S_{n-1} are all exposed: the top-down pathway taps them,
// and the bottom-up masking variant threads masks between them.

#ifndef AIM_BACKBONE_HPP
#define AIM_BACKBONE_HPP

#include <string>
#include <vector>

#include "aim/nn.hpp"

namespace aim {

struct BackboneConfig {
    int64_t input_size = 64;
    int64_t in_channels = 3;
    std::vector<int64_t> stage_channels = {32, 64, 96, 128};
    std::vector<int64_t> stage_strides = {4, 2, 2, 2};
    int64_t blocks_per_stage = 2;
    double norm_eps = 1e-5;

    int64_t num_stages() const { return int64_t(stage_channels.size()); }

    void validate() const {
        AIM_CHECK(!stage_channels.empty(), ConfigError, "backbone: no stages configured");
        AIM_CHECK(stage_channels.size() == stage_strides.size(), ConfigError,
                  "backbone: " << stage_channels.size() << " stage channels vs "
                               << stage_strides.size() << " strides");
        AIM_CHECK(input_size >= 1 && in_channels >= 1, ConfigError,
                  "backbone: bad input geometry " << in_channels << "x" << input_size);
        AIM_CHECK(blocks_per_stage >= 1, ConfigError,
                  "backbone: blocks_per_stage must be >= 1, got " << blocks_per_stage);
        for (size_t i = 0; i < stage_channels.size(); ++i) {
            AIM_CHECK(stage_channels[i] >= 1, ConfigError, "backbone: stage " << i
                                                           << " has channels "
                                                           << stage_channels[i]);
            AIM_CHECK(stage_strides[i] >= 1, ConfigError,
                      "backbone: stage " << i << " has stride " << stage_strides[i]);
        }
        int64_t s = input_size, cum = 1;
        for (size_t i = 0; i < stage_strides.size(); ++i) {
            s = stage_extent(s, stage_strides[i]);
            cum *= stage_strides[i];
            AIM_CHECK(s >= 1, ConfigError, "backbone: stage " << i
                                           << " shrinks the input to nothing (input_size "
                                           << input_size << ")");
        }
        AIM_CHECK(input_size % cum == 0, ConfigError,
                  "backbone: input_size " << input_size
                                          << " is not divisible by the total stride " << cum);
    }

    // Spatial extent produced by one stage from extent `in`.
    static int64_t stage_extent(int64_t in, int64_t stride) {
        if (stride > 2) return (in - stride) / stride + 1;          // patchify, pad 0
        return (in + 2 - 3) / stride + 1;                           // 3x3, pad 1
    }

    // Spatial extent of S_stage.
    int64_t stage_size(int64_t stage) const {
        int64_t s = input_size;
        for (int64_t i = 0; i <= stage; ++i) s = stage_extent(s, stage_strides[size_t(i)]);
        return s;
    }
};

template <typename T>
class Backbone {
  public:
    explicit Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        int64_t in_c = cfg.in_channels;
        for (int64_t s = 0; s < cfg.num_stages(); ++s) {
            const int64_t out_c = cfg.stage_channels[size_t(s)];
            const int64_t stride = cfg.stage_strides[size_t(s)];
            std::vector<Block> blocks;
            for (int64_t b = 0; b < cfg.blocks_per_stage; ++b) {
                const std::string name =
                    "backbone.s" + std::to_string(s) + ".b" + std::to_string(b);
                const bool first = b == 0;
                const int64_t k = first && stride > 2 ? stride : 3;
                const int64_t st = first ? stride : 1;
                const int64_t pad = first && stride > 2 ? 0 : 1;
                Block blk;
                blk.conv = nn::Conv2d<T>(name + ".conv", first ? in_c : out_c, out_c, k, st, pad,
                                         ParamGroup::kBackbone, rng);
                blk.norm = nn::Norm<T>(name + ".norm", out_c, nn::NormKind::kSpatial,
                                       cfg.norm_eps, ParamGroup::kBackbone);
                blocks.push_back(std::move(blk));
            }
            stages_.push_back(std::move(blocks));
            in_c = out_c;
        }
    }

    const BackboneConfig& config() const { return cfg_; }

    // Run a single stage on its input feature map (images for stage 0).
    Var<T> forward_stage(Graph<T>& g, Var<T> x, int64_t stage) {
        AIM_CHECK(stage >= 0 && stage < cfg_.num_stages(), ConfigError,
                  "backbone: stage " << stage << " out of range (num_stages "
                                     << cfg_.num_stages() << ")");
        const Tensor<T>& xv = x.val();
        const int64_t want_c = stage == 0 ? cfg_.in_channels : cfg_.stage_channels[size_t(stage - 1)];
        AIM_CHECK(xv.rank() == 4 && xv.dim(1) == want_c, ConfigError,
                  "backbone: stage " << stage << " expects " << want_c << " input channels, got "
                                     << shape_str(xv.shape()));
        if (stage == 0) {
            AIM_CHECK(xv.dim(2) == cfg_.input_size && xv.dim(3) == cfg_.input_size, ConfigError,
                      "backbone: stage 0 expects " << cfg_.input_size << "x" << cfg_.input_size
                                                   << " input, got " << shape_str(xv.shape()));
        }
        for (auto& blk : stages_[size_t(stage)]) {
            x = blk.conv(g, x);
            x = blk.norm(g, x);
            x = ops::relu(g, x);
        }
        return x;
    }

    // All stage outputs [S_0 .. S_{n-1}] for a batch of images.
    std::vector<Var<T>> forward_stages(Graph<T>& g, Var<T> images) {
        std::vector<Var<T>> outs;
        Var<T> x = images;
        for (int64_t s = 0; s < cfg_.num_stages(); ++s) {
            x = forward_stage(g, x, s);
            outs.push_back(x);
        }
        return outs;
    }

    void collect_params(std::vector<Param<T>*>& out) {
        for (auto& stage : stages_) {
            for (auto& blk : stage) {
                blk.conv.collect(out);
                blk.norm.collect(out);
            }
        }
    }

  private:
    struct Block {
        nn::Conv2d<T> conv;
        nn::Norm<T> norm;
    };

    BackboneConfig cfg_;
    std::vector<std::vector<Block>> stages_;
};

}  // namespace aim

#endif  // AIM_BACKBONE_HPP
