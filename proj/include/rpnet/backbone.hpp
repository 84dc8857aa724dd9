#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rpnet/tensor.hpp"

namespace rpnet {

struct BackboneConfig {
    int num_blocks = 3;
    std::vector<int> channels = {32, 64, 64};
    int groups = 1;  // 4 turns on the grouped-convolution variant
    int input_channels = 3;
    int unified_width = 256;  // channel width of the per-block 1x1 projections
    int num_classes = 3;

    void validate() const;
};

// Per-block activations f_1..f_N, each post-ReLU (hence >= 0). Extents shrink
// by 2x per block except the last, which keeps stride 1.
struct FeaturePyramid {
    std::vector<Tensor> blocks;
    const Tensor& last() const { return blocks.back(); }
    const Tensor& block(int n) const { return blocks[std::size_t(n - 1)]; }  // 1-based
};

// Every trainable tensor of the network: the backbone blocks, the per-block
// unifying projections, and the classifier weights theta.
struct Model {
    BackboneConfig config;
    struct Block {
        Tensor w1, b1;  // 3x3, stride 1
        Tensor w2, b2;  // 3x3, stride 2 (stride 1 in the final block)
    };
    std::vector<Block> blocks;
    std::vector<Tensor> proj_w;  // {1,1,c_n,unified_width}
    std::vector<Tensor> proj_b;
    Tensor theta;  // {D_N, num_classes}

    static Model init(const BackboneConfig& config, std::uint64_t seed);

    // Stable parameter order (checkpoint layout and optimizer slots).
    std::vector<Tensor> parameters() const;
};

// pre: image is {X,Y,input_channels} with both extents >= 16.
FeaturePyramid backbone_forward(const Tensor& image, const Model& model);

// GAP-then-linear class logits; theta is {D,C}.
Tensor classify(const Tensor& last_features, const Tensor& theta);

// Little-endian flat binary: magic, config echo, per-tensor shape + values.
void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

}  // namespace rpnet
