#pragma once

#include "limoseg/autodiff.hpp"
#include "limoseg/container.hpp"
#include "limoseg/preproc.hpp"
#include "limoseg/random.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace limoseg {

enum class Variant { kSingleEncoder, kSingleEncoderSemantics, kMultiEncoder, kMultiEncoderJoint };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

/// DB block internals: parallel 5×5 / 3×3 branches (default) or the two convolutions in sequence.
enum class BlockStyle { kParallel, kSequential };

struct ModelConfig {
    Variant variant = Variant::kMultiEncoderJoint;
    ResidualMode residual_mode = ResidualMode::kMul;
    std::array<int, 3> encoder_channels{8, 16, 32};
    std::array<int, 4> joint_channels{64, 64, 96, 96};
    /// UB output widths from the coarsest stage up; variants without the
    /// joint chain use the last three.
    std::array<int, 5> decoder_channels{64, 48, 32, 16, 16};
    int rows = 96;
    int cols = 64;
    BlockStyle block_style = BlockStyle::kParallel;
    std::uint64_t init_seed = 0;

    static ModelConfig desk() { return {}; }
    /// 480×320 grid with wider channels.
    static ModelConfig paper();

    bool multi_encoder() const { return variant == Variant::kMultiEncoder || variant == Variant::kMultiEncoderJoint; }
    bool has_joint_chain() const { return variant != Variant::kMultiEncoder; }
    bool uses_semantics() const { return variant == Variant::kSingleEncoderSemantics; }
    /// Channels of the assembled network input tensor.
    int input_channels() const;

    /// Throws InvalidConfigError.
    void validate() const;

    KeyValues to_kv() const;
    static ModelConfig from_kv(const KeyValues& kv);
    /// Architecture identity (everything except the init seed).
    bool same_architecture(const ModelConfig& other) const;
};

/// Called with each block's output; may return a replacement tensor.
using ActivationHook = std::function<ad::Tensor(const std::string& name, const ad::Tensor& activation)>;

class Model {
public:
    explicit Model(const ModelConfig& config);

    Model(Model&&) = default;
    Model& operator=(Model&&) = default;
    // Tensors are shared handles; copies must be explicit.
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    /// Deep copy with independent weight storage.
    Model clone() const;

    const ModelConfig& config() const { return config_; }

    std::vector<ad::Tensor>& parameters() { return params_; }
    const std::vector<ad::Tensor>& parameters() const { return params_; }
    const std::vector<std::string>& parameter_names() const { return names_; }
    ad::Tensor& parameter(const std::string& name);
    std::size_t parameter_count() const;

    /// Logits [N,2,rows,cols] from an input assembled by make_input().
    ad::Tensor forward(const ad::Tensor& input, const ActivationHook& hook = {}) const;
    ad::Tensor forward(const std::vector<const BevWindow*>& batch, const ActivationHook& hook = {}) const;

    void zero_grad();

private:
    struct Conv {
        std::size_t weight = 0;
        std::size_t bias = 0;
        int kernel = 3;
    };
    struct DownBlock {
        std::string name;
        Conv first;   // 5×5
        Conv second;  // 3×3
        bool pool = true;
    };
    struct UpBlock {
        std::string name;
        std::size_t up_weight = 0;
        std::size_t up_bias = 0;
        Conv conv;
    };

    Conv add_conv(Rng& rng, const std::string& name, int cin, int cout, int k);
    DownBlock add_down(Rng& rng, const std::string& name, int cin, int cout, bool pool);
    UpBlock add_up(Rng& rng, const std::string& name, int cin, int cout);
    std::size_t add_param(Rng& rng, const std::string& name, const ad::Shape& shape, double std_dev);

    ad::Tensor run_conv(const Conv& c, const ad::Tensor& x) const;
    ad::Tensor run_down(const DownBlock& b, const ad::Tensor& x, const ActivationHook& hook) const;
    ad::Tensor run_up(const UpBlock& b, const ad::Tensor& x, const ActivationHook& hook) const;

    ModelConfig config_;
    std::vector<ad::Tensor> params_;
    std::vector<std::string> names_;
    std::map<std::string, std::size_t> index_;

    std::vector<std::vector<DownBlock>> encoders_;
    std::vector<DownBlock> joint_;
    std::vector<UpBlock> decoder_;
    Conv head_;
};

// ---- standalone building blocks (used by the model and its tests) ------------------------

struct DbWeights {
    ad::Tensor w5, b5, w3, b3;
};

/// Parallel 5×5 and 3×3 branches (Cout/2 each) + ReLU, concatenated, then maxpool2 iff `pool`.
ad::Tensor db_block(const ad::Tensor& input, const DbWeights& w, bool pool);

struct UbWeights {
    ad::Tensor up_w, up_b, w3, b3;
};

/// conv_transpose2d → ReLU → conv3×3 → ReLU.
ad::Tensor ub_block(const ad::Tensor& input, const UbWeights& w);

/// concat(e1, e2, e3, e1⊙e2⊙e3) along channels.
ad::Tensor fuse(const ad::Tensor& e1, const ad::Tensor& e2, const ad::Tensor& e3);

/// Network input for a batch of windows: per encoder [frame_i, residual] for
/// multi-encoder variants, [f0,f1,f2,residual] (+3 semantic maps) otherwise.
ad::Tensor make_input(const std::vector<const BevWindow*>& batch, const ModelConfig& config);

/// Per-pixel argmax of logits [N,2,H,W] → moving mask per sample.
std::vector<Mask> predict_masks(const ad::Tensor& logits);

// ---- checkpoints -----------------------------------------------------------------------------

struct Checkpoint {
    ModelConfig config;
    KeyValues metadata;
    std::vector<NamedArray> tensors;
};

Checkpoint make_checkpoint(const Model& model, const KeyValues& metadata = {});
void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint);
void save_checkpoint(const fs::path& path, const Model& model, const KeyValues& metadata = {});
/// Throws FormatError on corrupt files.
Checkpoint load_checkpoint(const fs::path& path);
/// Builds a model from a checkpoint; throws IncompatibleCheckpointError if
/// `expected` is given and its architecture differs.
Model model_from_checkpoint(const Checkpoint& checkpoint, const ModelConfig* expected = nullptr);
/// Copies weights into an existing model; throws IncompatibleCheckpointError on mismatch.
void load_weights(Model& model, const Checkpoint& checkpoint);

}  // namespace limoseg
