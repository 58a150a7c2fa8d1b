#pragma once

#include "surgimap/tokenizer.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace surgimap {

struct ModelConfig {
    int layers = 2;
    int heads = 2;
    int dim = 32;
    int instruction_slots = 8;
    int feature_dim = 32;     // provider dimension; projected to `dim` when different
    int vocab_size = 0;       // |V|, input embeddings
    int output_size = 0;      // |V_A|, output head
    int max_components = 16;  // S_max
    int task_count = 4;

    void validate() const;
    int prefix_length() const { return instruction_slots + 1; }
    int max_positions() const { return instruction_slots + 1 + max_components; }
    bool projects_features() const { return feature_dim != dim; }

    nlohmann::ordered_json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);

    bool operator==(const ModelConfig&) const = default;
};

// One teacher-forced example. Sequence positions are
//   0            clip embedding
//   1..M         instruction tokens
//   M+1..        component tokens fed as input
// Position p predicts `targets[p]` (an index into V_A) where `mask[p]` is 1.
struct Sequence {
    std::vector<float> clip;
    std::vector<TokenId> instruction;
    std::vector<TokenId> components;
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;

    int length() const {
        return static_cast<int>(instruction.size() + 1 + components.size());
    }
};

template <typename Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
struct LayerParams {
    Matrix<Real> ln1_gain, ln1_bias;
    Matrix<Real> qkv_weight, qkv_bias;
    Matrix<Real> out_weight, out_bias;
    Matrix<Real> ln2_gain, ln2_bias;
    Matrix<Real> fc1_weight, fc1_bias;
    Matrix<Real> fc2_weight, fc2_bias;
};

// Every trainable tensor. Vectors are stored as 1 x n matrices so that all
// tensors can be visited uniformly.
template <typename Real>
struct Parameters {
    Matrix<Real> token_embedding;    // |V| x D
    Matrix<Real> position_embedding; // (M+1+S_max) x D
    Matrix<Real> feature_weight;     // F x D, empty when F == D
    Matrix<Real> feature_bias;       // 1 x D, empty when F == D
    std::vector<LayerParams<Real>> layers;
    Matrix<Real> final_gain, final_bias;
    Matrix<Real> head_weight; // D x |V_A|
    Matrix<Real> head_bias;   // 1 x |V_A|

    static Parameters zeros(const ModelConfig& config);

    // Visits (name, tensor) in a fixed order; empty tensors are skipped.
    template <typename F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <typename F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each([&](const std::string&, const Matrix<Real>& m) { n += static_cast<std::size_t>(m.size()); });
        return n;
    }

private:
    template <typename Self, typename F>
    static void visit(Self& self, F& f) {
        auto emit = [&](const std::string& name, auto& m) {
            if (m.size() > 0) {
                f(name, m);
            }
        };
        emit("token_embedding", self.token_embedding);
        emit("position_embedding", self.position_embedding);
        emit("feature_weight", self.feature_weight);
        emit("feature_bias", self.feature_bias);
        for (std::size_t l = 0; l < self.layers.size(); ++l) {
            auto& layer = self.layers[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            emit(p + "ln1_gain", layer.ln1_gain);
            emit(p + "ln1_bias", layer.ln1_bias);
            emit(p + "qkv_weight", layer.qkv_weight);
            emit(p + "qkv_bias", layer.qkv_bias);
            emit(p + "out_weight", layer.out_weight);
            emit(p + "out_bias", layer.out_bias);
            emit(p + "ln2_gain", layer.ln2_gain);
            emit(p + "ln2_bias", layer.ln2_bias);
            emit(p + "fc1_weight", layer.fc1_weight);
            emit(p + "fc1_bias", layer.fc1_bias);
            emit(p + "fc2_weight", layer.fc2_weight);
            emit(p + "fc2_bias", layer.fc2_bias);
        }
        emit("final_gain", self.final_gain);
        emit("final_bias", self.final_bias);
        emit("head_weight", self.head_weight);
        emit("head_bias", self.head_bias);
    }
};

template <typename Real>
struct LayerCache {
    Matrix<Real> input;
    Matrix<Real> ln1_xhat, ln1_out;
    std::vector<Real> ln1_rstd;
    Matrix<Real> qkv;
    Matrix<Real> attention; // concatenated head outputs, before out projection
    std::vector<Matrix<Real>> probs; // [sequence * heads + head], N x N
    Matrix<Real> hidden;   // input + attention block
    Matrix<Real> ln2_xhat, ln2_out;
    std::vector<Real> ln2_rstd;
    Matrix<Real> fc1_pre, fc1_act;
};

// Activations of one forward pass over a packed batch. Sequences are stacked
// row-wise; sequence b occupies rows [offsets[b], offsets[b+1]).
template <typename Real>
struct ForwardCache {
    std::vector<int> offsets;
    std::vector<int> row_token; // token id per row, -1 for clip rows
    std::vector<int> row_position;
    Matrix<Real> clips;         // B x F
    std::vector<LayerCache<Real>> layers;
    Matrix<Real> final_input;   // residual stream after the last block
    Matrix<Real> final_xhat, final_out;
    std::vector<Real> final_rstd;
    Matrix<Real> logits;        // rows x |V_A|
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;

    bool empty() const { return offsets.size() < 2; }
    int batch_size() const { return static_cast<int>(offsets.size()) - 1; }
};

struct LossValue {
    double sum = 0.0;       // summed over batch and masked positions
    double per_token = 0.0; // sum / tokens, for monitoring
    int tokens = 0;
};

// Masked next-token negative log-likelihood, summed. If `dlogits` is given it
// receives scale * d(loss)/d(logits).
template <typename Real>
LossValue masked_nll(const Matrix<Real>& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask, Matrix<Real>* dlogits = nullptr,
                     Real scale = Real(1));

// Pre-LN transformer decoder over [clip | instruction | components] with a
// bidirectional prefix and causal component positions. Output head spans V_A.
template <typename Real>
class Decoder {
public:
    Decoder() = default;
    Decoder(const ModelConfig& config, std::uint64_t seed, double init_std = 0.02);

    const ModelConfig& config() const { return config_; }
    Parameters<Real>& params() { return params_; }
    const Parameters<Real>& params() const { return params_; }
    Parameters<Real>& grads() { return grads_; }
    const Parameters<Real>& grads() const { return grads_; }
    void zero_grad();

    // (M+1) x D input rows for the prefix, including position embeddings.
    Matrix<Real> build_prefix(std::span<const float> clip, std::span<const TokenId> instruction) const;

    ForwardCache<Real> forward(std::span<const Sequence> batch) const;
    LossValue loss(const ForwardCache<Real>& cache) const;
    // Accumulates scale * d(loss)/d(params) into grads(); returns the loss.
    LossValue backward(const ForwardCache<Real>& cache, Real scale = Real(1));
    // Backpropagates an explicit logits gradient (rows x |V_A|).
    void backward_from_logits(const ForwardCache<Real>& cache, const Matrix<Real>& dlogits);

    // Final-layer activations averaged over each sequence: B x D.
    Matrix<Real> export_representation(const ForwardCache<Real>& cache) const;

    template <typename Other>
    Decoder<Other> cast() const;

private:
    template <typename>
    friend class Decoder;

    ModelConfig config_;
    Parameters<Real> params_;
    Parameters<Real> grads_;
};

template <typename Real>
template <typename Other>
Decoder<Other> Decoder<Real>::cast() const {
    Decoder<Other> out;
    out.config_ = config_;
    out.params_ = Parameters<Other>::zeros(config_);
    out.grads_ = Parameters<Other>::zeros(config_);
    std::vector<const Matrix<Real>*> src;
    params_.for_each([&](const std::string&, const Matrix<Real>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.params_.for_each([&](const std::string&, Matrix<Other>& m) { m = src[i++]->template cast<Other>(); });
    return out;
}

extern template class Decoder<float>;
extern template class Decoder<double>;

using Model = Decoder<float>;

// Checkpoint: "SMCKPT 1\n", one line of config JSON, then u32 tensor count and
// per tensor (u32 name length, name, u32 rows, u32 cols, rows*cols f32), all
// little-endian.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
std::string encode_checkpoint(const Model& model);
Model decode_checkpoint(std::string_view bytes);

} // namespace surgimap
