#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "cca/adapters.hpp"
#include "cca/model.hpp"
#include "cca/tensor.hpp"

namespace cca {

/// Real-valued mask over all maskable components, indexed by component_index().
/// During the forward pass each component activation h becomes (1 + m) * h.
struct Mask {
    std::vector<float> values;

    static Mask zeros(const ModelConfig& cfg) { return Mask{std::vector<float>(count_components(cfg), 0.0f)}; }
    static Mask filled(const ModelConfig& cfg, float v) { return Mask{std::vector<float>(count_components(cfg), v)}; }
};

struct ForwardOptions {
    const Mask* mask = nullptr;
    const LoraAdapters* adapters = nullptr;
    bool adapter_dropout = false;  // training mode for adapters
    std::uint64_t dropout_seed = 0;
};

template <class Real>
struct ForwardCache;

/// Result of a forward pass that keeps what backward() needs.
struct ForwardPass {
    Logits logits;
    std::shared_ptr<const ForwardCache<float>> cache;
};

/// Per-position logits (sequence length x vocab_size).
Logits forward(const Parameters& params, std::span<const Token> tokens, const Mask* mask = nullptr);
ForwardPass forward_with_cache(const Parameters& params, std::span<const Token> tokens,
                               const ForwardOptions& options = {});

/// Which gradients backward() computes.
struct GradRequest {
    enum class Params { none, all, components };
    Params params = Params::all;
    std::vector<ComponentId> components;  // used when params == components
    bool mask = false;
    bool adapters = false;
};

template <class Real>
struct BasicGradients {
    std::vector<Real> params;    // co-indexed with Parameters::values()
    std::vector<Real> mask;      // co-indexed with Mask::values
    std::vector<Real> adapters;  // co-indexed with LoraAdapters::values()
};
using Gradients = BasicGradients<float>;

/// Accumulates d(loss)/d(...) into `grads` given d(loss)/d(logits).
/// Buffers in `grads` are sized on first use.
void backward(const Parameters& params, const ForwardPass& pass, const Logits& dlogits, const GradRequest& request,
              Gradients& grads);

/// Scalar loss over logits; fills dlogits and returns the value.
using LossFn = std::function<double(const Logits& logits, Logits& dlogits)>;

/// -(logit[desired] - logit[undesired]) at one position.
LossFn logit_difference_loss(int position, Token desired, Token undesired);
/// Sum of all logits at one position.
LossFn sum_logits_loss(int position);
/// Mean next-token cross-entropy over (position, target) pairs.
LossFn cross_entropy_loss(std::vector<std::pair<int, Token>> targets);

struct LossAndGrads {
    double loss = 0.0;
    Logits logits;
    Gradients grads;
};

/// forward + loss + backward in one call.
LossAndGrads loss_and_gradients(const Parameters& params, std::span<const Token> tokens, const LossFn& loss,
                                const GradRequest& request, const ForwardOptions& options = {});

/// Pre-mask component output recorded during a forward pass: a T x d_head
/// block for heads, a T x 1 column for MLP neurons.
struct ActivationHandle {
    ComponentId component;
    Matrix<float> value;
};

std::vector<ActivationHandle> capture_activations(const Parameters& params, std::span<const Token> tokens,
                                                  const Mask* mask = nullptr);

/// Double-precision evaluation of the same network, used by the
/// finite-difference gradient checks.
namespace reference {

Matrix<double> forward(const ModelConfig& cfg, std::span<const double> weights, std::span<const Token> tokens,
                       std::span<const double> mask);

BasicGradients<double> backward(const ModelConfig& cfg, std::span<const double> weights, std::span<const Token> tokens,
                                std::span<const double> mask, const Matrix<double>& dlogits);

}  // namespace reference

// ----------------------------------------------------------------------------
// Incremental decoding

/// KV cache and token history of one sequence.
class DecodeState {
public:
    const TokenSeq& tokens() const { return tokens_; }
    int length() const { return static_cast<int>(tokens_.size()); }
    /// Next-token logits after the last consumed token.
    std::span<const float> last_logits() const { return last_logits_; }

private:
    friend class Decoder;
    TokenSeq tokens_;
    std::vector<std::vector<float>> keys_;    // per layer, length x kv_dim
    std::vector<std::vector<float>> values_;  // per layer, length x kv_dim
    std::vector<float> last_logits_;
};

/// KV-cache decoder. Produces logits bit-identical to forward() for every
/// prefix, whatever the batch composition.
class Decoder {
public:
    explicit Decoder(const Parameters& params, const Mask* mask = nullptr);

    DecodeState start() const;

    /// Consumes `tokens[i]` into `states[i]` for every i in one batched pass.
    void extend(std::span<DecodeState* const> states, std::span<const TokenSeq> tokens) const;

    /// Convenience: one state, one or more tokens.
    void extend(DecodeState& state, std::span<const Token> tokens) const;

    const Parameters& params() const { return params_; }
    int max_seq_len() const { return params_.config().max_seq_len; }

private:
    const Parameters& params_;
    const Mask* mask_;
    std::shared_ptr<const void> rope_;
};

}  // namespace cca
