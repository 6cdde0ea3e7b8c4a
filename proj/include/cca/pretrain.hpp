#pragma once

#include <functional>
#include <vector>

#include "cca/eval_harness.hpp"
#include "cca/taskgen.hpp"

namespace cca {

/// Trains the toy model from scratch on gold traces of fresh instances of the
/// corpus templates mixed with control-task examples, until greedy accuracy
/// on a fixed subset of the corpus train split reaches the target band.
struct PretrainConfig {
    int max_steps = 6000;
    int batch_size = 16;
    double learning_rate = 2e-3;
    int warmup_steps = 100;
    double weight_decay = 0.0;
    double max_grad_norm = 1.0;
    double control_fraction = 0.25;  // share of batch slots given to control examples
    int pool_per_template = 400;     // fresh instances per template, none repeating a corpus question
    int eval_every = 250;
    int monitor_size = 256;
    double band_low = 0.4;
    double band_high = 0.8;
    double stop_at = 0.5;  // stop at the first check with stop_at <= accuracy <= band_high
    int max_length = 0;    // generation cap for monitoring, as in EvalOptions
    std::uint64_t seed = 0;
};

struct PretrainCheck {
    int step = 0;
    double loss = 0.0;  // mean batch loss since the previous check
    double accuracy = 0.0;
};

struct PretrainResult {
    Parameters params;
    int steps = 0;
    double accuracy = 0.0;  // monitored accuracy of the returned checkpoint
    bool in_band = false;
    std::vector<PretrainCheck> checks;
};

/// Instances of every corpus template drawn from a stream independent of the
/// corpus; no question text equals a corpus question.
std::vector<Instance> pretraining_pool(const Corpus& corpus, int per_template, std::uint64_t seed);

/// Train-split instances used to monitor accuracy: an evenly strided subset.
std::vector<Instance> monitor_subset(const Corpus& corpus, int size);

using PretrainObserver = std::function<void(const PretrainCheck&)>;

PretrainResult pretrain(const ModelConfig& model, const Tokenizer& tok, const Corpus& corpus,
                        std::span<const ControlSuite> controls, const PretrainConfig& cfg,
                        const PretrainObserver& observer = {});

}  // namespace cca
