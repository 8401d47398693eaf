#pragma once

#include <map>
#include <string>
#include <vector>

#include "camo/autodiff.hpp"

namespace camo::nn {

struct Conv2d {
    Var w, b;
    int stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int k, int stride_, int pad_, Rng& rng);
    Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct Linear {
    Var w, b;

    Linear() = default;
    Linear(int in_f, int out_f, Rng& rng);
    Var operator()(const Var& x) const { return linear(x, w, b); }
};

// Ordered name -> parameter map; the order defines checkpoint layout.
using ParamMap = std::vector<std::pair<std::string, Var>>;

void zero_grads(const ParamMap& params);
uint64_t param_hash(const ParamMap& params);
// Freezing a model: future graphs treat its parameters as constants, so
// backward skips their gradient work entirely.
void set_requires_grad(const ParamMap& params, bool value);

// First-order adaptive-moment optimizer.
class Adam {
  public:
    Adam(ParamMap params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    void step();
    void zero_grad() { zero_grads(params_); }
    double lr() const { return lr_; }
    void set_lr(double lr);

  private:
    ParamMap params_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

// Checkpoint directory format: manifest.json listing tensor names, shapes,
// dtype and a config hash, plus one raw little-endian f32 blob per tensor.
// Saving quantizes the in-memory parameters to f32 so a saved model and its
// reloaded copy produce identical outputs.
void save_checkpoint(const std::string& dir, const ParamMap& params, uint64_t config_hash,
                     const std::string& kind);
// Loads into an existing parameter map (shapes must match). Returns the
// stored config hash.
uint64_t load_checkpoint(const std::string& dir, const ParamMap& params,
                         const std::string& expected_kind);
bool checkpoint_exists(const std::string& dir);
std::string checkpoint_kind(const std::string& dir);

}  // namespace camo::nn
