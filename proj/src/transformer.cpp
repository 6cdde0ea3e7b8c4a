#include "cca/transformer.hpp"

#include <array>
#include <cmath>

#include "kernels.hpp"

namespace cca {

namespace {

using kernels::RopeTable;

template <class Real>
bool all_finite(const std::vector<Real>& v) {
    for (Real x : v) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

void check_tokens(const ModelConfig& cfg, std::span<const Token> tokens) {
    if (tokens.empty()) {
        throw InputError("token sequence is empty");
    }
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len) {
        throw LengthError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    }
    for (Token t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw IndexError("token id " + std::to_string(t) + " outside vocabulary of size " +
                             std::to_string(cfg.vocab_size));
        }
    }
}

void check_mask(const ModelConfig& cfg, std::size_t size) {
    if (size != count_components(cfg)) {
        throw ShapeError("mask has " + std::to_string(size) + " entries, model has " +
                         std::to_string(count_components(cfg)) + " components");
    }
}

}  // namespace

// ----------------------------------------------------------------------------
// Activations kept for the backward pass

template <class Real>
struct AdapterCache {
    bool active = false;
    std::vector<Real> keep;    // dropout multipliers, empty when dropout is off
    std::vector<Real> x_drop;  // adapter input after dropout
    std::vector<Real> ax;      // A * x_drop, T x rank
};

template <class Real>
struct LayerCache {
    std::vector<Real> x_in, xn1, inv1;
    std::vector<Real> q_raw, k_raw, v_raw;  // pre-mask projections
    std::vector<Real> q_rot, k_rot, v_m;    // after mask (and rotation for q, k)
    std::vector<Real> probs;                // n_heads x T x T, row t valid up to t
    std::vector<Real> attn;
    std::vector<Real> x_mid, xn2, inv2;
    std::vector<Real> up, gate, hid, hid_m;
    std::array<AdapterCache<Real>, 7> lora;
};

template <class Real>
struct ForwardCache {
    int T = 0;
    TokenSeq tokens;
    std::vector<Real> mask;  // empty when unmasked
    const LoraAdapters* adapters = nullptr;
    std::vector<LayerCache<Real>> layers;
    std::vector<Real> x_final, xnf, invf;
};

namespace {

/// Read-only view of a weight vector laid out by ParamLayout.
template <class Real>
struct Net {
    const ModelConfig& cfg;
    const ParamLayout& layout;
    const Real* w;
    const Real* adapter_values = nullptr;  // LoRA factors, same precision as w
    const LoraAdapters* adapters = nullptr;

    const Real* W(TensorKind kind, int layer = -1) const { return w + layout.tensor(kind, layer).offset; }
    std::size_t off(TensorKind kind, int layer = -1) const { return layout.tensor(kind, layer).offset; }
    const AdapterEntry* adapter(TensorKind kind, int layer) const {
        return adapters ? adapters->find(kind, layer) : nullptr;
    }
};

template <class Real>
Real mask_factor(const std::vector<Real>& mask, std::size_t index) {
    return mask.empty() ? Real(1) : Real(1) + mask[index];
}

/// y = W x (+ scale * B A drop(x)) for T rows.
template <class Real>
void project(const Net<Real>& net, TensorKind kind, int layer, const Real* x, int T, Real* y,
             AdapterCache<Real>* ac, bool dropout, std::uint64_t dropout_seed) {
    const auto& e = net.layout.tensor(kind, layer);
    kernels::linear_nt(x, T, e.cols, net.w + e.offset, e.rows, y);
    const AdapterEntry* a = net.adapter(kind, layer);
    if (a == nullptr || ac == nullptr) {
        return;
    }
    const int r = net.adapters->rank();
    const int in = a->in;
    const int out = a->out;
    ac->active = true;
    const std::size_t n_in = static_cast<std::size_t>(T) * in;
    ac->x_drop.assign(x, x + n_in);
    ac->keep.clear();
    const float p = net.adapters->dropout();
    if (dropout && p > 0.0f) {
        ac->keep.resize(n_in);
        Rng rng(derive_seed(dropout_seed, {static_cast<std::uint64_t>(layer), static_cast<std::uint64_t>(kind)}));
        const Real kept = Real(1) / (Real(1) - static_cast<Real>(p));
        for (std::size_t i = 0; i < n_in; ++i) {
            ac->keep[i] = rng.uniform() < p ? Real(0) : kept;
            ac->x_drop[i] *= ac->keep[i];
        }
    }
    ac->ax.assign(static_cast<std::size_t>(T) * r, Real(0));
    kernels::linear_nt(ac->x_drop.data(), T, in, net.adapter_values + a->a_offset, r, ac->ax.data());
    std::vector<Real> delta(static_cast<std::size_t>(T) * out);
    kernels::linear_nt(ac->ax.data(), T, r, net.adapter_values + a->b_offset, out, delta.data());
    const Real scale = static_cast<Real>(net.adapters->scale());
    for (std::size_t i = 0; i < delta.size(); ++i) {
        y[i] += scale * delta[i];
    }
}

template <class Real>
int first_nonfinite_layer(const ForwardCache<Real>& c) {
    for (std::size_t l = 0; l < c.layers.size(); ++l) {
        const auto& L = c.layers[l];
        if (!all_finite(L.x_mid) || !all_finite(L.hid)) {
            return static_cast<int>(l);
        }
        const std::vector<Real>& next = l + 1 < c.layers.size() ? c.layers[l + 1].x_in : c.x_final;
        if (!all_finite(next)) {
            return static_cast<int>(l);
        }
    }
    return -1;
}

template <class Real>
void run_forward(const Net<Real>& net, std::span<const Token> tokens, ForwardCache<Real>& c, Matrix<Real>& logits,
                 bool dropout, std::uint64_t dropout_seed) {
    const ModelConfig& cfg = net.cfg;
    const int T = static_cast<int>(tokens.size());
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int qd = cfg.q_dim();
    const int kvd = cfg.kv_dim();
    const int F = cfg.d_mlp;
    const int H = cfg.n_heads;
    const int G = cfg.group_size();
    const std::size_t cpl = static_cast<std::size_t>(cfg.components_per_layer());
    const Real eps = static_cast<Real>(cfg.norm_eps);
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    const RopeTable<Real> rope(T, dh, static_cast<double>(cfg.rope_base));
    const auto td = static_cast<std::size_t>(T);

    c.T = T;
    c.tokens.assign(tokens.begin(), tokens.end());
    c.layers.resize(static_cast<std::size_t>(cfg.n_layers));

    std::vector<Real> x(td * d);
    const Real* emb = net.W(TensorKind::token_embedding);
    for (int t = 0; t < T; ++t) {
        std::copy_n(emb + static_cast<std::size_t>(tokens[t]) * d, d, x.data() + static_cast<std::size_t>(t) * d);
    }
    std::vector<Real> tmp(td * static_cast<std::size_t>(std::max(d, F)));

    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& L = c.layers[static_cast<std::size_t>(l)];
        const std::size_t mbase = static_cast<std::size_t>(l) * cpl;
        L.x_in = x;
        L.xn1.resize(td * d);
        L.inv1.resize(td);
        const Real* g1 = net.W(TensorKind::attn_norm, l);
        for (int t = 0; t < T; ++t) {
            L.inv1[t] = kernels::rmsnorm_row(x.data() + t * d, g1, d, eps, L.xn1.data() + t * d);
        }
        L.q_raw.resize(td * qd);
        L.k_raw.resize(td * kvd);
        L.v_raw.resize(td * kvd);
        project(net, TensorKind::wq, l, L.xn1.data(), T, L.q_raw.data(), &L.lora[0], dropout, dropout_seed);
        project(net, TensorKind::wk, l, L.xn1.data(), T, L.k_raw.data(), &L.lora[1], dropout, dropout_seed);
        project(net, TensorKind::wv, l, L.xn1.data(), T, L.v_raw.data(), &L.lora[2], dropout, dropout_seed);
        L.q_rot = L.q_raw;
        L.k_rot = L.k_raw;
        L.v_m = L.v_raw;
        if (!c.mask.empty()) {
            for (int t = 0; t < T; ++t) {
                for (int h = 0; h < H; ++h) {
                    const Real f = mask_factor(c.mask, mbase + h);
                    Real* q = L.q_rot.data() + t * qd + h * dh;
                    for (int i = 0; i < dh; ++i) {
                        q[i] = f * q[i];
                    }
                }
                for (int g = 0; g < cfg.n_kv_heads; ++g) {
                    const Real fk = mask_factor(c.mask, mbase + H + g);
                    const Real fv = mask_factor(c.mask, mbase + H + cfg.n_kv_heads + g);
                    Real* k = L.k_rot.data() + t * kvd + g * dh;
                    Real* v = L.v_m.data() + t * kvd + g * dh;
                    for (int i = 0; i < dh; ++i) {
                        k[i] = fk * k[i];
                        v[i] = fv * v[i];
                    }
                }
            }
        }
        for (int t = 0; t < T; ++t) {
            for (int h = 0; h < H; ++h) {
                kernels::rope_row(L.q_rot.data() + t * qd + h * dh, rope.cos_at(t), rope.sin_at(t), dh);
            }
            for (int g = 0; g < cfg.n_kv_heads; ++g) {
                kernels::rope_row(L.k_rot.data() + t * kvd + g * dh, rope.cos_at(t), rope.sin_at(t), dh);
            }
        }
        L.probs.assign(static_cast<std::size_t>(H) * td * td, Real(0));
        L.attn.resize(td * qd);
        for (int t = 0; t < T; ++t) {
            for (int h = 0; h < H; ++h) {
                const int g = h / G;
                kernels::attend_row(L.q_rot.data() + t * qd + h * dh, L.k_rot.data() + g * dh, kvd,
                                    L.v_m.data() + g * dh, kvd, t + 1, dh, scale,
                                    L.probs.data() + (static_cast<std::size_t>(h) * td + t) * td,
                                    L.attn.data() + t * qd + h * dh);
            }
        }
        project(net, TensorKind::wo, l, L.attn.data(), T, tmp.data(), &L.lora[3], dropout, dropout_seed);
        L.x_mid.resize(td * d);
        for (std::size_t i = 0; i < td * d; ++i) {
            L.x_mid[i] = x[i] + tmp[i];
        }

        L.xn2.resize(td * d);
        L.inv2.resize(td);
        const Real* g2 = net.W(TensorKind::mlp_norm, l);
        for (int t = 0; t < T; ++t) {
            L.inv2[t] = kernels::rmsnorm_row(L.x_mid.data() + t * d, g2, d, eps, L.xn2.data() + t * d);
        }
        L.up.resize(td * F);
        L.gate.resize(td * F);
        project(net, TensorKind::w_up, l, L.xn2.data(), T, L.up.data(), &L.lora[4], dropout, dropout_seed);
        project(net, TensorKind::w_gate, l, L.xn2.data(), T, L.gate.data(), &L.lora[5], dropout, dropout_seed);
        L.hid.resize(td * F);
        L.hid_m.resize(td * F);
        const std::size_t nbase = mbase + static_cast<std::size_t>(H + 2 * cfg.n_kv_heads);
        for (int t = 0; t < T; ++t) {
            for (int j = 0; j < F; ++j) {
                const std::size_t i = static_cast<std::size_t>(t) * F + j;
                L.hid[i] = kernels::silu(L.gate[i]) * L.up[i];
                L.hid_m[i] = c.mask.empty() ? L.hid[i] : mask_factor(c.mask, nbase + j) * L.hid[i];
            }
        }
        project(net, TensorKind::w_down, l, L.hid_m.data(), T, tmp.data(), &L.lora[6], dropout, dropout_seed);
        for (std::size_t i = 0; i < td * d; ++i) {
            x[i] = L.x_mid[i] + tmp[i];
        }
    }

    c.x_final = x;
    c.xnf.resize(td * d);
    c.invf.resize(td);
    const Real* gf = net.W(TensorKind::final_norm);
    for (int t = 0; t < T; ++t) {
        c.invf[t] = kernels::rmsnorm_row(x.data() + t * d, gf, d, eps, c.xnf.data() + t * d);
    }
    logits.resize(T, cfg.vocab_size);
    kernels::linear_nt(c.xnf.data(), T, d, net.W(TensorKind::unembedding), cfg.vocab_size, logits.data.data());
    if (!all_finite(logits.data)) {
        throw NumericError("non-finite activation in forward pass", first_nonfinite_layer(c));
    }
}

// ----------------------------------------------------------------------------
// Backward

/// Which weight rows (or columns, for the down projection) receive gradients.
struct LayerPlan {
    bool all = false;
    std::vector<int> q, k, v, neurons;
    bool any() const { return all || !q.empty() || !k.empty() || !v.empty() || !neurons.empty(); }
};

struct BackwardPlan {
    bool all_params = false;
    bool mask = false;
    bool adapters = false;
    int lowest = 0;
    std::vector<LayerPlan> layers;
};

BackwardPlan make_plan(const ModelConfig& cfg, const GradRequest& req) {
    BackwardPlan p;
    p.all_params = req.params == GradRequest::Params::all;
    p.mask = req.mask;
    p.adapters = req.adapters;
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    int lowest = cfg.n_layers;
    if (p.all_params || p.mask || p.adapters) {
        lowest = 0;
    }
    for (auto& lp : p.layers) {
        lp.all = p.all_params;
    }
    if (req.params == GradRequest::Params::components) {
        for (const auto& id : req.components) {
            if (!is_valid(cfg, id)) {
                throw AddressError("invalid component id " + to_string(id));
            }
            auto& lp = p.layers[static_cast<std::size_t>(id.layer)];
            switch (id.kind) {
                case ComponentKind::q_head: lp.q.push_back(id.index); break;
                case ComponentKind::k_head: lp.k.push_back(id.index); break;
                case ComponentKind::v_head: lp.v.push_back(id.index); break;
                case ComponentKind::mlp_neuron: lp.neurons.push_back(id.index); break;
            }
            lowest = std::min(lowest, id.layer);
        }
        for (auto& lp : p.layers) {
            for (auto* v : {&lp.q, &lp.k, &lp.v, &lp.neurons}) {
                std::sort(v->begin(), v->end());
                v->erase(std::unique(v->begin(), v->end()), v->end());
            }
        }
    }
    p.lowest = lowest;
    return p;
}

/// dW rows [first*rows_per, ...) for every listed unit, merged into contiguous runs.
template <class Real>
void accum_unit_rows(const Real* dY, int T, int out, const Real* X, int in, Real* dW, const std::vector<int>& units,
                     int rows_per) {
    std::size_t i = 0;
    while (i < units.size()) {
        std::size_t j = i + 1;
        while (j < units.size() && units[j] == units[j - 1] + 1) {
            ++j;
        }
        kernels::accum_dw_rows(dY, T, out, X, in, dW, units[i] * rows_per,
                               static_cast<int>(j - i) * rows_per);
        i = j;
    }
}

template <class Real>
void rmsnorm_backward(const Real* dy, const Real* x, const Real* inv, const Real* g, int T, int d, Real* dx,
                      Real* dg) {
    for (int t = 0; t < T; ++t) {
        const Real* dyt = dy + static_cast<std::size_t>(t) * d;
        const Real* xt = x + static_cast<std::size_t>(t) * d;
        Real* dxt = dx + static_cast<std::size_t>(t) * d;
        const Real r = inv[t];
        Real s = 0;
        for (int i = 0; i < d; ++i) {
            s += g[i] * dyt[i] * xt[i];
        }
        const Real c = r * r * r * s / static_cast<Real>(d);
        for (int i = 0; i < d; ++i) {
            dxt[i] += r * g[i] * dyt[i] - c * xt[i];
        }
        if (dg != nullptr) {
            for (int i = 0; i < d; ++i) {
                dg[i] += dyt[i] * xt[i] * r;
            }
        }
    }
}

template <class Real>
struct BackwardCtx {
    const Net<Real>& net;
    const BackwardPlan& plan;
    Real* dparams;    // may be null
    Real* dadapters;  // may be null
};

/// Backward through project(): accumulates dX (if non-null), adapter grads,
/// and base weight rows selected by `rows` (all rows when rows_all).
template <class Real>
void project_backward(const BackwardCtx<Real>& ctx, TensorKind kind, int layer, const Real* dY, const Real* X, int T,
                      Real* dX, const AdapterCache<Real>& ac, bool rows_all, const std::vector<int>* units,
                      int rows_per) {
    const auto& e = ctx.net.layout.tensor(kind, layer);
    if (dX != nullptr) {
        kernels::accum_dx(dY, T, e.rows, ctx.net.w + e.offset, e.cols, dX);
    }
    if (ctx.dparams != nullptr) {
        Real* dW = ctx.dparams + e.offset;
        if (rows_all) {
            kernels::accum_dw_rows(dY, T, e.rows, X, e.cols, dW, 0, e.rows);
        } else if (units != nullptr && !units->empty()) {
            accum_unit_rows(dY, T, e.rows, X, e.cols, dW, *units, rows_per);
        }
    }
    if (!ac.active || !(ctx.plan.adapters || dX != nullptr)) {
        return;
    }
    const AdapterEntry* a = ctx.net.adapter(kind, layer);
    const int r = ctx.net.adapters->rank();
    const Real scale = static_cast<Real>(ctx.net.adapters->scale());
    const std::size_t n_out = static_cast<std::size_t>(T) * e.rows;
    std::vector<Real> sdy(dY, dY + n_out);
    for (auto& v : sdy) {
        v *= scale;
    }
    std::vector<Real> dax(static_cast<std::size_t>(T) * r, Real(0));
    kernels::accum_dx(sdy.data(), T, e.rows, ctx.net.adapter_values + a->b_offset, r, dax.data());
    if (ctx.plan.adapters && ctx.dadapters != nullptr) {
        kernels::accum_dw_rows(sdy.data(), T, e.rows, ac.ax.data(), r, ctx.dadapters + a->b_offset, 0, e.rows);
        kernels::accum_dw_rows(dax.data(), T, r, ac.x_drop.data(), e.cols, ctx.dadapters + a->a_offset, 0, r);
    }
    if (dX != nullptr) {
        std::vector<Real> dxd(static_cast<std::size_t>(T) * e.cols, Real(0));
        kernels::accum_dx(dax.data(), T, r, ctx.net.adapter_values + a->a_offset, e.cols, dxd.data());
        for (std::size_t i = 0; i < dxd.size(); ++i) {
            dX[i] += ac.keep.empty() ? dxd[i] : dxd[i] * ac.keep[i];
        }
    }
}

template <class Real>
void run_backward(const Net<Real>& net, const ForwardCache<Real>& c, const Matrix<Real>& dlogits,
                  const BackwardPlan& plan, Real* dparams, Real* dmask, Real* dadapters) {
    const ModelConfig& cfg = net.cfg;
    const int T = c.T;
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int qd = cfg.q_dim();
    const int kvd = cfg.kv_dim();
    const int F = cfg.d_mlp;
    const int H = cfg.n_heads;
    const int KV = cfg.n_kv_heads;
    const int G = cfg.group_size();
    const int V = cfg.vocab_size;
    const std::size_t cpl = static_cast<std::size_t>(cfg.components_per_layer());
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    const RopeTable<Real> rope(T, dh, static_cast<double>(cfg.rope_base));
    const auto td = static_cast<std::size_t>(T);
    if (dlogits.rows != T || dlogits.cols != V) {
        throw ShapeError("dlogits shape does not match the forward pass");
    }
    if (plan.lowest >= cfg.n_layers && !plan.all_params) {
        return;
    }
    const BackwardCtx<Real> ctx{net, plan, dparams, dadapters};

    // unembedding and final norm
    std::vector<Real> dxn(td * d, Real(0));
    kernels::accum_dx(dlogits.data.data(), T, V, net.W(TensorKind::unembedding), d, dxn.data());
    if (plan.all_params) {
        kernels::accum_dw_rows(dlogits.data.data(), T, V, c.xnf.data(), d, dparams + net.off(TensorKind::unembedding),
                               0, V);
    }
    std::vector<Real> dx(td * d, Real(0));
    rmsnorm_backward(dxn.data(), c.x_final.data(), c.invf.data(), net.W(TensorKind::final_norm), T, d, dx.data(),
                     plan.all_params ? dparams + net.off(TensorKind::final_norm) : nullptr);

    std::vector<Real> dhid(td * F), dup(td * F), dgate(td * F);
    std::vector<Real> dattn(td * qd), dq(td * qd), dk(td * kvd), dv(td * kvd);
    std::vector<Real> dP(td);

    for (int l = cfg.n_layers - 1; l >= plan.lowest; --l) {
        const auto& L = c.layers[static_cast<std::size_t>(l)];
        const auto& lp = plan.layers[static_cast<std::size_t>(l)];
        const std::size_t mbase = static_cast<std::size_t>(l) * cpl;
        const std::size_t nbase = mbase + static_cast<std::size_t>(H + 2 * KV);
        const bool need_dx_below = l > plan.lowest || plan.all_params;

        // MLP
        std::fill(dhid.begin(), dhid.end(), Real(0));  // holds d hid_m first
        project_backward(ctx, TensorKind::w_down, l, dx.data(), L.hid_m.data(), T, dhid.data(), L.lora[6], lp.all,
                         nullptr, 1);
        if (dparams != nullptr && !lp.all && !lp.neurons.empty()) {
            Real* dW = dparams + net.off(TensorKind::w_down, l);
            for (int j : lp.neurons) {
                for (int o = 0; o < d; ++o) {
                    Real s = 0;
                    for (int t = 0; t < T; ++t) {
                        s += dx[static_cast<std::size_t>(t) * d + o] * L.hid_m[static_cast<std::size_t>(t) * F + j];
                    }
                    dW[static_cast<std::size_t>(o) * F + j] += s;
                }
            }
        }
        if (plan.mask && dmask != nullptr) {
            for (int j = 0; j < F; ++j) {
                Real s = 0;
                for (int t = 0; t < T; ++t) {
                    const std::size_t i = static_cast<std::size_t>(t) * F + j;
                    s += dhid[i] * L.hid[i];
                }
                dmask[nbase + j] += s;
            }
        }
        for (int t = 0; t < T; ++t) {
            for (int j = 0; j < F; ++j) {
                const std::size_t i = static_cast<std::size_t>(t) * F + j;
                const Real dh_raw = dhid[i] * mask_factor(c.mask, nbase + j);
                const Real gte = L.gate[i];
                const Real sg = Real(1) / (Real(1) + std::exp(-gte));
                dup[i] = dh_raw * gte * sg;
                dgate[i] = dh_raw * L.up[i] * sg * (Real(1) + gte * (Real(1) - sg));
            }
        }
        std::fill(dxn.begin(), dxn.end(), Real(0));
        project_backward(ctx, TensorKind::w_up, l, dup.data(), L.xn2.data(), T, dxn.data(), L.lora[4], lp.all,
                         &lp.neurons, 1);
        project_backward(ctx, TensorKind::w_gate, l, dgate.data(), L.xn2.data(), T, dxn.data(), L.lora[5], lp.all,
                         &lp.neurons, 1);
        rmsnorm_backward(dxn.data(), L.x_mid.data(), L.inv2.data(), net.W(TensorKind::mlp_norm, l), T, d, dx.data(),
                         lp.all ? dparams + net.off(TensorKind::mlp_norm, l) : nullptr);
        // dx now holds d x_mid

        // attention
        std::fill(dattn.begin(), dattn.end(), Real(0));
        project_backward(ctx, TensorKind::wo, l, dx.data(), L.attn.data(), T, dattn.data(), L.lora[3], lp.all,
                         nullptr, 1);
        std::fill(dq.begin(), dq.end(), Real(0));
        std::fill(dk.begin(), dk.end(), Real(0));
        std::fill(dv.begin(), dv.end(), Real(0));
        for (int h = 0; h < H; ++h) {
            const int g = h / G;
            for (int t = 0; t < T; ++t) {
                const Real* P = L.probs.data() + (static_cast<std::size_t>(h) * td + t) * td;
                const Real* dout = dattn.data() + static_cast<std::size_t>(t) * qd + h * dh;
                const Real* qt = L.q_rot.data() + static_cast<std::size_t>(t) * qd + h * dh;
                Real* dqt = dq.data() + static_cast<std::size_t>(t) * qd + h * dh;
                Real sum = 0;
                for (int j = 0; j <= t; ++j) {
                    dP[j] = kernels::dot(dout, L.v_m.data() + static_cast<std::size_t>(j) * kvd + g * dh, dh);
                    sum += P[j] * dP[j];
                }
                for (int j = 0; j <= t; ++j) {
                    const Real ds = P[j] * (dP[j] - sum) * scale;
                    const Real* kj = L.k_rot.data() + static_cast<std::size_t>(j) * kvd + g * dh;
                    Real* dkj = dk.data() + static_cast<std::size_t>(j) * kvd + g * dh;
                    Real* dvj = dv.data() + static_cast<std::size_t>(j) * kvd + g * dh;
                    for (int i = 0; i < dh; ++i) {
                        dqt[i] += ds * kj[i];
                        dkj[i] += ds * qt[i];
                        dvj[i] += P[j] * dout[i];
                    }
                }
            }
        }
        for (int t = 0; t < T; ++t) {
            for (int h = 0; h < H; ++h) {
                kernels::rope_row_backward(dq.data() + static_cast<std::size_t>(t) * qd + h * dh, rope.cos_at(t),
                                           rope.sin_at(t), dh);
            }
            for (int g = 0; g < KV; ++g) {
                kernels::rope_row_backward(dk.data() + static_cast<std::size_t>(t) * kvd + g * dh, rope.cos_at(t),
                                           rope.sin_at(t), dh);
            }
        }
        // dq, dk, dv are now gradients of the masked pre-rotation activations
        auto head_mask_grad = [&](std::vector<Real>& grad, const std::vector<Real>& raw, int width, int n_heads,
                                  std::size_t first) {
            for (int h = 0; h < n_heads; ++h) {
                const std::size_t mi = first + static_cast<std::size_t>(h);
                if (plan.mask && dmask != nullptr) {
                    Real s = 0;
                    for (int t = 0; t < T; ++t) {
                        const std::size_t o = static_cast<std::size_t>(t) * width + h * dh;
                        for (int i = 0; i < dh; ++i) {
                            s += grad[o + i] * raw[o + i];
                        }
                    }
                    dmask[mi] += s;
                }
                if (!c.mask.empty()) {
                    const Real f = mask_factor(c.mask, mi);
                    for (int t = 0; t < T; ++t) {
                        const std::size_t o = static_cast<std::size_t>(t) * width + h * dh;
                        for (int i = 0; i < dh; ++i) {
                            grad[o + i] *= f;
                        }
                    }
                }
            }
        };
        head_mask_grad(dq, L.q_raw, qd, H, mbase);
        head_mask_grad(dk, L.k_raw, kvd, KV, mbase + H);
        head_mask_grad(dv, L.v_raw, kvd, KV, mbase + H + KV);

        std::fill(dxn.begin(), dxn.end(), Real(0));
        Real* dxn_ptr = need_dx_below ? dxn.data() : nullptr;
        project_backward(ctx, TensorKind::wq, l, dq.data(), L.xn1.data(), T, dxn_ptr, L.lora[0], lp.all, &lp.q, dh);
        project_backward(ctx, TensorKind::wk, l, dk.data(), L.xn1.data(), T, dxn_ptr, L.lora[1], lp.all, &lp.k, dh);
        project_backward(ctx, TensorKind::wv, l, dv.data(), L.xn1.data(), T, dxn_ptr, L.lora[2], lp.all, &lp.v, dh);
        if (need_dx_below) {
            rmsnorm_backward(dxn.data(), L.x_in.data(), L.inv1.data(), net.W(TensorKind::attn_norm, l), T, d,
                             dx.data(), lp.all ? dparams + net.off(TensorKind::attn_norm, l) : nullptr);
        }
        if (!all_finite(dx)) {
            throw NumericError("non-finite gradient in backward pass", l);
        }
    }

    if (plan.all_params) {
        Real* dE = dparams + net.off(TensorKind::token_embedding);
        for (int t = 0; t < T; ++t) {
            Real* row = dE + static_cast<std::size_t>(c.tokens[static_cast<std::size_t>(t)]) * d;
            for (int i = 0; i < d; ++i) {
                row[i] += dx[static_cast<std::size_t>(t) * d + i];
            }
        }
    }
}

}  // namespace

// ----------------------------------------------------------------------------
// Public float API

ForwardPass forward_with_cache(const Parameters& params, std::span<const Token> tokens, const ForwardOptions& options) {
    const ModelConfig& cfg = params.config();
    check_tokens(cfg, tokens);
    auto cache = std::make_shared<ForwardCache<float>>();
    if (options.mask != nullptr) {
        check_mask(cfg, options.mask->values.size());
        cache->mask = options.mask->values;
    }
    Net<float> net{cfg, params.layout(), params.values().data()};
    if (options.adapters != nullptr) {
        if (!(options.adapters->config() == cfg)) {
            throw ShapeError("adapters were built for a different model config");
        }
        net.adapters = options.adapters;
        net.adapter_values = options.adapters->values().data();
        cache->adapters = options.adapters;
    }
    ForwardPass pass;
    run_forward(net, tokens, *cache, pass.logits, options.adapter_dropout, options.dropout_seed);
    pass.cache = std::move(cache);
    return pass;
}

Logits forward(const Parameters& params, std::span<const Token> tokens, const Mask* mask) {
    ForwardOptions opt;
    opt.mask = mask;
    return forward_with_cache(params, tokens, opt).logits;
}

void backward(const Parameters& params, const ForwardPass& pass, const Logits& dlogits, const GradRequest& request,
              Gradients& grads) {
    if (!pass.cache) {
        throw InputError("forward pass has no cache");
    }
    const ModelConfig& cfg = params.config();
    const ForwardCache<float>& c = *pass.cache;
    const BackwardPlan plan = make_plan(cfg, request);
    float* dparams = nullptr;
    float* dmask = nullptr;
    float* dadapters = nullptr;
    if (request.params != GradRequest::Params::none) {
        grads.params.resize(params.size(), 0.0f);
        dparams = grads.params.data();
    }
    if (request.mask) {
        grads.mask.resize(count_components(cfg), 0.0f);
        dmask = grads.mask.data();
    }
    Net<float> net{cfg, params.layout(), params.values().data()};
    if (c.adapters != nullptr) {
        net.adapters = c.adapters;
        net.adapter_values = c.adapters->values().data();
        if (request.adapters) {
            grads.adapters.resize(c.adapters->values().size(), 0.0f);
            dadapters = grads.adapters.data();
        }
    } else if (request.adapters) {
        throw InputError("adapter gradients requested for a forward pass without adapters");
    }
    run_backward(net, c, dlogits, plan, dparams, dmask, dadapters);
    for (const auto* v : {&grads.params, &grads.mask, &grads.adapters}) {
        if (!all_finite(*v)) {
            throw NumericError("non-finite gradient", -1);
        }
    }
}

LossFn logit_difference_loss(int position, Token desired, Token undesired) {
    return [=](const Logits& logits, Logits& dlogits) {
        if (position < 0 || position >= logits.rows) {
            throw IndexError("loss position " + std::to_string(position) + " outside sequence");
        }
        dlogits.resize(logits.rows, logits.cols);
        dlogits.at(position, desired) -= 1.0f;
        dlogits.at(position, undesired) += 1.0f;
        return -(static_cast<double>(logits.at(position, desired)) - logits.at(position, undesired));
    };
}

LossFn sum_logits_loss(int position) {
    return [=](const Logits& logits, Logits& dlogits) {
        if (position < 0 || position >= logits.rows) {
            throw IndexError("loss position " + std::to_string(position) + " outside sequence");
        }
        dlogits.resize(logits.rows, logits.cols);
        double s = 0.0;
        for (int v = 0; v < logits.cols; ++v) {
            s += logits.at(position, v);
            dlogits.at(position, v) = 1.0f;
        }
        return s;
    };
}

LossFn cross_entropy_loss(std::vector<std::pair<int, Token>> targets) {
    return [targets = std::move(targets)](const Logits& logits, Logits& dlogits) {
        dlogits.resize(logits.rows, logits.cols);
        if (targets.empty()) {
            return 0.0;
        }
        const double inv_n = 1.0 / static_cast<double>(targets.size());
        double total = 0.0;
        std::vector<double> p(static_cast<std::size_t>(logits.cols));
        for (const auto& [pos, target] : targets) {
            if (pos < 0 || pos >= logits.rows) {
                throw IndexError("loss position " + std::to_string(pos) + " outside sequence");
            }
            const float* row = logits.row(pos);
            double mx = row[0];
            for (int v = 1; v < logits.cols; ++v) {
                mx = std::max(mx, static_cast<double>(row[v]));
            }
            double z = 0.0;
            for (int v = 0; v < logits.cols; ++v) {
                p[v] = std::exp(row[v] - mx);
                z += p[v];
            }
            total += -(row[target] - mx - std::log(z));
            float* drow = dlogits.row(pos);
            for (int v = 0; v < logits.cols; ++v) {
                drow[v] += static_cast<float>((p[v] / z - (v == target ? 1.0 : 0.0)) * inv_n);
            }
        }
        return total * inv_n;
    };
}

LossAndGrads loss_and_gradients(const Parameters& params, std::span<const Token> tokens, const LossFn& loss,
                                const GradRequest& request, const ForwardOptions& options) {
    ForwardPass pass = forward_with_cache(params, tokens, options);
    Logits dlogits;
    LossAndGrads out;
    out.loss = loss(pass.logits, dlogits);
    if (!std::isfinite(out.loss)) {
        throw NumericError("non-finite loss", -1);
    }
    backward(params, pass, dlogits, request, out.grads);
    out.logits = std::move(pass.logits);
    return out;
}

std::vector<ActivationHandle> capture_activations(const Parameters& params, std::span<const Token> tokens,
                                                  const Mask* mask) {
    ForwardOptions opt;
    opt.mask = mask;
    const ForwardPass pass = forward_with_cache(params, tokens, opt);
    const ModelConfig& cfg = params.config();
    const ForwardCache<float>& c = *pass.cache;
    const int T = c.T;
    const int dh = cfg.d_head;
    std::vector<ActivationHandle> out;
    out.reserve(count_components(cfg));
    for (const auto& id : all_components(cfg)) {
        const auto& L = c.layers[static_cast<std::size_t>(id.layer)];
        ActivationHandle h{id, {}};
        auto copy_head = [&](const std::vector<float>& src, int width) {
            h.value.resize(T, dh);
            for (int t = 0; t < T; ++t) {
                std::copy_n(src.data() + static_cast<std::size_t>(t) * width + id.index * dh, dh, h.value.row(t));
            }
        };
        switch (id.kind) {
            case ComponentKind::q_head: copy_head(L.q_raw, cfg.q_dim()); break;
            case ComponentKind::k_head: copy_head(L.k_raw, cfg.kv_dim()); break;
            case ComponentKind::v_head: copy_head(L.v_raw, cfg.kv_dim()); break;
            case ComponentKind::mlp_neuron:
                h.value.resize(T, 1);
                for (int t = 0; t < T; ++t) {
                    h.value.at(t, 0) = L.hid[static_cast<std::size_t>(t) * cfg.d_mlp + id.index];
                }
                break;
        }
        out.push_back(std::move(h));
    }
    return out;
}

// ----------------------------------------------------------------------------
// Double-precision reference

namespace reference {

namespace {

ParamLayout checked_layout(const ModelConfig& cfg, std::span<const double> weights, std::span<const double> mask) {
    ParamLayout layout(cfg);
    if (weights.size() != layout.total_size()) {
        throw ShapeError("weight vector size does not match the layout");
    }
    if (!mask.empty()) {
        check_mask(cfg, mask.size());
    }
    return layout;
}

}  // namespace

Matrix<double> forward(const ModelConfig& cfg, std::span<const double> weights, std::span<const Token> tokens,
                       std::span<const double> mask) {
    check_tokens(cfg, tokens);
    const ParamLayout layout = checked_layout(cfg, weights, mask);
    ForwardCache<double> c;
    c.mask.assign(mask.begin(), mask.end());
    Net<double> net{cfg, layout, weights.data()};
    Matrix<double> logits;
    run_forward(net, tokens, c, logits, false, 0);
    return logits;
}

BasicGradients<double> backward(const ModelConfig& cfg, std::span<const double> weights, std::span<const Token> tokens,
                                std::span<const double> mask, const Matrix<double>& dlogits) {
    check_tokens(cfg, tokens);
    const ParamLayout layout = checked_layout(cfg, weights, mask);
    ForwardCache<double> c;
    c.mask.assign(mask.begin(), mask.end());
    Net<double> net{cfg, layout, weights.data()};
    Matrix<double> logits;
    run_forward(net, tokens, c, logits, false, 0);
    GradRequest req;
    req.params = GradRequest::Params::all;
    req.mask = !mask.empty();
    const BackwardPlan plan = make_plan(cfg, req);
    BasicGradients<double> g;
    g.params.assign(layout.total_size(), 0.0);
    if (!mask.empty()) {
        g.mask.assign(mask.size(), 0.0);
    }
    run_backward(net, c, dlogits, plan, g.params.data(), g.mask.empty() ? nullptr : g.mask.data(),
                 static_cast<double*>(nullptr));
    return g;
}

}  // namespace reference

// ----------------------------------------------------------------------------
// Decoder

Decoder::Decoder(const Parameters& params, const Mask* mask) : params_(params), mask_(mask) {
    const ModelConfig& cfg = params.config();
    if (mask != nullptr) {
        check_mask(cfg, mask->values.size());
    }
    rope_ = std::make_shared<RopeTable<float>>(cfg.max_seq_len, cfg.d_head, static_cast<double>(cfg.rope_base));
}

DecodeState Decoder::start() const {
    DecodeState s;
    s.keys_.resize(static_cast<std::size_t>(params_.config().n_layers));
    s.values_.resize(static_cast<std::size_t>(params_.config().n_layers));
    return s;
}

void Decoder::extend(DecodeState& state, std::span<const Token> tokens) const {
    DecodeState* ptr = &state;
    const TokenSeq seq(tokens.begin(), tokens.end());
    extend(std::span<DecodeState* const>(&ptr, 1), std::span<const TokenSeq>(&seq, 1));
}

void Decoder::extend(std::span<DecodeState* const> states, std::span<const TokenSeq> tokens) const {
    if (states.size() != tokens.size()) {
        throw ShapeError("one token list is needed per decode state");
    }
    const ModelConfig& cfg = params_.config();
    const auto& rope = *static_cast<const RopeTable<float>*>(rope_.get());
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int qd = cfg.q_dim();
    const int kvd = cfg.kv_dim();
    const int F = cfg.d_mlp;
    const int H = cfg.n_heads;
    const int KV = cfg.n_kv_heads;
    const int G = cfg.group_size();
    const std::size_t cpl = static_cast<std::size_t>(cfg.components_per_layer());
    const float eps = cfg.norm_eps;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    const std::vector<float> no_mask;
    const std::vector<float>& mask = mask_ ? mask_->values : no_mask;

    // one row per consumed token
    struct Row {
        std::size_t state;
        int pos;
    };
    std::vector<Row> rows;
    for (std::size_t s = 0; s < states.size(); ++s) {
        const int base = states[s]->length();
        if (base + static_cast<int>(tokens[s].size()) > cfg.max_seq_len) {
            throw LengthError("decode would exceed max_seq_len " + std::to_string(cfg.max_seq_len));
        }
        for (std::size_t j = 0; j < tokens[s].size(); ++j) {
            const Token t = tokens[s][j];
            if (t < 0 || t >= cfg.vocab_size) {
                throw IndexError("token id " + std::to_string(t) + " outside vocabulary");
            }
            rows.push_back({s, base + static_cast<int>(j)});
        }
    }
    const int N = static_cast<int>(rows.size());
    if (N == 0) {
        return;
    }
    const auto n = static_cast<std::size_t>(N);
    const float* w = params_.values().data();
    const auto& layout = params_.layout();
    auto W = [&](TensorKind k, int l = -1) { return w + layout.tensor(k, l).offset; };

    std::vector<float> x(n * d), xn(n * d), q(n * qd), k(n * kvd), v(n * kvd), attn(n * qd);
    std::vector<float> tmp(n * d), up(n * F), gate(n * F), hid(n * F);
    std::vector<float> probs(static_cast<std::size_t>(cfg.max_seq_len));
    {
        std::size_t r = 0;
        for (std::size_t s = 0; s < states.size(); ++s) {
            for (Token t : tokens[s]) {
                std::copy_n(W(TensorKind::token_embedding) + static_cast<std::size_t>(t) * d, d, x.data() + r * d);
                ++r;
            }
        }
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::size_t mbase = static_cast<std::size_t>(l) * cpl;
        const float* g1 = W(TensorKind::attn_norm, l);
        for (int r = 0; r < N; ++r) {
            kernels::rmsnorm_row(x.data() + r * d, g1, d, eps, xn.data() + r * d);
        }
        kernels::linear_nt(xn.data(), N, d, W(TensorKind::wq, l), qd, q.data());
        kernels::linear_nt(xn.data(), N, d, W(TensorKind::wk, l), kvd, k.data());
        kernels::linear_nt(xn.data(), N, d, W(TensorKind::wv, l), kvd, v.data());
        for (int r = 0; r < N; ++r) {
            const int pos = rows[static_cast<std::size_t>(r)].pos;
            if (!mask.empty()) {
                for (int h = 0; h < H; ++h) {
                    const float f = mask_factor(mask, mbase + h);
                    float* qh = q.data() + r * qd + h * dh;
                    for (int i = 0; i < dh; ++i) {
                        qh[i] = f * qh[i];
                    }
                }
                for (int g = 0; g < KV; ++g) {
                    const float fk = mask_factor(mask, mbase + H + g);
                    const float fv = mask_factor(mask, mbase + H + KV + g);
                    float* kg = k.data() + r * kvd + g * dh;
                    float* vg = v.data() + r * kvd + g * dh;
                    for (int i = 0; i < dh; ++i) {
                        kg[i] = fk * kg[i];
                        vg[i] = fv * vg[i];
                    }
                }
            }
            for (int h = 0; h < H; ++h) {
                kernels::rope_row(q.data() + r * qd + h * dh, rope.cos_at(pos), rope.sin_at(pos), dh);
            }
            for (int g = 0; g < KV; ++g) {
                kernels::rope_row(k.data() + r * kvd + g * dh, rope.cos_at(pos), rope.sin_at(pos), dh);
            }
            DecodeState& st = *states[rows[static_cast<std::size_t>(r)].state];
            auto& kc = st.keys_[static_cast<std::size_t>(l)];
            auto& vc = st.values_[static_cast<std::size_t>(l)];
            kc.insert(kc.end(), k.begin() + r * kvd, k.begin() + (r + 1) * kvd);
            vc.insert(vc.end(), v.begin() + r * kvd, v.begin() + (r + 1) * kvd);
        }
        for (int r = 0; r < N; ++r) {
            const int pos = rows[static_cast<std::size_t>(r)].pos;
            const DecodeState& st = *states[rows[static_cast<std::size_t>(r)].state];
            const auto& kc = st.keys_[static_cast<std::size_t>(l)];
            const auto& vc = st.values_[static_cast<std::size_t>(l)];
            for (int h = 0; h < H; ++h) {
                const int g = h / G;
                kernels::attend_row(q.data() + r * qd + h * dh, kc.data() + g * dh, kvd, vc.data() + g * dh, kvd,
                                    pos + 1, dh, scale, probs.data(), attn.data() + r * qd + h * dh);
            }
        }
        kernels::linear_nt(attn.data(), N, qd, W(TensorKind::wo, l), d, tmp.data());
        for (std::size_t i = 0; i < n * d; ++i) {
            x[i] = x[i] + tmp[i];
        }
        const float* g2 = W(TensorKind::mlp_norm, l);
        for (int r = 0; r < N; ++r) {
            kernels::rmsnorm_row(x.data() + r * d, g2, d, eps, xn.data() + r * d);
        }
        kernels::linear_nt(xn.data(), N, d, W(TensorKind::w_up, l), F, up.data());
        kernels::linear_nt(xn.data(), N, d, W(TensorKind::w_gate, l), F, gate.data());
        const std::size_t nbase = mbase + static_cast<std::size_t>(H + 2 * KV);
        for (int r = 0; r < N; ++r) {
            for (int j = 0; j < F; ++j) {
                const std::size_t i = static_cast<std::size_t>(r) * F + j;
                const float hv = kernels::silu(gate[i]) * up[i];
                hid[i] = mask.empty() ? hv : mask_factor(mask, nbase + j) * hv;
            }
        }
        kernels::linear_nt(hid.data(), N, F, W(TensorKind::w_down, l), d, tmp.data());
        for (std::size_t i = 0; i < n * d; ++i) {
            x[i] = x[i] + tmp[i];
        }
        if (!all_finite(x)) {
            throw NumericError("non-finite activation while decoding", l);
        }
    }

    // final norm and unembedding for the last row of each state
    const float* gf = W(TensorKind::final_norm);
    std::size_t r = 0;
    for (std::size_t s = 0; s < states.size(); ++s) {
        DecodeState& st = *states[s];
        st.tokens_.insert(st.tokens_.end(), tokens[s].begin(), tokens[s].end());
        r += tokens[s].size();
        if (tokens[s].empty()) {
            continue;
        }
        std::vector<float> xf(static_cast<std::size_t>(d));
        kernels::rmsnorm_row(x.data() + (r - 1) * d, gf, d, eps, xf.data());
        st.last_logits_.assign(static_cast<std::size_t>(cfg.vocab_size), 0.0f);
        kernels::linear_nt(xf.data(), 1, d, W(TensorKind::unembedding), cfg.vocab_size, st.last_logits_.data());
    }
}

}  // namespace cca
