#include "barstream/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

namespace barstream::model {

namespace {

constexpr double kLnEps = 1e-5;

// --- config / layout ---------------------------------------------------------

void push(std::vector<TensorSpec>& v, std::size_t& off, std::string name,
          std::size_t rows, std::size_t cols, bool decay) {
    v.push_back({std::move(name), rows, cols, off, decay});
    off += rows * cols;
}

void push_block(std::vector<TensorSpec>& v, std::size_t& off, const std::string& prefix,
                std::size_t H) {
    push(v, off, prefix + ".ln1.g", H, 1, false);
    push(v, off, prefix + ".ln1.b", H, 1, false);
    push(v, off, prefix + ".qkv.w", H, 3 * H, true);
    push(v, off, prefix + ".qkv.b", 3 * H, 1, false);
    push(v, off, prefix + ".attn_out.w", H, H, true);
    push(v, off, prefix + ".attn_out.b", H, 1, false);
    push(v, off, prefix + ".ln2.g", H, 1, false);
    push(v, off, prefix + ".ln2.b", H, 1, false);
    push(v, off, prefix + ".mlp_fc.w", H, 4 * H, true);
    push(v, off, prefix + ".mlp_fc.b", 4 * H, 1, false);
    push(v, off, prefix + ".mlp_out.w", 4 * H, H, true);
    push(v, off, prefix + ".mlp_out.b", H, 1, false);
}

} // namespace

ModelConfig ModelConfig::desk() { return {}; }

ModelConfig ModelConfig::paper_scale() {
    ModelConfig cfg;
    cfg.patch_layers = 20;
    cfg.char_layers = 6;
    cfg.hidden = 1280;
    cfg.heads = 20;
    cfg.context_patches = 1024;
    return cfg;
}

void ModelConfig::validate() const {
    if (hidden <= 0 || heads <= 0 || hidden % heads != 0)
        throw Error("hidden size must be a positive multiple of heads");
    if (context_patches < 2) throw Error("context must be at least 2 patches");
    if (patch_size < 4) throw Error("patch size must be at least 4");
    if (vocab < 4) throw Error("vocab must cover bytes plus specials");
    if (patch_layers < 1 || char_layers < 1) throw Error("need at least one layer per level");
}

ParamLayout build_layout(const ModelConfig& cfg) {
    cfg.validate();
    std::size_t H = static_cast<std::size_t>(cfg.hidden);
    std::size_t S = static_cast<std::size_t>(cfg.patch_size);
    std::size_t V = static_cast<std::size_t>(cfg.vocab);
    ParamLayout layout;
    std::size_t off = 0;
    auto& v = layout.tensors;
    push(v, off, "patch_embed.w", S * V, H, true);
    push(v, off, "patch_pos.w", static_cast<std::size_t>(cfg.context_patches), H, true);
    for (int i = 0; i < cfg.patch_layers; ++i) push_block(v, off, "p" + std::to_string(i), H);
    push(v, off, "patch_final.ln.g", H, 1, false);
    push(v, off, "patch_final.ln.b", H, 1, false);
    push(v, off, "char_proj.w", H, H, true);
    push(v, off, "char_proj.b", H, 1, false);
    push(v, off, "char_embed.w", V, H, true);
    push(v, off, "char_pos.w", S, H, true);
    for (int i = 0; i < cfg.char_layers; ++i) push_block(v, off, "c" + std::to_string(i), H);
    push(v, off, "char_final.ln.g", H, 1, false);
    push(v, off, "char_final.ln.b", H, 1, false);
    push(v, off, "head.w", H, V, true);
    push(v, off, "head.b", V, 1, false);
    layout.total = off;
    return layout;
}

std::size_t param_count(const ModelConfig& cfg) { return build_layout(cfg).total; }

const TensorSpec& ParamLayout::find(const std::string& name) const {
    for (const TensorSpec& t : tensors)
        if (t.name == name) return t;
    throw Error("no such tensor: " + name);
}

double* Policy::tensor(const ParamLayout& layout, const std::string& name) {
    return params.data() + layout.find(name).offset;
}

Policy init_policy(const ModelConfig& cfg) {
    ParamLayout layout = build_layout(cfg);
    Policy policy;
    policy.config = cfg;
    policy.params.assign(layout.total, 0.0);
    Rng rng(cfg.seed);
    for (const TensorSpec& t : layout.tensors) {
        double* p = policy.params.data() + t.offset;
        if (t.cols > 1) {
            for (std::size_t i = 0; i < t.size(); ++i) p[i] = rand_normal(rng, 0.0, 0.02);
        } else if (t.name.size() > 2 && t.name.substr(t.name.size() - 2) == ".g") {
            std::fill(p, p + t.size(), 1.0);
        }
        // biases and LayerNorm offsets stay zero
    }
    return policy;
}

// --- math primitives ---------------------------------------------------------

namespace {

// y[T,N] = x[T,K] w[K,N] (+ b[N])
void matmul(const double* x, const double* w, const double* b, double* y, std::size_t T,
            std::size_t K, std::size_t N) {
    for (std::size_t t = 0; t < T; ++t) {
        double* yr = y + t * N;
        if (b) std::memcpy(yr, b, N * sizeof(double));
        else std::fill(yr, yr + N, 0.0);
        const double* xr = x + t * K;
        for (std::size_t k = 0; k < K; ++k) {
            double xv = xr[k];
            const double* wr = w + k * N;
            for (std::size_t n = 0; n < N; ++n) yr[n] += xv * wr[n];
        }
    }
}

// dx[T,K] += dy[T,N] w^T; dw[K,N] += x^T dy; db[N] += col-sums of dy
void matmul_backward(const double* x, const double* w, const double* dy, double* dx,
                     double* dw, double* db, std::size_t T, std::size_t K, std::size_t N) {
    for (std::size_t t = 0; t < T; ++t) {
        const double* dyr = dy + t * N;
        const double* xr = x + t * K;
        if (dx) {
            double* dxr = dx + t * K;
            for (std::size_t k = 0; k < K; ++k) {
                const double* wr = w + k * N;
                double acc = 0;
                for (std::size_t n = 0; n < N; ++n) acc += dyr[n] * wr[n];
                dxr[k] += acc;
            }
        }
        for (std::size_t k = 0; k < K; ++k) {
            double xv = xr[k];
            double* dwr = dw + k * N;
            for (std::size_t n = 0; n < N; ++n) dwr[n] += xv * dyr[n];
        }
        if (db)
            for (std::size_t n = 0; n < N; ++n) db[n] += dyr[n];
    }
}

void layernorm_forward(const double* x, const double* g, const double* b, double* y,
                       double* mean, double* rstd, std::size_t T, std::size_t H) {
    for (std::size_t t = 0; t < T; ++t) {
        const double* xr = x + t * H;
        double mu = 0;
        for (std::size_t i = 0; i < H; ++i) mu += xr[i];
        mu /= static_cast<double>(H);
        double var = 0;
        for (std::size_t i = 0; i < H; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<double>(H);
        double rs = 1.0 / std::sqrt(var + kLnEps);
        mean[t] = mu;
        rstd[t] = rs;
        double* yr = y + t * H;
        for (std::size_t i = 0; i < H; ++i) yr[i] = g[i] * (xr[i] - mu) * rs + b[i];
    }
}

void layernorm_backward(const double* x, const double* g, const double* mean,
                        const double* rstd, const double* dy, double* dx, double* dg,
                        double* db, std::size_t T, std::size_t H) {
    for (std::size_t t = 0; t < T; ++t) {
        const double* xr = x + t * H;
        const double* dyr = dy + t * H;
        double mu = mean[t], rs = rstd[t];
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (std::size_t i = 0; i < H; ++i) {
            double xhat = (xr[i] - mu) * rs;
            double dxhat = dyr[i] * g[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[i] += dyr[i] * xhat;
            db[i] += dyr[i];
        }
        double invH = 1.0 / static_cast<double>(H);
        double* dxr = dx + t * H;
        for (std::size_t i = 0; i < H; ++i) {
            double xhat = (xr[i] - mu) * rs;
            double dxhat = dyr[i] * g[i];
            dxr[i] += rs * (dxhat - invH * sum_dxhat - xhat * invH * sum_dxhat_xhat);
        }
    }
}

double gelu(double x) {
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
    constexpr double c = 0.7978845608028654;
    double u = c * (x + 0.044715 * x * x * x);
    double th = std::tanh(u);
    double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

// Causal multi-head attention over packed qkv rows [T, 3H].
void attn_forward(const double* qkv, double* att, double* ctx, std::size_t T, int heads,
                  std::size_t H) {
    std::size_t dh = H / static_cast<std::size_t>(heads);
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::fill(ctx, ctx + T * H, 0.0);
    for (int h = 0; h < heads; ++h) {
        std::size_t hoff = static_cast<std::size_t>(h) * dh;
        double* ah = att + static_cast<std::size_t>(h) * T * T;
        for (std::size_t i = 0; i < T; ++i) {
            const double* qi = qkv + i * 3 * H + hoff;
            double* arow = ah + i * T;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                const double* kj = qkv + j * 3 * H + H + hoff;
                double s = 0;
                for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                s *= scale;
                arow[j] = s;
                mx = std::max(mx, s);
            }
            double denom = 0;
            for (std::size_t j = 0; j <= i; ++j) {
                arow[j] = std::exp(arow[j] - mx);
                denom += arow[j];
            }
            for (std::size_t j = 0; j <= i; ++j) arow[j] /= denom;
            for (std::size_t j = i + 1; j < T; ++j) arow[j] = 0;
            double* ci = ctx + i * H + hoff;
            for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = qkv + j * 3 * H + 2 * H + hoff;
                double a = arow[j];
                for (std::size_t d = 0; d < dh; ++d) ci[d] += a * vj[d];
            }
        }
    }
}

void attn_backward(const double* qkv, const double* att, const double* dctx, double* dqkv,
                   std::size_t T, int heads, std::size_t H) {
    std::size_t dh = H / static_cast<std::size_t>(heads);
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> da(T);
    for (int h = 0; h < heads; ++h) {
        std::size_t hoff = static_cast<std::size_t>(h) * dh;
        const double* ah = att + static_cast<std::size_t>(h) * T * T;
        for (std::size_t i = 0; i < T; ++i) {
            const double* arow = ah + i * T;
            const double* dci = dctx + i * H + hoff;
            // dv and da
            double dot = 0;
            for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = qkv + j * 3 * H + 2 * H + hoff;
                double* dvj = dqkv + j * 3 * H + 2 * H + hoff;
                double d = 0;
                for (std::size_t dd = 0; dd < dh; ++dd) {
                    d += dci[dd] * vj[dd];
                    dvj[dd] += arow[j] * dci[dd];
                }
                da[j] = d;
                dot += arow[j] * d;
            }
            // softmax backward, then q/k
            const double* qi = qkv + i * 3 * H + hoff;
            double* dqi = dqkv + i * 3 * H + hoff;
            for (std::size_t j = 0; j <= i; ++j) {
                double ds = arow[j] * (da[j] - dot) * scale;
                const double* kj = qkv + j * 3 * H + H + hoff;
                double* dkj = dqkv + j * 3 * H + H + hoff;
                for (std::size_t dd = 0; dd < dh; ++dd) {
                    dqi[dd] += ds * kj[dd];
                    dkj[dd] += ds * qi[dd];
                }
            }
        }
    }
}

// --- transformer stacks ------------------------------------------------------

struct BlockPtrs {
    const double *ln1g, *ln1b, *qkvw, *qkvb, *aow, *aob;
    const double *ln2g, *ln2b, *fcw, *fcb, *mow, *mob;
    double *d_ln1g, *d_ln1b, *d_qkvw, *d_qkvb, *d_aow, *d_aob;
    double *d_ln2g, *d_ln2b, *d_fcw, *d_fcb, *d_mow, *d_mob;
};

struct StackPtrs {
    std::vector<BlockPtrs> blocks;
    const double *fing, *finb;
    double *d_fing, *d_finb;
};

struct ModelPtrs {
    const ModelConfig* cfg;
    ParamLayout layout;
    const double* P;
    double* G = nullptr; // may be null when no gradient requested
    StackPtrs patch, chr;
    const double *pew, *ppw, *cpw, *cpb, *cew, *cposw, *hw, *hb;
    double *d_pew, *d_ppw, *d_cpw, *d_cpb, *d_cew, *d_cposw, *d_hw, *d_hb;
};

StackPtrs resolve_stack(const ParamLayout& layout, const double* P, double* G,
                        const std::string& prefix, int layers, const std::string& final_name) {
    StackPtrs s;
    auto p = [&](const std::string& n) { return P + layout.find(n).offset; };
    auto g = [&](const std::string& n) -> double* {
        return G ? G + layout.find(n).offset : nullptr;
    };
    for (int i = 0; i < layers; ++i) {
        std::string b = prefix + std::to_string(i);
        BlockPtrs bp{};
        bp.ln1g = p(b + ".ln1.g");
        bp.ln1b = p(b + ".ln1.b");
        bp.qkvw = p(b + ".qkv.w");
        bp.qkvb = p(b + ".qkv.b");
        bp.aow = p(b + ".attn_out.w");
        bp.aob = p(b + ".attn_out.b");
        bp.ln2g = p(b + ".ln2.g");
        bp.ln2b = p(b + ".ln2.b");
        bp.fcw = p(b + ".mlp_fc.w");
        bp.fcb = p(b + ".mlp_fc.b");
        bp.mow = p(b + ".mlp_out.w");
        bp.mob = p(b + ".mlp_out.b");
        bp.d_ln1g = g(b + ".ln1.g");
        bp.d_ln1b = g(b + ".ln1.b");
        bp.d_qkvw = g(b + ".qkv.w");
        bp.d_qkvb = g(b + ".qkv.b");
        bp.d_aow = g(b + ".attn_out.w");
        bp.d_aob = g(b + ".attn_out.b");
        bp.d_ln2g = g(b + ".ln2.g");
        bp.d_ln2b = g(b + ".ln2.b");
        bp.d_fcw = g(b + ".mlp_fc.w");
        bp.d_fcb = g(b + ".mlp_fc.b");
        bp.d_mow = g(b + ".mlp_out.w");
        bp.d_mob = g(b + ".mlp_out.b");
        s.blocks.push_back(bp);
    }
    s.fing = p(final_name + ".ln.g");
    s.finb = p(final_name + ".ln.b");
    s.d_fing = g(final_name + ".ln.g");
    s.d_finb = g(final_name + ".ln.b");
    return s;
}

ModelPtrs resolve_model(const Policy& policy, double* grad) {
    ModelPtrs m;
    m.cfg = &policy.config;
    m.layout = build_layout(policy.config);
    m.P = policy.params.data();
    m.G = grad;
    auto p = [&](const std::string& n) { return m.P + m.layout.find(n).offset; };
    auto g = [&](const std::string& n) -> double* {
        return grad ? grad + m.layout.find(n).offset : nullptr;
    };
    m.patch = resolve_stack(m.layout, m.P, grad, "p", policy.config.patch_layers, "patch_final");
    m.chr = resolve_stack(m.layout, m.P, grad, "c", policy.config.char_layers, "char_final");
    m.pew = p("patch_embed.w");
    m.ppw = p("patch_pos.w");
    m.cpw = p("char_proj.w");
    m.cpb = p("char_proj.b");
    m.cew = p("char_embed.w");
    m.cposw = p("char_pos.w");
    m.hw = p("head.w");
    m.hb = p("head.b");
    m.d_pew = g("patch_embed.w");
    m.d_ppw = g("patch_pos.w");
    m.d_cpw = g("char_proj.w");
    m.d_cpb = g("char_proj.b");
    m.d_cew = g("char_embed.w");
    m.d_cposw = g("char_pos.w");
    m.d_hw = g("head.w");
    m.d_hb = g("head.b");
    return m;
}

struct BlockCache {
    std::vector<double> x, ln1, qkv, att, ctx, res, ln2, fc, act;
    std::vector<double> m1, r1, m2, r2;
};

struct StackCache {
    std::vector<BlockCache> blocks;
    std::vector<double> fin, out;
    std::vector<double> mf, rf;
};

void block_forward(const BlockPtrs& bp, double* x, BlockCache& c, std::size_t T,
                   int heads, std::size_t H) {
    c.x.assign(x, x + T * H);
    c.ln1.resize(T * H);
    c.m1.resize(T);
    c.r1.resize(T);
    layernorm_forward(x, bp.ln1g, bp.ln1b, c.ln1.data(), c.m1.data(), c.r1.data(), T, H);
    c.qkv.resize(T * 3 * H);
    matmul(c.ln1.data(), bp.qkvw, bp.qkvb, c.qkv.data(), T, H, 3 * H);
    c.att.assign(static_cast<std::size_t>(heads) * T * T, 0.0);
    c.ctx.resize(T * H);
    attn_forward(c.qkv.data(), c.att.data(), c.ctx.data(), T, heads, H);
    std::vector<double> attn_out(T * H);
    matmul(c.ctx.data(), bp.aow, bp.aob, attn_out.data(), T, H, H);
    c.res.resize(T * H);
    for (std::size_t i = 0; i < T * H; ++i) c.res[i] = x[i] + attn_out[i];
    c.ln2.resize(T * H);
    c.m2.resize(T);
    c.r2.resize(T);
    layernorm_forward(c.res.data(), bp.ln2g, bp.ln2b, c.ln2.data(), c.m2.data(), c.r2.data(),
                      T, H);
    c.fc.resize(T * 4 * H);
    matmul(c.ln2.data(), bp.fcw, bp.fcb, c.fc.data(), T, H, 4 * H);
    c.act.resize(T * 4 * H);
    for (std::size_t i = 0; i < T * 4 * H; ++i) c.act[i] = gelu(c.fc[i]);
    std::vector<double> mlp_out(T * H);
    matmul(c.act.data(), bp.mow, bp.mob, mlp_out.data(), T, 4 * H, H);
    // block output overwrites the caller's buffer
    for (std::size_t i = 0; i < T * H; ++i) x[i] = c.res[i] + mlp_out[i];
}

void stack_forward(const StackPtrs& sp, double* x, StackCache& cache, std::size_t T,
                   int heads, std::size_t H) {
    cache.blocks.resize(sp.blocks.size());
    for (std::size_t l = 0; l < sp.blocks.size(); ++l)
        block_forward(sp.blocks[l], x, cache.blocks[l], T, heads, H);
    cache.fin.assign(x, x + T * H);
    cache.out.resize(T * H);
    cache.mf.resize(T);
    cache.rf.resize(T);
    layernorm_forward(cache.fin.data(), sp.fing, sp.finb, cache.out.data(), cache.mf.data(),
                      cache.rf.data(), T, H);
}

void block_backward(const BlockPtrs& bp, const BlockCache& c, double* dout, std::size_t T,
                    int heads, std::size_t H) {
    // dout on entry: gradient wrt block output; on exit: gradient wrt block input.
    std::vector<double> dact(T * 4 * H, 0.0);
    matmul_backward(c.act.data(), bp.mow, dout, dact.data(), bp.d_mow, bp.d_mob, T, 4 * H, H);
    std::vector<double> dfc(T * 4 * H);
    for (std::size_t i = 0; i < T * 4 * H; ++i) dfc[i] = dact[i] * gelu_grad(c.fc[i]);
    std::vector<double> dln2(T * H, 0.0);
    matmul_backward(c.ln2.data(), bp.fcw, dfc.data(), dln2.data(), bp.d_fcw, bp.d_fcb, T, H,
                    4 * H);
    // residual: dres = dout (mlp path adds dln2 through layernorm)
    std::vector<double> dres(dout, dout + T * H);
    layernorm_backward(c.res.data(), bp.ln2g, c.m2.data(), c.r2.data(), dln2.data(),
                       dres.data(), bp.d_ln2g, bp.d_ln2b, T, H);
    std::vector<double> dctx(T * H, 0.0);
    matmul_backward(c.ctx.data(), bp.aow, dres.data(), dctx.data(), bp.d_aow, bp.d_aob, T, H,
                    H);
    std::vector<double> dqkv(T * 3 * H, 0.0);
    attn_backward(c.qkv.data(), c.att.data(), dctx.data(), dqkv.data(), T, heads, H);
    std::vector<double> dln1(T * H, 0.0);
    matmul_backward(c.ln1.data(), bp.qkvw, dqkv.data(), dln1.data(), bp.d_qkvw, bp.d_qkvb, T,
                    H, 3 * H);
    // dx = dres (attn residual) + ln1 backward contribution
    std::memcpy(dout, dres.data(), T * H * sizeof(double));
    layernorm_backward(c.x.data(), bp.ln1g, c.m1.data(), c.r1.data(), dln1.data(), dout,
                       bp.d_ln1g, bp.d_ln1b, T, H);
}

void stack_backward(const StackPtrs& sp, const StackCache& cache, double* dout,
                    std::size_t T, int heads, std::size_t H) {
    std::vector<double> dfin(T * H, 0.0);
    layernorm_backward(cache.fin.data(), sp.fing, cache.mf.data(), cache.rf.data(), dout,
                       dfin.data(), sp.d_fing, sp.d_finb, T, H);
    std::memcpy(dout, dfin.data(), T * H * sizeof(double));
    for (std::size_t l = sp.blocks.size(); l-- > 0;)
        block_backward(sp.blocks[l], cache.blocks[l], dout, T, heads, H);
}

// --- patch / char level wiring ----------------------------------------------

std::vector<double> embed_patches(const ModelPtrs& m, const patching::PatchSequence& ps) {
    std::size_t H = static_cast<std::size_t>(m.cfg->hidden);
    std::size_t V = static_cast<std::size_t>(m.cfg->vocab);
    std::size_t P = ps.patches.size();
    std::vector<double> x(P * H, 0.0);
    for (std::size_t k = 0; k < P; ++k) {
        double* xr = x.data() + k * H;
        const auto& chars = ps.patches[k].chars;
        for (std::size_t i = 0; i < chars.size(); ++i) {
            const double* row = m.pew + (i * V + chars[i]) * H;
            for (std::size_t d = 0; d < H; ++d) xr[d] += row[d];
        }
        const double* pos = m.ppw + k * H;
        for (std::size_t d = 0; d < H; ++d) xr[d] += pos[d];
    }
    return x;
}

// Char-decoder input for one row: broadcast patch feature + teacher-forced
// previous characters + within-patch positions.
void build_row_input(const ModelPtrs& m, const double* ph, const std::uint16_t* teacher,
                     double* x) {
    std::size_t H = static_cast<std::size_t>(m.cfg->hidden);
    std::size_t S = static_cast<std::size_t>(m.cfg->patch_size);
    for (std::size_t i = 0; i < S; ++i) {
        double* xr = x + i * H;
        const double* pos = m.cposw + i * H;
        for (std::size_t d = 0; d < H; ++d) xr[d] = ph[d] + pos[d];
        if (i > 0) {
            const double* emb = m.cew + static_cast<std::size_t>(teacher[i - 1]) * H;
            for (std::size_t d = 0; d < H; ++d) xr[d] += emb[d];
        }
    }
}

struct RowCache {
    std::vector<double> h;   // patch hidden driving the row
    std::vector<double> ph;  // projected feature
    std::vector<double> x;   // row input
    StackCache stack;
    std::vector<double> logits; // [S,V]
};

void row_forward(const ModelPtrs& m, const double* h, const std::uint16_t* teacher,
                 RowCache& rc) {
    std::size_t H = static_cast<std::size_t>(m.cfg->hidden);
    std::size_t S = static_cast<std::size_t>(m.cfg->patch_size);
    std::size_t V = static_cast<std::size_t>(m.cfg->vocab);
    rc.h.assign(h, h + H);
    rc.ph.resize(H);
    matmul(h, m.cpw, m.cpb, rc.ph.data(), 1, H, H);
    rc.x.resize(S * H);
    build_row_input(m, rc.ph.data(), teacher, rc.x.data());
    stack_forward(m.chr, rc.x.data(), rc.stack, S, m.cfg->heads, H);
    rc.logits.resize(S * V);
    matmul(rc.stack.out.data(), m.hw, m.hb, rc.logits.data(), S, H, V);
}

// Backward from dlogits to the row's patch hidden gradient.
void row_backward(const ModelPtrs& m, const RowCache& rc, const std::uint16_t* teacher,
                  const double* dlogits, double* dh) {
    std::size_t H = static_cast<std::size_t>(m.cfg->hidden);
    std::size_t S = static_cast<std::size_t>(m.cfg->patch_size);
    std::size_t V = static_cast<std::size_t>(m.cfg->vocab);
    std::vector<double> dout(S * H, 0.0);
    matmul_backward(rc.stack.out.data(), m.hw, dlogits, dout.data(), m.d_hw, m.d_hb, S, H, V);
    stack_backward(m.chr, rc.stack, dout.data(), S, m.cfg->heads, H);
    // dout now holds d(row input)
    std::vector<double> dph(H, 0.0);
    for (std::size_t i = 0; i < S; ++i) {
        const double* dxr = dout.data() + i * H;
        double* dpos = m.d_cposw + i * H;
        for (std::size_t d = 0; d < H; ++d) {
            dph[d] += dxr[d];
            dpos[d] += dxr[d];
        }
        if (i > 0) {
            double* demb = m.d_cew + static_cast<std::size_t>(teacher[i - 1]) * H;
            for (std::size_t d = 0; d < H; ++d) demb[d] += dxr[d];
        }
    }
    matmul_backward(rc.h.data(), m.cpw, dph.data(), dh, m.d_cpw, m.d_cpb, 1, H, H);
}

std::vector<std::uint16_t> pad_teacher(const ModelPtrs& m) {
    return std::vector<std::uint16_t>(static_cast<std::size_t>(m.cfg->patch_size),
                                      patching::pad_code(static_cast<std::size_t>(m.cfg->vocab)));
}

// log softmax value at the target index.
double log_prob_at(const double* logits, std::size_t V, std::uint16_t target) {
    double mx = logits[0];
    for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, logits[v]);
    double denom = 0;
    for (std::size_t v = 0; v < V; ++v) denom += std::exp(logits[v] - mx);
    return logits[target] - mx - std::log(denom);
}

void check_context(const ModelPtrs& m, const patching::PatchSequence& ps) {
    if (ps.patches.size() > static_cast<std::size_t>(m.cfg->context_patches))
        throw ContextOverflow("sequence of " + std::to_string(ps.patches.size()) +
                              " patches exceeds context of " +
                              std::to_string(m.cfg->context_patches));
    if (static_cast<int>(ps.patch_size) != m.cfg->patch_size ||
        static_cast<int>(ps.vocab) != m.cfg->vocab)
        throw Error("patch sequence geometry does not match the model config");
}

} // namespace

std::size_t scored_length(const patching::Patch& p, std::size_t vocab) {
    std::uint16_t pad = patching::pad_code(vocab);
    std::size_t S = p.chars.size();
    for (std::size_t i = 0; i < S; ++i)
        if (p.chars[i] == pad) return i + 1; // content plus the PAD terminator
    return S;
}

Logits forward(const Policy& policy, const patching::PatchSequence& ps) {
    ModelPtrs m = resolve_model(policy, nullptr);
    check_context(m, ps);
    std::size_t H = static_cast<std::size_t>(m.cfg->hidden);
    std::size_t S = static_cast<std::size_t>(m.cfg->patch_size);
    std::size_t V = static_cast<std::size_t>(m.cfg->vocab);
    std::size_t P = ps.patches.size();

    std::vector<double> x = embed_patches(m, ps);
    StackCache patch_cache;
    stack_forward(m.patch, x.data(), patch_cache, P, m.cfg->heads, H);

    Logits out;
    out.patches = P;
    out.patch_size = S;
    out.vocab = V;
    out.data.resize(P * S * V);
    std::vector<std::uint16_t> pad = pad_teacher(m);
    RowCache rc;
    for (std::size_t k = 0; k < P; ++k) {
        const std::uint16_t* teacher =
            k + 1 < P ? ps.patches[k + 1].chars.data() : pad.data();
        row_forward(m, patch_cache.out.data() + k * H, teacher, rc);
        std::memcpy(out.data.data() + k * S * V, rc.logits.data(),
                    S * V * sizeof(double));
    }
    return out;
}

namespace {

// Shared train/eval pass. When grad is non-null, accumulates parameter
// gradients scaled by 1/total_scored.
double nll_pass(const Policy& policy, const std::vector<patching::PatchSequence>& batch,
                std::vector<double>* grad) {
    if (batch.empty()) throw Error("empty batch");
    ModelPtrs m = resolve_model(policy, grad ? grad->data() : nullptr);
    std::size_t H = static_cast<std::size_t>(m.cfg->hidden);
    std::size_t S = static_cast<std::size_t>(m.cfg->patch_size);
    std::size_t V = static_cast<std::size_t>(m.cfg->vocab);

    std::size_t total = 0;
    for (const auto& ps : batch) {
        check_context(m, ps);
        for (std::size_t t = 1; t < ps.patches.size(); ++t)
            total += scored_length(ps.patches[t], V);
    }
    if (total == 0) throw Error("batch has no scored positions");
    double inv = 1.0 / static_cast<double>(total);

    double loss = 0;
    for (const auto& ps : batch) {
        std::size_t P = ps.patches.size();
        std::vector<double> x = embed_patches(m, ps);
        StackCache patch_cache;
        stack_forward(m.patch, x.data(), patch_cache, P, m.cfg->heads, H);
        std::vector<double> dH(grad ? P * H : 0, 0.0);
        RowCache rc;
        std::vector<double> dlogits;
        for (std::size_t k = 0; k + 1 < P; ++k) {
            const patching::Patch& target = ps.patches[k + 1];
            std::size_t scored = scored_length(target, V);
            row_forward(m, patch_cache.out.data() + k * H, target.chars.data(), rc);
            if (grad) dlogits.assign(S * V, 0.0);
            for (std::size_t i = 0; i < scored; ++i) {
                const double* lg = rc.logits.data() + i * V;
                double lp = log_prob_at(lg, V, target.chars[i]);
                loss -= lp * inv;
                if (grad) {
                    double mx = lg[0];
                    for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, lg[v]);
                    double denom = 0;
                    for (std::size_t v = 0; v < V; ++v) denom += std::exp(lg[v] - mx);
                    double* dl = dlogits.data() + i * V;
                    for (std::size_t v = 0; v < V; ++v)
                        dl[v] = std::exp(lg[v] - mx) / denom * inv;
                    dl[target.chars[i]] -= inv;
                }
            }
            if (grad)
                row_backward(m, rc, target.chars.data(), dlogits.data(), dH.data() + k * H);
        }
        if (grad) {
            stack_backward(m.patch, patch_cache, dH.data(), P, m.cfg->heads, H);
            // embedding and position gradients
            for (std::size_t k = 0; k < P; ++k) {
                const double* dxr = dH.data() + k * H;
                double* dpos = m.d_ppw + k * H;
                for (std::size_t d = 0; d < H; ++d) dpos[d] += dxr[d];
                const auto& chars = ps.patches[k].chars;
                for (std::size_t i = 0; i < chars.size(); ++i) {
                    double* row = m.d_pew + (i * V + chars[i]) * H;
                    for (std::size_t d = 0; d < H; ++d) row[d] += dxr[d];
                }
            }
        }
    }
    return loss;
}

} // namespace

double nll_loss(const Policy& policy, const std::vector<patching::PatchSequence>& batch) {
    return nll_pass(policy, batch, nullptr);
}

double nll_loss_grad(const Policy& policy, const std::vector<patching::PatchSequence>& batch,
                     std::vector<double>& grad) {
    grad.assign(policy.params.size(), 0.0);
    return nll_pass(policy, batch, &grad);
}

double train_step(Policy& policy, const std::vector<patching::PatchSequence>& batch,
                  AdamState& state, const OptimizerConfig& opt) {
    std::vector<double> grad;
    double loss = nll_loss_grad(policy, batch, grad);
    adamw_update(policy, grad, state, opt);
    return loss;
}

void adamw_update(Policy& policy, const std::vector<double>& grad, AdamState& state,
                  const OptimizerConfig& opt) {
    if (grad.size() != policy.params.size())
        throw Error("gradient size does not match the parameter count");
    for (double g : grad)
        if (!std::isfinite(g)) throw NonFiniteGradient("non-finite gradient in adamw_update");

    if (state.m.size() != grad.size()) {
        state.m.assign(grad.size(), 0.0);
        state.v.assign(grad.size(), 0.0);
        state.step = 0;
    }
    ++state.step;
    double t = static_cast<double>(state.step);
    double lr = opt.lr;
    if (opt.warmup_steps > 0)
        lr *= std::min(1.0, t / static_cast<double>(opt.warmup_steps));
    double bc1 = 1.0 - std::pow(opt.beta1, t);
    double bc2 = 1.0 - std::pow(opt.beta2, t);

    ParamLayout layout = build_layout(policy.config);
    for (const TensorSpec& ts : layout.tensors) {
        double wd = ts.decay ? opt.weight_decay : 0.0;
        for (std::size_t i = ts.offset; i < ts.offset + ts.size(); ++i) {
            double g = grad[i];
            state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
            state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
            double mhat = state.m[i] / bc1;
            double vhat = state.v[i] / bc2;
            policy.params[i] -=
                lr * (mhat / (std::sqrt(vhat) + opt.eps) + wd * policy.params[i]);
        }
    }
}

// --- sequence scoring --------------------------------------------------------

namespace {

struct ScoredTarget {
    std::size_t index = 0;  // target patch position in the full sequence
    std::size_t scored = 0; // scored character count
};

// Tokenizes prompt+piece together and lists the piece's target patches.
struct ScoringPlan {
    patching::PatchSequence ps;
    std::vector<ScoredTarget> targets;
};

ScoringPlan build_scoring_plan(const ModelConfig& cfg, const std::string& prompt_text,
                               const std::string& piece_text, const ScoreOptions& opts) {
    ScoringPlan plan;
    std::vector<patching::Unit> units = patching::segment_units(prompt_text + piece_text);
    plan.ps = patching::to_patches(units, static_cast<std::size_t>(cfg.patch_size),
                                   static_cast<std::size_t>(cfg.vocab));
    if (!opts.with_eos) {
        plan.ps.patches.pop_back();
        plan.ps.source_spans.pop_back();
    }
    if (piece_text.empty()) return plan; // empty piece scores zero by definition

    // absolute char start of each unit
    std::vector<std::size_t> unit_start(units.size() + 1, 0);
    for (std::size_t u = 0; u < units.size(); ++u)
        unit_start[u + 1] = unit_start[u] + units[u].text.size();

    std::size_t V = static_cast<std::size_t>(cfg.vocab);
    for (std::size_t t = 1; t < plan.ps.patches.size(); ++t) {
        const patching::PatchSpan& span = plan.ps.source_spans[t];
        bool is_piece;
        if (span.unit == patching::PatchSpan::npos)
            is_piece = true; // trailing EOS patch belongs to the piece
        else
            is_piece = unit_start[span.unit] + span.offset >= prompt_text.size();
        if (is_piece)
            plan.targets.push_back({t, scored_length(plan.ps.patches[t], V)});
    }
    return plan;
}

// Scores the given targets of one window with a single patch-level pass.
double score_window(const ModelPtrs& m, const patching::PatchSequence& window,
                    std::size_t window_start,
                    const std::vector<const ScoredTarget*>& targets) {
    std::size_t H = static_cast<std::size_t>(m.cfg->hidden);
    std::size_t V = static_cast<std::size_t>(m.cfg->vocab);
    std::size_t P = window.patches.size();
    std::vector<double> x = embed_patches(m, window);
    StackCache cache;
    stack_forward(m.patch, x.data(), cache, P, m.cfg->heads, H);
    double sum = 0;
    RowCache rc;
    for (const ScoredTarget* st : targets) {
        std::size_t row = st->index - 1 - window_start;
        const patching::Patch& target = window.patches[st->index - window_start];
        row_forward(m, cache.out.data() + row * H, target.chars.data(), rc);
        for (std::size_t i = 0; i < st->scored; ++i)
            sum += log_prob_at(rc.logits.data() + i * V, V, target.chars[i]);
    }
    return sum;
}

// score_window with a backward pass: adds scale times the gradient of the
// window's summed log-prob into the grads bound in m.
double score_window_grad(const ModelPtrs& m, const patching::PatchSequence& window,
                         std::size_t window_start,
                         const std::vector<const ScoredTarget*>& targets, double scale) {
    std::size_t H = static_cast<std::size_t>(m.cfg->hidden);
    std::size_t S = static_cast<std::size_t>(m.cfg->patch_size);
    std::size_t V = static_cast<std::size_t>(m.cfg->vocab);
    std::size_t P = window.patches.size();
    std::vector<double> x = embed_patches(m, window);
    StackCache cache;
    stack_forward(m.patch, x.data(), cache, P, m.cfg->heads, H);

    std::vector<double> dH(P * H, 0.0);
    double sum = 0;
    RowCache rc;
    std::vector<double> dlogits;
    for (const ScoredTarget* st : targets) {
        std::size_t row = st->index - 1 - window_start;
        const patching::Patch& target = window.patches[st->index - window_start];
        row_forward(m, cache.out.data() + row * H, target.chars.data(), rc);
        dlogits.assign(S * V, 0.0);
        for (std::size_t i = 0; i < st->scored; ++i) {
            const double* lg = rc.logits.data() + i * V;
            double mx = lg[0];
            for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, lg[v]);
            double denom = 0;
            for (std::size_t v = 0; v < V; ++v) denom += std::exp(lg[v] - mx);
            sum += lg[target.chars[i]] - mx - std::log(denom);
            double* dl = dlogits.data() + i * V;
            for (std::size_t v = 0; v < V; ++v)
                dl[v] = -scale * std::exp(lg[v] - mx) / denom;
            dl[target.chars[i]] += scale;
        }
        row_backward(m, rc, target.chars.data(), dlogits.data(), dH.data() + row * H);
    }
    stack_backward(m.patch, cache, dH.data(), P, m.cfg->heads, H);
    for (std::size_t k = 0; k < P; ++k) {
        const double* dxr = dH.data() + k * H;
        double* dpos = m.d_ppw + k * H;
        for (std::size_t d = 0; d < H; ++d) dpos[d] += dxr[d];
        const auto& chars = window.patches[k].chars;
        for (std::size_t i = 0; i < chars.size(); ++i) {
            double* row = m.d_pew + (i * V + chars[i]) * H;
            for (std::size_t d = 0; d < H; ++d) row[d] += dxr[d];
        }
    }
    return sum;
}

patching::PatchSequence slice_sequence(const patching::PatchSequence& ps, std::size_t start,
                                       std::size_t count) {
    patching::PatchSequence out;
    out.patch_size = ps.patch_size;
    out.vocab = ps.vocab;
    out.patches.assign(ps.patches.begin() + static_cast<std::ptrdiff_t>(start),
                       ps.patches.begin() + static_cast<std::ptrdiff_t>(start + count));
    out.source_spans.assign(ps.source_spans.begin() + static_cast<std::ptrdiff_t>(start),
                            ps.source_spans.begin() + static_cast<std::ptrdiff_t>(start + count));
    return out;
}

} // namespace

double sequence_log_prob(const Policy& policy, const std::string& prompt_text,
                         const std::string& piece_text, const ScoreOptions& opts) {
    ScoringPlan plan = build_scoring_plan(policy.config, prompt_text, piece_text, opts);
    if (plan.targets.empty()) return 0.0;
    ModelPtrs m = resolve_model(policy, nullptr);
    std::size_t P = plan.ps.patches.size();
    std::size_t C = static_cast<std::size_t>(policy.config.context_patches);

    if (P <= C) {
        std::vector<const ScoredTarget*> all;
        for (const ScoredTarget& st : plan.targets) all.push_back(&st);
        return score_window(m, plan.ps, 0, all);
    }
    if (!opts.allow_windowing)
        throw ContextOverflow("sequence exceeds context and windowing is disabled");

    // Sliding windows with 50% overlap; each window scores the targets not yet
    // covered, which past the first window is its second half.
    double sum = 0;
    std::size_t stride = C / 2;
    std::size_t next = 1; // first unscored target position
    for (std::size_t w = 0; next < P; ++w) {
        std::size_t s = std::min(w * stride, P - C);
        std::size_t e = s + C;
        std::vector<const ScoredTarget*> targets;
        for (const ScoredTarget& st : plan.targets)
            if (st.index >= std::max(next, s + 1) && st.index < e) targets.push_back(&st);
        if (!targets.empty())
            sum += score_window(m, slice_sequence(plan.ps, s, C), s, targets);
        next = e;
    }
    return sum;
}

std::size_t scored_char_count(const Policy& policy, const std::string& prompt_text,
                              const std::string& piece_text, const ScoreOptions& opts) {
    ScoringPlan plan = build_scoring_plan(policy.config, prompt_text, piece_text, opts);
    std::size_t n = 0;
    for (const ScoredTarget& st : plan.targets) n += st.scored;
    return n;
}

double sequence_log_prob_grad(const Policy& policy, const std::string& prompt_text,
                              const std::string& piece_text, const ScoreOptions& opts,
                              double scale, std::vector<double>& grad) {
    if (grad.size() != policy.params.size()) grad.assign(policy.params.size(), 0.0);
    ScoringPlan plan = build_scoring_plan(policy.config, prompt_text, piece_text, opts);
    if (plan.targets.empty()) return 0.0;
    ModelPtrs m = resolve_model(policy, grad.data());
    std::size_t P = plan.ps.patches.size();
    std::size_t C = static_cast<std::size_t>(policy.config.context_patches);

    if (P <= C) {
        std::vector<const ScoredTarget*> all;
        for (const ScoredTarget& st : plan.targets) all.push_back(&st);
        return score_window_grad(m, plan.ps, 0, all, scale);
    }
    if (!opts.allow_windowing)
        throw ContextOverflow("sequence exceeds context and windowing is disabled");

    double sum = 0;
    std::size_t stride = C / 2;
    std::size_t next = 1;
    for (std::size_t w = 0; next < P; ++w) {
        std::size_t s = std::min(w * stride, P - C);
        std::size_t e = s + C;
        std::vector<const ScoredTarget*> targets;
        for (const ScoredTarget& st : plan.targets)
            if (st.index >= std::max(next, s + 1) && st.index < e) targets.push_back(&st);
        if (!targets.empty())
            sum += score_window_grad(m, slice_sequence(plan.ps, s, C), s, targets, scale);
        next = e;
    }
    return sum;
}

// --- generation --------------------------------------------------------------

namespace {

// Incremental causal stack: per-layer K/V grow one position at a time.
struct IncStack {
    std::vector<std::vector<double>> K, V; // [layer][t*H]
    std::size_t T = 0;

    void reset(std::size_t layers) {
        K.assign(layers, {});
        V.assign(layers, {});
        T = 0;
    }
};

// Feeds one position through the stack, returns the final-LN hidden state.
std::vector<double> inc_feed(const ModelPtrs& m, const StackPtrs& sp, IncStack& inc,
                             std::vector<double> x) {
    std::size_t H = static_cast<std::size_t>(m.cfg->hidden);
    int heads = m.cfg->heads;
    std::size_t dh = H / static_cast<std::size_t>(heads);
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::size_t t = inc.T;

    std::vector<double> ln(H), qkv(3 * H), ctx(H), tmp(H), mean(1), rstd(1);
    for (std::size_t l = 0; l < sp.blocks.size(); ++l) {
        const BlockPtrs& bp = sp.blocks[l];
        layernorm_forward(x.data(), bp.ln1g, bp.ln1b, ln.data(), mean.data(), rstd.data(), 1,
                          H);
        matmul(ln.data(), bp.qkvw, bp.qkvb, qkv.data(), 1, H, 3 * H);
        inc.K[l].insert(inc.K[l].end(), qkv.begin() + static_cast<std::ptrdiff_t>(H),
                        qkv.begin() + static_cast<std::ptrdiff_t>(2 * H));
        inc.V[l].insert(inc.V[l].end(), qkv.begin() + static_cast<std::ptrdiff_t>(2 * H),
                        qkv.end());
        std::fill(ctx.begin(), ctx.end(), 0.0);
        for (int h = 0; h < heads; ++h) {
            std::size_t hoff = static_cast<std::size_t>(h) * dh;
            const double* q = qkv.data() + hoff;
            std::vector<double> scores(t + 1);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= t; ++j) {
                const double* kj = inc.K[l].data() + j * H + hoff;
                double s = 0;
                for (std::size_t d = 0; d < dh; ++d) s += q[d] * kj[d];
                scores[j] = s * scale;
                mx = std::max(mx, scores[j]);
            }
            double denom = 0;
            for (double& s : scores) {
                s = std::exp(s - mx);
                denom += s;
            }
            double* c = ctx.data() + hoff;
            for (std::size_t j = 0; j <= t; ++j) {
                const double* vj = inc.V[l].data() + j * H + hoff;
                double a = scores[j] / denom;
                for (std::size_t d = 0; d < dh; ++d) c[d] += a * vj[d];
            }
        }
        matmul(ctx.data(), bp.aow, bp.aob, tmp.data(), 1, H, H);
        for (std::size_t d = 0; d < H; ++d) x[d] += tmp[d];
        layernorm_forward(x.data(), bp.ln2g, bp.ln2b, ln.data(), mean.data(), rstd.data(), 1,
                          H);
        std::vector<double> fc(4 * H);
        matmul(ln.data(), bp.fcw, bp.fcb, fc.data(), 1, H, 4 * H);
        for (double& f : fc) f = gelu(f);
        matmul(fc.data(), bp.mow, bp.mob, tmp.data(), 1, 4 * H, H);
        for (std::size_t d = 0; d < H; ++d) x[d] += tmp[d];
    }
    ++inc.T;
    std::vector<double> out(H);
    layernorm_forward(x.data(), sp.fing, sp.finb, out.data(), mean.data(), rstd.data(), 1, H);
    return out;
}

std::vector<double> embed_one_patch(const ModelPtrs& m, const std::vector<std::uint16_t>& chars,
                                    std::size_t pos) {
    std::size_t H = static_cast<std::size_t>(m.cfg->hidden);
    std::size_t V = static_cast<std::size_t>(m.cfg->vocab);
    std::vector<double> x(H, 0.0);
    for (std::size_t i = 0; i < chars.size(); ++i) {
        const double* row = m.pew + (i * V + chars[i]) * H;
        for (std::size_t d = 0; d < H; ++d) x[d] += row[d];
    }
    const double* p = m.ppw + pos * H;
    for (std::size_t d = 0; d < H; ++d) x[d] += p[d];
    return x;
}

std::uint16_t sample_code(const std::vector<double>& logits, const SamplingConfig& sc,
                          Rng& rng) {
    std::size_t V = logits.size();
    if (sc.temperature < 1e-12) {
        std::size_t best = 0;
        for (std::size_t v = 1; v < V; ++v)
            if (logits[v] > logits[best]) best = v;
        return static_cast<std::uint16_t>(best);
    }
    double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> prob(V);
    double denom = 0;
    for (std::size_t v = 0; v < V; ++v) {
        prob[v] = std::exp((logits[v] - mx) / sc.temperature);
        denom += prob[v];
    }
    for (double& p : prob) p /= denom;

    std::vector<std::size_t> order(V);
    for (std::size_t v = 0; v < V; ++v) order[v] = v;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (prob[a] != prob[b]) return prob[a] > prob[b];
        return a < b;
    });
    double cum = 0;
    std::size_t keep = V;
    for (std::size_t r = 0; r < V; ++r) {
        cum += prob[order[r]];
        if (cum >= sc.top_p) {
            keep = r + 1;
            break;
        }
    }
    double mass = 0;
    for (std::size_t r = 0; r < keep; ++r) mass += prob[order[r]];
    double u = rand_unit(rng) * mass;
    for (std::size_t r = 0; r < keep; ++r) {
        u -= prob[order[r]];
        if (u <= 0) return static_cast<std::uint16_t>(order[r]);
    }
    return static_cast<std::uint16_t>(order[keep - 1]);
}

// Countdown m from a "[r:k/m]" prefix; -1 when absent.
long line_countdown(std::string_view line) {
    if (line.rfind("[r:", 0) != 0) return -1;
    std::size_t close = line.find(']');
    if (close == std::string_view::npos) return -1;
    std::string_view body = line.substr(3, close - 3);
    std::size_t slash = body.find('/');
    if (slash == std::string_view::npos) return -1;
    std::string_view m = body.substr(slash + 1);
    if (m.empty()) return -1;
    long val = 0;
    for (char c : m) {
        if (c < '0' || c > '9') return -1;
        val = val * 10 + (c - '0');
    }
    return val;
}

} // namespace

std::string stream_reseed_text(const std::string& generated_text) {
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos < generated_text.size()) {
        std::size_t nl = generated_text.find('\n', pos);
        if (nl == std::string::npos) {
            lines.push_back(generated_text.substr(pos));
            break;
        }
        lines.push_back(generated_text.substr(pos, nl - pos + 1));
        pos = nl + 1;
    }
    std::size_t body_start = lines.size();
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].rfind("K:", 0) == 0) {
            body_start = i + 1;
            break;
        }
    }
    std::string out;
    for (std::size_t i = 0; i < body_start; ++i) out += lines[i];
    std::size_t n = lines.size() - body_start;
    for (std::size_t i = body_start + n / 2; i < lines.size(); ++i) out += lines[i];
    return out;
}

std::string generate(const Policy& policy, const std::string& prompt_text,
                     const SamplingConfig& sampling, GenerateStats* stats) {
    ModelPtrs m = resolve_model(policy, nullptr);
    std::size_t H = static_cast<std::size_t>(m.cfg->hidden);
    std::size_t S = static_cast<std::size_t>(m.cfg->patch_size);
    std::size_t V = static_cast<std::size_t>(m.cfg->vocab);
    std::size_t C = static_cast<std::size_t>(m.cfg->context_patches);
    std::uint16_t PAD = patching::pad_code(V);
    std::uint16_t BOS = patching::bos_code(V);
    std::uint16_t EOS = patching::eos_code(V);

    GenerateStats local;
    GenerateStats& st = stats ? *stats : local;
    st = {};

    Rng rng(sampling.seed);
    std::string text = prompt_text;
    std::size_t last_nl = text.rfind('\n');
    std::string current_line = // chars since the last newline
        last_nl == std::string::npos ? text : text.substr(last_nl + 1);

    IncStack patch_stack;
    std::vector<double> h; // hidden of the last context patch

    // (Re)loads the patch-level cache from a context text.
    auto load_context = [&](const std::string& ctx_text) {
        patching::PatchSequence ps =
            patching::to_patches(patching::segment_units(ctx_text), S, V);
        ps.patches.pop_back(); // no EOS while generating
        ps.source_spans.pop_back();
        if (ps.patches.size() >= C)
            throw ContextOverflow("context text does not fit the model context");
        patch_stack.reset(static_cast<std::size_t>(m.cfg->patch_layers));
        for (std::size_t k = 0; k < ps.patches.size(); ++k)
            h = inc_feed(m, m.patch, patch_stack,
                         embed_one_patch(m, ps.patches[k].chars, k));
    };
    load_context(text);

    long countdown = -1;
    bool done = false;
    while (!done) {
        if (st.new_patches >= sampling.max_new_patches)
            throw MaxLengthExceeded("generation exceeded " +
                                    std::to_string(sampling.max_new_patches) + " patches");

        // Sample the next patch character by character.
        std::vector<double> ph(H);
        matmul(h.data(), m.cpw, m.cpb, ph.data(), 1, H, H);
        IncStack char_stack;
        char_stack.reset(static_cast<std::size_t>(m.cfg->char_layers));
        std::vector<std::uint16_t> content;
        bool eos_patch = false;
        for (std::size_t i = 0; i < S; ++i) {
            std::vector<double> x(H);
            const double* pos = m.cposw + i * H;
            for (std::size_t d = 0; d < H; ++d) x[d] = ph[d] + pos[d];
            if (i > 0) {
                const double* emb = m.cew + static_cast<std::size_t>(content[i - 1]) * H;
                for (std::size_t d = 0; d < H; ++d) x[d] += emb[d];
            }
            std::vector<double> hc = inc_feed(m, m.chr, char_stack, std::move(x));
            std::vector<double> logits(V);
            matmul(hc.data(), m.hw, m.hb, logits.data(), 1, H, V);
            std::uint16_t code = sample_code(logits, sampling, rng);
            if (code == EOS) {
                if (content.empty()) eos_patch = true;
                break;
            }
            if (code == PAD || code == BOS) break;
            content.push_back(code);
        }
        ++st.new_patches;
        if (eos_patch || content.empty()) {
            st.ended_by_eos = true;
            break;
        }

        // Append the patch text; track completed lines for the countdown.
        bool line_completed = false;
        for (std::uint16_t code : content) {
            char ch = static_cast<char>(static_cast<unsigned char>(code));
            text += ch;
            if (ch == '\n') {
                countdown = line_countdown(current_line);
                current_line.clear();
                line_completed = true;
                if (countdown == 0) {
                    st.ended_by_countdown = true;
                    done = true;
                    break;
                }
            } else {
                current_line += ch;
            }
        }
        if (done) break;

        // Feed the patch into the context, re-seeding the stream when the
        // context is nearly full and bars remain.
        if (line_completed && patch_stack.T * 10 >= C * 9 && countdown > 0) {
            std::string ctx_text = text;
            while (true) {
                std::string halved = stream_reseed_text(ctx_text);
                patching::PatchSequence probe =
                    patching::to_patches(patching::segment_units(halved), S, V);
                bool fits = (probe.patches.size() - 1) * 10 < C * 9;
                if (!fits && halved == ctx_text)
                    throw MaxLengthExceeded("context cannot be re-seeded any further");
                ctx_text = std::move(halved);
                if (fits) break;
            }
            load_context(ctx_text);
            ++st.reseeds;
            continue;
        }
        if (patch_stack.T >= C)
            throw MaxLengthExceeded("context exhausted mid-line");
        std::vector<std::uint16_t> padded = content;
        padded.resize(S, PAD);
        h = inc_feed(m, m.patch, patch_stack, embed_one_patch(m, padded, patch_stack.T));
    }
    return text;
}

// --- checkpoints -------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'B', 'S', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof v);
}

void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    std::uint64_t n = v.size();
    write_pod(out, n);
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
}

std::vector<double> read_doubles(std::ifstream& in) {
    std::uint64_t n = 0;
    read_pod(in, n);
    std::vector<double> v(n);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, const Policy& policy, const AdamState* state) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof kMagic);
    const ModelConfig& c = policy.config;
    std::int32_t fields[7] = {c.patch_layers, c.char_layers, c.hidden, c.heads,
                              c.context_patches, c.patch_size, c.vocab};
    out.write(reinterpret_cast<const char*>(fields), sizeof fields);
    write_pod(out, c.seed);
    write_doubles(out, policy.params);
    std::uint8_t has_opt = state ? 1 : 0;
    write_pod(out, has_opt);
    if (state) {
        write_pod(out, state->step);
        write_doubles(out, state->m);
        write_doubles(out, state->v);
    }
    if (!out) throw Error("checkpoint write failed: " + path);
}

Policy load_checkpoint(const std::string& path, AdamState* state) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw Error("not a checkpoint file: " + path);
    Policy policy;
    std::int32_t fields[7];
    in.read(reinterpret_cast<char*>(fields), sizeof fields);
    policy.config.patch_layers = fields[0];
    policy.config.char_layers = fields[1];
    policy.config.hidden = fields[2];
    policy.config.heads = fields[3];
    policy.config.context_patches = fields[4];
    policy.config.patch_size = fields[5];
    policy.config.vocab = fields[6];
    read_pod(in, policy.config.seed);
    policy.params = read_doubles(in);
    if (policy.params.size() != param_count(policy.config))
        throw Error("checkpoint parameter count does not match its config");
    std::uint8_t has_opt = 0;
    read_pod(in, has_opt);
    if (has_opt) {
        AdamState s;
        read_pod(in, s.step);
        s.m = read_doubles(in);
        s.v = read_doubles(in);
        if (state) *state = std::move(s);
    } else if (state) {
        *state = {};
    }
    if (!in) throw Error("checkpoint truncated: " + path);
    return policy;
}

// --- training log ------------------------------------------------------------

std::string format_train_log(const std::vector<TrainLogRow>& rows) {
    std::string out = "step\tloss\tlr\n";
    char buf[96];
    for (const TrainLogRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%lld\t%.17g\t%.17g\n",
                      static_cast<long long>(r.step), r.loss, r.lr);
        out += buf;
    }
    return out;
}

void save_train_log(const std::string& path, const std::vector<TrainLogRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write train log: " + path);
    out << format_train_log(rows);
}

} // namespace barstream::model
