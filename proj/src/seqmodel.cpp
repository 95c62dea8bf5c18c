#include "gpl/seqmodel.hpp"

#include "gpl/optim.hpp"
#include "gpl/tensor_file.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>

namespace gpl::seqmodel {

namespace fs = std::filesystem;

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const Mat>;
using MMap = Eigen::Map<Mat>;
using RowVec = Eigen::RowVectorXd;
using CRowMap = Eigen::Map<const RowVec>;
using MRowMap = Eigen::Map<RowVec>;

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

void ln_forward(const Mat& x, const double* g, const double* b, Mat& xhat, Eigen::VectorXd& rstd, Mat& y) {
    const auto T = x.rows();
    const auto d = x.cols();
    xhat.resize(T, d);
    y.resize(T, d);
    rstd.resize(T);
    const CRowMap gm(g, d);
    const CRowMap bm(b, d);
    for (Eigen::Index t = 0; t < T; ++t) {
        const double mean = x.row(t).mean();
        const double var = (x.row(t).array() - mean).square().mean();
        rstd(t) = 1.0 / std::sqrt(var + kLnEps);
        xhat.row(t) = (x.row(t).array() - mean) * rstd(t);
        y.row(t) = xhat.row(t).cwiseProduct(gm) + bm;
    }
}

// dx for the given dy; accumulates dgamma and dbeta when non-null.
Mat ln_backward(const Mat& dy, const Mat& xhat, const Eigen::VectorXd& rstd, const double* g, double* dg,
                double* db) {
    const auto T = dy.rows();
    const auto d = dy.cols();
    const CRowMap gm(g, d);
    Mat dx(T, d);
    for (Eigen::Index t = 0; t < T; ++t) {
        const RowVec dxh = dy.row(t).cwiseProduct(gm);
        const double m1 = dxh.mean();
        const double m2 = dxh.cwiseProduct(xhat.row(t)).mean();
        dx.row(t) = rstd(t) * (dxh.array() - m1 - xhat.row(t).array() * m2);
    }
    if (dg) {
        MRowMap(dg, d) += dy.cwiseProduct(xhat).colwise().sum();
        MRowMap(db, d) += dy.colwise().sum();
    }
    return dx;
}

void log_softmax_inplace(Vec& v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) {
        s += std::exp(x - mx);
    }
    const double lse = mx + std::log(s);
    for (double& x : v) {
        x -= lse;
    }
}

}  // namespace

int VocabLayout::offset(int level) const {
    if (level < 0 || level >= levels()) {
        throw InvalidArgument("vocab level out of range");
    }
    int off = prompt_tokens;
    for (int l = 0; l < level; ++l) {
        off += level_sizes[static_cast<std::size_t>(l)];
    }
    return off;
}

int VocabLayout::vocab_size() const {
    return prompt_tokens + std::accumulate(level_sizes.begin(), level_sizes.end(), 0);
}

int VocabLayout::level_of(int token) const {
    int off = prompt_tokens;
    if (token < off) {
        throw InvalidArgument("token " + std::to_string(token) + " is a prompt token");
    }
    for (int l = 0; l < levels(); ++l) {
        off += level_sizes[static_cast<std::size_t>(l)];
        if (token < off) {
            return l;
        }
    }
    throw InvalidArgument("token " + std::to_string(token) + " outside the vocabulary");
}

LmConfig LmConfig::from(const KvConfig& kv) {
    LmConfig c;
    c.layers = static_cast<int>(kv.get_int("lm.layers", c.layers));
    c.dim = static_cast<int>(kv.get_int("lm.dim", c.dim));
    c.heads = static_cast<int>(kv.get_int("lm.heads", c.heads));
    c.ffn_mult = static_cast<int>(kv.get_int("lm.ffn_mult", c.ffn_mult));
    c.lora_rank = static_cast<int>(kv.get_int("lm.lora_rank", c.lora_rank));
    c.prompt_tokens = static_cast<int>(kv.get_int("lm.prompt_tokens", c.prompt_tokens));
    c.max_history = static_cast<int>(kv.get_int("lm.max_history", c.max_history));
    c.pretrain_epochs = static_cast<int>(kv.get_int("lm.pretrain_epochs", c.pretrain_epochs));
    c.lora_epochs = static_cast<int>(kv.get_int("lm.lora_epochs", c.lora_epochs));
    c.batch_size = static_cast<int>(kv.get_int("lm.batch_size", c.batch_size));
    c.targets_per_user = static_cast<int>(kv.get_int("lm.targets_per_user", c.targets_per_user));
    c.lr = kv.get_double("lm.lr", c.lr);
    c.lora_lr = kv.get_double("lm.lora_lr", c.lora_lr);
    c.downsample_fraction = kv.get_double("lm.downsample_fraction", c.downsample_fraction);
    c.beam_width = static_cast<int>(kv.get_int("lm.beam_width", c.beam_width));
    c.exclude_history = kv.get_bool("lm.exclude_history", c.exclude_history);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
    return c;
}

void LmConfig::store(KvConfig& kv) const {
    kv.set("lm.layers", std::to_string(layers));
    kv.set("lm.dim", std::to_string(dim));
    kv.set("lm.heads", std::to_string(heads));
    kv.set("lm.ffn_mult", std::to_string(ffn_mult));
    kv.set("lm.lora_rank", std::to_string(lora_rank));
    kv.set("lm.prompt_tokens", std::to_string(prompt_tokens));
    kv.set("lm.max_history", std::to_string(max_history));
    kv.set("lm.pretrain_epochs", std::to_string(pretrain_epochs));
    kv.set("lm.lora_epochs", std::to_string(lora_epochs));
    kv.set("lm.batch_size", std::to_string(batch_size));
    kv.set("lm.targets_per_user", std::to_string(targets_per_user));
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", lr);
    kv.set("lm.lr", buf);
    std::snprintf(buf, sizeof buf, "%.17g", lora_lr);
    kv.set("lm.lora_lr", buf);
    std::snprintf(buf, sizeof buf, "%.17g", downsample_fraction);
    kv.set("lm.downsample_fraction", buf);
    kv.set("lm.beam_width", std::to_string(beam_width));
    kv.set("lm.exclude_history", exclude_history ? "true" : "false");
    kv.set("seed", std::to_string(seed));
}

void LmConfig::validate() const {
    if (layers < 1 || dim < 1 || heads < 1 || dim % heads != 0) {
        throw ConfigError("lm needs layers >= 1 and dim divisible by heads");
    }
    if (lora_rank < 1) {
        throw ConfigError("lm.lora_rank must be >= 1");
    }
    if (prompt_tokens < 1) {
        throw ConfigError("lm.prompt_tokens must be >= 1");
    }
    if (max_history < 1 || batch_size < 1 || targets_per_user < 1) {
        throw ConfigError("lm.max_history, lm.batch_size and lm.targets_per_user must be >= 1");
    }
    if (beam_width < 1) {
        throw ConfigError("lm.beam_width must be >= 1");
    }
    if (downsample_fraction < 0 || downsample_fraction > 1) {
        throw ConfigError("lm.downsample_fraction must lie in [0, 1]");
    }
}

SidSequence build_input(std::span<const ItemId> history, const quantizer::LookupTable& lookup,
                        const VocabLayout& vocab, bool reserve_target) {
    if (reserve_target && history.empty()) {
        throw InvalidArgument("build_input: training sample needs a non-empty history");
    }
    SidSequence s;
    s.prompt_length = vocab.prompt_tokens;
    for (int p = 0; p < vocab.prompt_tokens; ++p) {
        s.tokens.push_back(p);
    }
    for (ItemId id : history) {
        const Sid& sid = lookup.sid_of(id);
        if (static_cast<int>(sid.codes.size()) != vocab.levels()) {
            throw InvalidArgument("SID length does not match the vocabulary");
        }
        for (int l = 0; l < vocab.levels(); ++l) {
            s.tokens.push_back(vocab.token(l, sid.codes[static_cast<std::size_t>(l)]));
        }
    }
    s.target_start = static_cast<int>(s.tokens.size()) - (reserve_target ? vocab.levels() : 0);
    return s;
}

std::map<ItemId, double> retention_probabilities(const std::vector<std::vector<ItemId>>& histories,
                                                 double top_fraction) {
    std::map<ItemId, double> freq;
    for (const auto& h : histories) {
        for (ItemId id : h) {
            freq[id] += 1.0;
        }
    }
    std::vector<std::pair<double, ItemId>> ranked;
    for (const auto& [id, f] : freq) {
        ranked.emplace_back(-f, id);
    }
    std::sort(ranked.begin(), ranked.end());
    const auto n_top = static_cast<std::size_t>(std::floor(top_fraction * static_cast<double>(ranked.size())));
    std::map<ItemId, double> keep;
    for (const auto& [id, f] : freq) {
        keep[id] = 1.0;
    }
    if (n_top == 0 || n_top >= ranked.size()) {
        return keep;
    }
    const double threshold = -ranked[n_top].first;
    for (std::size_t i = 0; i < n_top; ++i) {
        const double f = -ranked[i].first;
        keep[ranked[i].second] = std::min(1.0, threshold / f);
    }
    return keep;
}

std::vector<std::vector<ItemId>> downsample_corpus(const std::vector<std::vector<ItemId>>& histories,
                                                   double top_fraction, Rng& rng) {
    const auto keep = retention_probabilities(histories, top_fraction);
    std::vector<std::vector<ItemId>> out(histories.size());
    for (std::size_t u = 0; u < histories.size(); ++u) {
        for (ItemId id : histories[u]) {
            const double p = keep.at(id);
            if (p >= 1.0 || rng.bernoulli(p)) {
                out[u].push_back(id);
            }
        }
    }
    return out;
}

Vec apply_lora(std::span<const double> w, std::span<const double> a, std::span<const double> b,
               std::span<const double> x, int out, int in, int rank) {
    if (w.size() != static_cast<std::size_t>(out) * in || a.size() != static_cast<std::size_t>(rank) * in ||
        b.size() != static_cast<std::size_t>(out) * rank || x.size() != static_cast<std::size_t>(in)) {
        throw InvalidArgument("apply_lora: shape mismatch");
    }
    const Eigen::Map<const Eigen::VectorXd> xv(x.data(), in);
    const Eigen::VectorXd y = CMap(w.data(), out, in) * xv + CMap(b.data(), out, rank) * (CMap(a.data(), rank, in) * xv);
    return Vec(y.data(), y.data() + y.size());
}

struct CausalLm::Cache {
    struct Layer {
        Mat x_in, xhat1, h1, aq, av, q, k, v, ctx, x_mid, xhat2, h2, f1, g;
        Eigen::VectorXd rstd1, rstd2;
        std::vector<Mat> probs;
    };
    std::vector<Layer> layers;
    Mat xhatf, hf;
    Eigen::VectorXd rstdf;
};

CausalLm::CausalLm(VocabLayout vocab, const LmConfig& cfg, int max_len)
    : vocab_(std::move(vocab)), cfg_(cfg), max_len_(max_len) {
    cfg_.validate();
    if (vocab_.levels() < 1 || max_len_ < 1) {
        throw InvalidArgument("CausalLm needs at least one SID level and a positive max length");
    }
    layout();
    Rng rng(cfg_.seed, "lm.init");
    const auto d = static_cast<std::size_t>(cfg_.dim);
    const auto V = static_cast<std::size_t>(vocab_.vocab_size());
    const auto f = static_cast<std::size_t>(cfg_.ffn_mult) * d;
    auto fill = [&](std::size_t off, std::size_t n, double sd) {
        for (std::size_t i = 0; i < n; ++i) {
            base_[off + i] = sd * rng.normal();
        }
    };
    auto ones = [&](std::size_t off) { std::fill_n(base_.begin() + static_cast<std::ptrdiff_t>(off), d, 1.0); };
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double res_sd = sd / std::sqrt(2.0 * cfg_.layers);
    fill(tok_emb_, V * d, 0.1);
    fill(pos_emb_, static_cast<std::size_t>(max_len_) * d, 0.1);
    for (const auto& b : blocks_) {
        ones(b.ln1_g);
        ones(b.ln2_g);
        fill(b.wq, d * d, sd);
        fill(b.wk, d * d, sd);
        fill(b.wv, d * d, sd);
        fill(b.wo, d * d, res_sd);
        fill(b.w1, f * d, sd);
        fill(b.w2, d * f, res_sd / std::sqrt(static_cast<double>(cfg_.ffn_mult)));
    }
    ones(lnf_g_);
    fill(head_w_, V * d, sd);
    Rng lrng(cfg_.seed, "lm.lora");
    reset_lora(lrng);
}

void CausalLm::layout() {
    const auto d = static_cast<std::size_t>(cfg_.dim);
    const auto V = static_cast<std::size_t>(vocab_.vocab_size());
    const auto f = static_cast<std::size_t>(cfg_.ffn_mult) * d;
    const auto r = static_cast<std::size_t>(cfg_.lora_rank);
    std::size_t off = 0;
    auto take = [&](std::size_t n) {
        const std::size_t at = off;
        off += n;
        return at;
    };
    tok_emb_ = take(V * d);
    pos_emb_ = take(static_cast<std::size_t>(max_len_) * d);
    blocks_.clear();
    for (int l = 0; l < cfg_.layers; ++l) {
        Block b{};
        b.ln1_g = take(d);
        b.ln1_b = take(d);
        b.wq = take(d * d);
        b.wk = take(d * d);
        b.wv = take(d * d);
        b.wo = take(d * d);
        b.ln2_g = take(d);
        b.ln2_b = take(d);
        b.w1 = take(f * d);
        b.b1 = take(f);
        b.w2 = take(d * f);
        b.b2 = take(d);
        blocks_.push_back(b);
    }
    lnf_g_ = take(d);
    lnf_b_ = take(d);
    head_w_ = take(V * d);
    head_b_ = take(V);
    base_.assign(off, 0.0);

    off = 0;
    lora_blocks_.clear();
    for (int l = 0; l < cfg_.layers; ++l) {
        LoraBlock b{};
        b.aq = take(r * d);
        b.bq = take(d * r);
        b.av = take(r * d);
        b.bv = take(d * r);
        lora_blocks_.push_back(b);
    }
    lora_.assign(off, 0.0);
}

void CausalLm::reset_lora(Rng& rng) {
    const auto d = static_cast<std::size_t>(cfg_.dim);
    const auto r = static_cast<std::size_t>(cfg_.lora_rank);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    std::fill(lora_.begin(), lora_.end(), 0.0);
    for (const auto& b : lora_blocks_) {
        for (std::size_t i = 0; i < r * d; ++i) {
            lora_[b.aq + i] = sd * rng.normal();
            lora_[b.av + i] = sd * rng.normal();
        }
    }
}

void CausalLm::forward(std::span<const int> tokens, Cache& c) const {
    const auto T = static_cast<Eigen::Index>(tokens.size());
    const auto d = static_cast<Eigen::Index>(cfg_.dim);
    const auto f = static_cast<Eigen::Index>(cfg_.ffn_mult) * d;
    const auto r = static_cast<Eigen::Index>(cfg_.lora_rank);
    const auto H = cfg_.heads;
    const auto dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (T == 0 || T > max_len_) {
        throw InvalidArgument("sequence length " + std::to_string(T) + " outside [1, " + std::to_string(max_len_) + "]");
    }
    const int V = vocab_.vocab_size();
    const double* p = base_.data();
    const double* lp = lora_.data();

    Mat x(T, d);
    for (Eigen::Index t = 0; t < T; ++t) {
        const int tok = tokens[static_cast<std::size_t>(t)];
        if (tok < 0 || tok >= V) {
            throw InvalidArgument("token id " + std::to_string(tok) + " out of vocabulary");
        }
        x.row(t) = CRowMap(p + tok_emb_ + static_cast<std::size_t>(tok) * d, d) + CRowMap(p + pos_emb_ + t * d, d);
    }
    c.layers.resize(blocks_.size());
    for (std::size_t li = 0; li < blocks_.size(); ++li) {
        const Block& b = blocks_[li];
        auto& L = c.layers[li];
        L.x_in = x;
        ln_forward(x, p + b.ln1_g, p + b.ln1_b, L.xhat1, L.rstd1, L.h1);
        L.q = L.h1 * CMap(p + b.wq, d, d).transpose();
        L.k = L.h1 * CMap(p + b.wk, d, d).transpose();
        L.v = L.h1 * CMap(p + b.wv, d, d).transpose();
        if (lora_on_) {
            const LoraBlock& lb = lora_blocks_[li];
            L.aq = L.h1 * CMap(lp + lb.aq, r, d).transpose();
            L.av = L.h1 * CMap(lp + lb.av, r, d).transpose();
            L.q += L.aq * CMap(lp + lb.bq, d, r).transpose();
            L.v += L.av * CMap(lp + lb.bv, d, r).transpose();
        }
        L.ctx = Mat::Zero(T, d);
        L.probs.resize(static_cast<std::size_t>(H));
        for (int h = 0; h < H; ++h) {
            Mat& P = L.probs[static_cast<std::size_t>(h)];
            P = (L.q.middleCols(h * dh, dh) * L.k.middleCols(h * dh, dh).transpose()) * scale;
            for (Eigen::Index i = 0; i < T; ++i) {
                const double mx = P.row(i).head(i + 1).maxCoeff();
                double s = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    P(i, j) = std::exp(P(i, j) - mx);
                    s += P(i, j);
                }
                P.row(i).head(i + 1) /= s;
                P.row(i).tail(T - i - 1).setZero();
            }
            L.ctx.middleCols(h * dh, dh) = P * L.v.middleCols(h * dh, dh);
        }
        L.x_mid = L.x_in + L.ctx * CMap(p + b.wo, d, d).transpose();
        ln_forward(L.x_mid, p + b.ln2_g, p + b.ln2_b, L.xhat2, L.rstd2, L.h2);
        L.f1 = (L.h2 * CMap(p + b.w1, f, d).transpose()).rowwise() + CRowMap(p + b.b1, f);
        L.g = L.f1.unaryExpr([](double v) { return gelu(v); });
        x = L.x_mid + ((L.g * CMap(p + b.w2, d, f).transpose()).rowwise() + CRowMap(p + b.b2, d));
    }
    // x is the residual stream after the last block; keep it in the cache via the final LN.
    ln_forward(x, p + lnf_g_, p + lnf_b_, c.xhatf, c.rstdf, c.hf);
}

void CausalLm::backward(std::span<const int> tokens, const Cache& c, const std::vector<double>& dhf_flat,
                        Gradients& g) const {
    const auto T = static_cast<Eigen::Index>(tokens.size());
    const auto d = static_cast<Eigen::Index>(cfg_.dim);
    const auto f = static_cast<Eigen::Index>(cfg_.ffn_mult) * d;
    const auto r = static_cast<Eigen::Index>(cfg_.lora_rank);
    const auto H = cfg_.heads;
    const auto dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool want_base = !g.base.empty();
    const bool want_lora = !g.lora.empty() && lora_on_;
    const double* p = base_.data();
    const double* lp = lora_.data();
    double* gb = want_base ? g.base.data() : nullptr;
    double* gl = want_lora ? g.lora.data() : nullptr;

    const Mat dhf = CMap(dhf_flat.data(), T, d);
    Mat dx = ln_backward(dhf, c.xhatf, c.rstdf, p + lnf_g_, want_base ? gb + lnf_g_ : nullptr,
                         want_base ? gb + lnf_b_ : nullptr);
    for (std::size_t li = blocks_.size(); li-- > 0;) {
        const Block& b = blocks_[li];
        const auto& L = c.layers[li];
        if (want_base) {
            MMap(gb + b.w2, d, f) += dx.transpose() * L.g;
            MRowMap(gb + b.b2, d) += dx.colwise().sum();
        }
        const Mat dg = dx * CMap(p + b.w2, d, f);
        const Mat df1 = dg.cwiseProduct(L.f1.unaryExpr([](double v) { return gelu_grad(v); }));
        if (want_base) {
            MMap(gb + b.w1, f, d) += df1.transpose() * L.h2;
            MRowMap(gb + b.b1, f) += df1.colwise().sum();
        }
        const Mat dh2 = df1 * CMap(p + b.w1, f, d);
        const Mat dx_mid = dx + ln_backward(dh2, L.xhat2, L.rstd2, p + b.ln2_g, want_base ? gb + b.ln2_g : nullptr,
                                            want_base ? gb + b.ln2_b : nullptr);
        if (want_base) {
            MMap(gb + b.wo, d, d) += dx_mid.transpose() * L.ctx;
        }
        const Mat dctx = dx_mid * CMap(p + b.wo, d, d);
        Mat dq(T, d), dk(T, d), dv(T, d);
        for (int h = 0; h < H; ++h) {
            const Mat& P = L.probs[static_cast<std::size_t>(h)];
            const auto dc = dctx.middleCols(h * dh, dh);
            const Mat dP = dc * L.v.middleCols(h * dh, dh).transpose();
            dv.middleCols(h * dh, dh) = P.transpose() * dc;
            const Eigen::VectorXd rs = dP.cwiseProduct(P).rowwise().sum();
            const Mat dS = P.cwiseProduct(dP.colwise() - rs) * scale;
            dq.middleCols(h * dh, dh) = dS * L.k.middleCols(h * dh, dh);
            dk.middleCols(h * dh, dh) = dS.transpose() * L.q.middleCols(h * dh, dh);
        }
        if (want_base) {
            MMap(gb + b.wq, d, d) += dq.transpose() * L.h1;
            MMap(gb + b.wk, d, d) += dk.transpose() * L.h1;
            MMap(gb + b.wv, d, d) += dv.transpose() * L.h1;
        }
        Mat dh1 = dq * CMap(p + b.wq, d, d) + dk * CMap(p + b.wk, d, d) + dv * CMap(p + b.wv, d, d);
        if (lora_on_) {
            const LoraBlock& lb = lora_blocks_[li];
            const Mat daq = dq * CMap(lp + lb.bq, d, r);
            const Mat dav = dv * CMap(lp + lb.bv, d, r);
            if (want_lora) {
                MMap(gl + lb.bq, d, r) += dq.transpose() * L.aq;
                MMap(gl + lb.bv, d, r) += dv.transpose() * L.av;
                MMap(gl + lb.aq, r, d) += daq.transpose() * L.h1;
                MMap(gl + lb.av, r, d) += dav.transpose() * L.h1;
            }
            dh1 += daq * CMap(lp + lb.aq, r, d) + dav * CMap(lp + lb.av, r, d);
        }
        dx = dx_mid + ln_backward(dh1, L.xhat1, L.rstd1, p + b.ln1_g, want_base ? gb + b.ln1_g : nullptr,
                                  want_base ? gb + b.ln1_b : nullptr);
    }
    if (want_base) {
        for (Eigen::Index t = 0; t < T; ++t) {
            const auto tok = static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]);
            MRowMap(gb + tok_emb_ + tok * d, d) += dx.row(t);
            MRowMap(gb + pos_emb_ + t * d, d) += dx.row(t);
        }
    }
}

Vec CausalLm::hidden_to_level_logits(std::span<const double> h, int level) const {
    const auto d = static_cast<Eigen::Index>(cfg_.dim);
    const int off = vocab_.offset(level);
    const int K = vocab_.level_sizes[static_cast<std::size_t>(level)];
    const double* p = base_.data();
    Eigen::VectorXd z = CMap(p + head_w_ + static_cast<std::size_t>(off) * d, K, d) *
                            Eigen::Map<const Eigen::VectorXd>(h.data(), d) +
                        Eigen::Map<const Eigen::VectorXd>(p + head_b_ + off, K);
    return Vec(z.data(), z.data() + z.size());
}

std::vector<Vec> CausalLm::logits(std::span<const int> tokens) const {
    Cache c;
    forward(tokens, c);
    const auto d = static_cast<Eigen::Index>(cfg_.dim);
    const int V = vocab_.vocab_size();
    const double* p = base_.data();
    const Mat z = (c.hf * CMap(p + head_w_, V, d).transpose()).rowwise() + CRowMap(p + head_b_, V);
    std::vector<Vec> out;
    for (Eigen::Index t = 0; t < z.rows(); ++t) {
        out.emplace_back(z.row(t).data(), z.row(t).data() + V);
    }
    return out;
}

double CausalLm::sequence_loss(const SidSequence& seq, Gradients* grads) const {
    if (seq.target_start < 1) {
        throw InvalidArgument("sequence_loss: the first token cannot be a target");
    }
    Cache c;
    forward(seq.tokens, c);
    const auto d = static_cast<std::size_t>(cfg_.dim);
    const std::size_t T = seq.tokens.size();
    std::vector<double> dhf;
    const bool want = grads && (!grads->base.empty() || !grads->lora.empty());
    if (want) {
        dhf.assign(T * d, 0.0);
    }
    double loss = 0.0;
    const double* p = base_.data();
    for (std::size_t t = static_cast<std::size_t>(seq.target_start); t < T; ++t) {
        const int tok = seq.tokens[t];
        const int level = vocab_.level_of(tok);
        const int off = vocab_.offset(level);
        const std::span<const double> h(c.hf.row(static_cast<Eigen::Index>(t - 1)).data(), d);
        Vec lsm = hidden_to_level_logits(h, level);
        log_softmax_inplace(lsm);
        loss -= lsm[static_cast<std::size_t>(tok - off)];
        if (!want) {
            continue;
        }
        Vec dz(lsm.size());
        for (std::size_t k = 0; k < lsm.size(); ++k) {
            dz[k] = std::exp(lsm[k]);
        }
        dz[static_cast<std::size_t>(tok - off)] -= 1.0;
        for (std::size_t k = 0; k < dz.size(); ++k) {
            const double* w = p + head_w_ + (static_cast<std::size_t>(off) + k) * d;
            double* dh = dhf.data() + (t - 1) * d;
            for (std::size_t j = 0; j < d; ++j) {
                dh[j] += dz[k] * w[j];
            }
            if (!grads->base.empty()) {
                double* gw = grads->base.data() + head_w_ + (static_cast<std::size_t>(off) + k) * d;
                for (std::size_t j = 0; j < d; ++j) {
                    gw[j] += dz[k] * h[j];
                }
                grads->base[head_b_ + static_cast<std::size_t>(off) + k] += dz[k];
            }
        }
    }
    if (want) {
        backward(seq.tokens, c, dhf, *grads);
    }
    return loss;
}

double CausalLm::ntp_loss(std::span<const SidSequence> batch, Gradients* grads) const {
    if (batch.empty()) {
        throw InvalidArgument("ntp_loss: empty batch");
    }
    Gradients local;
    if (grads) {
        local.base.assign(grads->base.size(), 0.0);
        local.lora.assign(grads->lora.size(), 0.0);
    }
    double total = 0.0;
    for (const auto& s : batch) {
        total += sequence_loss(s, grads ? &local : nullptr);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    if (grads) {
        for (std::size_t i = 0; i < local.base.size(); ++i) {
            grads->base[i] += local.base[i] * inv;
        }
        for (std::size_t i = 0; i < local.lora.size(); ++i) {
            grads->lora[i] += local.lora[i] * inv;
        }
    }
    return total * inv;
}

std::vector<double> CausalLm::target_log_probs(const SidSequence& seq) const {
    Cache c;
    forward(seq.tokens, c);
    const auto d = static_cast<std::size_t>(cfg_.dim);
    std::vector<double> out;
    for (std::size_t t = static_cast<std::size_t>(seq.target_start); t < seq.tokens.size(); ++t) {
        const int level = vocab_.level_of(seq.tokens[t]);
        Vec lsm = hidden_to_level_logits({c.hf.row(static_cast<Eigen::Index>(t - 1)).data(), d}, level);
        log_softmax_inplace(lsm);
        out.push_back(lsm[static_cast<std::size_t>(seq.tokens[t] - vocab_.offset(level))]);
    }
    return out;
}

CausalLm::State CausalLm::start(std::span<const int> prefix) const {
    if (prefix.empty()) {
        throw InvalidArgument("decoding needs a non-empty prefix");
    }
    Cache c;
    forward(prefix, c);
    State s;
    const auto d = static_cast<std::size_t>(cfg_.dim);
    for (const auto& L : c.layers) {
        s.keys.emplace_back(L.k.data(), L.k.data() + L.k.size());
        s.values.emplace_back(L.v.data(), L.v.data() + L.v.size());
    }
    const auto last = c.hf.row(c.hf.rows() - 1);
    s.hidden.assign(last.data(), last.data() + d);
    s.length = static_cast<int>(prefix.size());
    return s;
}

void CausalLm::push(State& s, int token) const {
    const auto d = static_cast<Eigen::Index>(cfg_.dim);
    const auto f = static_cast<Eigen::Index>(cfg_.ffn_mult) * d;
    const auto r = static_cast<Eigen::Index>(cfg_.lora_rank);
    const int H = cfg_.heads;
    const auto dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (s.length >= max_len_) {
        throw InvalidArgument("decoding past the model's max length");
    }
    if (token < 0 || token >= vocab_.vocab_size()) {
        throw InvalidArgument("token id out of vocabulary");
    }
    const double* p = base_.data();
    const double* lp = lora_.data();
    const Eigen::Index t = s.length;
    Mat x = CRowMap(p + tok_emb_ + static_cast<std::size_t>(token) * d, d) + CRowMap(p + pos_emb_ + t * d, d);
    Mat xhat, h1, h2, hf;
    Eigen::VectorXd rstd;
    for (std::size_t li = 0; li < blocks_.size(); ++li) {
        const Block& b = blocks_[li];
        ln_forward(x, p + b.ln1_g, p + b.ln1_b, xhat, rstd, h1);
        Mat q = h1 * CMap(p + b.wq, d, d).transpose();
        Mat k = h1 * CMap(p + b.wk, d, d).transpose();
        Mat v = h1 * CMap(p + b.wv, d, d).transpose();
        if (lora_on_) {
            const LoraBlock& lb = lora_blocks_[li];
            q += (h1 * CMap(lp + lb.aq, r, d).transpose()) * CMap(lp + lb.bq, d, r).transpose();
            v += (h1 * CMap(lp + lb.av, r, d).transpose()) * CMap(lp + lb.bv, d, r).transpose();
        }
        auto& K = s.keys[li];
        auto& Vv = s.values[li];
        K.insert(K.end(), k.data(), k.data() + d);
        Vv.insert(Vv.end(), v.data(), v.data() + d);
        const CMap Km(K.data(), t + 1, d);
        const CMap Vm(Vv.data(), t + 1, d);
        Mat ctx(1, d);
        for (int h = 0; h < H; ++h) {
            RowVec sc = (q.middleCols(h * dh, dh) * Km.middleCols(h * dh, dh).transpose()) * scale;
            const double mx = sc.maxCoeff();
            sc = (sc.array() - mx).exp();
            sc /= sc.sum();
            ctx.middleCols(h * dh, dh) = sc * Vm.middleCols(h * dh, dh);
        }
        const Mat x_mid = x + ctx * CMap(p + b.wo, d, d).transpose();
        ln_forward(x_mid, p + b.ln2_g, p + b.ln2_b, xhat, rstd, h2);
        const Mat f1 = h2 * CMap(p + b.w1, f, d).transpose() + CRowMap(p + b.b1, f);
        const Mat g = f1.unaryExpr([](double v) { return gelu(v); });
        x = x_mid + (g * CMap(p + b.w2, d, f).transpose() + CRowMap(p + b.b2, d));
    }
    ln_forward(x, p + lnf_g_, p + lnf_b_, xhat, rstd, hf);
    s.hidden.assign(hf.data(), hf.data() + d);
    ++s.length;
}

Vec CausalLm::level_log_probs(const State& state, int level) const {
    if (state.hidden.empty()) {
        throw InvalidArgument("decoder state has no tokens");
    }
    Vec z = hidden_to_level_logits(state.hidden, level);
    log_softmax_inplace(z);
    return z;
}

void CausalLm::save(const std::string& dir) const {
    fs::create_directories(dir);
    KvConfig kv;
    cfg_.store(kv);
    kv.set("max_len", std::to_string(max_len_));
    kv.set("vocab.prompt_tokens", std::to_string(vocab_.prompt_tokens));
    std::string sizes, offsets;
    for (int l = 0; l < vocab_.levels(); ++l) {
        sizes += (l ? "," : "") + std::to_string(vocab_.level_sizes[static_cast<std::size_t>(l)]);
        offsets += (l ? "," : "") + std::to_string(vocab_.offset(l));
    }
    kv.set("vocab.level_sizes", sizes);
    kv.set("vocab.level_offsets", offsets);
    kv.set("vocab.size", std::to_string(vocab_.vocab_size()));
    kv.set("base_params", std::to_string(base_.size()));
    kv.set("lora_params", std::to_string(lora_.size()));
    write_file(dir + "/manifest.txt", kv.dump());
    auto dump = [](const std::vector<double>& v, const std::string& path) {
        Matrix m;
        m.rows = 1;
        m.cols = static_cast<std::uint32_t>(v.size());
        m.data = v;
        write_tensor(path, m);
    };
    dump(base_, dir + "/base.bin");
    dump(lora_, dir + "/lora.bin");
}

CausalLm CausalLm::load(const std::string& dir) {
    const std::string manifest = dir + "/manifest.txt";
    if (!fs::exists(manifest)) {
        throw MissingArtifact("language model manifest '" + manifest + "' not found", "train-lm");
    }
    const KvConfig kv = KvConfig::load(manifest);
    VocabLayout vocab;
    vocab.prompt_tokens = static_cast<int>(kv.get_int("vocab.prompt_tokens", 4));
    vocab.level_sizes = kv.get_ints("vocab.level_sizes", {});
    CausalLm m(vocab, LmConfig::from(kv), static_cast<int>(kv.get_int("max_len", 0)));
    const Matrix base = read_tensor(dir + "/base.bin");
    const Matrix lora = read_tensor(dir + "/lora.bin");
    if (base.data.size() != m.base_.size() || lora.data.size() != m.lora_.size()) {
        throw Error("language model parameter count mismatch in '" + dir + "'");
    }
    m.base_ = base.data;
    m.lora_ = lora.data;
    return m;
}

std::vector<SidSequence> pretrain_corpus(const std::vector<std::vector<ItemId>>& histories,
                                         const quantizer::LookupTable& lookup, const VocabLayout& vocab,
                                         const LmConfig& cfg) {
    const auto chunk = static_cast<std::size_t>(cfg.max_history) + 1;
    std::vector<SidSequence> out;
    for (const auto& h : histories) {
        std::size_t end = h.size();
        while (end > 0) {
            const std::size_t begin = end > chunk ? end - chunk : 0;
            SidSequence s = build_input(std::span<const ItemId>(h).subspan(begin, end - begin), lookup, vocab, false);
            s.target_start = s.prompt_length;
            out.push_back(std::move(s));
            end = begin;
        }
    }
    return out;
}

std::vector<SidSequence> adaptation_corpus(const std::vector<std::vector<ItemId>>& histories,
                                           const quantizer::LookupTable& lookup, const VocabLayout& vocab,
                                           const LmConfig& cfg) {
    std::vector<SidSequence> out;
    const auto mh = static_cast<std::size_t>(cfg.max_history);
    for (const auto& h : histories) {
        for (int k = 0; k < cfg.targets_per_user && static_cast<std::size_t>(k) < h.size(); ++k) {
            const std::size_t t = h.size() - 1 - static_cast<std::size_t>(k);
            const std::size_t begin = t > mh ? t - mh : 0;
            out.push_back(build_input(std::span<const ItemId>(h).subspan(begin, t + 1 - begin), lookup, vocab, true));
        }
    }
    return out;
}

namespace {

template <typename StepFn>
double run_epoch(std::vector<std::size_t>& order, std::size_t batch, Rng& rng, StepFn&& step) {
    shuffle(order, rng);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t s = 0; s < order.size(); s += batch) {
        const std::size_t e = std::min(order.size(), s + batch);
        sum += step(std::span<const std::size_t>(order).subspan(s, e - s));
        ++n;
    }
    return sum / static_cast<double>(n);
}

}  // namespace

void pretrain_base(CausalLm& model, const std::vector<SidSequence>& corpus, const LmConfig& cfg, TrainLog* log) {
    if (corpus.empty()) {
        throw InvalidArgument("pretrain_base: empty corpus");
    }
    const bool was_on = model.lora_enabled();
    model.set_lora_enabled(false);
    Adam adam(model.base_params().size(), AdamConfig{cfg.lr});
    Rng rng(cfg.seed, "lm.pretrain");
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    Gradients g;
    for (int e = 0; e < cfg.pretrain_epochs; ++e) {
        const double mean = run_epoch(order, static_cast<std::size_t>(cfg.batch_size), rng, [&](auto idx) {
            g.base.assign(model.base_params().size(), 0.0);
            double loss = 0.0;
            double targets = 0.0;
            for (std::size_t i : idx) {
                loss += model.sequence_loss(corpus[i], &g);
                targets += static_cast<double>(corpus[i].tokens.size() - static_cast<std::size_t>(corpus[i].target_start));
            }
            for (double& x : g.base) {
                x /= targets;
            }
            adam.step(model.base_params(), g.base);
            return loss / targets;
        });
        if (log) {
            log->pretrain_loss.push_back(mean);
        }
    }
    model.set_lora_enabled(was_on);
}

void train_lora(CausalLm& model, const std::vector<SidSequence>& corpus, const LmConfig& cfg, TrainLog* log) {
    if (corpus.empty()) {
        throw InvalidArgument("train_lora: empty corpus");
    }
    model.set_lora_enabled(true);
    Adam adam(model.lora_params().size(), AdamConfig{cfg.lora_lr});
    Rng rng(cfg.seed, "lm.lora_train");
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    Gradients g;
    std::vector<SidSequence> batch;
    for (int e = 0; e < cfg.lora_epochs; ++e) {
        const double mean = run_epoch(order, static_cast<std::size_t>(cfg.batch_size), rng, [&](auto idx) {
            batch.clear();
            for (std::size_t i : idx) {
                batch.push_back(corpus[i]);
            }
            g.lora.assign(model.lora_params().size(), 0.0);
            const double loss = model.ntp_loss(batch, &g);
            adam.step(model.lora_params(), g.lora);
            return loss;
        });
        if (log) {
            log->lora_loss.push_back(mean);
        }
    }
}

CausalLm train_lm(const std::vector<std::vector<ItemId>>& click_histories, const quantizer::LookupTable& lookup,
                  const VocabLayout& vocab, const LmConfig& cfg, TrainLog* log) {
    cfg.validate();
    const int max_len = vocab.prompt_tokens + vocab.levels() * (cfg.max_history + 1);
    CausalLm model(vocab, cfg, max_len);
    const auto pre = pretrain_corpus(click_histories, lookup, vocab, cfg);
    const auto ada = adaptation_corpus(click_histories, lookup, vocab, cfg);
    if (pre.empty() || ada.empty()) {
        throw InvalidArgument("train_lm: no clicked items to train on");
    }
    pretrain_base(model, pre, cfg, log);
    Rng lrng(cfg.seed, "lm.lora");
    model.reset_lora(lrng);
    train_lora(model, ada, cfg, log);
    return model;
}

std::vector<Beam> beam_search(const CausalLm& model, std::span<const int> prefix, int width) {
    const VocabLayout& vocab = model.vocab();
    if (width < 1) {
        throw InvalidArgument("beam width must be >= 1");
    }
    double space = 1.0;
    for (int k : vocab.level_sizes) {
        space *= k;
    }
    if (static_cast<double>(width) > space) {
        throw InvalidArgument("beam width " + std::to_string(width) + " exceeds the number of distinct SIDs");
    }
    struct Hyp {
        CausalLm::State state;
        double score = 0.0;
        std::vector<int> codes;
    };
    struct Cand {
        double score;
        std::size_t parent;
        int code;
    };
    std::vector<Hyp> hyps;
    hyps.push_back({model.start(prefix), 0.0, {}});
    const int L = vocab.levels();
    for (int l = 0; l < L; ++l) {
        std::vector<Cand> cands;
        for (std::size_t bi = 0; bi < hyps.size(); ++bi) {
            const Vec lp = model.level_log_probs(hyps[bi].state, l);
            for (std::size_t k = 0; k < lp.size(); ++k) {
                cands.push_back({hyps[bi].score + lp[k], bi, static_cast<int>(k)});
            }
        }
        const std::size_t keep = std::min(cands.size(), static_cast<std::size_t>(width));
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                          [](const Cand& a, const Cand& b) {
                              if (a.score != b.score) {
                                  return a.score > b.score;
                              }
                              if (a.parent != b.parent) {
                                  return a.parent < b.parent;
                              }
                              return a.code < b.code;
                          });
        std::vector<Hyp> next;
        next.reserve(keep);
        for (std::size_t i = 0; i < keep; ++i) {
            const Cand& c = cands[i];
            Hyp h;
            h.score = c.score;
            h.codes = hyps[c.parent].codes;
            h.codes.push_back(c.code);
            if (l + 1 < L) {
                h.state = hyps[c.parent].state;
                model.push(h.state, vocab.token(l, c.code));
            }
            next.push_back(std::move(h));
        }
        hyps = std::move(next);
    }
    std::vector<Beam> out;
    for (auto& h : hyps) {
        out.push_back({Sid{std::move(h.codes)}, h.score});
    }
    return out;
}

ItemId FallbackResolver::resolve(const Sid& sid) {
    const auto it = cache_.find(sid);
    if (it != cache_.end()) {
        return it->second;
    }
    const ItemId id = embed::nearest_item(tok_->decode(sid), *pool_);
    cache_.emplace(sid, id);
    return id;
}

AnchorSet resolve_anchors(const std::vector<Beam>& beams, const quantizer::LookupTable& lookup,
                          FallbackResolver& fallback) {
    if (lookup.empty()) {
        throw InvalidArgument("resolve_anchors: empty lookup table");
    }
    if (beams.empty()) {
        throw InvalidArgument("resolve_anchors: no beams");
    }
    AnchorSet set;
    for (const auto& b : beams) {
        Anchor a;
        a.sid = b.sid;
        a.log_prob = b.log_prob;
        a.conf = b.log_prob / static_cast<double>(b.sid.codes.size());
        if (const auto* items = lookup.find(b.sid)) {
            a.item = items->front();
            a.via = ResolvedVia::table;
        } else {
            a.item = fallback.resolve(b.sid);
            a.via = ResolvedVia::nn_fallback;
        }
        set.anchors.push_back(std::move(a));
    }
    return set;
}

void write_anchors(const std::string& path, const std::vector<AnchorSet>& sets) {
    std::string out;
    char buf[64];
    for (const auto& s : sets) {
        for (std::size_t b = 0; b < s.anchors.size(); ++b) {
            const Anchor& a = s.anchors[b];
            std::snprintf(buf, sizeof buf, "%.17g", a.conf);
            out += std::to_string(s.user) + '\t' + std::to_string(b) + '\t' + a.sid.str() + '\t' +
                   std::to_string(a.item) + '\t' + buf + '\t' +
                   (a.via == ResolvedVia::table ? "table" : "nn_fallback") + '\n';
        }
    }
    write_file(path, out);
}

std::vector<AnchorSet> read_anchors(const std::string& path) {
    if (!fs::exists(path)) {
        throw MissingArtifact("anchor file '" + path + "' not found", "gen-anchors");
    }
    std::istringstream in(read_file(path));
    std::vector<AnchorSet> sets;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ls(line);
        UserId user = 0;
        std::size_t b = 0;
        std::string sid, via;
        Anchor a;
        if (!(ls >> user >> b >> sid >> a.item >> a.conf >> via)) {
            throw Error("malformed anchor line: " + line);
        }
        a.sid = Sid::parse(sid);
        a.log_prob = a.conf * static_cast<double>(a.sid.codes.size());
        a.via = via == "table" ? ResolvedVia::table : ResolvedVia::nn_fallback;
        if (sets.empty() || sets.back().user != user) {
            sets.push_back({user, {}});
        }
        sets.back().anchors.push_back(std::move(a));
    }
    return sets;
}

}  // namespace gpl::seqmodel
