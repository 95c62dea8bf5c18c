#include "checks.hpp"
#include "oracles.hpp"

#include "gpl/evalkit.hpp"
#include "gpl/preranker.hpp"
#include "gpl/pseudolabel.hpp"
#include "gpl/quantizer.hpp"
#include "gpl/seqmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace checks {

using namespace gpl;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Scores on a coarse grid so ties are common.
std::vector<double> tied_scores(Rng& rng, std::size_t n) {
    std::vector<double> s(n);
    const int levels = 2 + static_cast<int>(rng.below(8));
    for (double& x : s) x = static_cast<double>(rng.below(static_cast<std::size_t>(levels))) / levels;
    return s;
}

std::vector<int> both_classes(Rng& rng, std::size_t n) {
    std::vector<int> y(n);
    for (int& v : y) v = rng.bernoulli(0.4) ? 1 : 0;
    y[0] = 1;
    y[1] = 0;
    shuffle(y, rng);
    return y;
}

Vec unit(Rng& rng, int d) {
    Vec v(static_cast<std::size_t>(d));
    double n = 0.0;
    for (double& x : v) {
        x = rng.normal();
        n += x * x;
    }
    for (double& x : v) x /= std::sqrt(n);
    return v;
}

embed::EmbeddingPool random_pool(Rng& rng, int n, int d) {
    embed::EmbeddingPool pool(d);
    for (int i = 0; i < n; ++i) pool.insert(i, unit(rng, d));
    return pool;
}

std::vector<evalkit::UserScores> random_users(Rng& rng) {
    std::vector<evalkit::UserScores> users(1 + rng.below(12));
    for (std::size_t u = 0; u < users.size(); ++u) {
        auto& us = users[u];
        us.user = static_cast<UserId>(u);
        const std::size_t n = (u == 0 ? 2 : 1) + rng.below(15);
        us.scores = tied_scores(rng, n);
        us.labels.resize(n);
        for (int& l : us.labels) l = rng.bernoulli(0.3) ? 1 : 0;
        us.items.resize(n);
        std::iota(us.items.begin(), us.items.end(), 0);
        shuffle(us.items, rng);
    }
    users[0].labels[0] = 1;
    users[0].labels[1] = 0;
    return users;
}

seqmodel::LmConfig tiny_lm(std::uint64_t seed) {
    seqmodel::LmConfig c;
    c.layers = 2;
    c.dim = 8;
    c.heads = 2;
    c.ffn_mult = 2;
    c.lora_rank = 2;
    c.seed = seed;
    return c;
}

void randomize(std::vector<double>& p, Rng& rng, double sd) {
    for (double& x : p) x = sd * rng.normal();
}

std::vector<int> random_prefix(Rng& rng, const seqmodel::VocabLayout& v, int items) {
    std::vector<int> t;
    for (int i = 0; i < v.prompt_tokens; ++i) t.push_back(i);
    for (int i = 0; i < items; ++i)
        for (int l = 0; l < v.levels(); ++l)
            t.push_back(v.token(l, static_cast<int>(rng.below(static_cast<std::size_t>(v.level_sizes[l])))));
    return t;
}

// Sample 20 coordinates among those where the analytic gradient is nonzero.
template <typename Loss>
double fd_worst(std::vector<double>& params, const std::vector<double>& grad, std::size_t limit, Rng& rng,
                double h, Loss&& loss) {
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < limit; ++i)
        if (grad[i] != 0.0) live.push_back(i);
    if (live.empty()) return kInf;
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
        const std::size_t i = live[rng.below(live.size())];
        const double fd = oracle::central_diff(params, i, h, loss);
        worst = std::max(worst, oracle::rel_err(grad[i], fd));
    }
    return worst;
}

struct RankerFixture {
    embed::EmbeddingPool pool;
    preranker::RankerModel model;
    preranker::Dataset data;
};

RankerFixture ranker_fixture(std::uint64_t seed) {
    Rng rng(seed, "check.ranker");
    const int items = 30;
    const int users = 8;
    RankerFixture f{random_pool(rng, items, 6), {}, {}};
    std::vector<CategoryId> cats(items);
    for (auto& c : cats) c = static_cast<CategoryId>(rng.below(4));
    preranker::RankerConfig cfg;
    cfg.dim = 4;
    cfg.init_std = 0.5;
    cfg.seed = seed;
    f.model = preranker::RankerModel(users, preranker::make_features(cats, 4, f.pool), cfg);
    randomize(f.model.params(), rng, 0.4);
    f.data.context_dim = 6;
    for (int i = 0; i < 24; ++i) {
        std::vector<ItemId> hist;
        for (std::size_t k = 0; k < 1 + rng.below(5); ++k) hist.push_back(static_cast<ItemId>(rng.below(items)));
        const int ctx = f.data.add_context(preranker::history_context(hist, f.model.features(), 20));
        // One unknown user and item each exercise the OOV rows.
        const UserId u = i == 0 ? users + 3 : static_cast<UserId>(rng.below(users));
        const ItemId h = i == 1 ? items + 7 : static_cast<ItemId>(rng.below(items));
        f.data.exposed.push_back({u, h, ctx, rng.bernoulli(0.5) ? 1.0 : 0.0, 1.0});
        f.data.pseudo.push_back({u, h, ctx, 0.05 + 0.9 * rng.uniform(), rng.uniform()});
    }
    return f;
}

double grad_ranker(std::uint64_t seed, bool pseudo) {
    RankerFixture f = ranker_fixture(seed);
    auto loss = [&] {
        return pseudo ? preranker::loss_pseudo(f.model, f.data.pseudo, f.data)
                      : preranker::loss_actual(f.model, f.data.exposed, f.data);
    };
    std::vector<double> g(f.model.params().size(), 0.0);
    if (pseudo) preranker::loss_pseudo(f.model, f.data.pseudo, f.data, &g);
    else preranker::loss_actual(f.model, f.data.exposed, f.data, &g);
    Rng rng(seed, "check.ranker.coords");
    return fd_worst(f.model.params(), g, g.size(), rng, 1e-6, loss);
}

}  // namespace

Result auc_vs_pairs(int trials, std::uint64_t seed) {
    Result r{0.0, trials};
    for (int t = 0; t < trials; ++t) {
        Rng rng(seed, "check.auc", static_cast<std::uint64_t>(t));
        const std::size_t n = 2 + rng.below(60);
        const auto s = tied_scores(rng, n);
        const auto y = both_classes(rng, n);
        r.worst = std::max(r.worst, std::abs(evalkit::auc(s, y) - oracle::pair_auc(s, y)));
    }
    return r;
}

Result gauc_vs_pairs(int trials, std::uint64_t seed) {
    Result r{0.0, trials};
    for (int t = 0; t < trials; ++t) {
        Rng rng(seed, "check.gauc", static_cast<std::uint64_t>(t));
        const auto users = random_users(rng);
        r.worst = std::max(r.worst, std::abs(evalkit::gauc(users).value - oracle::gauc(users)));
    }
    return r;
}

Result hr_vs_rank_count(int trials, std::uint64_t seed) {
    Result r{0.0, trials};
    for (int t = 0; t < trials; ++t) {
        Rng rng(seed, "check.hr", static_cast<std::uint64_t>(t));
        const auto users = random_users(rng);
        for (int k : {1, 3, 5, 10}) {
            r.worst = std::max(r.worst, std::abs(evalkit::hr_at_k(users, k) - oracle::hr(users, k)));
        }
    }
    return r;
}

Result beam_vs_enumeration(int trials, std::uint64_t seed) {
    Result r{0.0, trials};
    const std::vector<std::vector<int>> shapes = {{4, 4}, {3, 3}, {2, 2, 2}, {5, 3}};
    for (int t = 0; t < trials; ++t) {
        Rng rng(seed, "check.beam", static_cast<std::uint64_t>(t));
        seqmodel::VocabLayout v{2, shapes[static_cast<std::size_t>(t) % shapes.size()]};
        seqmodel::CausalLm m(v, tiny_lm(seed * 1000 + static_cast<std::uint64_t>(t)), 24);
        randomize(m.lora_params(), rng, 0.3);
        const auto prefix = random_prefix(rng, v, static_cast<int>(rng.below(4)));
        const auto all = oracle::enumerate_sids(m, prefix);
        const auto got = seqmodel::beam_search(m, prefix, static_cast<int>(all.size()));
        if (got.size() != all.size()) {
            r.worst = kInf;
            continue;
        }
        for (std::size_t i = 0; i < all.size(); ++i) {
            if (got[i].sid != all[i].sid) {
                r.worst = kInf;
                break;
            }
            r.worst = std::max(r.worst, std::abs(got[i].log_prob - all[i].log_prob));
        }
    }
    return r;
}

Result nearest_vs_scan(int trials, std::uint64_t seed) {
    Result r{0.0, trials};
    for (int t = 0; t < trials; ++t) {
        Rng rng(seed, "check.nn", static_cast<std::uint64_t>(t));
        const int d = 2 + static_cast<int>(rng.below(10));
        const auto pool = random_pool(rng, 1 + static_cast<int>(rng.below(80)), d);
        Vec q(static_cast<std::size_t>(d));
        for (double& x : q) x = rng.normal();
        if (embed::nearest_item(q, pool) != oracle::nearest(q, pool)) r.worst += 1.0;
    }
    return r;
}

Result sigma_rho_vs_loops(int trials, std::uint64_t seed) {
    Result r{0.0, trials};
    for (int t = 0; t < trials; ++t) {
        Rng rng(seed, "check.sigma", static_cast<std::uint64_t>(t));
        const int n = 40;
        const auto pool = random_pool(rng, n, 2 + static_cast<int>(rng.below(8)));
        seqmodel::AnchorSet set;
        std::vector<ItemId> ids;
        for (std::size_t b = 0; b < 1 + rng.below(12); ++b) {
            ids.push_back(static_cast<ItemId>(rng.below(n)));
            set.anchors.push_back({ids.back(), {}, 0.0, 0.0, seqmodel::ResolvedVia::table});
        }
        std::vector<ItemId> hist;
        for (std::size_t k = 0; k < rng.below(10); ++k) hist.push_back(static_cast<ItemId>(rng.below(n)));
        r.worst = std::max(r.worst, std::abs(pseudolabel::semantic_dispersion(set, pool) - oracle::sigma(ids, pool)));
        for (ItemId a : ids) {
            r.worst = std::max(r.worst,
                               std::abs(pseudolabel::historical_consistency(a, hist, pool) - oracle::rho(a, hist, pool)));
        }
    }
    return r;
}

double relevance_at_zero() {
    embed::EmbeddingPool pool(3);
    pool.insert(0, Vec{1.0, 0.0, 0.0});
    pool.insert(1, Vec{0.0, 1.0, 0.0});
    seqmodel::AnchorSet set;
    set.anchors.push_back({0, {}, 0.0, 0.0, seqmodel::ResolvedVia::table});
    double worst = 0.0;
    for (double log_tau : {-1.2, 0.0, 2.0}) {
        worst = std::max(worst, std::abs(pseudolabel::relevance(set, 1, pool, std::exp(log_tau)).r - 0.5));
    }
    return worst;
}

double bce_ln2() {
    double worst = std::max(std::abs(preranker::bce(0.5, 1.0) - std::log(2.0)),
                            std::abs(preranker::bce(0.5, 0.0) - std::log(2.0)));
    // A zeroed ranker predicts 0.5 everywhere; the pseudo loss with r = 0.5 and w = 1 is also ln 2.
    RankerFixture f = ranker_fixture(7);
    f.model.zero();
    worst = std::max(worst, std::abs(preranker::loss_actual(f.model, f.data.exposed, f.data) - std::log(2.0)));
    auto half = f.data.pseudo;
    for (auto& e : half) {
        e.label = 0.5;
        e.weight = 1.0;
    }
    return std::max(worst, std::abs(preranker::loss_pseudo(f.model, half, f.data) - std::log(2.0)));
}

double uniform_ntp() {
    seqmodel::VocabLayout v{4, {8, 8, 8}};
    seqmodel::CausalLm m(v, tiny_lm(3), 32);
    std::fill(m.base_params().begin(), m.base_params().end(), 0.0);
    Rng rng(3, "check.uniform");
    std::vector<seqmodel::SidSequence> batch;
    for (int i = 0; i < 4; ++i) {
        seqmodel::SidSequence s;
        s.tokens = random_prefix(rng, v, 3);
        s.prompt_length = v.prompt_tokens;
        s.target_start = static_cast<int>(s.tokens.size()) - v.levels();
        batch.push_back(s);
    }
    return std::abs(m.ntp_loss(batch, nullptr) - 3.0 * std::log(8.0));
}

double ema_rate() {
    quantizer::Codebooks books(1, 2, 3);
    const Vec w0 = {1.0, -2.0, 0.5};
    const Vec x = {0.2, 0.3, -0.4};
    std::copy(w0.begin(), w0.end(), books.codeword(0, 0).begin());
    std::copy(w0.begin(), w0.end(), books.ema_sums.begin());
    books.ema_counts[0] = 1.0;
    const std::vector<Vec> batch = {x};
    const std::vector<int> codes = {0};
    auto dist = [&] {
        double s = 0.0;
        for (int j = 0; j < 3; ++j) s += std::pow(books.codeword(0, 0)[static_cast<std::size_t>(j)] - x[j], 2);
        return std::sqrt(s);
    };
    double prev = dist();
    double worst = 0.0;
    for (int t = 0; t < 200; ++t) {
        quantizer::ema_update(books, 0, batch, codes, 0.99);
        const double now = dist();
        worst = std::max(worst, std::abs(now / prev - 0.99));
        prev = now;
    }
    return worst;
}

Result weight_sum(int trials, std::uint64_t seed) {
    Result r{0.0, trials};
    for (int t = 0; t < trials; ++t) {
        Rng rng(seed, "check.wsum", static_cast<std::uint64_t>(t));
        const std::size_t B = 1 + rng.below(64);
        Vec rho(B), conf(B);
        for (auto& x : rho) x = 2.0 * rng.uniform() - 1.0;
        for (auto& x : conf) x = -6.0 * rng.uniform();
        const double sigma = B == 1 ? 0.0 : 2.0 * rng.uniform();
        for (bool literal : {true, false}) {
            const auto rep = pseudolabel::confidence_weights(sigma, rho, conf, 0.6, 1.1, literal);
            const double s = std::accumulate(rep.w.begin(), rep.w.end(), 0.0);
            r.worst = std::max(r.worst, std::abs(s - std::exp(-sigma)));
        }
    }
    return r;
}

double grad_ntp_lora(std::uint64_t seed) {
    Rng rng(seed, "check.ntp");
    seqmodel::VocabLayout v{3, {5, 4}};
    seqmodel::CausalLm m(v, tiny_lm(seed), 32);
    randomize(m.lora_params(), rng, 0.4);
    std::vector<seqmodel::SidSequence> batch;
    for (int i = 0; i < 3; ++i) {
        seqmodel::SidSequence s;
        s.tokens = random_prefix(rng, v, 2 + i);
        s.prompt_length = v.prompt_tokens;
        s.target_start = i == 0 ? v.prompt_tokens : static_cast<int>(s.tokens.size()) - v.levels();
        batch.push_back(s);
    }
    seqmodel::Gradients g;
    g.lora.assign(m.lora_params().size(), 0.0);
    m.ntp_loss(batch, &g);
    return fd_worst(m.lora_params(), g.lora, g.lora.size(), rng, 1e-5, [&] { return m.ntp_loss(batch, nullptr); });
}

double grad_rqvae_encoder(std::uint64_t seed) {
    Rng rng(seed, "check.rqvae");
    quantizer::RqVaeConfig cfg;
    cfg.levels = 3;
    cfg.entries = 6;
    cfg.latent_dim = 4;
    cfg.hidden_dim = 7;
    cfg.seed = seed;
    const int d = 5;
    quantizer::RqVaeModel m(d, cfg);
    for (double& c : m.codebooks().codewords) c = 0.5 * rng.normal();
    std::vector<Vec> batch;
    for (int i = 0; i < 6; ++i) batch.push_back(unit(rng, d));

    std::vector<double> g;
    const auto base = m.loss(batch, &g);
    // Straight-through surrogate: the quantization offset and the selected codewords
    // are constants taken at the unperturbed point.
    std::vector<Vec> offset(batch.size());
    std::vector<std::vector<Vec>> prefix(batch.size()), chosen(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& q = base.quantized[i];
        const Vec e = m.encoder_forward(batch[i]);
        offset[i].resize(e.size());
        for (std::size_t j = 0; j < e.size(); ++j) offset[i][j] = q.zhat[j] - e[j];
        Vec acc(e.size(), 0.0);
        for (int l = 0; l < cfg.levels; ++l) {
            prefix[i].push_back(acc);
            const auto z = m.codebooks().codeword(l, q.sid.codes[static_cast<std::size_t>(l)]);
            chosen[i].emplace_back(z.begin(), z.end());
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += z[j];
        }
    }
    auto surrogate = [&] {
        double total = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const Vec e = m.encoder_forward(batch[i]);
            Vec z(e.size());
            for (std::size_t j = 0; j < e.size(); ++j) z[j] = e[j] + offset[i][j];
            const Vec xh = m.decoder_forward(z);
            double rec = 0.0;
            for (int j = 0; j < d; ++j) rec += std::pow(batch[i][j] - xh[j], 2);
            double com = 0.0;
            for (int l = 0; l < cfg.levels; ++l)
                for (std::size_t j = 0; j < e.size(); ++j)
                    com += std::pow(e[j] - prefix[i][l][j] - chosen[i][l][j], 2);
            total += rec + cfg.beta * com;
        }
        return total / static_cast<double>(batch.size());
    };
    return fd_worst(m.params(), g, m.encoder_param_count(), rng, 1e-6, surrogate);
}

double grad_ranker_actual(std::uint64_t seed) { return grad_ranker(seed, false); }
double grad_ranker_pseudo(std::uint64_t seed) { return grad_ranker(seed, true); }

bool causal_future_invariance(std::uint64_t seed) {
    Rng rng(seed, "check.causal");
    seqmodel::VocabLayout v{4, {6, 6}};
    seqmodel::CausalLm m(v, tiny_lm(seed), 32);
    randomize(m.lora_params(), rng, 0.3);
    for (int trial = 0; trial < 20; ++trial) {
        auto toks = random_prefix(rng, v, 5);
        const auto before = m.logits(toks);
        const std::size_t cut = 1 + rng.below(toks.size() - 1);
        for (std::size_t t = cut; t < toks.size(); ++t) {
            toks[t] = static_cast<int>(rng.below(static_cast<std::size_t>(v.vocab_size())));
        }
        const auto after = m.logits(toks);
        for (std::size_t t = 0; t < cut; ++t) {
            if (before[t] != after[t]) return false;
        }
    }
    return true;
}

bool lora_zero_identity(std::uint64_t seed) {
    Rng rng(seed, "check.lora");
    seqmodel::VocabLayout v{4, {6, 6}};
    seqmodel::CausalLm m(v, tiny_lm(seed), 32);
    m.reset_lora(rng);
    for (int trial = 0; trial < 10; ++trial) {
        const auto toks = random_prefix(rng, v, 4);
        m.set_lora_enabled(true);
        const auto on = m.logits(toks);
        m.set_lora_enabled(false);
        const auto off = m.logits(toks);
        if (on != off) return false;
    }
    return true;
}

}  // namespace checks
