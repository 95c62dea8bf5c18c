#include "checks.hpp"
#include "oracles.hpp"

#include "gpl/seqmodel.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

using namespace gpl;
using namespace gpl::seqmodel;

namespace {

LmConfig tiny(std::uint64_t seed = 1) {
    LmConfig c;
    c.layers = 1;
    c.dim = 8;
    c.heads = 2;
    c.ffn_mult = 2;
    c.lora_rank = 2;
    c.seed = seed;
    return c;
}

quantizer::LookupTable three_items() {
    quantizer::LookupTable t;
    t.add(quantizer::Sid{{0, 1, 2}}, {10});
    t.add(quantizer::Sid{{1, 1, 0}}, {11});
    t.add(quantizer::Sid{{3, 0, 1}}, {12, 13});
    return t;
}

}  // namespace

TEST_CASE("vocab layout offsets") {
    VocabLayout v{4, {8, 8, 8}};
    CHECK(v.vocab_size() == 28);
    CHECK(v.token(1, 3) == 15);
    CHECK(v.level_of(15) == 1);
    CHECK_THROWS(v.level_of(2));
    CHECK_THROWS(v.level_of(28));
}

TEST_CASE("input construction") {
    const VocabLayout v{4, {4, 4, 4}};
    const auto t = three_items();
    const std::vector<ItemId> none;
    CHECK(build_input(none, t, v, false).tokens == std::vector<int>{0, 1, 2, 3});
    const std::vector<ItemId> h = {10, 11, 12};
    const auto s = build_input(h, t, v, false);
    CHECK(s.tokens.size() == 4 + 3 * 3);
    CHECK(s.target_start == 13);
    const std::vector<ItemId> rev = {12, 11, 10};
    CHECK(build_input(rev, t, v, false).tokens != s.tokens);
    const auto tgt = build_input(h, t, v, true);
    CHECK(tgt.target_start == 10);
    CHECK(tgt.tokens == s.tokens);
}

TEST_CASE("uniform predictor loss is L ln K") {
    CHECK(checks::uniform_ntp() < 1e-12);
}

TEST_CASE("lora gradient matches central differences") {
    for (std::uint64_t s : {1u, 2u, 3u}) CHECK(checks::grad_ntp_lora(s) < 1e-4);
}

TEST_CASE("base gradient matches central differences") {
    VocabLayout v{2, {4, 3}};
    CausalLm m(v, tiny(5), 16);
    SidSequence s;
    s.tokens = {0, 1, v.token(0, 2), v.token(1, 1), v.token(0, 3), v.token(1, 0)};
    s.prompt_length = 2;
    s.target_start = 2;
    Gradients g;
    g.base.assign(m.base_params().size(), 0.0);
    m.sequence_loss(s, &g);
    Rng rng(5, "coords");
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
        std::size_t i;
        do i = rng.below(g.base.size());
        while (g.base[i] == 0.0);
        const double fd = oracle::central_diff(m.base_params(), i, 1e-5, [&] { return m.sequence_loss(s, nullptr); });
        worst = std::max(worst, oracle::rel_err(g.base[i], fd));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("causal mask: future tokens never change earlier logits") {
    CHECK(checks::causal_future_invariance(3));
}

TEST_CASE("zero-initialized lora is the identity") {
    CHECK(checks::lora_zero_identity(4));
    Rng rng(1, "t");
    std::vector<double> w(6), a(4), b(6, 0.0), x(2);
    for (double& z : w) z = rng.normal();
    for (double& z : a) z = rng.normal();
    for (double& z : x) z = rng.normal();
    const auto y = apply_lora(w, a, b, x, 3, 2, 2);
    for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(w[2 * i] * x[0] + w[2 * i + 1] * x[1]).epsilon(1e-14));
}

TEST_CASE("beam search equals exhaustive enumeration when B covers every sid") {
    CHECK(checks::beam_vs_enumeration(100, 8).worst < 1e-12);
}

TEST_CASE("width one is greedy decoding") {
    VocabLayout v{2, {5, 5, 5}};
    CausalLm m(v, tiny(9), 16);
    std::vector<int> toks = {0, 1};
    std::vector<int> codes;
    double lp = 0.0;
    for (int l = 0; l < 3; ++l) {
        const auto all = m.logits(toks).back();
        Vec lvl(all.begin() + v.offset(l), all.begin() + v.offset(l) + 5);
        const int k = static_cast<int>(std::max_element(lvl.begin(), lvl.end()) - lvl.begin());
        double z = 0.0;
        for (double q : lvl) z += std::exp(q - lvl[k]);
        lp -= std::log(z);
        codes.push_back(k);
        toks.push_back(v.token(l, k));
    }
    const auto b = beam_search(m, std::vector<int>{0, 1}, 1);
    REQUIRE(b.size() == 1);
    CHECK(b[0].sid.codes == codes);
    CHECK(b[0].log_prob == doctest::Approx(lp).epsilon(1e-12));
}

TEST_CASE("beam scores are non-increasing and distinct") {
    VocabLayout v{2, {6, 6, 6}};
    CausalLm m(v, tiny(10), 16);
    const auto b = beam_search(m, std::vector<int>{0, 1}, 20);
    CHECK(b.size() == 20);
    std::set<quantizer::Sid> seen;
    for (std::size_t i = 0; i < b.size(); ++i) {
        seen.insert(b[i].sid);
        if (i) CHECK(b[i].log_prob <= b[i - 1].log_prob);
    }
    CHECK(seen.size() == 20);
    CHECK_THROWS(beam_search(m, std::vector<int>{0, 1}, 217));
}

TEST_CASE("retention probabilities") {
    // frequencies 40, 10, 10 x 8 items, 1 x 10 items: top 10% of 20 items is the first two
    std::vector<std::vector<ItemId>> h(1);
    for (int i = 0; i < 40; ++i) h[0].push_back(0);
    for (int i = 1; i < 10; ++i)
        for (int k = 0; k < 10; ++k) h[0].push_back(i);
    for (int i = 10; i < 20; ++i) h[0].push_back(i);
    const auto keep = retention_probabilities(h, 0.10);
    CHECK(keep.at(0) == doctest::Approx(0.25));
    CHECK(keep.at(1) == 1.0);  // at the threshold frequency
    for (int i = 2; i < 20; ++i) CHECK(keep.at(i) == 1.0);

    Rng rng(3, "ds");
    int kept = 0;
    const int trials = 250;  // 40 draws each, 10^4 in total
    for (int t = 0; t < trials; ++t) {
        const auto out = downsample_corpus(h, 0.10, rng);
        for (ItemId id : out[0]) kept += id == 0;
    }
    const double n = trials * 40.0;
    const double sd = std::sqrt(n * 0.25 * 0.75);
    CHECK(std::abs(kept - 0.25 * n) < 3 * sd);
}

TEST_CASE("lm training: base frozen under lora, loss below uniform, deterministic") {
    VocabLayout v{4, {4, 4}};
    quantizer::LookupTable t;
    for (int k = 0; k < 16; ++k) t.add(quantizer::Sid{{k / 4, k % 4}}, {k});
    std::vector<std::vector<ItemId>> hist(40);
    Rng rng(2, "h");
    for (auto& h : hist) {
        ItemId x = static_cast<ItemId>(rng.below(16));
        for (int i = 0; i < 12; ++i) {
            h.push_back(x);
            x = (x + 1 + static_cast<ItemId>(rng.below(2))) % 16;
        }
    }
    LmConfig cfg = tiny(2);
    cfg.dim = 16;
    cfg.pretrain_epochs = 30;
    cfg.lora_epochs = 10;
    cfg.lr = 1e-2;
    cfg.downsample_fraction = 0;
    CausalLm m(v, cfg, 2 * cfg.max_history + v.prompt_tokens + 2);
    const auto pre = pretrain_corpus(hist, t, v, cfg);
    const auto ada = adaptation_corpus(hist, t, v, cfg);
    TrainLog log;
    pretrain_base(m, pre, cfg, &log);
    const auto frozen = m.base_params();
    train_lora(m, ada, cfg, &log);
    CHECK(m.base_params() == frozen);
    CHECK(log.lora_loss.back() < 2 * std::log(4.0));

    const auto again = train_lm(hist, t, v, cfg);
    const auto once = train_lm(hist, t, v, cfg);
    CHECK(again.base_params() == once.base_params());
    CHECK(again.lora_params() == once.lora_params());
}

TEST_CASE("anchors resolve through the table or the nearest neighbour") {
    embed::EmbeddingPool pool(2);
    pool.insert(0, Vec{1.0, 0.0});
    pool.insert(1, Vec{0.0, 1.0});
    quantizer::Codebooks b(1, 3, 2);
    b.codeword(0, 0)[0] = 1.0;
    b.codeword(0, 1)[1] = 1.0;
    b.codeword(0, 2)[0] = 0.9;
    b.codeword(0, 2)[1] = 0.2;
    quantizer::RqKmeansModel tok(b);
    quantizer::LookupTable t;
    t.add(quantizer::Sid{{1}}, {1});
    FallbackResolver fb(tok, pool);
    const std::vector<Beam> beams = {{quantizer::Sid{{1}}, -0.5}, {quantizer::Sid{{2}}, -1.0}};
    const auto set = resolve_anchors(beams, t, fb);
    REQUIRE(set.anchors.size() == 2);
    CHECK(set.anchors[0].item == 1);
    CHECK(set.anchors[0].via == ResolvedVia::table);
    CHECK(set.anchors[1].item == 0);
    CHECK(set.anchors[1].via == ResolvedVia::nn_fallback);
    CHECK(set.anchors[1].conf == -1.0);
}

TEST_CASE("model save and load") {
    VocabLayout v{2, {3, 3}};
    CausalLm m(v, tiny(6), 10);
    const auto dir = std::filesystem::temp_directory_path() / "gpl_lm_test";
    m.save(dir.string());
    const auto back = CausalLm::load(dir.string());
    const std::vector<int> toks = {0, 1, 2, 6};
    const auto a = m.logits(toks);
    const auto b = back.logits(toks);
    for (std::size_t t = 0; t < a.size(); ++t)
        for (std::size_t k = 0; k < a[t].size(); ++k) CHECK(std::abs(a[t][k] - b[t][k]) < 1e-5);
    std::filesystem::remove_all(dir);
}
