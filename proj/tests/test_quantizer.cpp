#include "checks.hpp"

#include "gpl/corpus.hpp"
#include "gpl/embed.hpp"
#include "gpl/quantizer.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

using namespace gpl;
using namespace gpl::quantizer;

namespace {

embed::EmbeddingPool world_pool(int items, std::uint64_t seed = 2) {
    corpus::WorldConfig wc;
    wc.num_users = 10;
    wc.num_items = items;
    wc.num_categories = 20;
    wc.recall_size = 10;
    wc.expose_size = 3;
    wc.seed = seed;
    return embed::build_pool(corpus::generate_world(wc).items(), {0.1, seed});
}

}  // namespace

TEST_CASE("quantize recovers an exact codeword sum") {
    Codebooks b(2, 4, 2);
    for (int k = 0; k < 4; ++k) {
        b.codeword(0, k)[0] = k;
        b.codeword(1, k)[1] = 0.1 * k;
    }
    const Vec z = {3.0, 0.1};
    const auto q = quantize(b, z);
    CHECK(q.sid.codes == std::vector<int>{3, 1});
    CHECK(norm2(q.final_residual) == 0.0);
    CHECK(q.zhat == codeword_sum(b, q.sid));
}

TEST_CASE("nearest codeword on one level") {
    Codebooks b(1, 2, 2);
    b.codeword(0, 0)[0] = 1.0;
    b.codeword(0, 1)[1] = 1.0;
    CHECK(quantize(b, Vec{0.9, 0.1}).sid.codes == std::vector<int>{0});
    CHECK(quantize(b, Vec{0.5, 0.5}).sid.codes == std::vector<int>{0});  // tie
}

TEST_CASE("loss terms: perfect decoder and zero residuals give zero") {
    const Vec x = {0.2, 0.4};
    const std::vector<Vec> r = {{0.1, 0.1}, {0.0, 0.0}};
    const auto t0 = rqvae_loss_terms(x, x, r, r, 0.25);
    CHECK(t0.total == 0.0);
    const std::vector<Vec> z = {{0.0, 0.1}, {0.0, 0.0}};
    const auto t1 = rqvae_loss_terms(x, Vec{0.2, 0.0}, r, z, 0.25);
    CHECK(t1.reconstruction == doctest::Approx(0.16));
    CHECK(t1.commitment == doctest::Approx(0.01));
    CHECK(t1.total == doctest::Approx(0.16 + 0.25 * 0.01));
}

TEST_CASE("ema converges geometrically at the decay rate") {
    CHECK(checks::ema_rate() < 1e-9);
}

TEST_CASE("ema leaves unassigned codewords alone") {
    Codebooks b(1, 2, 2);
    b.codeword(0, 1)[0] = 0.7;
    const std::vector<Vec> res = {{1.0, 1.0}};
    const std::vector<int> codes = {0};
    ema_update(b, 0, res, codes, 0.99);
    CHECK(b.codeword(0, 1)[0] == 0.7);
    CHECK(b.codeword(0, 1)[1] == 0.0);
}

TEST_CASE("encoder gradient through the straight-through path") {
    for (std::uint64_t s : {1u, 2u, 3u}) CHECK(checks::grad_rqvae_encoder(s) < 1e-4);
}

TEST_CASE("kmeans: one cluster is the mean and error never rises") {
    Rng rng(4, "t");
    std::vector<Vec> pts;
    Vec mean(3, 0.0);
    for (int i = 0; i < 50; ++i) {
        Vec p = {rng.normal(), rng.normal(), rng.normal()};
        for (int j = 0; j < 3; ++j) mean[j] += p[j] / 50;
        pts.push_back(p);
    }
    Rng r1(1, "k");
    const auto one = kmeans(pts, 1, 10, r1);
    for (int j = 0; j < 3; ++j) CHECK(one.centroids[0][j] == doctest::Approx(mean[j]));
    Rng r2(1, "k");
    const auto many = kmeans(pts, 6, 20, r2);
    for (std::size_t i = 1; i < many.errors.size(); ++i) CHECK(many.errors[i] <= many.errors[i - 1] + 1e-12);
}

TEST_CASE("one-level residual kmeans is plain kmeans") {
    const auto pool = world_pool(300);
    RqKmeansConfig cfg;
    cfg.levels = 1;
    cfg.entries = 8;
    cfg.max_iters = 15;
    const auto books = fit_rq_kmeans(pool, cfg);
    std::vector<Vec> pts;
    for (std::size_t r = 0; r < pool.size(); ++r) pts.emplace_back(pool.row(r).begin(), pool.row(r).end());
    Rng rng(cfg.seed, "rqkmeans");
    const auto km = kmeans(pts, 8, 15, rng);
    for (int k = 0; k < 8; ++k) {
        const auto c = books.codeword(0, k);
        CHECK(Vec(c.begin(), c.end()) == km.centroids[static_cast<std::size_t>(k)]);
    }
}

TEST_CASE("rqvae training: mse halves, codes are used, few collisions") {
    const auto pool = world_pool(1500);
    RqVaeConfig cfg;
    cfg.epochs = 15;
    FitReport rep;
    const auto m = fit_rqvae(pool, cfg, &rep);
    REQUIRE(rep.epochs.size() == 15);
    CHECK(rep.epochs.back().reconstruction_mse < 0.5 * rep.epochs.front().reconstruction_mse);
    for (double u : rep.epochs.back().utilization) CHECK(u > 0.5);
    const auto table = build_lookup(m, pool);
    CHECK(table.num_items() == pool.size());
    CHECK(table.collision_rate() < 0.2);
}

TEST_CASE("lookup round trips and lists collisions") {
    embed::EmbeddingPool pool(2);
    pool.insert(0, Vec{1.0, 0.0});
    pool.insert(1, Vec{1.0, 0.0});
    pool.insert(2, Vec{0.0, 1.0});
    Codebooks b(1, 2, 2);
    b.codeword(0, 0)[0] = 1.0;
    b.codeword(0, 1)[1] = 1.0;
    RqKmeansModel tok(b);
    const auto t = build_lookup(tok, pool);
    REQUIRE(t.find(Sid{{0}}) != nullptr);
    CHECK(*t.find(Sid{{0}}) == std::vector<ItemId>{0, 1});
    for (ItemId id : pool.ids()) {
        const auto* items = t.find(t.sid_of(id));
        CHECK(std::find(items->begin(), items->end(), id) != items->end());
    }
    CHECK(t.collision_rate() == doctest::Approx(1.0 / 3.0));

    const auto dir = std::filesystem::temp_directory_path() / "gpl_lookup_test";
    std::filesystem::create_directories(dir);
    t.save((dir / "lookup.tsv").string());
    CHECK(LookupTable::load((dir / "lookup.tsv").string()).forward() == t.forward());
    std::filesystem::remove_all(dir);
}

TEST_CASE("tokenizer save and load agree") {
    const auto pool = world_pool(400);
    RqVaeConfig cfg;
    cfg.epochs = 2;
    cfg.entries = 16;
    const auto m = fit_rqvae(pool, cfg);
    const auto dir = std::filesystem::temp_directory_path() / "gpl_tok_test";
    m.save(dir.string());
    const auto back = load_tokenizer(dir.string(), pool);
    CHECK(back->kind() == "rqvae");
    for (std::size_t r = 0; r < 50; ++r) {
        CHECK(back->encode(pool.id_at(r), pool.row(r)).sid == m.encode(pool.id_at(r), pool.row(r)).sid);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("industrial codebook shape is accepted") {
    RqVaeConfig cfg;
    cfg.levels = 3;
    cfg.entries = 8192;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.beta == 0.25);
    CHECK(cfg.decay == 0.99);
}

TEST_CASE("sid text form") {
    const Sid s{{3, 0, 12}};
    CHECK(s.str() == "3,0,12");
    CHECK(Sid::parse("3,0,12") == s);
}
