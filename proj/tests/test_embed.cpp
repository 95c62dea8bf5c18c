#include "checks.hpp"

#include "gpl/corpus.hpp"
#include "gpl/embed.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace gpl;
using namespace gpl::embed;

TEST_CASE("nearest item matches a linear scan") {
    CHECK(checks::nearest_vs_scan(200, 21).worst == 0.0);
}

TEST_CASE("pool rows are unit norm and write-once") {
    corpus::WorldConfig wc;
    wc.num_users = 10;
    wc.num_items = 50;
    wc.num_categories = 5;
    wc.recall_size = 10;
    wc.expose_size = 3;
    const auto w = corpus::generate_world(wc);
    const auto pool = build_pool(w.items(), {});
    CHECK(pool.size() == 50);
    for (std::size_t r = 0; r < pool.size(); ++r) CHECK(std::abs(norm2(pool.row(r)) - 1.0) < 1e-12);

    EmbeddingPool p(2);
    p.insert(4, Vec{0.6, 0.8});
    CHECK_THROWS(p.insert(4, Vec{1.0, 0.0}));
    CHECK_THROWS(p.insert(5, Vec{1.0, 1.0}));
    CHECK(nearest_item(Vec{1.0, 1.4}, p) == 4);
}

TEST_CASE("nearest ties go to the smaller id") {
    EmbeddingPool p(2);
    p.insert(9, Vec{1.0, 0.0});
    p.insert(2, Vec{0.0, 1.0});
    CHECK(nearest_item(Vec{1.0, 1.0}, p) == 2);
}

TEST_CASE("encoder is deterministic and noise moves it") {
    corpus::ItemProfile it;
    it.id = 3;
    it.latent_content = {0.3, -0.2, 0.9, 0.1};
    const auto a = encode_item(it, {0.1, 1});
    CHECK(a == encode_item(it, {0.1, 1}));
    CHECK(a != encode_item(it, {0.1, 2}));
    const auto clean = encode_item(it, {0.0, 1});
    CHECK(cosine(clean, it.latent_content) == doctest::Approx(1.0));
}

TEST_CASE("pool file round trip keeps ids and directions") {
    Rng rng(1, "t");
    EmbeddingPool p(5);
    for (int i = 0; i < 20; ++i) {
        Vec v(5);
        for (double& x : v) x = rng.normal();
        const double n = norm2(v);
        for (double& x : v) x /= n;
        p.insert(100 + i, v);
    }
    const auto dir = std::filesystem::temp_directory_path() / "gpl_embed_test";
    std::filesystem::create_directories(dir);
    save_pool(p, (dir / "pool.bin").string(), (dir / "pool.idx").string());
    const auto q = load_pool((dir / "pool.bin").string(), (dir / "pool.idx").string());
    CHECK(q.ids() == p.ids());
    for (ItemId id : p.ids()) CHECK(cosine(q.at(id), p.at(id)) > 1 - 1e-12);
    std::filesystem::remove_all(dir);
}
