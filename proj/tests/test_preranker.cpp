#include "checks.hpp"

#include "gpl/preranker.hpp"

#include <doctest.h>

#include <cmath>

using namespace gpl;
using namespace gpl::preranker;

namespace {

struct Toy {
    embed::EmbeddingPool pool{4};
    Dataset data;
    ItemFeatures feats;
};

Toy toy(std::uint64_t seed = 1) {
    Toy t;
    Rng rng(seed, "toy");
    const int items = 60;
    std::vector<CategoryId> cats(items);
    for (int i = 0; i < items; ++i) {
        Vec v(4);
        for (double& x : v) x = rng.normal();
        const double n = norm2(v);
        for (double& x : v) x /= n;
        t.pool.insert(i, v);
        cats[static_cast<std::size_t>(i)] = i % 5;
    }
    t.feats = make_features(cats, 5, t.pool);
    t.data.context_dim = 4;
    for (int u = 0; u < 20; ++u) {
        const Vec pref = Vec(t.pool.at(u).begin(), t.pool.at(u).end());
        const int ctx = t.data.add_context(pref);
        for (int k = 0; k < 30; ++k) {
            const ItemId h = static_cast<ItemId>(rng.below(items));
            const double c = dot(pref, t.pool.at(h));
            if (k < 15) t.data.exposed.push_back({u, h, ctx, c > 0 ? 1.0 : 0.0, 1.0});
            else t.data.pseudo.push_back({u, h, ctx, sigmoid(2 * c), 0.5});
        }
    }
    return t;
}

RankerConfig cfg(double lambda) {
    RankerConfig c;
    c.dim = 8;
    c.epochs = 3;
    c.batch_size = 32;
    c.lambda = lambda;
    return c;
}

}  // namespace

TEST_CASE("bce analytic values") {
    CHECK(checks::bce_ln2() < 1e-12);
    CHECK(bce(1 - 1e-7, 1.0) < 1e-6);
    CHECK(std::isfinite(bce(0.0, 1.0)));
    CHECK(std::isfinite(bce(1.0, 0.0)));
}

TEST_CASE("zero pseudo weights give zero pseudo loss") {
    auto t = toy();
    RankerModel m(20, t.feats, cfg(1.0));
    for (auto& e : t.data.pseudo) e.weight = 0.0;
    CHECK(loss_pseudo(m, t.data.pseudo, t.data) == 0.0);
}

TEST_CASE("both losses match central differences") {
    for (std::uint64_t s : {1u, 2u, 3u}) {
        CHECK(checks::grad_ranker_actual(s) < 1e-4);
        CHECK(checks::grad_ranker_pseudo(s) < 1e-4);
    }
}

TEST_CASE("scoring is pure and batch agrees") {
    auto t = toy();
    RankerModel m(20, t.feats, cfg(1.0));
    const auto& e = t.data.exposed[3];
    const double a = m.score(e.user, e.item, t.data.context(e.context));
    CHECK(a == m.score(e.user, e.item, t.data.context(e.context)));
    const std::vector<Example> one = {e};
    CHECK(m.score_batch(one, t.data)[0] == a);
    m.zero();
    CHECK(m.score(e.user, e.item, t.data.context(e.context)) == 0.5);
}

TEST_CASE("unknown ids share the oov row") {
    auto t = toy();
    RankerModel m(20, t.feats, cfg(1.0));
    const Vec ctx(4, 0.1);
    CHECK(m.score(500, 3, ctx) == m.score(900, 3, ctx));
}

TEST_CASE("training reduces the loss") {
    auto t = toy();
    RankerModel m(20, t.feats, cfg(1.0));
    auto c = cfg(1.0);
    c.lr = 1e-2;
    c.sparse_lr = 0.05;
    c.epochs = 10;
    const auto rep = train(m, t.data, c);
    CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
}

TEST_CASE("lambda zero is bitwise exposure-only training") {
    auto t = toy();
    RankerModel a(20, t.feats, cfg(0.0));
    RankerModel b(20, t.feats, cfg(0.0));
    train(a, t.data, cfg(0.0));
    Dataset exposed_only = t.data;
    exposed_only.pseudo.clear();
    train(b, exposed_only, cfg(0.0));
    CHECK(a.params() == b.params());

    RankerModel g(20, t.feats, cfg(1.0));
    train(g, t.data, cfg(1.0));
    CHECK(g.params() != a.params());
}

TEST_CASE("objective and its gradient are affine in lambda") {
    auto t = toy();
    RankerModel m(20, t.feats, cfg(1.0));
    auto at = [&](double lam, std::vector<double>& g) {
        g.assign(m.params().size(), 0.0);
        return loss_actual(m, t.data.exposed, t.data, &g) + lam * loss_pseudo(m, t.data.pseudo, t.data, &g, lam);
    };
    std::vector<double> g0, g1, g2;
    const double l0 = at(0.0, g0);
    for (double lam : {0.1, 0.3, 3.0}) {
        const double l1 = at(lam, g1);
        const double l2 = at(2 * lam, g2);
        CHECK(std::abs((l2 - l0) - 2 * (l1 - l0)) < 1e-12);
        double worst = 0.0;
        for (std::size_t i = 0; i < g0.size(); ++i) worst = std::max(worst, std::abs((g2[i] - g0[i]) - 2 * (g1[i] - g0[i])));
        CHECK(worst < 1e-12);
    }
}

TEST_CASE("pseudo-only training ignores exposed labels") {
    auto t = toy();
    auto c = cfg(1.0);
    c.actual_labels = false;
    RankerModel a(20, t.feats, c);
    train(a, t.data, c);
    Dataset flipped = t.data;
    for (auto& e : flipped.exposed) e.label = 1.0 - e.label;
    RankerModel b(20, t.feats, c);
    train(b, flipped, c);
    CHECK(a.params() == b.params());
}

TEST_CASE("config checks") {
    RankerConfig c;
    CHECK(c.lr == 1e-3);
    CHECK(c.sparse_lr == 1e-3);
    c.lambda = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
