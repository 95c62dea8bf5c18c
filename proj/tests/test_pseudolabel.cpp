#include "checks.hpp"

#include "gpl/pseudolabel.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace gpl;
using namespace gpl::pseudolabel;

namespace {

seqmodel::AnchorSet anchors(std::initializer_list<ItemId> ids, std::initializer_list<double> conf = {}) {
    seqmodel::AnchorSet s;
    auto c = conf.begin();
    for (ItemId id : ids) {
        seqmodel::Anchor a;
        a.item = id;
        a.conf = c != conf.end() ? *c++ : -1.0;
        s.anchors.push_back(a);
    }
    return s;
}

embed::EmbeddingPool basis() {
    embed::EmbeddingPool p(3);
    p.insert(0, Vec{1, 0, 0});
    p.insert(1, Vec{0, 1, 0});
    p.insert(2, Vec{0, 0, 1});
    const double s = 1 / std::sqrt(2.0);
    p.insert(3, Vec{s, s, 0});
    return p;
}

}  // namespace

TEST_CASE("relevance analytic values") {
    CHECK(checks::relevance_at_zero() == 0.0);
    const auto p = basis();
    const auto r = relevance(anchors({0}), 0, p, 1.0);
    CHECK(r.r == doctest::Approx(1 / (1 + std::exp(-1.0))).epsilon(1e-12));
    CHECK_THROWS(relevance(anchors({0}), 0, p, 0.0));
}

TEST_CASE("max and mean pooling differ when anchors disagree") {
    const auto p = basis();
    const auto set = anchors({0, 1, 2});
    const double tau = std::exp(-1.2);
    const auto mx = relevance(set, 3, p, tau, Pooling::max);
    const auto mn = relevance(set, 3, p, tau, Pooling::mean);
    const double c = 1 / std::sqrt(2.0);
    CHECK(mx.r == doctest::Approx(sigmoid(c / tau)));
    CHECK(mn.r == doctest::Approx(sigmoid((2 * c / 3) / tau)));
    CHECK(mx.best == 0);  // tie between anchors 0 and 1
}

TEST_CASE("dispersion and consistency against loops") {
    CHECK(checks::sigma_rho_vs_loops(200, 31).worst < 1e-12);
    const auto p = basis();
    CHECK(semantic_dispersion(anchors({1, 1, 1}), p) == 0.0);
    CHECK(semantic_dispersion(anchors({0, 1}), p) == doctest::Approx(1.0));
    CHECK(semantic_dispersion(anchors({2}), p) == 0.0);
    const std::vector<ItemId> same = {0, 0};
    const std::vector<ItemId> orth = {1, 2};
    CHECK(historical_consistency(0, same, p) == doctest::Approx(1.0));
    CHECK(historical_consistency(0, orth, p) == 0.0);
    CHECK(historical_consistency(0, {}, p) == 0.0);
}

TEST_CASE("weights sum to exp(-sigma)") {
    CHECK(checks::weight_sum(300, 32).worst < 1e-9);
}

TEST_CASE("weight special cases") {
    const std::vector<double> one = {0.3};
    const std::vector<double> conf1 = {-2.0};
    const auto w1 = confidence_weights(0.0, one, conf1, 0.6, 1.1);
    CHECK(w1.w.size() == 1);
    CHECK(w1.w[0] == doctest::Approx(1.0));

    const std::vector<double> rho(4, 0.2), conf(4, -1.5);
    const auto w = confidence_weights(0.7, rho, conf, 0.6, 1.1);
    for (double x : w.w) CHECK(x == doctest::Approx(std::exp(-0.7) / 4));
}

TEST_CASE("literal form applies softmax to the exponentiated scores") {
    const std::vector<double> rho = {0.5, -0.1, 0.2};
    const std::vector<double> conf = {-0.3, -2.0, -1.0};
    const auto lit = confidence_weights(0.4, rho, conf, 0.6, 1.1, true);
    const auto alt = confidence_weights(0.4, rho, conf, 0.6, 1.1, false);
    double z_lit = 0, z_alt = 0;
    std::vector<double> wt(3), s(3);
    for (int b = 0; b < 3; ++b) {
        s[b] = 0.6 * rho[b] + 1.1 * conf[b];
        wt[b] = std::exp(0.6 * rho[b]) * std::exp(1.1 * conf[b]);
        z_lit += std::exp(wt[b]);
        z_alt += std::exp(s[b]);
    }
    for (int b = 0; b < 3; ++b) {
        CHECK(lit.w_tilde[b] == doctest::Approx(wt[b]));
        CHECK(lit.w[b] == doctest::Approx(std::exp(-0.4) * std::exp(wt[b]) / z_lit));
        CHECK(alt.w[b] == doctest::Approx(std::exp(-0.4) * std::exp(s[b]) / z_alt));
    }
}

TEST_CASE("labelling the unexposed set") {
    const auto p = basis();
    const auto set = anchors({0, 1}, {-0.5, -2.0});
    const std::vector<ItemId> un = {2, 3, 1};
    const std::vector<ItemId> hist = {0, 3};
    PseudoConfig cfg;
    const auto out = label_unexposed(7, un, set, hist, p, cfg);
    REQUIRE(out.samples.size() == 3);
    const double sigma = semantic_dispersion(set, p);
    for (const auto& s : out.samples) {
        CHECK(s.user == 7);
        CHECK(s.w <= std::exp(-sigma) + 1e-15);
        CHECK(s.w == out.report.w[static_cast<std::size_t>(s.best_anchor)]);
    }
    CHECK(out.samples[2].best_anchor == 1);
    CHECK(std::accumulate(out.report.w.begin(), out.report.w.end(), 0.0) == doctest::Approx(std::exp(-sigma)));

    cfg.confidence = false;
    for (const auto& s : label_unexposed(7, un, set, hist, p, cfg).samples) CHECK(s.w == 1.0);
    cfg.confidence = true;
    cfg.dispersion = false;
    const auto nod = label_unexposed(7, un, set, hist, p, cfg);
    CHECK(std::accumulate(nod.report.w.begin(), nod.report.w.end(), 0.0) == doctest::Approx(1.0));
}

TEST_CASE("defaults") {
    PseudoConfig c;
    CHECK(c.lambda1 == 0.6);
    CHECK(c.lambda2 == 1.1);
    CHECK(c.log_tau == -1.2);
    CHECK(c.literal_softmax);
}
