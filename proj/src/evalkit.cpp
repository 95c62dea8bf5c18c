#include "gpl/evalkit.hpp"

#include "gpl/kvconfig.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace gpl::evalkit {

double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw InvalidArgument("auc: scores and labels differ in length");
    }
    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos = 0.0;
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) {
            ++j;
        }
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) {
            if (labels[idx[k]]) {
                rank_sum += avg_rank;
                pos += 1.0;
            }
        }
        i = j;
    }
    const double neg = static_cast<double>(n) - pos;
    if (pos == 0.0 || neg == 0.0) {
        throw InvalidArgument("auc: needs at least one positive and one negative");
    }
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

GaucResult gauc(std::span<const UserScores> users, bool weighted) {
    std::vector<const UserScores*> order;
    for (const auto& u : users) {
        order.push_back(&u);
    }
    std::sort(order.begin(), order.end(), [](const UserScores* a, const UserScores* b) { return a->user < b->user; });
    GaucResult r;
    double num = 0.0;
    double den = 0.0;
    for (const UserScores* u : order) {
        const auto pos = std::count(u->labels.begin(), u->labels.end(), 1);
        if (pos == 0 || pos == static_cast<long>(u->labels.size())) {
            ++r.skipped;
            continue;
        }
        const double w = weighted ? static_cast<double>(u->labels.size()) : 1.0;
        num += w * auc(u->scores, u->labels);
        den += w;
        ++r.eligible;
    }
    if (r.eligible == 0) {
        throw InvalidArgument("gauc: no user has both positive and negative labels");
    }
    r.value = num / den;
    return r;
}

double hr_at_k(std::span<const UserScores> users, int k) {
    if (k < 1) {
        throw InvalidArgument("hr_at_k: K must be >= 1");
    }
    double hits = 0.0;
    int evaluated = 0;
    for (const auto& u : users) {
        if (std::find(u.labels.begin(), u.labels.end(), 1) == u.labels.end()) {
            continue;
        }
        std::vector<std::size_t> idx(u.items.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            if (u.scores[a] != u.scores[b]) {
                return u.scores[a] > u.scores[b];
            }
            return u.items[a] < u.items[b];
        });
        const std::size_t top = std::min(idx.size(), static_cast<std::size_t>(k));
        for (std::size_t i = 0; i < top; ++i) {
            if (u.labels[idx[i]]) {
                hits += 1.0;
                break;
            }
        }
        ++evaluated;
    }
    if (evaluated == 0) {
        throw InvalidArgument("hr_at_k: no user has a clicked item");
    }
    return hits / evaluated;
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) {
        throw InvalidArgument("quantile: empty sample");
    }
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(values.size() - 1, lo + 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

AucStar auc_star(std::span<const double> pseudo, std::span<const int> clicks, int permutations, Rng& rng) {
    AucStar out;
    out.value = auc(pseudo, clicks);
    std::vector<int> shuffled(clicks.begin(), clicks.end());
    for (int p = 0; p < permutations; ++p) {
        shuffle(shuffled, rng);
        out.null_samples.push_back(auc(pseudo, shuffled));
    }
    if (!out.null_samples.empty()) {
        out.null_p95 = quantile(out.null_samples, 0.95);
        out.null_mean = std::accumulate(out.null_samples.begin(), out.null_samples.end(), 0.0) /
                        static_cast<double>(out.null_samples.size());
    }
    return out;
}

Concentration category_concentration(std::span<const CategoryId> impressions) {
    if (impressions.empty()) {
        throw InvalidArgument("category_concentration: no impressions");
    }
    std::map<CategoryId, long> counts;
    for (CategoryId c : impressions) {
        ++counts[c];
    }
    std::vector<long> sorted;
    for (const auto& [c, n] : counts) {
        sorted.push_back(n);
    }
    std::sort(sorted.rbegin(), sorted.rend());
    Concentration out;
    out.flagged = sorted.size() < 10;
    const std::size_t top = std::min<std::size_t>(10, sorted.size());
    const long in_top = std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(top), 0L);
    out.top10_share = static_cast<double>(in_top) / static_cast<double>(impressions.size());
    return out;
}

Buckets pv_buckets(std::span<const double> counts, int n) {
    if (n < 1) {
        throw InvalidArgument("pv_buckets: need at least one bucket");
    }
    if (counts.empty()) {
        throw InvalidArgument("pv_buckets: no items");
    }
    std::vector<double> sorted(counts.begin(), counts.end());
    std::sort(sorted.begin(), sorted.end());
    const auto N = sorted.size();
    Buckets b;
    for (int i = 1; i < n; ++i) {
        // Nearest-rank quantile i/n.
        const auto rank = static_cast<std::size_t>(std::ceil(static_cast<double>(i) * static_cast<double>(N) / n));
        const double edge = sorted[std::max<std::size_t>(rank, 1) - 1];
        if (!b.upper.empty() && edge == b.upper.back()) {
            b.merged = true;
            continue;
        }
        b.upper.push_back(edge);
    }
    if (!b.upper.empty() && b.upper.back() == sorted.back()) {
        b.merged = true;
        b.upper.back() = std::numeric_limits<double>::infinity();
    } else {
        b.upper.push_back(std::numeric_limits<double>::infinity());
    }
    b.item_counts.assign(b.upper.size(), 0);
    for (double c : counts) {
        const auto it = std::lower_bound(b.upper.begin(), b.upper.end(), c);
        const int k = static_cast<int>(it - b.upper.begin());
        b.of_item.push_back(k);
        ++b.item_counts[static_cast<std::size_t>(k)];
    }
    return b;
}

std::vector<BucketLift> pv_bucket_lift(const Buckets& buckets, std::span<const Impression> treatment,
                                       std::span<const Impression> baseline) {
    const std::size_t nb = buckets.upper.size();
    std::vector<BucketLift> out(nb);
    std::vector<double> ts(nb, 0.0), bs(nb, 0.0);
    auto tally = [&](std::span<const Impression> imps, std::vector<double>& sum, bool treat) {
        for (const auto& im : imps) {
            const auto k = static_cast<std::size_t>(buckets.of_item.at(static_cast<std::size_t>(im.item)));
            sum[k] += im.ctr;
            ++(treat ? out[k].treatment_impressions : out[k].baseline_impressions);
        }
    };
    tally(treatment, ts, true);
    tally(baseline, bs, false);
    for (std::size_t k = 0; k < nb; ++k) {
        auto& o = out[k];
        o.bucket = static_cast<int>(k);
        o.upper = buckets.upper[k];
        o.flagged = buckets.merged;
        if (o.treatment_impressions > 0) {
            o.treatment_ctr = ts[k] / o.treatment_impressions;
        }
        if (o.baseline_impressions > 0) {
            o.baseline_ctr = bs[k] / o.baseline_impressions;
        }
        if (o.treatment_impressions > 0 && o.baseline_impressions > 0 && o.baseline_ctr > 0) {
            o.lift = o.treatment_ctr / o.baseline_ctr - 1.0;
        } else {
            o.flagged = true;
        }
    }
    return out;
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string MetricReport::to_text() const {
    KvConfig kv;
    for (const auto& [k, v] : hr) {
        kv.set("hr@" + std::to_string(k), fmt(v));
    }
    kv.set("auc", fmt(auc));
    kv.set("gauc", fmt(gauc));
    kv.set("gauc.users", std::to_string(gauc_users));
    kv.set("gauc.skipped", std::to_string(gauc_skipped));
    kv.set("exposed_auc", fmt(exposed_auc));
    if (auc_star) {
        kv.set("auc_star", fmt(*auc_star));
    }
    if (auc_star_null_p95) {
        kv.set("auc_star.null_p95", fmt(*auc_star_null_p95));
    }
    kv.set("top10_category_share", fmt(top10_category_share));
    kv.set("top10_category_share.flagged", category_flagged ? "true" : "false");
    kv.set("recommended_ctr", fmt(recommended_ctr));
    kv.set("pv.buckets", std::to_string(pv.size()));
    for (const auto& b : pv) {
        const std::string p = "pv." + std::to_string(b.bucket) + ".";
        kv.set(p + "upper", fmt(b.upper));
        kv.set(p + "treatment_impressions", std::to_string(b.treatment_impressions));
        kv.set(p + "baseline_impressions", std::to_string(b.baseline_impressions));
        kv.set(p + "treatment_ctr", fmt(b.treatment_ctr));
        kv.set(p + "baseline_ctr", fmt(b.baseline_ctr));
        kv.set(p + "lift", fmt(b.lift));
        kv.set(p + "flagged", b.flagged ? "true" : "false");
    }
    return kv.dump();
}

std::string MetricReport::to_csv() const {
    std::string out = "metric,value\n";
    for (const auto& [k, v] : hr) {
        out += "hr@" + std::to_string(k) + "," + fmt(v) + "\n";
    }
    out += "auc," + fmt(auc) + "\n";
    out += "gauc," + fmt(gauc) + "\n";
    out += "exposed_auc," + fmt(exposed_auc) + "\n";
    if (auc_star) {
        out += "auc_star," + fmt(*auc_star) + "\n";
    }
    if (auc_star_null_p95) {
        out += "auc_star_null_p95," + fmt(*auc_star_null_p95) + "\n";
    }
    out += "top10_category_share," + fmt(top10_category_share) + "\n";
    out += "recommended_ctr," + fmt(recommended_ctr) + "\n";
    for (const auto& b : pv) {
        out += "pv" + std::to_string(b.bucket) + "_lift," + fmt(b.lift) + "\n";
    }
    return out;
}

MetricReport MetricReport::from_text(const std::string& text) {
    const KvConfig kv = KvConfig::parse(text);
    MetricReport r;
    for (const auto& [k, v] : kv.entries()) {
        if (k.rfind("hr@", 0) == 0) {
            r.hr[std::stoi(k.substr(3))] = std::stod(v);
        }
    }
    r.auc = kv.get_double("auc", 0.0);
    r.gauc = kv.get_double("gauc", 0.0);
    r.gauc_users = static_cast<int>(kv.get_int("gauc.users", 0));
    r.gauc_skipped = static_cast<int>(kv.get_int("gauc.skipped", 0));
    r.exposed_auc = kv.get_double("exposed_auc", 0.0);
    if (kv.has("auc_star")) {
        r.auc_star = kv.get_double("auc_star", 0.0);
    }
    if (kv.has("auc_star.null_p95")) {
        r.auc_star_null_p95 = kv.get_double("auc_star.null_p95", 0.0);
    }
    r.top10_category_share = kv.get_double("top10_category_share", 0.0);
    r.category_flagged = kv.get_bool("top10_category_share.flagged", false);
    r.recommended_ctr = kv.get_double("recommended_ctr", 0.0);
    const int nb = static_cast<int>(kv.get_int("pv.buckets", 0));
    for (int b = 0; b < nb; ++b) {
        const std::string p = "pv." + std::to_string(b) + ".";
        BucketLift l;
        l.bucket = b;
        l.upper = kv.get_double(p + "upper", 0.0);
        l.treatment_impressions = static_cast<int>(kv.get_int(p + "treatment_impressions", 0));
        l.baseline_impressions = static_cast<int>(kv.get_int(p + "baseline_impressions", 0));
        l.treatment_ctr = kv.get_double(p + "treatment_ctr", 0.0);
        l.baseline_ctr = kv.get_double(p + "baseline_ctr", 0.0);
        l.lift = kv.get_double(p + "lift", 0.0);
        l.flagged = kv.get_bool(p + "flagged", false);
        r.pv.push_back(l);
    }
    return r;
}

}  // namespace gpl::evalkit
