#pragma once

#include "gpl/common.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gpl::evalkit {

// Rank-sum AUC; tied scores count one half.
double auc(std::span<const double> scores, std::span<const int> labels);

struct UserScores {
    UserId user = 0;
    std::vector<ItemId> items;
    std::vector<double> scores;
    std::vector<int> labels;
};

struct GaucResult {
    double value = 0.0;
    int eligible = 0;
    int skipped = 0;
};

// Mean of per-user AUC over users with both classes; `weighted` weights by impressions.
GaucResult gauc(std::span<const UserScores> users, bool weighted = false);

// Per user, rank items by score (ties: smaller item id first); a hit when any
// positive is in the top K. Users without positives are not evaluated.
double hr_at_k(std::span<const UserScores> users, int k);

struct AucStar {
    double value = 0.0;
    double null_p95 = 0.0;
    double null_mean = 0.0;
    std::vector<double> null_samples;
};

// AUC of pseudo-labels against clicks, plus a label-shuffle permutation null.
AucStar auc_star(std::span<const double> pseudo, std::span<const int> clicks, int permutations, Rng& rng);

// Empirical q-quantile of a sample (linear interpolation between order statistics).
double quantile(std::vector<double> values, double q);

struct Concentration {
    double top10_share = 0.0;
    bool flagged = false;  // fewer than 10 categories present
};

// Share of impressions in the 10 most-recommended categories.
Concentration category_concentration(std::span<const CategoryId> impressions);

struct Buckets {
    std::vector<double> upper;     // inclusive upper edge per bucket, ascending; last is +inf
    std::vector<int> of_item;      // bucket index per item
    std::vector<int> item_counts;  // items per bucket
    bool merged = false;
};

// `n` quantile buckets over per-item counts; coinciding edges are merged.
Buckets pv_buckets(std::span<const double> counts, int n = 7);

struct BucketLift {
    int bucket = 0;
    double upper = 0.0;
    int treatment_impressions = 0;
    int baseline_impressions = 0;
    double treatment_ctr = 0.0;
    double baseline_ctr = 0.0;
    double lift = 0.0;  // relative CTR change; 0 when either side has no impressions
    bool flagged = false;
};

struct Impression {
    ItemId item = 0;
    double ctr = 0.0;  // simulated click probability
};

// Per-bucket mean simulated CTR of recommended impressions, treatment vs baseline.
std::vector<BucketLift> pv_bucket_lift(const Buckets& buckets, std::span<const Impression> treatment,
                                       std::span<const Impression> baseline);

struct MetricReport {
    std::map<int, double> hr;
    double auc = 0.0;
    double gauc = 0.0;
    int gauc_users = 0;
    int gauc_skipped = 0;
    double exposed_auc = 0.0;
    std::optional<double> auc_star;
    std::optional<double> auc_star_null_p95;
    double top10_category_share = 0.0;
    bool category_flagged = false;
    double recommended_ctr = 0.0;
    std::vector<BucketLift> pv;

    std::string to_text() const;
    std::string to_csv() const;
    static MetricReport from_text(const std::string& text);
};

}  // namespace gpl::evalkit
