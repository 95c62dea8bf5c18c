#pragma once

#include "gpl/common.hpp"
#include "gpl/embed.hpp"
#include "gpl/kvconfig.hpp"
#include "gpl/seqmodel.hpp"

#include <span>
#include <string>
#include <vector>

namespace gpl::pseudolabel {

enum class Pooling { max, mean };

struct PseudoConfig {
    double log_tau = -1.2;
    double lambda1 = 0.6;
    double lambda2 = 1.1;
    bool literal_softmax = true;  // softmax over w~ (false: softmax over lambda1*rho + lambda2*conf)
    Pooling pooling = Pooling::max;
    bool confidence = true;       // false: every sample gets weight 1
    bool dispersion = true;       // false: sigma_u forced to 0
    int history_window = 20;

    double tau() const { return std::exp(log_tau); }
    static PseudoConfig from(const KvConfig& kv);
    void store(KvConfig& kv) const;
    void validate() const;
};

struct PseudoSample {
    UserId user = 0;
    ItemId item = 0;
    double r = 0.5;
    double w = 1.0;
    int best_anchor = 0;
    double sigma = 0.0;
};

struct UncertaintyReport {
    double sigma = 0.0;
    Vec rho;
    Vec conf;
    Vec w_tilde;
    Vec w;
};

struct Relevance {
    double r = 0.5;
    int best = 0;
    double score = 0.0;  // pooled cosine before the temperature
};

// r = sigmoid(pool_b cos(a_b, h) / tau); best = argmax_b cos, ties to the smallest b.
Relevance relevance(const seqmodel::AnchorSet& anchors, ItemId item, const embed::EmbeddingPool& pool, double tau,
                    Pooling pooling = Pooling::max);

// Mean pairwise (1 - cos) over ordered pairs; 0 for a single anchor.
double semantic_dispersion(const seqmodel::AnchorSet& anchors, const embed::EmbeddingPool& pool);

// Mean cosine between the anchor and each history item; 0 for an empty history.
double historical_consistency(ItemId anchor, std::span<const ItemId> history, const embed::EmbeddingPool& pool);

UncertaintyReport confidence_weights(double sigma, std::span<const double> rho, std::span<const double> conf,
                                     double lambda1, double lambda2, bool literal_softmax = true);

struct UserLabels {
    std::vector<PseudoSample> samples;
    UncertaintyReport report;
};

// One sample per unexposed item; w = w_{b*}. `history` is the user's click history, oldest first.
UserLabels label_unexposed(UserId user, std::span<const ItemId> unexposed, const seqmodel::AnchorSet& anchors,
                           std::span<const ItemId> history, const embed::EmbeddingPool& pool, const PseudoConfig& cfg);

void write_samples(const std::string& path, const std::vector<PseudoSample>& samples);
std::vector<PseudoSample> read_samples(const std::string& path);

}  // namespace gpl::pseudolabel
