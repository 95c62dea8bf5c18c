#include "gpl/pseudolabel.hpp"

#include "gpl/tensor_file.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <sstream>

namespace gpl::pseudolabel {

PseudoConfig PseudoConfig::from(const KvConfig& kv) {
    PseudoConfig c;
    c.log_tau = kv.get_double("pseudo.log_tau", c.log_tau);
    c.lambda1 = kv.get_double("pseudo.lambda1", c.lambda1);
    c.lambda2 = kv.get_double("pseudo.lambda2", c.lambda2);
    c.literal_softmax = kv.get_bool("pseudo.literal_softmax", c.literal_softmax);
    const std::string pooling = kv.get_string("pseudo.pooling", "max");
    if (pooling == "max") {
        c.pooling = Pooling::max;
    } else if (pooling == "mean") {
        c.pooling = Pooling::mean;
    } else {
        throw ConfigError("pseudo.pooling must be 'max' or 'mean', got '" + pooling + "'");
    }
    c.confidence = kv.get_bool("pseudo.confidence", c.confidence);
    c.dispersion = kv.get_bool("pseudo.dispersion", c.dispersion);
    c.history_window = static_cast<int>(kv.get_int("pseudo.history_window", c.history_window));
    return c;
}

void PseudoConfig::store(KvConfig& kv) const {
    char buf[64];
    auto put = [&](const char* key, double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        kv.set(key, buf);
    };
    put("pseudo.log_tau", log_tau);
    put("pseudo.lambda1", lambda1);
    put("pseudo.lambda2", lambda2);
    kv.set("pseudo.literal_softmax", literal_softmax ? "true" : "false");
    kv.set("pseudo.pooling", pooling == Pooling::max ? "max" : "mean");
    kv.set("pseudo.confidence", confidence ? "true" : "false");
    kv.set("pseudo.dispersion", dispersion ? "true" : "false");
    kv.set("pseudo.history_window", std::to_string(history_window));
}

void PseudoConfig::validate() const {
    if (!std::isfinite(log_tau)) {
        throw ConfigError("pseudo.log_tau must be finite");
    }
    if (!std::isfinite(lambda1) || !std::isfinite(lambda2)) {
        throw ConfigError("pseudo.lambda1 and pseudo.lambda2 must be finite");
    }
    if (history_window < 1) {
        throw ConfigError("pseudo.history_window must be >= 1");
    }
}

Relevance relevance(const seqmodel::AnchorSet& anchors, ItemId item, const embed::EmbeddingPool& pool, double tau,
                    Pooling pooling) {
    if (!(tau > 0)) {
        throw InvalidArgument("relevance: tau must be positive");
    }
    if (anchors.anchors.empty()) {
        throw InvalidArgument("relevance: empty anchor set");
    }
    const auto h = pool.at(item);
    Relevance out;
    double best = -2.0;
    double sum = 0.0;
    for (std::size_t b = 0; b < anchors.anchors.size(); ++b) {
        const double c = embed::cosine(pool.at(anchors.anchors[b].item), h);
        sum += c;
        if (c > best) {
            best = c;
            out.best = static_cast<int>(b);
        }
    }
    out.score = pooling == Pooling::max ? best : sum / static_cast<double>(anchors.anchors.size());
    out.r = sigmoid(out.score / tau);
    return out;
}

double semantic_dispersion(const seqmodel::AnchorSet& anchors, const embed::EmbeddingPool& pool) {
    const std::size_t B = anchors.anchors.size();
    if (B == 0) {
        throw InvalidArgument("semantic_dispersion: empty anchor set");
    }
    if (B == 1) {
        return 0.0;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        const auto ai = pool.at(anchors.anchors[i].item);
        for (std::size_t j = i + 1; j < B; ++j) {
            s += 2.0 * (1.0 - embed::cosine(ai, pool.at(anchors.anchors[j].item)));
        }
    }
    return s / static_cast<double>(B * (B - 1));
}

double historical_consistency(ItemId anchor, std::span<const ItemId> history, const embed::EmbeddingPool& pool) {
    if (history.empty()) {
        return 0.0;
    }
    const auto a = pool.at(anchor);
    double s = 0.0;
    for (ItemId h : history) {
        s += embed::cosine(a, pool.at(h));
    }
    return s / static_cast<double>(history.size());
}

UncertaintyReport confidence_weights(double sigma, std::span<const double> rho, std::span<const double> conf,
                                     double lambda1, double lambda2, bool literal_softmax) {
    if (rho.size() != conf.size() || rho.empty()) {
        throw InvalidArgument("confidence_weights: rho and conf must be non-empty and the same length");
    }
    if (!std::isfinite(sigma) || !std::isfinite(lambda1) || !std::isfinite(lambda2)) {
        throw InvalidArgument("confidence_weights: non-finite input");
    }
    UncertaintyReport rep;
    rep.sigma = sigma;
    rep.rho.assign(rho.begin(), rho.end());
    rep.conf.assign(conf.begin(), conf.end());
    Vec logits(rho.size());
    for (std::size_t b = 0; b < rho.size(); ++b) {
        if (!std::isfinite(rho[b]) || !std::isfinite(conf[b])) {
            throw InvalidArgument("confidence_weights: non-finite input");
        }
        const double e = lambda1 * rho[b] + lambda2 * conf[b];
        rep.w_tilde.push_back(std::exp(lambda1 * rho[b]) * std::exp(lambda2 * conf[b]));
        logits[b] = literal_softmax ? rep.w_tilde.back() : e;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& x : logits) {
        x = std::exp(x - mx);
        z += x;
    }
    const double damp = std::exp(-sigma);
    for (double x : logits) {
        rep.w.push_back(damp * x / z);
    }
    return rep;
}

UserLabels label_unexposed(UserId user, std::span<const ItemId> unexposed, const seqmodel::AnchorSet& anchors,
                           std::span<const ItemId> history, const embed::EmbeddingPool& pool, const PseudoConfig& cfg) {
    const std::size_t B = anchors.anchors.size();
    if (B == 0) {
        throw InvalidArgument("label_unexposed: user " + std::to_string(user) + " has no anchors");
    }
    const std::size_t m = std::min(history.size(), static_cast<std::size_t>(cfg.history_window));
    const auto recent = history.subspan(history.size() - m);
    Vec rho(B), conf(B);
    for (std::size_t b = 0; b < B; ++b) {
        rho[b] = historical_consistency(anchors.anchors[b].item, recent, pool);
        conf[b] = anchors.anchors[b].conf;
    }
    const double sigma = cfg.dispersion ? semantic_dispersion(anchors, pool) : 0.0;
    UserLabels out;
    out.report = confidence_weights(sigma, rho, conf, cfg.lambda1, cfg.lambda2, cfg.literal_softmax);
    const double tau = cfg.tau();
    for (ItemId h : unexposed) {
        const Relevance rel = relevance(anchors, h, pool, tau, cfg.pooling);
        PseudoSample s;
        s.user = user;
        s.item = h;
        s.r = rel.r;
        s.best_anchor = rel.best;
        s.w = cfg.confidence ? out.report.w[static_cast<std::size_t>(rel.best)] : 1.0;
        s.sigma = sigma;
        out.samples.push_back(s);
    }
    return out;
}

void write_samples(const std::string& path, const std::vector<PseudoSample>& samples) {
    std::string out;
    out.reserve(samples.size() * 48);
    char buf[160];
    for (const auto& s : samples) {
        std::snprintf(buf, sizeof buf, "%d\t%d\t%.9f\t%.17g\t%d\t%.17g\n", s.user, s.item, s.r, s.w, s.best_anchor,
                      s.sigma);
        out += buf;
    }
    write_file(path, out);
}

std::vector<PseudoSample> read_samples(const std::string& path) {
    if (!std::filesystem::exists(path)) {
        throw MissingArtifact("pseudo-label file '" + path + "' not found", "pseudo-label");
    }
    const std::string text = read_file(path);
    std::vector<PseudoSample> out;
    const char* p = text.data();
    const char* end = p + text.size();
    auto field = [&](auto& v) {
        const auto [next, ec] = std::from_chars(p, end, v);
        if (ec != std::errc()) {
            throw Error("malformed pseudo-label record in '" + path + "'");
        }
        p = next < end ? next + 1 : next;
    };
    while (p < end) {
        if (*p == '\n') {
            ++p;
            continue;
        }
        PseudoSample s;
        field(s.user);
        field(s.item);
        field(s.r);
        field(s.w);
        field(s.best_anchor);
        field(s.sigma);
        out.push_back(s);
    }
    return out;
}

}  // namespace gpl::pseudolabel
