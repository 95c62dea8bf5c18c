#pragma once

#include "gpl/common.hpp"
#include "gpl/embed.hpp"
#include "gpl/kvconfig.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gpl::quantizer {

struct Sid {
    std::vector<int> codes;

    auto operator<=>(const Sid&) const = default;
    bool operator==(const Sid&) const = default;
    std::string str() const;  // "s1,s2,...,sL"
    static Sid parse(const std::string& s);
};

// L residual codebooks of K entries each, plus their EMA statistics.
struct Codebooks {
    int levels = 0;
    int entries = 0;
    int dim = 0;
    std::vector<double> codewords;   // L x K x dim
    std::vector<double> ema_counts;  // L x K
    std::vector<double> ema_sums;    // L x K x dim

    Codebooks() = default;
    Codebooks(int levels, int entries, int dim);

    std::span<double> codeword(int level, int k) {
        return {codewords.data() + index(level, k) * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
    std::span<const double> codeword(int level, int k) const {
        return {codewords.data() + index(level, k) * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
    std::size_t index(int level, int k) const {
        return static_cast<std::size_t>(level) * static_cast<std::size_t>(entries) + static_cast<std::size_t>(k);
    }
    void validate() const;
};

struct Quantized {
    Sid sid;
    std::vector<Vec> residuals;  // e^(1..L): input residual seen at each level
    Vec final_residual;          // e^(L+1)
    Vec zhat;                    // sum of selected codewords
};

// Greedy residual quantization; ties resolve to the smallest codeword index.
Quantized quantize(const Codebooks& books, std::span<const double> latent);

// Sum of codewords picked by `sid`.
Vec codeword_sum(const Codebooks& books, const Sid& sid);

// EMA codebook update from one batch: residuals[i] at `level` was assigned to codes[i].
// Codewords with no assignment in the batch keep their value.
void ema_update(Codebooks& books, int level, std::span<const Vec> residuals, std::span<const int> codes,
                double decay, double eps = 1e-5);

struct KmeansResult {
    std::vector<Vec> centroids;
    std::vector<int> assignment;
    std::vector<double> errors;  // total squared error after init and after each Lloyd iteration
};

// k-means++ seeding followed by Lloyd iterations; empty clusters keep their centroid.
KmeansResult kmeans(const std::vector<Vec>& points, int k, int max_iters, Rng& rng);

// Loss terms for one sample: ||x - xhat||^2 + beta * sum_l ||e_l - sg(z_l)||^2.
struct LossTerms {
    double reconstruction = 0.0;
    double commitment = 0.0;
    double total = 0.0;
};
LossTerms rqvae_loss_terms(std::span<const double> x, std::span<const double> xhat,
                           std::span<const Vec> residuals, std::span<const Vec> selected, double beta);

struct RqVaeConfig {
    int levels = 3;
    int entries = 64;
    int latent_dim = 32;
    int hidden_dim = 64;
    double beta = 0.25;
    double decay = 0.99;
    double ema_eps = 1e-5;
    double dead_code_threshold = 0.05;
    int epochs = 40;
    int batch_size = 256;
    double lr = 1e-3;
    std::uint64_t seed = 1;

    static RqVaeConfig from(const KvConfig& kv);
    void store(KvConfig& kv) const;
    void validate() const;
};

struct RqKmeansConfig {
    int levels = 3;
    int entries = 64;
    int max_iters = 50;
    std::uint64_t seed = 1;
};

struct Encoded {
    Sid sid;
    double reconstruction_error = 0.0;  // squared L2 distance to the decoded vector
};

// Maps item content to SIDs and SIDs back to the embedding space.
class SidTokenizer {
public:
    virtual ~SidTokenizer() = default;
    virtual std::string kind() const = 0;
    virtual int levels() const = 0;
    virtual int codebook_size(int level) const = 0;
    virtual Encoded encode(ItemId id, std::span<const double> embedding) const = 0;
    virtual Vec decode(const Sid& sid) const = 0;
    virtual void save(const std::string& dir) const = 0;
};

// Two-layer tanh encoder/decoder around residual codebooks trained by EMA.
class RqVaeModel : public SidTokenizer {
public:
    RqVaeModel() = default;
    RqVaeModel(int input_dim, const RqVaeConfig& cfg);

    std::string kind() const override { return "rqvae"; }
    int levels() const override { return books_.levels; }
    int codebook_size(int) const override { return books_.entries; }
    Encoded encode(ItemId id, std::span<const double> embedding) const override;
    Vec decode(const Sid& sid) const override;
    void save(const std::string& dir) const override;
    static RqVaeModel load(const std::string& dir);

    Vec encoder_forward(std::span<const double> x) const;
    Vec decoder_forward(std::span<const double> z) const;

    struct BatchLoss {
        double total = 0.0;
        double reconstruction = 0.0;
        double commitment = 0.0;
        std::vector<Quantized> quantized;
    };
    // Mean loss over rows of `batch`; when `grad` is non-null, accumulates
    // d(loss)/d(params) using the straight-through estimator at quantization.
    BatchLoss loss(const std::vector<Vec>& batch, std::vector<double>* grad) const;

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::size_t encoder_param_count() const { return enc_size_; }
    Codebooks& codebooks() { return books_; }
    const Codebooks& codebooks() const { return books_; }
    const RqVaeConfig& config() const { return cfg_; }
    int input_dim() const { return input_dim_; }

private:
    RqVaeConfig cfg_;
    int input_dim_ = 0;
    std::vector<double> params_;  // W1 b1 W2 b2 | W3 b3 W4 b4
    std::size_t enc_size_ = 0;
    Codebooks books_;
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double reconstruction_mse = 0.0;
    std::vector<double> utilization;  // per level: fraction of entries used by >= 1 item
};

struct FitReport {
    std::vector<EpochStats> epochs;
};

RqVaeModel fit_rqvae(const embed::EmbeddingPool& pool, const RqVaeConfig& cfg, FitReport* report = nullptr);

// Residual k-means directly on the embedding space.
class RqKmeansModel : public SidTokenizer {
public:
    RqKmeansModel() = default;
    explicit RqKmeansModel(Codebooks books) : books_(std::move(books)) {}

    std::string kind() const override { return "rqkmeans"; }
    int levels() const override { return books_.levels; }
    int codebook_size(int) const override { return books_.entries; }
    Encoded encode(ItemId id, std::span<const double> embedding) const override;
    Vec decode(const Sid& sid) const override { return codeword_sum(books_, sid); }
    void save(const std::string& dir) const override;
    static RqKmeansModel load(const std::string& dir);
    const Codebooks& codebooks() const { return books_; }

private:
    Codebooks books_;
};

Codebooks fit_rq_kmeans(const embed::EmbeddingPool& pool, const RqKmeansConfig& cfg);

// One token per item (the "without semantic IDs" variant): SID = (pool row).
class RawIdTokenizer : public SidTokenizer {
public:
    explicit RawIdTokenizer(const embed::EmbeddingPool& pool) : pool_(&pool) {}
    std::string kind() const override { return "rawid"; }
    int levels() const override { return 1; }
    int codebook_size(int) const override { return static_cast<int>(pool_->size()); }
    Encoded encode(ItemId id, std::span<const double> embedding) const override;
    Vec decode(const Sid& sid) const override;
    void save(const std::string& dir) const override;

private:
    const embed::EmbeddingPool* pool_;
};

// Loads whichever tokenizer kind the manifest in `dir` names.
std::unique_ptr<SidTokenizer> load_tokenizer(const std::string& dir, const embed::EmbeddingPool& pool);

class LookupTable {
public:
    // Items under one SID are ordered by reconstruction error, then id.
    const std::vector<ItemId>* find(const Sid& sid) const;
    const Sid& sid_of(ItemId id) const;
    bool has_item(ItemId id) const { return reverse_.count(id) != 0; }
    std::size_t num_sids() const { return forward_.size(); }
    std::size_t num_items() const { return reverse_.size(); }
    bool empty() const { return forward_.empty(); }
    double collision_rate() const;  // 1 - distinct SIDs / items
    const std::map<Sid, std::vector<ItemId>>& forward() const { return forward_; }

    void add(const Sid& sid, std::vector<ItemId> ordered_items);

    void save(const std::string& path) const;
    static LookupTable load(const std::string& path);

private:
    std::map<Sid, std::vector<ItemId>> forward_;
    std::map<ItemId, Sid> reverse_;
};

LookupTable build_lookup(const SidTokenizer& tok, const embed::EmbeddingPool& pool);

}  // namespace gpl::quantizer
