#pragma once

#include "gpl/common.hpp"
#include "gpl/embed.hpp"
#include "gpl/kvconfig.hpp"

#include <span>
#include <string>
#include <vector>

namespace gpl::preranker {

inline constexpr double kClampEps = 1e-7;

struct RankerConfig {
    int dim = 32;
    int history_window = 20;
    double lr = 1e-3;         // Adam, dense parameters
    double sparse_lr = 1e-3;  // Adagrad, embedding rows
    double adagrad_init = 0.0;  // initial Adagrad accumulator
    int epochs = 4;
    int batch_size = 256;
    double lambda = 3.0;
    bool actual_labels = true;
    int unexposed_cap = 0;  // pseudo samples kept per user; 0 keeps all
    double init_std = 0.05;
    std::uint64_t seed = 1;

    static RankerConfig from(const KvConfig& kv);
    void store(KvConfig& kv) const;
    void validate() const;
};

// Frozen item side information indexed by item id.
struct ItemFeatures {
    std::vector<CategoryId> category;
    int num_categories = 0;
    int content_dim = 0;
    std::vector<double> content;  // items x content_dim

    std::span<const double> content_of(ItemId id) const {
        return {content.data() + static_cast<std::size_t>(id) * static_cast<std::size_t>(content_dim),
                static_cast<std::size_t>(content_dim)};
    }
};

ItemFeatures make_features(const std::vector<CategoryId>& categories, int num_categories,
                           const embed::EmbeddingPool& pool);

// Mean content vector of the last `window` clicks; zeros when there are none.
Vec history_context(std::span<const ItemId> clicks, const ItemFeatures& features, int window);

struct Example {
    UserId user = 0;
    ItemId item = 0;
    int context = 0;     // row of the context table
    double label = 0.0;  // y for exposed, r for pseudo
    double weight = 1.0;
};

struct Dataset {
    int context_dim = 0;
    std::vector<double> contexts;  // rows of context_dim
    std::vector<Example> exposed;
    std::vector<Example> pseudo;

    std::span<const double> context(int row) const {
        return {contexts.data() + static_cast<std::size_t>(row) * static_cast<std::size_t>(context_dim),
                static_cast<std::size_t>(context_dim)};
    }
    int add_context(std::span<const double> c);
};

// Two towers. User: E_user[u] + W_h * history context. Item: E_item[h] + E_cat[c(h)] + W_c * content(h).
// Score = sigmoid(<user, item> + bias). Unknown ids share a trailing OOV row.
class RankerModel {
public:
    RankerModel() = default;
    RankerModel(int num_users, ItemFeatures features, const RankerConfig& cfg);

    double logit(UserId u, ItemId h, std::span<const double> context) const;
    double score(UserId u, ItemId h, std::span<const double> context) const { return sigmoid(logit(u, h, context)); }
    std::vector<double> score_batch(std::span<const Example> batch, const Dataset& data) const;

    // Accumulates d(sample loss)/d(params) scaled by `coef` for d loss / d logit = coef.
    void accumulate_grad(UserId u, ItemId h, std::span<const double> context, double coef,
                         std::vector<double>& grad) const;

    // Embedding-table rows (in units of dim) read when scoring (u, h).
    void sparse_rows(UserId u, ItemId h, std::vector<std::size_t>& out) const;

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::size_t sparse_size() const { return dense_off_; }
    int dim() const { return dim_; }
    int num_users() const { return num_users_; }
    const ItemFeatures& features() const { return features_; }
    void zero();

    void save(const std::string& dir) const;
    static RankerModel load(const std::string& dir, ItemFeatures features);

private:
    std::size_t user_row(UserId u) const;
    std::size_t item_row(ItemId h) const;
    std::size_t cat_row(ItemId h) const;
    void user_vec(UserId u, std::span<const double> ctx, double* out) const;
    void item_vec(ItemId h, double* out) const;

    int num_users_ = 0;
    int num_items_ = 0;
    int dim_ = 0;
    ItemFeatures features_;
    std::vector<double> params_;
    std::size_t user_off_ = 0, item_off_ = 0, cat_off_ = 0, dense_off_ = 0, wh_off_ = 0, wc_off_ = 0, bias_off_ = 0;
};

double clamp_prob(double y);
double bce(double y_hat, double target);

// Mean BCE over the exposed part.
double loss_actual(const RankerModel& m, std::span<const Example> batch, const Dataset& data,
                   std::vector<double>* grad = nullptr, double scale = 1.0);
// Mean w * BCE(r) over the pseudo part.
double loss_pseudo(const RankerModel& m, std::span<const Example> batch, const Dataset& data,
                   std::vector<double>* grad = nullptr, double scale = 1.0);

struct StepLoss {
    long step = 0;
    double actual = 0.0;
    double pseudo = 0.0;
    double total = 0.0;
};

struct TrainReport {
    std::vector<StepLoss> steps;
    std::vector<double> epoch_loss;
};

// Minimizes L_al + lambda * L_pl (or L_pl alone when actual labels are off).
// lambda = 0 never touches the pseudo part, so it reproduces exposed-only training.
TrainReport train(RankerModel& model, const Dataset& data, const RankerConfig& cfg);

void write_loss_csv(const std::string& path, const TrainReport& report);

}  // namespace gpl::preranker
