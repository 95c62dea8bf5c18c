#include "gpl/preranker.hpp"

#include "gpl/optim.hpp"
#include "gpl/tensor_file.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>

namespace gpl::preranker {

namespace fs = std::filesystem;

RankerConfig RankerConfig::from(const KvConfig& kv) {
    RankerConfig c;
    c.dim = static_cast<int>(kv.get_int("ranker.dim", c.dim));
    c.history_window = static_cast<int>(kv.get_int("ranker.history_window", c.history_window));
    c.lr = kv.get_double("ranker.lr", c.lr);
    c.sparse_lr = kv.get_double("ranker.sparse_lr", c.sparse_lr);
    c.adagrad_init = kv.get_double("ranker.adagrad_init", c.adagrad_init);
    c.epochs = static_cast<int>(kv.get_int("ranker.epochs", c.epochs));
    c.batch_size = static_cast<int>(kv.get_int("ranker.batch_size", c.batch_size));
    c.lambda = kv.get_double("ranker.lambda", c.lambda);
    c.actual_labels = kv.get_bool("ranker.actual_labels", c.actual_labels);
    c.unexposed_cap = static_cast<int>(kv.get_int("ranker.unexposed_cap", c.unexposed_cap));
    c.init_std = kv.get_double("ranker.init_std", c.init_std);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
    return c;
}

void RankerConfig::store(KvConfig& kv) const {
    char buf[64];
    kv.set("ranker.dim", std::to_string(dim));
    kv.set("ranker.history_window", std::to_string(history_window));
    std::snprintf(buf, sizeof buf, "%.17g", lambda);
    kv.set("ranker.lambda", buf);
    kv.set("ranker.actual_labels", actual_labels ? "true" : "false");
    std::snprintf(buf, sizeof buf, "%.17g", lr);
    kv.set("ranker.lr", buf);
    std::snprintf(buf, sizeof buf, "%.17g", sparse_lr);
    kv.set("ranker.sparse_lr", buf);
    std::snprintf(buf, sizeof buf, "%.17g", adagrad_init);
    kv.set("ranker.adagrad_init", buf);
    std::snprintf(buf, sizeof buf, "%.17g", init_std);
    kv.set("ranker.init_std", buf);
    kv.set("ranker.epochs", std::to_string(epochs));
    kv.set("ranker.batch_size", std::to_string(batch_size));
    kv.set("ranker.unexposed_cap", std::to_string(unexposed_cap));
    kv.set("seed", std::to_string(seed));
}

void RankerConfig::validate() const {
    if (dim < 1 || history_window < 1 || batch_size < 1 || epochs < 0) {
        throw ConfigError("ranker dim, history window and batch size must be positive");
    }
    if (!(adagrad_init >= 0)) {
        throw ConfigError("ranker.adagrad_init must be >= 0");
    }
    if (!(lambda >= 0) || !std::isfinite(lambda)) {
        throw ConfigError("ranker.lambda must be a finite value >= 0");
    }
    if (!(lr > 0) || !(sparse_lr > 0)) {
        throw ConfigError("ranker learning rates must be positive");
    }
    if (unexposed_cap < 0) {
        throw ConfigError("ranker.unexposed_cap must be >= 0");
    }
}

ItemFeatures make_features(const std::vector<CategoryId>& categories, int num_categories,
                           const embed::EmbeddingPool& pool) {
    ItemFeatures f;
    f.category = categories;
    f.num_categories = num_categories;
    f.content_dim = pool.dim();
    f.content.assign(categories.size() * static_cast<std::size_t>(pool.dim()), 0.0);
    for (std::size_t id = 0; id < categories.size(); ++id) {
        const auto v = pool.at(static_cast<ItemId>(id));
        std::copy(v.begin(), v.end(), f.content.begin() + static_cast<std::ptrdiff_t>(id * v.size()));
    }
    return f;
}

Vec history_context(std::span<const ItemId> clicks, const ItemFeatures& features, int window) {
    Vec c(static_cast<std::size_t>(features.content_dim), 0.0);
    const std::size_t m = std::min(clicks.size(), static_cast<std::size_t>(window));
    for (std::size_t i = clicks.size() - m; i < clicks.size(); ++i) {
        const auto v = features.content_of(clicks[i]);
        for (std::size_t j = 0; j < c.size(); ++j) {
            c[j] += v[j];
        }
    }
    if (m > 0) {
        for (double& x : c) {
            x /= static_cast<double>(m);
        }
    }
    return c;
}

int Dataset::add_context(std::span<const double> c) {
    if (static_cast<int>(c.size()) != context_dim) {
        throw InvalidArgument("context dimension mismatch");
    }
    contexts.insert(contexts.end(), c.begin(), c.end());
    return static_cast<int>(contexts.size() / static_cast<std::size_t>(context_dim)) - 1;
}

RankerModel::RankerModel(int num_users, ItemFeatures features, const RankerConfig& cfg)
    : num_users_(num_users),
      num_items_(static_cast<int>(features.category.size())),
      dim_(cfg.dim),
      features_(std::move(features)) {
    cfg.validate();
    const auto d = static_cast<std::size_t>(dim_);
    const auto cd = static_cast<std::size_t>(features_.content_dim);
    user_off_ = 0;
    item_off_ = (static_cast<std::size_t>(num_users_) + 1) * d;
    cat_off_ = item_off_ + (static_cast<std::size_t>(num_items_) + 1) * d;
    dense_off_ = cat_off_ + (static_cast<std::size_t>(features_.num_categories) + 1) * d;
    wh_off_ = dense_off_;
    wc_off_ = wh_off_ + d * cd;
    bias_off_ = wc_off_ + d * cd;
    params_.assign(bias_off_ + 1, 0.0);
    Rng rng(cfg.seed, "ranker.init");
    for (std::size_t i = 0; i < dense_off_; ++i) {
        params_[i] = cfg.init_std * rng.normal();
    }
    const double sd = 1.0 / std::sqrt(static_cast<double>(cd));
    for (std::size_t i = wh_off_; i < bias_off_; ++i) {
        params_[i] = sd * rng.normal();
    }
}

void RankerModel::sparse_rows(UserId u, ItemId h, std::vector<std::size_t>& out) const {
    const auto d = static_cast<std::size_t>(dim_);
    out.push_back(user_row(u) / d);
    out.push_back(item_row(h) / d);
    out.push_back(cat_row(h) / d);
}

void RankerModel::zero() { std::fill(params_.begin(), params_.end(), 0.0); }

std::size_t RankerModel::user_row(UserId u) const {
    const auto r = (u >= 0 && u < num_users_) ? static_cast<std::size_t>(u) : static_cast<std::size_t>(num_users_);
    return user_off_ + r * static_cast<std::size_t>(dim_);
}

std::size_t RankerModel::item_row(ItemId h) const {
    const auto r = (h >= 0 && h < num_items_) ? static_cast<std::size_t>(h) : static_cast<std::size_t>(num_items_);
    return item_off_ + r * static_cast<std::size_t>(dim_);
}

std::size_t RankerModel::cat_row(ItemId h) const {
    const auto c = (h >= 0 && h < num_items_) ? static_cast<std::size_t>(features_.category[static_cast<std::size_t>(h)])
                                              : static_cast<std::size_t>(features_.num_categories);
    return cat_off_ + c * static_cast<std::size_t>(dim_);
}

void RankerModel::user_vec(UserId u, std::span<const double> ctx, double* out) const {
    const auto cd = static_cast<std::size_t>(features_.content_dim);
    const double* e = params_.data() + user_row(u);
    for (int i = 0; i < dim_; ++i) {
        const double* w = params_.data() + wh_off_ + static_cast<std::size_t>(i) * cd;
        double s = e[i];
        for (std::size_t j = 0; j < cd; ++j) {
            s += w[j] * ctx[j];
        }
        out[i] = s;
    }
}

void RankerModel::item_vec(ItemId h, double* out) const {
    const auto cd = static_cast<std::size_t>(features_.content_dim);
    const double* e = params_.data() + item_row(h);
    const double* c = params_.data() + cat_row(h);
    const bool known = h >= 0 && h < num_items_;
    for (int i = 0; i < dim_; ++i) {
        double s = e[i] + c[i];
        if (known) {
            const double* w = params_.data() + wc_off_ + static_cast<std::size_t>(i) * cd;
            const auto x = features_.content_of(h);
            for (std::size_t j = 0; j < cd; ++j) {
                s += w[j] * x[j];
            }
        }
        out[i] = s;
    }
}

double RankerModel::logit(UserId u, ItemId h, std::span<const double> context) const {
    if (static_cast<int>(context.size()) != features_.content_dim) {
        throw InvalidArgument("ranker: context dimension mismatch");
    }
    std::vector<double> uv(static_cast<std::size_t>(dim_)), iv(static_cast<std::size_t>(dim_));
    user_vec(u, context, uv.data());
    item_vec(h, iv.data());
    return dot(uv, iv) + params_[bias_off_];
}

std::vector<double> RankerModel::score_batch(std::span<const Example> batch, const Dataset& data) const {
    std::vector<double> out;
    out.reserve(batch.size());
    for (const auto& e : batch) {
        out.push_back(score(e.user, e.item, data.context(e.context)));
    }
    return out;
}

void RankerModel::accumulate_grad(UserId u, ItemId h, std::span<const double> context, double coef,
                                  std::vector<double>& grad) const {
    const auto d = static_cast<std::size_t>(dim_);
    const auto cd = static_cast<std::size_t>(features_.content_dim);
    std::vector<double> uv(d), iv(d);
    user_vec(u, context, uv.data());
    item_vec(h, iv.data());
    double* gu = grad.data() + user_row(u);
    double* gi = grad.data() + item_row(h);
    double* gc = grad.data() + cat_row(h);
    const bool known = h >= 0 && h < num_items_;
    for (std::size_t i = 0; i < d; ++i) {
        const double du = coef * iv[i];
        const double di = coef * uv[i];
        gu[i] += du;
        gi[i] += di;
        gc[i] += di;
        double* gwh = grad.data() + wh_off_ + i * cd;
        for (std::size_t j = 0; j < cd; ++j) {
            gwh[j] += du * context[j];
        }
        if (known) {
            double* gwc = grad.data() + wc_off_ + i * cd;
            const auto x = features_.content_of(h);
            for (std::size_t j = 0; j < cd; ++j) {
                gwc[j] += di * x[j];
            }
        }
    }
    grad[bias_off_] += coef;
}

void RankerModel::save(const std::string& dir) const {
    fs::create_directories(dir);
    KvConfig kv;
    kv.set("num_users", std::to_string(num_users_));
    kv.set("num_items", std::to_string(num_items_));
    kv.set("num_categories", std::to_string(features_.num_categories));
    kv.set("content_dim", std::to_string(features_.content_dim));
    kv.set("ranker.dim", std::to_string(dim_));
    write_file(dir + "/manifest.txt", kv.dump());
    Matrix m;
    m.rows = 1;
    m.cols = static_cast<std::uint32_t>(params_.size());
    m.data = params_;
    write_tensor(dir + "/params.bin", m);
}

RankerModel RankerModel::load(const std::string& dir, ItemFeatures features) {
    const std::string manifest = dir + "/manifest.txt";
    if (!fs::exists(manifest)) {
        throw MissingArtifact("ranker checkpoint '" + manifest + "' not found", "train-ranker");
    }
    const KvConfig kv = KvConfig::load(manifest);
    RankerConfig cfg;
    cfg.dim = static_cast<int>(kv.get_int("ranker.dim", cfg.dim));
    if (kv.get_int("num_items", -1) != static_cast<long long>(features.category.size())) {
        throw Error("ranker checkpoint item count does not match the item features");
    }
    RankerModel m(static_cast<int>(kv.get_int("num_users", 0)), std::move(features), cfg);
    const Matrix p = read_tensor(dir + "/params.bin");
    if (p.data.size() != m.params_.size()) {
        throw Error("ranker parameter count mismatch in '" + dir + "'");
    }
    m.params_ = p.data;
    return m;
}

double clamp_prob(double y) { return std::clamp(y, kClampEps, 1.0 - kClampEps); }

double bce(double y_hat, double target) {
    const double p = clamp_prob(y_hat);
    return -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
}

namespace {

// d BCE / d logit, zero where the clamp is active.
double bce_logit_grad(double y_hat, double target) {
    if (y_hat < kClampEps || y_hat > 1.0 - kClampEps) {
        return 0.0;
    }
    return y_hat - target;
}

double weighted_loss(const RankerModel& m, std::span<const Example> batch, const Dataset& data,
                     std::vector<double>* grad, double scale, bool weighted) {
    const double inv = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (const auto& e : batch) {
        const auto ctx = data.context(e.context);
        const double y = m.score(e.user, e.item, ctx);
        const double w = weighted ? e.weight : 1.0;
        loss += w * bce(y, e.label);
        if (grad && w != 0.0) {
            m.accumulate_grad(e.user, e.item, ctx, scale * inv * w * bce_logit_grad(y, e.label), *grad);
        }
    }
    return loss * inv;
}

}  // namespace

double loss_actual(const RankerModel& m, std::span<const Example> batch, const Dataset& data,
                   std::vector<double>* grad, double scale) {
    if (batch.empty()) {
        throw InvalidArgument("loss_actual: empty exposed batch");
    }
    for (const auto& e : batch) {
        if (e.label != 0.0 && e.label != 1.0) {
            throw InvalidArgument("loss_actual: labels must be 0 or 1");
        }
    }
    return weighted_loss(m, batch, data, grad, scale, false);
}

double loss_pseudo(const RankerModel& m, std::span<const Example> batch, const Dataset& data,
                   std::vector<double>* grad, double scale) {
    if (batch.empty()) {
        throw InvalidArgument("loss_pseudo: empty pseudo batch");
    }
    for (const auto& e : batch) {
        if (!(e.label > 0.0 && e.label < 1.0) || !(e.weight >= 0.0)) {
            throw InvalidArgument("loss_pseudo: r must lie in (0, 1) and w must be >= 0");
        }
    }
    return weighted_loss(m, batch, data, grad, scale, true);
}

TrainReport train(RankerModel& model, const Dataset& data, const RankerConfig& cfg) {
    cfg.validate();
    const bool use_pseudo = cfg.lambda > 0.0 || !cfg.actual_labels;
    if (cfg.actual_labels && data.exposed.empty()) {
        throw InvalidArgument("ranker train: no exposed samples");
    }
    if (use_pseudo && data.pseudo.empty()) {
        throw InvalidArgument("ranker train: no pseudo samples");
    }
    const auto d = static_cast<std::size_t>(model.dim());
    const std::size_t sparse_rows = model.sparse_size() / d;
    SparseAdagrad adagrad(sparse_rows, d, cfg.sparse_lr, cfg.adagrad_init);
    const std::size_t dense_n = model.params().size() - model.sparse_size();
    Adam adam(dense_n, AdamConfig{cfg.lr});
    Rng erng(cfg.seed, "ranker.exposed");
    Rng prng(cfg.seed, "ranker.pseudo");

    std::vector<std::size_t> eorder(data.exposed.size()), porder(use_pseudo ? data.pseudo.size() : 0);
    std::iota(eorder.begin(), eorder.end(), 0);
    std::iota(porder.begin(), porder.end(), 0);
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t driver = cfg.actual_labels ? eorder.size() : porder.size();
    const std::size_t steps = (driver + bs - 1) / bs;

    std::vector<double> grad(model.params().size(), 0.0);
    std::vector<std::size_t> rows;
    std::vector<Example> eb, pb;
    TrainReport report;
    long step_no = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.actual_labels) {
            shuffle(eorder, erng);
        }
        if (use_pseudo) {
            shuffle(porder, prng);
        }
        double epoch_sum = 0.0;
        for (std::size_t s = 0; s < steps; ++s) {
            StepLoss sl;
            sl.step = ++step_no;
            eb.clear();
            pb.clear();
            if (cfg.actual_labels) {
                for (std::size_t i = s * bs; i < std::min(eorder.size(), (s + 1) * bs); ++i) {
                    eb.push_back(data.exposed[eorder[i]]);
                }
                sl.actual = loss_actual(model, eb, data, &grad, 1.0);
            }
            if (use_pseudo) {
                const std::size_t p0 = s * porder.size() / steps;
                const std::size_t p1 = (s + 1) * porder.size() / steps;
                for (std::size_t i = p0; i < p1; ++i) {
                    pb.push_back(data.pseudo[porder[i]]);
                }
                if (!pb.empty()) {
                    const double scale = cfg.actual_labels ? cfg.lambda : 1.0;
                    sl.pseudo = loss_pseudo(model, pb, data, &grad, scale);
                }
            }
            sl.total = cfg.actual_labels ? sl.actual + cfg.lambda * sl.pseudo : sl.pseudo;
            epoch_sum += sl.total;
            report.steps.push_back(sl);

            rows.clear();
            for (const auto* b : {&eb, &pb}) {
                for (const auto& e : *b) {
                    model.sparse_rows(e.user, e.item, rows);
                }
            }
            std::sort(rows.begin(), rows.end());
            rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
            for (std::size_t r : rows) {
                adagrad.update_row(std::span<double>(model.params().data() + r * d, d),
                                   std::span<const double>(grad.data() + r * d, d), r);
            }
            adam.step(std::span<double>(model.params().data() + model.sparse_size(), dense_n),
                      std::span<const double>(grad.data() + model.sparse_size(), dense_n));
            for (std::size_t r : rows) {
                std::fill_n(grad.begin() + static_cast<std::ptrdiff_t>(r * d), d, 0.0);
            }
            std::fill(grad.begin() + static_cast<std::ptrdiff_t>(model.sparse_size()), grad.end(), 0.0);
        }
        report.epoch_loss.push_back(epoch_sum / static_cast<double>(steps));
    }
    return report;
}

void write_loss_csv(const std::string& path, const TrainReport& report) {
    std::string out = "step,L_al,L_pl,L\n";
    char buf[128];
    for (const auto& s : report.steps) {
        std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g\n", s.step, s.actual, s.pseudo, s.total);
        out += buf;
    }
    write_file(path, out);
}

}  // namespace gpl::preranker
