#include "gpl/quantizer.hpp"

#include "gpl/optim.hpp"
#include "gpl/tensor_file.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace gpl::quantizer {

namespace fs = std::filesystem;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

std::string Sid::str() const {
    std::string out;
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (i) {
            out += ',';
        }
        out += std::to_string(codes[i]);
    }
    return out;
}

Sid Sid::parse(const std::string& s) {
    Sid sid;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        sid.codes.push_back(std::stoi(tok));
    }
    if (sid.codes.empty()) {
        throw Error("empty SID '" + s + "'");
    }
    return sid;
}

Codebooks::Codebooks(int levels_, int entries_, int dim_)
    : levels(levels_),
      entries(entries_),
      dim(dim_),
      codewords(static_cast<std::size_t>(levels_) * entries_ * dim_, 0.0),
      ema_counts(static_cast<std::size_t>(levels_) * entries_, 0.0),
      ema_sums(static_cast<std::size_t>(levels_) * entries_ * dim_, 0.0) {}

void Codebooks::validate() const {
    if (levels < 1 || entries < 2) {
        throw InvalidArgument("codebooks need L >= 1 and K >= 2");
    }
    for (double c : codewords) {
        if (!std::isfinite(c)) {
            throw InvalidArgument("non-finite codeword");
        }
    }
    for (double c : ema_counts) {
        if (c < 0) {
            throw InvalidArgument("negative EMA count");
        }
    }
}

namespace {

double sqdist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

int nearest_codeword(const Codebooks& books, int level, std::span<const double> r) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < books.entries; ++k) {
        const double d = sqdist(r, books.codeword(level, k));
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

}  // namespace

Quantized quantize(const Codebooks& books, std::span<const double> latent) {
    if (static_cast<int>(latent.size()) != books.dim) {
        throw InvalidArgument("quantize: latent dimension mismatch");
    }
    for (double x : latent) {
        if (!std::isfinite(x)) {
            throw InvalidArgument("quantize: non-finite latent");
        }
    }
    Quantized q;
    Vec r(latent.begin(), latent.end());
    q.zhat.assign(latent.size(), 0.0);
    for (int l = 0; l < books.levels; ++l) {
        const int k = nearest_codeword(books, l, r);
        q.sid.codes.push_back(k);
        q.residuals.push_back(r);
        const auto z = books.codeword(l, k);
        for (std::size_t i = 0; i < r.size(); ++i) {
            r[i] -= z[i];
            q.zhat[i] += z[i];
        }
    }
    q.final_residual = std::move(r);
    return q;
}

Vec codeword_sum(const Codebooks& books, const Sid& sid) {
    if (static_cast<int>(sid.codes.size()) != books.levels) {
        throw InvalidArgument("SID length does not match codebook levels");
    }
    Vec out(static_cast<std::size_t>(books.dim), 0.0);
    for (int l = 0; l < books.levels; ++l) {
        const int k = sid.codes[static_cast<std::size_t>(l)];
        if (k < 0 || k >= books.entries) {
            throw InvalidArgument("SID code out of range");
        }
        const auto z = books.codeword(l, k);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += z[i];
        }
    }
    return out;
}

void ema_update(Codebooks& books, int level, std::span<const Vec> residuals, std::span<const int> codes,
                double decay, double eps) {
    const auto K = static_cast<std::size_t>(books.entries);
    const auto D = static_cast<std::size_t>(books.dim);
    std::vector<double> count(K, 0.0);
    std::vector<double> sum(K * D, 0.0);
    for (std::size_t i = 0; i < residuals.size(); ++i) {
        const auto k = static_cast<std::size_t>(codes[i]);
        count[k] += 1.0;
        for (std::size_t j = 0; j < D; ++j) {
            sum[k * D + j] += residuals[i][j];
        }
    }
    for (std::size_t k = 0; k < K; ++k) {
        const std::size_t idx = books.index(level, static_cast<int>(k));
        books.ema_counts[idx] = decay * books.ema_counts[idx] + (1.0 - decay) * count[k];
        double* es = books.ema_sums.data() + idx * D;
        for (std::size_t j = 0; j < D; ++j) {
            es[j] = decay * es[j] + (1.0 - decay) * sum[k * D + j];
        }
        if (count[k] == 0.0) {
            continue;
        }
        auto cw = books.codeword(level, static_cast<int>(k));
        const double denom = std::max(books.ema_counts[idx], eps);
        for (std::size_t j = 0; j < D; ++j) {
            cw[j] = es[j] / denom;
        }
    }
}

KmeansResult kmeans(const std::vector<Vec>& points, int k, int max_iters, Rng& rng) {
    if (k < 1) {
        throw InvalidArgument("kmeans: k must be >= 1");
    }
    if (points.empty()) {
        throw InvalidArgument("kmeans: no points");
    }
    const std::size_t n = points.size();
    KmeansResult res;
    res.centroids.push_back(points[rng.below(n)]);
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) {
        d2[i] = sqdist(points[i], res.centroids[0]);
    }
    while (static_cast<int>(res.centroids.size()) < k) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        if (total <= 0.0) {
            throw InvalidArgument("kmeans: K = " + std::to_string(k) + " exceeds the number of distinct points");
        }
        double u = rng.uniform() * total;
        std::size_t pick = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (d2[i] <= 0.0) {
                continue;
            }
            u -= d2[i];
            pick = i;
            if (u < 0) {
                break;
            }
        }
        res.centroids.push_back(points[pick]);
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], sqdist(points[i], res.centroids.back()));
        }
    }

    const std::size_t dim = points[0].size();
    auto assign = [&](std::vector<int>& a) {
        double err = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double d = sqdist(points[i], res.centroids[static_cast<std::size_t>(c)]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            a[i] = best;
            err += bd;
        }
        return err;
    };
    res.assignment.assign(n, 0);
    res.errors.push_back(assign(res.assignment));
    for (int it = 0; it < max_iters; ++it) {
        std::vector<Vec> sums(static_cast<std::size_t>(k), Vec(dim, 0.0));
        std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = static_cast<std::size_t>(res.assignment[i]);
            ++counts[c];
            for (std::size_t j = 0; j < dim; ++j) {
                sums[c][j] += points[i][j];
            }
        }
        for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
            if (counts[c] == 0) {
                continue;
            }
            for (std::size_t j = 0; j < dim; ++j) {
                res.centroids[c][j] = sums[c][j] / static_cast<double>(counts[c]);
            }
        }
        std::vector<int> next(n);
        res.errors.push_back(assign(next));
        const bool same = next == res.assignment;
        res.assignment = std::move(next);
        if (same) {
            break;
        }
    }
    return res;
}

LossTerms rqvae_loss_terms(std::span<const double> x, std::span<const double> xhat,
                           std::span<const Vec> residuals, std::span<const Vec> selected, double beta) {
    LossTerms t;
    t.reconstruction = sqdist(x, xhat);
    for (std::size_t l = 0; l < residuals.size(); ++l) {
        t.commitment += sqdist(residuals[l], selected[l]);
    }
    t.total = t.reconstruction + beta * t.commitment;
    return t;
}

RqVaeConfig RqVaeConfig::from(const KvConfig& kv) {
    RqVaeConfig c;
    c.levels = static_cast<int>(kv.get_int("quantizer.levels", c.levels));
    c.entries = static_cast<int>(kv.get_int("quantizer.entries", c.entries));
    c.latent_dim = static_cast<int>(kv.get_int("quantizer.latent_dim", c.latent_dim));
    c.hidden_dim = static_cast<int>(kv.get_int("quantizer.hidden_dim", c.hidden_dim));
    c.beta = kv.get_double("quantizer.beta", c.beta);
    c.decay = kv.get_double("quantizer.decay", c.decay);
    c.dead_code_threshold = kv.get_double("quantizer.dead_code_threshold", c.dead_code_threshold);
    c.epochs = static_cast<int>(kv.get_int("quantizer.epochs", c.epochs));
    c.batch_size = static_cast<int>(kv.get_int("quantizer.batch_size", c.batch_size));
    c.lr = kv.get_double("quantizer.lr", c.lr);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
    return c;
}

void RqVaeConfig::store(KvConfig& kv) const {
    kv.set("quantizer.levels", std::to_string(levels));
    kv.set("quantizer.entries", std::to_string(entries));
    kv.set("quantizer.latent_dim", std::to_string(latent_dim));
    kv.set("quantizer.hidden_dim", std::to_string(hidden_dim));
    std::ostringstream os;
    os.precision(17);
    os << beta;
    kv.set("quantizer.beta", os.str());
    os.str("");
    os << decay;
    kv.set("quantizer.decay", os.str());
    os.str("");
    os << dead_code_threshold;
    kv.set("quantizer.dead_code_threshold", os.str());
    os.str("");
    os << lr;
    kv.set("quantizer.lr", os.str());
    kv.set("quantizer.epochs", std::to_string(epochs));
    kv.set("quantizer.batch_size", std::to_string(batch_size));
    kv.set("seed", std::to_string(seed));
}

void RqVaeConfig::validate() const {
    if (levels < 1 || entries < 2) {
        throw ConfigError("quantizer needs levels >= 1 and entries >= 2");
    }
    if (beta <= 0) {
        throw ConfigError("quantizer.beta must be positive");
    }
    if (decay <= 0 || decay >= 1) {
        throw ConfigError("quantizer.decay must lie in (0, 1)");
    }
    if (latent_dim < 1 || hidden_dim < 1 || batch_size < 1 || epochs < 0) {
        throw ConfigError("quantizer dimensions, batch size and epochs must be positive");
    }
}

RqVaeModel::RqVaeModel(int input_dim, const RqVaeConfig& cfg)
    : cfg_(cfg), input_dim_(input_dim), books_(cfg.levels, cfg.entries, cfg.latent_dim) {
    cfg_.validate();
    const std::size_t d = static_cast<std::size_t>(input_dim);
    const std::size_t h = static_cast<std::size_t>(cfg.hidden_dim);
    const std::size_t m = static_cast<std::size_t>(cfg.latent_dim);
    enc_size_ = h * d + h + m * h + m;
    params_.assign(enc_size_ + h * m + h + d * h + d, 0.0);
    Rng rng(cfg.seed, "rqvae.init");
    auto fill = [&](std::size_t off, std::size_t rows, std::size_t cols) {
        const double s = 1.0 / std::sqrt(static_cast<double>(cols));
        for (std::size_t i = 0; i < rows * cols; ++i) {
            params_[off + i] = s * rng.normal();
        }
    };
    std::size_t off = 0;
    fill(off, h, d);
    off += h * d + h;
    fill(off, m, h);
    off += m * h + m;
    fill(off, h, m);
    off += h * m + h;
    fill(off, d, h);
}

namespace {

struct MlpView {
    CMapMat w1;
    CMapVec b1;
    CMapMat w2;
    CMapVec b2;
};

MlpView mlp_view(const double* p, int in, int hidden, int out) {
    const auto ih = static_cast<Eigen::Index>(hidden);
    const auto ii = static_cast<Eigen::Index>(in);
    const auto io = static_cast<Eigen::Index>(out);
    return {CMapMat(p, ih, ii), CMapVec(p + ih * ii, ih), CMapMat(p + ih * ii + ih, io, ih),
            CMapVec(p + ih * ii + ih + io * ih, io)};
}

}  // namespace

Vec RqVaeModel::encoder_forward(std::span<const double> x) const {
    const auto v = mlp_view(params_.data(), input_dim_, cfg_.hidden_dim, cfg_.latent_dim);
    const Eigen::VectorXd h = (v.w1 * CMapVec(x.data(), static_cast<Eigen::Index>(x.size())) + v.b1).array().tanh();
    const Eigen::VectorXd e = v.w2 * h + v.b2;
    return Vec(e.data(), e.data() + e.size());
}

Vec RqVaeModel::decoder_forward(std::span<const double> z) const {
    const auto v = mlp_view(params_.data() + enc_size_, cfg_.latent_dim, cfg_.hidden_dim, input_dim_);
    const Eigen::VectorXd h = (v.w1 * CMapVec(z.data(), static_cast<Eigen::Index>(z.size())) + v.b1).array().tanh();
    const Eigen::VectorXd e = v.w2 * h + v.b2;
    return Vec(e.data(), e.data() + e.size());
}

RqVaeModel::BatchLoss RqVaeModel::loss(const std::vector<Vec>& batch, std::vector<double>* grad) const {
    if (batch.empty()) {
        throw InvalidArgument("rqvae loss: empty batch");
    }
    const int d = input_dim_;
    const int hdim = cfg_.hidden_dim;
    const int m = cfg_.latent_dim;
    const auto enc = mlp_view(params_.data(), d, hdim, m);
    const auto dec = mlp_view(params_.data() + enc_size_, m, hdim, d);
    const double inv_n = 1.0 / static_cast<double>(batch.size());

    if (grad) {
        grad->assign(params_.size(), 0.0);
    }
    // Gradient views: same layout as params_.
    double* g = grad ? grad->data() : nullptr;
    const auto ih = static_cast<Eigen::Index>(hdim);
    const auto id = static_cast<Eigen::Index>(d);
    const auto im = static_cast<Eigen::Index>(m);

    BatchLoss out;
    out.quantized.reserve(batch.size());
    for (const Vec& xv : batch) {
        const CMapVec x(xv.data(), id);
        const Eigen::VectorXd h1 = (enc.w1 * x + enc.b1).array().tanh();
        const Eigen::VectorXd e = enc.w2 * h1 + enc.b2;
        Quantized q = quantize(books_, std::span<const double>(e.data(), static_cast<std::size_t>(m)));
        const CMapVec zhat(q.zhat.data(), im);
        const Eigen::VectorXd h3 = (dec.w1 * zhat + dec.b1).array().tanh();
        const Eigen::VectorXd xhat = dec.w2 * h3 + dec.b2;

        const double recon = (x - xhat).squaredNorm();
        double commit = 0.0;
        Eigen::VectorXd commit_grad = Eigen::VectorXd::Zero(im);
        for (int l = 0; l < books_.levels; ++l) {
            const CMapVec r(q.residuals[static_cast<std::size_t>(l)].data(), im);
            const CMapVec z(books_.codeword(l, q.sid.codes[static_cast<std::size_t>(l)]).data(), im);
            commit += (r - z).squaredNorm();
            commit_grad += r - z;
        }
        out.reconstruction += recon * inv_n;
        out.commitment += commit * inv_n;
        out.total += (recon + cfg_.beta * commit) * inv_n;

        if (g) {
            // Decoder.
            const Eigen::VectorXd dxhat = -2.0 * inv_n * (x - xhat);
            double* gdec = g + enc_size_;
            Eigen::Map<RowMat>(gdec + ih * im + ih, id, ih) += dxhat * h3.transpose();
            Eigen::Map<Eigen::VectorXd>(gdec + ih * im + ih + id * ih, id) += dxhat;
            const Eigen::VectorXd da3 = (dec.w2.transpose() * dxhat).array() * (1.0 - h3.array().square());
            Eigen::Map<RowMat>(gdec, ih, im) += da3 * zhat.transpose();
            Eigen::Map<Eigen::VectorXd>(gdec + ih * im, ih) += da3;
            // Straight-through: d loss / d e receives d loss / d zhat unchanged.
            const Eigen::VectorXd de = dec.w1.transpose() * da3 + 2.0 * cfg_.beta * inv_n * commit_grad;
            Eigen::Map<RowMat>(g + ih * id + ih, im, ih) += de * h1.transpose();
            Eigen::Map<Eigen::VectorXd>(g + ih * id + ih + im * ih, im) += de;
            const Eigen::VectorXd da1 = (enc.w2.transpose() * de).array() * (1.0 - h1.array().square());
            Eigen::Map<RowMat>(g, ih, id) += da1 * x.transpose();
            Eigen::Map<Eigen::VectorXd>(g + ih * id, ih) += da1;
        }
        out.quantized.push_back(std::move(q));
    }
    return out;
}

Encoded RqVaeModel::encode(ItemId, std::span<const double> embedding) const {
    const Vec e = encoder_forward(embedding);
    const Quantized q = quantize(books_, e);
    const Vec xhat = decoder_forward(q.zhat);
    return {q.sid, sqdist(embedding, xhat)};
}

Vec RqVaeModel::decode(const Sid& sid) const { return decoder_forward(codeword_sum(books_, sid)); }

namespace {

void save_codebooks(const Codebooks& b, const std::string& dir) {
    for (int l = 0; l < b.levels; ++l) {
        Matrix m;
        m.rows = static_cast<std::uint32_t>(b.entries);
        m.cols = static_cast<std::uint32_t>(b.dim);
        const auto begin = b.codewords.begin() + static_cast<std::ptrdiff_t>(b.index(l, 0) * static_cast<std::size_t>(b.dim));
        m.data.assign(begin, begin + static_cast<std::ptrdiff_t>(m.rows * m.cols));
        write_tensor(dir + "/codebook_" + std::to_string(l) + ".bin", m);
    }
    Matrix counts;
    counts.rows = static_cast<std::uint32_t>(b.levels);
    counts.cols = static_cast<std::uint32_t>(b.entries);
    counts.data = b.ema_counts;
    write_tensor(dir + "/ema_counts.bin", counts);
}

Codebooks load_codebooks(const std::string& dir, int levels, int entries, int dim) {
    Codebooks b(levels, entries, dim);
    for (int l = 0; l < levels; ++l) {
        const Matrix m = read_tensor(dir + "/codebook_" + std::to_string(l) + ".bin");
        if (static_cast<int>(m.rows) != entries || static_cast<int>(m.cols) != dim) {
            throw Error("codebook shape mismatch in '" + dir + "'");
        }
        std::copy(m.data.begin(), m.data.end(),
                  b.codewords.begin() + static_cast<std::ptrdiff_t>(b.index(l, 0) * static_cast<std::size_t>(dim)));
    }
    b.ema_counts = read_tensor(dir + "/ema_counts.bin").data;
    for (std::size_t i = 0; i < b.ema_counts.size(); ++i) {
        for (int j = 0; j < dim; ++j) {
            b.ema_sums[i * static_cast<std::size_t>(dim) + static_cast<std::size_t>(j)] =
                b.codewords[i * static_cast<std::size_t>(dim) + static_cast<std::size_t>(j)] * b.ema_counts[i];
        }
    }
    return b;
}

KvConfig load_manifest(const std::string& dir) {
    const std::string path = dir + "/manifest.txt";
    if (!fs::exists(path)) {
        throw MissingArtifact("quantizer manifest '" + path + "' not found", "train-quantizer");
    }
    return KvConfig::load(path);
}

}  // namespace

void RqVaeModel::save(const std::string& dir) const {
    fs::create_directories(dir);
    KvConfig kv;
    kv.set("kind", "rqvae");
    kv.set("input_dim", std::to_string(input_dim_));
    cfg_.store(kv);
    kv.set("params", std::to_string(params_.size()));
    kv.set("encoder_params", std::to_string(enc_size_));
    write_file(dir + "/manifest.txt", kv.dump());
    Matrix p;
    p.rows = 1;
    p.cols = static_cast<std::uint32_t>(params_.size());
    p.data = params_;
    write_tensor(dir + "/params.bin", p);
    save_codebooks(books_, dir);
}

RqVaeModel RqVaeModel::load(const std::string& dir) {
    const KvConfig kv = load_manifest(dir);
    if (kv.get_string("kind", "") != "rqvae") {
        throw Error("'" + dir + "' does not hold an RQ-VAE checkpoint");
    }
    const RqVaeConfig cfg = RqVaeConfig::from(kv);
    RqVaeModel m(static_cast<int>(kv.get_int("input_dim", 0)), cfg);
    const Matrix p = read_tensor(dir + "/params.bin");
    if (p.data.size() != m.params_.size()) {
        throw Error("RQ-VAE parameter count mismatch in '" + dir + "'");
    }
    m.params_ = p.data;
    m.books_ = load_codebooks(dir, cfg.levels, cfg.entries, cfg.latent_dim);
    return m;
}

namespace {

std::vector<double> utilization(const RqVaeModel& model, const std::vector<Vec>& data) {
    const auto& b = model.codebooks();
    std::vector<std::set<int>> used(static_cast<std::size_t>(b.levels));
    for (const auto& x : data) {
        const Quantized q = quantize(b, model.encoder_forward(x));
        for (int l = 0; l < b.levels; ++l) {
            used[static_cast<std::size_t>(l)].insert(q.sid.codes[static_cast<std::size_t>(l)]);
        }
    }
    std::vector<double> out;
    for (const auto& s : used) {
        out.push_back(static_cast<double>(s.size()) / static_cast<double>(b.entries));
    }
    return out;
}

void init_codebooks_kmeans(Codebooks& books, std::vector<Vec> residuals, Rng& rng) {
    for (int l = 0; l < books.levels; ++l) {
        const KmeansResult km = kmeans(residuals, books.entries, 10, rng);
        for (int k = 0; k < books.entries; ++k) {
            auto cw = books.codeword(l, k);
            std::copy(km.centroids[static_cast<std::size_t>(k)].begin(), km.centroids[static_cast<std::size_t>(k)].end(),
                      cw.begin());
            const std::size_t idx = books.index(l, k);
            books.ema_counts[idx] = 1.0;
            std::copy(cw.begin(), cw.end(), books.ema_sums.begin() + static_cast<std::ptrdiff_t>(idx * static_cast<std::size_t>(books.dim)));
        }
        for (std::size_t i = 0; i < residuals.size(); ++i) {
            const auto z = books.codeword(l, km.assignment[i]);
            for (std::size_t j = 0; j < residuals[i].size(); ++j) {
                residuals[i][j] -= z[j];
            }
        }
    }
}

}  // namespace

RqVaeModel fit_rqvae(const embed::EmbeddingPool& pool, const RqVaeConfig& cfg, FitReport* report) {
    cfg.validate();
    if (pool.empty()) {
        throw InvalidArgument("fit_rqvae: empty pool");
    }
    RqVaeModel model(pool.dim(), cfg);
    std::vector<Vec> data;
    data.reserve(pool.size());
    for (std::size_t r = 0; r < pool.size(); ++r) {
        const auto row = pool.row(r);
        data.emplace_back(row.begin(), row.end());
    }
    Rng rng(cfg.seed, "rqvae.train");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    {
        shuffle(order, rng);
        const std::size_t n_init = std::min(data.size(), std::max<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                                                               4 * static_cast<std::size_t>(cfg.entries)));
        std::vector<Vec> latents;
        for (std::size_t i = 0; i < n_init; ++i) {
            latents.push_back(model.encoder_forward(data[order[i]]));
        }
        init_codebooks_kmeans(model.codebooks(), std::move(latents), rng);
    }

    Adam adam(model.params().size(), AdamConfig{cfg.lr});
    std::vector<double> grad;
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle(order, rng);
        double loss_sum = 0.0;
        double recon_sum = 0.0;
        std::size_t batches = 0;
        std::vector<std::vector<Vec>> last_residuals(static_cast<std::size_t>(cfg.levels));
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            std::vector<Vec> batch;
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(data[order[i]]);
            }
            const auto bl = model.loss(batch, &grad);
            loss_sum += bl.total;
            recon_sum += bl.reconstruction;
            ++batches;
            adam.step(model.params(), grad);
            for (int l = 0; l < cfg.levels; ++l) {
                std::vector<Vec> res;
                std::vector<int> codes;
                for (const auto& q : bl.quantized) {
                    res.push_back(q.residuals[static_cast<std::size_t>(l)]);
                    codes.push_back(q.sid.codes[static_cast<std::size_t>(l)]);
                }
                ema_update(model.codebooks(), l, res, codes, cfg.decay, cfg.ema_eps);
                last_residuals[static_cast<std::size_t>(l)] = std::move(res);
            }
        }
        // Dead-code reset from the last batch's residuals.
        auto& books = model.codebooks();
        for (int l = 0; l < cfg.levels; ++l) {
            const auto& pool_res = last_residuals[static_cast<std::size_t>(l)];
            for (int k = 0; k < cfg.entries; ++k) {
                const std::size_t idx = books.index(l, k);
                if (books.ema_counts[idx] >= cfg.dead_code_threshold || pool_res.empty()) {
                    continue;
                }
                const Vec& pick = pool_res[rng.below(pool_res.size())];
                auto cw = books.codeword(l, k);
                std::copy(pick.begin(), pick.end(), cw.begin());
                books.ema_counts[idx] = 1.0;
                std::copy(pick.begin(), pick.end(),
                          books.ema_sums.begin() + static_cast<std::ptrdiff_t>(idx * static_cast<std::size_t>(books.dim)));
            }
        }
        if (report) {
            EpochStats st;
            st.epoch = epoch;
            st.loss = loss_sum / static_cast<double>(batches);
            st.reconstruction_mse = recon_sum / static_cast<double>(batches);
            st.utilization = utilization(model, data);
            report->epochs.push_back(std::move(st));
        }
    }
    return model;
}

Encoded RqKmeansModel::encode(ItemId, std::span<const double> embedding) const {
    const Quantized q = quantize(books_, embedding);
    return {q.sid, sqdist(embedding, q.zhat)};
}

void RqKmeansModel::save(const std::string& dir) const {
    fs::create_directories(dir);
    KvConfig kv;
    kv.set("kind", "rqkmeans");
    kv.set("quantizer.levels", std::to_string(books_.levels));
    kv.set("quantizer.entries", std::to_string(books_.entries));
    kv.set("dim", std::to_string(books_.dim));
    write_file(dir + "/manifest.txt", kv.dump());
    save_codebooks(books_, dir);
}

RqKmeansModel RqKmeansModel::load(const std::string& dir) {
    const KvConfig kv = load_manifest(dir);
    if (kv.get_string("kind", "") != "rqkmeans") {
        throw Error("'" + dir + "' does not hold an RQ-Kmeans checkpoint");
    }
    return RqKmeansModel(load_codebooks(dir, static_cast<int>(kv.get_int("quantizer.levels", 0)),
                                        static_cast<int>(kv.get_int("quantizer.entries", 0)),
                                        static_cast<int>(kv.get_int("dim", 0))));
}

Codebooks fit_rq_kmeans(const embed::EmbeddingPool& pool, const RqKmeansConfig& cfg) {
    if (pool.empty()) {
        throw InvalidArgument("fit_rq_kmeans: empty pool");
    }
    if (cfg.levels < 1 || cfg.entries < 1) {
        throw InvalidArgument("fit_rq_kmeans: levels and entries must be positive");
    }
    std::vector<Vec> residuals;
    for (std::size_t r = 0; r < pool.size(); ++r) {
        const auto row = pool.row(r);
        residuals.emplace_back(row.begin(), row.end());
    }
    Codebooks books(cfg.levels, cfg.entries, pool.dim());
    Rng rng(cfg.seed, "rqkmeans");
    for (int l = 0; l < cfg.levels; ++l) {
        const KmeansResult km = kmeans(residuals, cfg.entries, cfg.max_iters, rng);
        std::vector<double> counts(static_cast<std::size_t>(cfg.entries), 0.0);
        for (int a : km.assignment) {
            counts[static_cast<std::size_t>(a)] += 1.0;
        }
        for (int k = 0; k < cfg.entries; ++k) {
            auto cw = books.codeword(l, k);
            std::copy(km.centroids[static_cast<std::size_t>(k)].begin(), km.centroids[static_cast<std::size_t>(k)].end(),
                      cw.begin());
            const std::size_t idx = books.index(l, k);
            books.ema_counts[idx] = counts[static_cast<std::size_t>(k)];
            for (std::size_t j = 0; j < cw.size(); ++j) {
                books.ema_sums[idx * cw.size() + j] = cw[j] * counts[static_cast<std::size_t>(k)];
            }
        }
        for (std::size_t i = 0; i < residuals.size(); ++i) {
            const auto z = books.codeword(l, km.assignment[i]);
            for (std::size_t j = 0; j < residuals[i].size(); ++j) {
                residuals[i][j] -= z[j];
            }
        }
    }
    return books;
}

Encoded RawIdTokenizer::encode(ItemId id, std::span<const double>) const {
    return {Sid{{static_cast<int>(pool_->row_index(id))}}, 0.0};
}

Vec RawIdTokenizer::decode(const Sid& sid) const {
    if (sid.codes.size() != 1 || sid.codes[0] < 0 || static_cast<std::size_t>(sid.codes[0]) >= pool_->size()) {
        throw InvalidArgument("raw-id SID out of range");
    }
    const auto row = pool_->row(static_cast<std::size_t>(sid.codes[0]));
    return Vec(row.begin(), row.end());
}

void RawIdTokenizer::save(const std::string& dir) const {
    fs::create_directories(dir);
    KvConfig kv;
    kv.set("kind", "rawid");
    kv.set("quantizer.levels", "1");
    kv.set("quantizer.entries", std::to_string(pool_->size()));
    write_file(dir + "/manifest.txt", kv.dump());
}

std::unique_ptr<SidTokenizer> load_tokenizer(const std::string& dir, const embed::EmbeddingPool& pool) {
    const KvConfig kv = load_manifest(dir);
    const std::string kind = kv.get_string("kind", "");
    if (kind == "rqvae") {
        return std::make_unique<RqVaeModel>(RqVaeModel::load(dir));
    }
    if (kind == "rqkmeans") {
        return std::make_unique<RqKmeansModel>(RqKmeansModel::load(dir));
    }
    if (kind == "rawid") {
        return std::make_unique<RawIdTokenizer>(pool);
    }
    throw Error("unknown tokenizer kind '" + kind + "' in '" + dir + "'");
}

const std::vector<ItemId>* LookupTable::find(const Sid& sid) const {
    const auto it = forward_.find(sid);
    return it == forward_.end() ? nullptr : &it->second;
}

const Sid& LookupTable::sid_of(ItemId id) const {
    const auto it = reverse_.find(id);
    if (it == reverse_.end()) {
        throw InvalidArgument("item " + std::to_string(id) + " missing from SID lookup table");
    }
    return it->second;
}

double LookupTable::collision_rate() const {
    if (reverse_.empty()) {
        return 0.0;
    }
    return 1.0 - static_cast<double>(forward_.size()) / static_cast<double>(reverse_.size());
}

void LookupTable::add(const Sid& sid, std::vector<ItemId> ordered_items) {
    for (ItemId id : ordered_items) {
        if (reverse_.count(id)) {
            throw InvalidArgument("item " + std::to_string(id) + " listed under two SIDs");
        }
        reverse_[id] = sid;
    }
    auto& list = forward_[sid];
    list.insert(list.end(), ordered_items.begin(), ordered_items.end());
}

void LookupTable::save(const std::string& path) const {
    std::ostringstream out;
    for (const auto& [sid, items] : forward_) {
        for (ItemId id : items) {
            out << sid.str() << '\t' << id << '\n';
        }
    }
    write_file(path, out.str());
}

LookupTable LookupTable::load(const std::string& path) {
    std::istringstream in(read_file(path));
    LookupTable t;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw Error("malformed lookup line: " + line);
        }
        t.add(Sid::parse(line.substr(0, tab)), {static_cast<ItemId>(std::stol(line.substr(tab + 1)))});
    }
    return t;
}

LookupTable build_lookup(const SidTokenizer& tok, const embed::EmbeddingPool& pool) {
    std::map<Sid, std::vector<std::pair<double, ItemId>>> groups;
    for (std::size_t r = 0; r < pool.size(); ++r) {
        const ItemId id = pool.id_at(r);
        const Encoded e = tok.encode(id, pool.row(r));
        groups[e.sid].emplace_back(e.reconstruction_error, id);
    }
    LookupTable t;
    for (auto& [sid, members] : groups) {
        std::sort(members.begin(), members.end());
        std::vector<ItemId> ids;
        for (const auto& [err, id] : members) {
            ids.push_back(id);
        }
        t.add(sid, std::move(ids));
    }
    return t;
}

}  // namespace gpl::quantizer
