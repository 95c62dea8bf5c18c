#include "gpl/embed.hpp"

#include "gpl/tensor_file.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace gpl::embed {

namespace {

void normalize(Vec& v) {
    const double n = norm2(v);
    for (auto& x : v) {
        x /= n;
    }
}

}  // namespace

Vec encode_item(const corpus::ItemProfile& item, const EncoderConfig& cfg) {
    if (item.latent_content.empty()) {
        throw InvalidArgument("item " + std::to_string(item.id) + " has no latent content");
    }
    Rng rng(cfg.seed, "embed.encoder", static_cast<std::uint64_t>(item.id));
    const double scale = cfg.noise / std::sqrt(static_cast<double>(item.latent_content.size()));
    Vec v = item.latent_content;
    normalize(v);
    for (auto& x : v) {
        x += scale * rng.normal();
    }
    normalize(v);
    return v;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw InvalidArgument("cosine: dimension mismatch");
    }
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) {
        throw InvalidArgument("cosine: zero-norm input");
    }
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

void EmbeddingPool::insert(ItemId id, std::span<const double> v) {
    if (static_cast<int>(v.size()) != dim_) {
        throw InvalidArgument("embedding dimension mismatch for item " + std::to_string(id));
    }
    if (row_of_.count(id)) {
        throw InvalidArgument("embedding pool is frozen: item " + std::to_string(id) + " already stored");
    }
    if (std::abs(norm2(v) - 1.0) > 1e-9) {
        throw InvalidArgument("embedding for item " + std::to_string(id) + " is not unit-norm");
    }
    row_of_[id] = ids_.size();
    ids_.push_back(id);
    data_.insert(data_.end(), v.begin(), v.end());
}

std::span<const double> EmbeddingPool::at(ItemId id) const {
    const auto it = row_of_.find(id);
    if (it == row_of_.end()) {
        throw InvalidArgument("item " + std::to_string(id) + " missing from embedding pool");
    }
    return row(it->second);
}

std::size_t EmbeddingPool::row_index(ItemId id) const {
    const auto it = row_of_.find(id);
    if (it == row_of_.end()) {
        throw InvalidArgument("item " + std::to_string(id) + " missing from embedding pool");
    }
    return it->second;
}

std::uint64_t EmbeddingPool::content_hash() const {
    std::uint64_t h = fnv1a64(std::string_view(reinterpret_cast<const char*>(ids_.data()), ids_.size() * sizeof(ItemId)));
    return fnv1a64(std::string_view(reinterpret_cast<const char*>(data_.data()), data_.size() * sizeof(double)), h);
}

EmbeddingPool build_pool(const std::vector<corpus::ItemProfile>& items, const EncoderConfig& cfg) {
    if (items.empty()) {
        throw InvalidArgument("build_pool: no items");
    }
    EmbeddingPool pool(static_cast<int>(items.front().latent_content.size()));
    for (const auto& it : items) {
        const Vec v = encode_item(it, cfg);
        pool.insert(it.id, v);
    }
    return pool;
}

ItemId nearest_item(std::span<const double> query, const EmbeddingPool& pool) {
    if (pool.empty()) {
        throw InvalidArgument("nearest_item: empty pool");
    }
    const double qn = norm2(query);
    if (!std::isfinite(qn) || qn == 0.0) {
        throw InvalidArgument("nearest_item: query must be finite and non-zero");
    }
    double best = -2.0;
    ItemId best_id = 0;
    for (std::size_t r = 0; r < pool.size(); ++r) {
        const double c = dot(query, pool.row(r)) / qn;
        const ItemId id = pool.id_at(r);
        if (c > best || (c == best && id < best_id)) {
            best = c;
            best_id = id;
        }
    }
    return best_id;
}

void save_pool(const EmbeddingPool& pool, const std::string& bin_path, const std::string& index_path) {
    Matrix m;
    m.rows = static_cast<std::uint32_t>(pool.size());
    m.cols = static_cast<std::uint32_t>(pool.dim());
    m.data.reserve(pool.size() * static_cast<std::size_t>(pool.dim()));
    for (std::size_t r = 0; r < pool.size(); ++r) {
        const auto row = pool.row(r);
        m.data.insert(m.data.end(), row.begin(), row.end());
    }
    write_tensor(bin_path, m);
    std::ostringstream idx;
    for (std::size_t r = 0; r < pool.size(); ++r) {
        idx << pool.id_at(r) << '\t' << r << '\n';
    }
    write_file(index_path, idx.str());
}

EmbeddingPool load_pool(const std::string& bin_path, const std::string& index_path) {
    const Matrix m = read_tensor(bin_path);
    std::istringstream idx(read_file(index_path));
    std::vector<ItemId> ids(m.rows, -1);
    ItemId id = 0;
    std::size_t row = 0;
    while (idx >> id >> row) {
        if (row >= ids.size()) {
            throw Error("pool index row out of range in '" + index_path + "'");
        }
        ids[row] = id;
    }
    EmbeddingPool pool(static_cast<int>(m.cols));
    for (std::size_t r = 0; r < m.rows; ++r) {
        if (ids[r] < 0) {
            throw Error("pool index is missing row " + std::to_string(r));
        }
        Vec v(m.data.begin() + static_cast<std::ptrdiff_t>(r * m.cols),
              m.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * m.cols));
        normalize(v);
        pool.insert(ids[r], v);
    }
    return pool;
}

}  // namespace gpl::embed
