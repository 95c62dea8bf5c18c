#pragma once

#include "gpl/common.hpp"
#include "gpl/corpus.hpp"

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace gpl::embed {

struct EncoderConfig {
    double noise = 0.1;
    std::uint64_t seed = 1;
};

// Frozen content encoder: L2-normalized latent content plus a seeded per-item perturbation.
Vec encode_item(const corpus::ItemProfile& item, const EncoderConfig& cfg);

double cosine(std::span<const double> a, std::span<const double> b);

// Write-once store of unit-norm item embeddings.
class EmbeddingPool {
public:
    explicit EmbeddingPool(int dim = 0) : dim_(dim) {}

    int dim() const { return dim_; }
    std::size_t size() const { return ids_.size(); }
    bool empty() const { return ids_.empty(); }
    bool contains(ItemId id) const { return row_of_.count(id) != 0; }

    // Rejects overwrites and vectors that are not unit-norm within 1e-9.
    void insert(ItemId id, std::span<const double> v);

    std::span<const double> at(ItemId id) const;
    std::span<const double> row(std::size_t r) const {
        return {data_.data() + r * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)};
    }
    ItemId id_at(std::size_t r) const { return ids_[r]; }
    std::size_t row_index(ItemId id) const;
    const std::vector<ItemId>& ids() const { return ids_; }
    std::uint64_t content_hash() const;

private:
    int dim_;
    std::vector<ItemId> ids_;
    std::vector<double> data_;
    std::unordered_map<ItemId, std::size_t> row_of_;
};

EmbeddingPool build_pool(const std::vector<corpus::ItemProfile>& items, const EncoderConfig& cfg);

// argmax cosine over the pool; ties go to the smallest item id.
ItemId nearest_item(std::span<const double> query, const EmbeddingPool& pool);

// Binary tensor file plus an "itemId<TAB>row" sidecar. Loading renormalizes
// the float32 rows so the unit-norm invariant holds in memory.
void save_pool(const EmbeddingPool& pool, const std::string& bin_path, const std::string& index_path);
EmbeddingPool load_pool(const std::string& bin_path, const std::string& index_path);

}  // namespace gpl::embed
