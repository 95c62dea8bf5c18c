#pragma once

#include "gpl/common.hpp"
#include "gpl/kvconfig.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace gpl::corpus {

struct WorldConfig {
    int num_users = 1000;
    int num_items = 5000;
    int latent_dim = 32;
    int num_categories = 40;
    double zipf_exponent = 1.1;
    // Category weights follow their own Zipf law; item popularity ranks are
    // pulled toward popular categories by `popularity_category_coupling`.
    double category_zipf_exponent = 1.0;
    double popularity_category_coupling = 1.0;
    double category_size_exponent = 0.5;
    double item_spread = 0.6;
    int max_interests = 3;
    double user_spread = 0.3;
    double user_category_exponent = 0.5;
    double affinity_scale = 4.0;
    double category_bonus = 1.0;
    double affinity_bias = -3.5;
    int days = 14;
    int sessions_per_day = 1;
    int recall_size = 60;
    int expose_size = 10;
    double recall_popularity_exponent = 0.5;
    double recall_affinity_bias = 3.0;
    double exposure_popularity_exponent = 1.0;
    double exposure_noise = 0.1;
    std::uint64_t seed = 1;

    static WorldConfig from(const KvConfig& kv);
    void store(KvConfig& kv) const;
    void validate() const;
};

struct ItemProfile {
    ItemId id = 0;
    CategoryId category = 0;
    Vec latent_content;
    double popularity_weight = 1.0;
};

// Timestamps encode (day, session, position) so logical days survive the TSV round trip.
inline constexpr std::int64_t kDayStride = 1'000'000;
inline constexpr std::int64_t kSessionStride = 10'000;

inline std::int64_t make_timestamp(int day, int session, int position) {
    return day * kDayStride + session * kSessionStride + position;
}
inline int day_of(std::int64_t ts) { return static_cast<int>(ts / kDayStride); }
inline int session_of(std::int64_t ts) { return static_cast<int>((ts % kDayStride) / kSessionStride); }

struct Record {
    UserId user = 0;
    ItemId item = 0;
    std::int64_t timestamp = 0;
    std::int8_t clicked = -1;  // -1: no label (unexposed)
    bool exposed = false;

    bool operator==(const Record&) const = default;
};

struct InteractionLog {
    std::vector<Record> records;

    // Chronological clicked items per user (index = user id).
    std::vector<std::vector<ItemId>> click_histories(int num_users) const;
    int num_days() const;
};

struct CandidateSet {
    UserId user = 0;
    std::vector<ItemId> recalled;
    std::vector<ItemId> exposed;    // exposure rank order
    std::vector<ItemId> unexposed;  // recall order
};

class GroundTruth;

class World {
public:
    const WorldConfig& config() const { return config_; }
    int num_users() const { return config_.num_users; }
    int num_items() const { return config_.num_items; }
    const std::vector<ItemProfile>& items() const { return items_; }
    const ItemProfile& item(ItemId id) const;
    std::uint64_t rng_seed() const { return config_.seed; }

    // Share of total popularity mass held by the top `fraction` of items.
    double top_popularity_share(double fraction) const;
    std::string fingerprint() const;

private:
    friend World generate_world(const WorldConfig&);
    friend class GroundTruth;

    struct UserFactors {
        std::vector<Vec> interests;
        std::vector<CategoryId> categories;
    };

    WorldConfig config_;
    std::vector<ItemProfile> items_;
    std::vector<UserFactors> users_;
    std::vector<double> affinity_;  // users x items, row-major
};

World generate_world(const WorldConfig& config);

// Hidden oracle over the simulated world. Only the simulator and evaluation
// code use it; model code sees logs and content vectors.
class GroundTruth {
public:
    explicit GroundTruth(const World& world) : world_(&world) {}

    double affinity(UserId u, ItemId h) const;
    // Deterministic Bernoulli(affinity) draw keyed by (seed, user, item, timestamp).
    bool click(UserId u, ItemId h, std::int64_t timestamp) const;

private:
    const World* world_;
};

struct SessionOutput {
    CandidateSet candidates;
    std::vector<Record> records;
};

SessionOutput simulate_session(const World& world, UserId user, int recall_size, int expose_size,
                               int day, int session);

// Every user, every day, every session in deterministic order.
InteractionLog simulate_log(const World& world);

struct Split {
    InteractionLog train;
    InteractionLog validation;
    int train_days = 0;
};

Split split_dataset(const InteractionLog& log);

// One simulated session regrouped from log records.
struct Session {
    UserId user = 0;
    int day = 0;
    int session = 0;
    std::int64_t first_timestamp = 0;
    std::vector<ItemId> exposed;
    std::vector<std::int8_t> clicks;
    std::vector<ItemId> unexposed;
};

std::vector<Session> group_sessions(const InteractionLog& log);

// TSV persistence.
void write_log(const std::string& path, const InteractionLog& log);
InteractionLog read_log(const std::string& path);
void write_items(const std::string& path, const std::vector<ItemProfile>& items);
std::vector<ItemProfile> read_items(const std::string& path);

// Validation-day oracle labels for every recalled item: user, item, timestamp, click, affinity.
struct TruthRecord {
    UserId user = 0;
    ItemId item = 0;
    std::int64_t timestamp = 0;
    std::int8_t click = 0;
    double affinity = 0.0;
};
std::vector<TruthRecord> validation_truth(const World& world, const InteractionLog& validation);
void write_truth(const std::string& path, const std::vector<TruthRecord>& truth);
std::vector<TruthRecord> read_truth(const std::string& path);

}  // namespace gpl::corpus
