#include "gpl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace gpl::corpus {

WorldConfig WorldConfig::from(const KvConfig& kv) {
    WorldConfig c;
    c.num_users = static_cast<int>(kv.get_int("world.users", c.num_users));
    c.num_items = static_cast<int>(kv.get_int("world.items", c.num_items));
    c.latent_dim = static_cast<int>(kv.get_int("world.latent_dim", c.latent_dim));
    c.num_categories = static_cast<int>(kv.get_int("world.categories", c.num_categories));
    c.zipf_exponent = kv.get_double("world.zipf_exponent", c.zipf_exponent);
    c.category_zipf_exponent = kv.get_double("world.category_zipf_exponent", c.category_zipf_exponent);
    c.popularity_category_coupling =
        kv.get_double("world.popularity_category_coupling", c.popularity_category_coupling);
    c.category_size_exponent = kv.get_double("world.category_size_exponent", c.category_size_exponent);
    c.item_spread = kv.get_double("world.item_spread", c.item_spread);
    c.max_interests = static_cast<int>(kv.get_int("world.max_interests", c.max_interests));
    c.user_spread = kv.get_double("world.user_spread", c.user_spread);
    c.user_category_exponent = kv.get_double("world.user_category_exponent", c.user_category_exponent);
    c.affinity_scale = kv.get_double("world.affinity_scale", c.affinity_scale);
    c.category_bonus = kv.get_double("world.category_bonus", c.category_bonus);
    c.affinity_bias = kv.get_double("world.affinity_bias", c.affinity_bias);
    c.days = static_cast<int>(kv.get_int("world.days", c.days));
    c.sessions_per_day = static_cast<int>(kv.get_int("world.sessions_per_day", c.sessions_per_day));
    c.recall_size = static_cast<int>(kv.get_int("world.recall_size", c.recall_size));
    c.expose_size = static_cast<int>(kv.get_int("world.expose_size", c.expose_size));
    c.recall_popularity_exponent =
        kv.get_double("world.recall_popularity_exponent", c.recall_popularity_exponent);
    c.recall_affinity_bias = kv.get_double("world.recall_affinity_bias", c.recall_affinity_bias);
    c.exposure_popularity_exponent =
        kv.get_double("world.exposure_popularity_exponent", c.exposure_popularity_exponent);
    c.exposure_noise = kv.get_double("world.exposure_noise", c.exposure_noise);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
    return c;
}

void WorldConfig::store(KvConfig& kv) const {
    auto d = [](double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    kv.set("world.users", std::to_string(num_users));
    kv.set("world.items", std::to_string(num_items));
    kv.set("world.latent_dim", std::to_string(latent_dim));
    kv.set("world.categories", std::to_string(num_categories));
    kv.set("world.zipf_exponent", d(zipf_exponent));
    kv.set("world.category_zipf_exponent", d(category_zipf_exponent));
    kv.set("world.popularity_category_coupling", d(popularity_category_coupling));
    kv.set("world.category_size_exponent", d(category_size_exponent));
    kv.set("world.item_spread", d(item_spread));
    kv.set("world.max_interests", std::to_string(max_interests));
    kv.set("world.user_spread", d(user_spread));
    kv.set("world.user_category_exponent", d(user_category_exponent));
    kv.set("world.affinity_scale", d(affinity_scale));
    kv.set("world.category_bonus", d(category_bonus));
    kv.set("world.affinity_bias", d(affinity_bias));
    kv.set("world.days", std::to_string(days));
    kv.set("world.sessions_per_day", std::to_string(sessions_per_day));
    kv.set("world.recall_size", std::to_string(recall_size));
    kv.set("world.expose_size", std::to_string(expose_size));
    kv.set("world.recall_popularity_exponent", d(recall_popularity_exponent));
    kv.set("world.recall_affinity_bias", d(recall_affinity_bias));
    kv.set("world.exposure_popularity_exponent", d(exposure_popularity_exponent));
    kv.set("world.exposure_noise", d(exposure_noise));
    kv.set("seed", std::to_string(seed));
}

void WorldConfig::validate() const {
    if (num_users <= 0 || num_items <= 0) {
        throw ConfigError("world needs at least one user and one item");
    }
    if (latent_dim <= 0 || num_categories <= 0 || max_interests <= 0) {
        throw ConfigError("world.latent_dim, world.categories and world.max_interests must be positive");
    }
    if (zipf_exponent <= 0) {
        throw ConfigError("world.zipf_exponent must be positive");
    }
    if (days < 2 || sessions_per_day <= 0 || sessions_per_day >= kDayStride / kSessionStride) {
        throw ConfigError("world.days must be >= 2 (one validation day) and world.sessions_per_day in range");
    }
    if (expose_size < 0 || expose_size > recall_size || recall_size > num_items ||
        recall_size >= kSessionStride) {
        throw ConfigError("need 0 <= expose_size <= recall_size <= items");
    }
}

const ItemProfile& World::item(ItemId id) const {
    if (id < 0 || id >= static_cast<ItemId>(items_.size())) {
        throw InvalidArgument("unknown item id " + std::to_string(id));
    }
    return items_[static_cast<std::size_t>(id)];
}

double World::top_popularity_share(double fraction) const {
    std::vector<double> w;
    w.reserve(items_.size());
    for (const auto& it : items_) {
        w.push_back(it.popularity_weight);
    }
    std::sort(w.begin(), w.end(), std::greater<>());
    const auto top = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(w.size())));
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    const double head = std::accumulate(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(top), 0.0);
    return head / total;
}

std::string World::fingerprint() const {
    std::uint64_t h = fnv1a64("world");
    auto mix = [&h](const void* p, std::size_t n) {
        h = fnv1a64(std::string_view(static_cast<const char*>(p), n), h);
    };
    for (const auto& it : items_) {
        mix(&it.category, sizeof(it.category));
        mix(&it.popularity_weight, sizeof(double));
        mix(it.latent_content.data(), it.latent_content.size() * sizeof(double));
    }
    mix(affinity_.data(), affinity_.size() * sizeof(double));
    return hex64(h);
}

namespace {

Vec random_unit(Rng& rng, int dim) {
    Vec v(static_cast<std::size_t>(dim));
    for (auto& x : v) {
        x = rng.normal();
    }
    const double n = norm2(v);
    for (auto& x : v) {
        x /= n;
    }
    return v;
}

Vec perturbed_unit(const Vec& center, double spread, Rng& rng) {
    const double scale = spread / std::sqrt(static_cast<double>(center.size()));
    Vec v = center;
    for (auto& x : v) {
        x += scale * rng.normal();
    }
    const double n = norm2(v);
    for (auto& x : v) {
        x /= n;
    }
    return v;
}

std::size_t sample_index(const std::vector<double>& weights, Rng& rng) {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        u -= weights[i];
        if (u < 0) {
            return i;
        }
    }
    return weights.size() - 1;
}

}  // namespace

World generate_world(const WorldConfig& config) {
    config.validate();
    World w;
    w.config_ = config;
    const int d = config.latent_dim;
    const int C = config.num_categories;

    Rng cat_rng(config.seed, "world.categories");
    std::vector<double> cat_weight(static_cast<std::size_t>(C));
    std::vector<Vec> centers;
    for (int c = 0; c < C; ++c) {
        cat_weight[static_cast<std::size_t>(c)] = std::pow(c + 1.0, -config.category_zipf_exponent);
        centers.push_back(random_unit(cat_rng, d));
    }

    Rng item_rng(config.seed, "world.items");
    std::vector<double> size_weight(cat_weight.size());
    for (std::size_t c = 0; c < cat_weight.size(); ++c) {
        size_weight[c] = std::pow(cat_weight[c], config.category_size_exponent);
    }
    w.items_.resize(static_cast<std::size_t>(config.num_items));
    std::vector<std::pair<double, ItemId>> popularity_keys;
    for (int i = 0; i < config.num_items; ++i) {
        auto& it = w.items_[static_cast<std::size_t>(i)];
        it.id = i;
        it.category = static_cast<CategoryId>(sample_index(size_weight, item_rng));
        it.latent_content = perturbed_unit(centers[static_cast<std::size_t>(it.category)], config.item_spread, item_rng);
        const double key = config.popularity_category_coupling *
                               std::log(cat_weight[static_cast<std::size_t>(it.category)]) +
                           item_rng.gumbel();
        popularity_keys.emplace_back(key, i);
    }
    std::sort(popularity_keys.begin(), popularity_keys.end(),
              [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    for (std::size_t rank = 0; rank < popularity_keys.size(); ++rank) {
        w.items_[static_cast<std::size_t>(popularity_keys[rank].second)].popularity_weight =
            std::pow(static_cast<double>(rank + 1), -config.zipf_exponent);
    }

    Rng user_rng(config.seed, "world.users");
    std::vector<double> user_cat_weight(cat_weight.size());
    for (std::size_t c = 0; c < cat_weight.size(); ++c) {
        user_cat_weight[c] = std::pow(cat_weight[c], config.user_category_exponent);
    }
    w.users_.resize(static_cast<std::size_t>(config.num_users));
    for (auto& u : w.users_) {
        const int k = 1 + static_cast<int>(user_rng.below(static_cast<std::size_t>(config.max_interests)));
        std::vector<double> avail = user_cat_weight;
        for (int j = 0; j < std::min(k, C); ++j) {
            const auto c = sample_index(avail, user_rng);
            avail[c] = 0.0;
            u.categories.push_back(static_cast<CategoryId>(c));
            u.interests.push_back(perturbed_unit(centers[c], config.user_spread, user_rng));
        }
    }

    const auto N = static_cast<std::size_t>(config.num_items);
    w.affinity_.assign(w.users_.size() * N, 0.0);
    for (std::size_t u = 0; u < w.users_.size(); ++u) {
        const auto& uf = w.users_[u];
        for (std::size_t h = 0; h < N; ++h) {
            const auto& it = w.items_[h];
            double best = -1.0;
            for (const auto& p : uf.interests) {
                best = std::max(best, dot(p, it.latent_content));
            }
            const bool match = std::find(uf.categories.begin(), uf.categories.end(), it.category) != uf.categories.end();
            w.affinity_[u * N + h] =
                sigmoid(config.affinity_scale * best + (match ? config.category_bonus : 0.0) + config.affinity_bias);
        }
    }
    return w;
}

double GroundTruth::affinity(UserId u, ItemId h) const {
    if (u < 0 || u >= world_->num_users()) {
        throw InvalidArgument("unknown user id " + std::to_string(u));
    }
    if (h < 0 || h >= world_->num_items()) {
        throw InvalidArgument("unknown item id " + std::to_string(h));
    }
    return world_->affinity_[static_cast<std::size_t>(u) * static_cast<std::size_t>(world_->num_items()) +
                             static_cast<std::size_t>(h)];
}

bool GroundTruth::click(UserId u, ItemId h, std::int64_t timestamp) const {
    std::uint64_t x = mix64(world_->rng_seed() ^ 0xC11C4ull);
    x = mix64(x ^ ((static_cast<std::uint64_t>(static_cast<std::uint32_t>(u)) << 32) |
                   static_cast<std::uint32_t>(h)));
    x = mix64(x + static_cast<std::uint64_t>(timestamp));
    const double uniform = static_cast<double>(x >> 11) * 0x1.0p-53;
    return uniform < affinity(u, h);
}

SessionOutput simulate_session(const World& world, UserId user, int recall_size, int expose_size, int day,
                               int session) {
    if (user < 0 || user >= world.num_users()) {
        throw InvalidArgument("unknown user id " + std::to_string(user));
    }
    if (expose_size < 0 || expose_size > recall_size || recall_size > world.num_items()) {
        throw InvalidArgument("need 0 <= expose_size <= recall_size <= |items|");
    }
    const auto& cfg = world.config();
    const GroundTruth truth(world);
    Rng rng(world.rng_seed(), "world.session",
            (static_cast<std::uint64_t>(user) << 24) ^ (static_cast<std::uint64_t>(day) << 8) ^
                static_cast<std::uint64_t>(session));

    // Recall: Gumbel top-k samples without replacement with weight pop^a * exp(k * affinity).
    std::vector<std::pair<double, ItemId>> keys;
    keys.reserve(static_cast<std::size_t>(world.num_items()));
    for (const auto& it : world.items()) {
        const double logw = cfg.recall_popularity_exponent * std::log(it.popularity_weight) +
                            cfg.recall_affinity_bias * truth.affinity(user, it.id);
        keys.emplace_back(logw + rng.gumbel(), it.id);
    }
    auto by_key = [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; };
    std::partial_sort(keys.begin(), keys.begin() + recall_size, keys.end(), by_key);

    SessionOutput out;
    out.candidates.user = user;
    for (int i = 0; i < recall_size; ++i) {
        out.candidates.recalled.push_back(keys[static_cast<std::size_t>(i)].second);
    }

    // Exposure: deterministic top-k on pop^e * (affinity + noise).
    std::vector<std::pair<double, ItemId>> exposure;
    for (ItemId h : out.candidates.recalled) {
        const double pop = std::pow(world.item(h).popularity_weight, cfg.exposure_popularity_exponent);
        exposure.emplace_back(pop * (truth.affinity(user, h) + cfg.exposure_noise * rng.normal()), h);
    }
    std::sort(exposure.begin(), exposure.end(), by_key);
    std::vector<char> is_exposed(static_cast<std::size_t>(world.num_items()), 0);
    for (int i = 0; i < expose_size; ++i) {
        out.candidates.exposed.push_back(exposure[static_cast<std::size_t>(i)].second);
        is_exposed[static_cast<std::size_t>(exposure[static_cast<std::size_t>(i)].second)] = 1;
    }
    for (ItemId h : out.candidates.recalled) {
        if (!is_exposed[static_cast<std::size_t>(h)]) {
            out.candidates.unexposed.push_back(h);
        }
    }

    int pos = 0;
    for (ItemId h : out.candidates.exposed) {
        const auto ts = make_timestamp(day, session, pos++);
        out.records.push_back({user, h, ts, static_cast<std::int8_t>(truth.click(user, h, ts) ? 1 : 0), true});
    }
    for (ItemId h : out.candidates.unexposed) {
        out.records.push_back({user, h, make_timestamp(day, session, pos++), -1, false});
    }
    return out;
}

InteractionLog simulate_log(const World& world) {
    const auto& cfg = world.config();
    InteractionLog log;
    for (UserId u = 0; u < world.num_users(); ++u) {
        for (int day = 0; day < cfg.days; ++day) {
            for (int s = 0; s < cfg.sessions_per_day; ++s) {
                auto out = simulate_session(world, u, cfg.recall_size, cfg.expose_size, day, s);
                log.records.insert(log.records.end(), out.records.begin(), out.records.end());
            }
        }
    }
    return log;
}

std::vector<std::vector<ItemId>> InteractionLog::click_histories(int num_users) const {
    std::vector<std::vector<std::pair<std::int64_t, ItemId>>> tmp(static_cast<std::size_t>(num_users));
    for (const auto& r : records) {
        if (r.clicked == 1 && r.user >= 0 && r.user < num_users) {
            tmp[static_cast<std::size_t>(r.user)].emplace_back(r.timestamp, r.item);
        }
    }
    std::vector<std::vector<ItemId>> out(tmp.size());
    for (std::size_t u = 0; u < tmp.size(); ++u) {
        std::sort(tmp[u].begin(), tmp[u].end());
        for (const auto& [ts, h] : tmp[u]) {
            out[u].push_back(h);
        }
    }
    return out;
}

int InteractionLog::num_days() const {
    if (records.empty()) {
        return 0;
    }
    int lo = day_of(records.front().timestamp);
    int hi = lo;
    for (const auto& r : records) {
        lo = std::min(lo, day_of(r.timestamp));
        hi = std::max(hi, day_of(r.timestamp));
    }
    return hi - lo + 1;
}

Split split_dataset(const InteractionLog& log) {
    if (log.num_days() < 2) {
        throw InvalidArgument("split_dataset needs a log spanning at least two logical days");
    }
    int last = 0;
    for (const auto& r : log.records) {
        last = std::max(last, day_of(r.timestamp));
    }
    Split s;
    for (const auto& r : log.records) {
        (day_of(r.timestamp) == last ? s.validation : s.train).records.push_back(r);
    }
    s.train_days = s.train.num_days();
    return s;
}

std::vector<Session> group_sessions(const InteractionLog& log) {
    std::map<std::tuple<UserId, int, int>, Session> by_key;
    std::vector<const Record*> sorted;
    sorted.reserve(log.records.size());
    for (const auto& r : log.records) {
        sorted.push_back(&r);
    }
    std::sort(sorted.begin(), sorted.end(), [](const Record* a, const Record* b) {
        return a->user != b->user ? a->user < b->user : a->timestamp < b->timestamp;
    });
    for (const Record* r : sorted) {
        auto& s = by_key[{r->user, day_of(r->timestamp), session_of(r->timestamp)}];
        if (s.exposed.empty() && s.unexposed.empty()) {
            s.user = r->user;
            s.day = day_of(r->timestamp);
            s.session = session_of(r->timestamp);
            s.first_timestamp = r->timestamp;
        }
        if (r->exposed) {
            s.exposed.push_back(r->item);
            s.clicks.push_back(r->clicked);
        } else {
            s.unexposed.push_back(r->item);
        }
    }
    std::vector<Session> out;
    out.reserve(by_key.size());
    for (auto& [k, s] : by_key) {
        out.push_back(std::move(s));
    }
    return out;
}

void write_log(const std::string& path, const InteractionLog& log) {
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot write '" + path + "'");
    }
    for (const auto& r : log.records) {
        out << r.user << '\t' << r.item << '\t' << r.timestamp << '\t';
        if (r.exposed) {
            out << static_cast<int>(r.clicked);
        } else {
            out << '-';
        }
        out << '\t' << (r.exposed ? 1 : 0) << '\n';
    }
}

InteractionLog read_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open '" + path + "'");
    }
    InteractionLog log;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ls(line);
        Record r;
        std::string click;
        int exposed = 0;
        if (!(ls >> r.user >> r.item >> r.timestamp >> click >> exposed)) {
            throw Error("malformed log line in '" + path + "': " + line);
        }
        r.exposed = exposed != 0;
        r.clicked = click == "-" ? std::int8_t{-1} : static_cast<std::int8_t>(std::stoi(click));
        if (!r.exposed && r.clicked != -1) {
            throw Error("unexposed record carries a click label in '" + path + "'");
        }
        log.records.push_back(r);
    }
    return log;
}

void write_items(const std::string& path, const std::vector<ItemProfile>& items) {
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot write '" + path + "'");
    }
    out.precision(17);
    for (const auto& it : items) {
        out << it.id << '\t' << it.category << '\t' << it.popularity_weight;
        for (double x : it.latent_content) {
            out << '\t' << x;
        }
        out << '\n';
    }
}

std::vector<ItemProfile> read_items(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open '" + path + "'");
    }
    std::vector<ItemProfile> items;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ls(line);
        ItemProfile it;
        ls >> it.id >> it.category >> it.popularity_weight;
        double x = 0;
        while (ls >> x) {
            it.latent_content.push_back(x);
        }
        items.push_back(std::move(it));
    }
    return items;
}

std::vector<TruthRecord> validation_truth(const World& world, const InteractionLog& validation) {
    const GroundTruth truth(world);
    std::vector<TruthRecord> out;
    out.reserve(validation.records.size());
    for (const auto& r : validation.records) {
        TruthRecord t;
        t.user = r.user;
        t.item = r.item;
        t.timestamp = r.timestamp;
        t.affinity = truth.affinity(r.user, r.item);
        t.click = r.exposed ? r.clicked : static_cast<std::int8_t>(truth.click(r.user, r.item, r.timestamp));
        out.push_back(t);
    }
    return out;
}

void write_truth(const std::string& path, const std::vector<TruthRecord>& truth) {
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot write '" + path + "'");
    }
    out.precision(17);
    for (const auto& t : truth) {
        out << t.user << '\t' << t.item << '\t' << t.timestamp << '\t' << static_cast<int>(t.click) << '\t'
            << t.affinity << '\n';
    }
}

std::vector<TruthRecord> read_truth(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open '" + path + "'");
    }
    std::vector<TruthRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ls(line);
        TruthRecord t;
        int click = 0;
        ls >> t.user >> t.item >> t.timestamp >> click >> t.affinity;
        t.click = static_cast<std::int8_t>(click);
        out.push_back(t);
    }
    return out;
}

}  // namespace gpl::corpus
