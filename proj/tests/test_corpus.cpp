#include "gpl/corpus.hpp"

#include <doctest.h>

#include <filesystem>
#include <set>

using namespace gpl;
using namespace gpl::corpus;

namespace {

WorldConfig small_world(std::uint64_t seed = 3) {
    WorldConfig c;
    c.num_users = 30;
    c.num_items = 200;
    c.num_categories = 10;
    c.recall_size = 20;
    c.expose_size = 5;
    c.days = 4;
    c.seed = seed;
    return c;
}

}  // namespace

TEST_CASE("same seed, same world and log") {
    const World a = generate_world(small_world());
    const World b = generate_world(small_world());
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(simulate_log(a).records == simulate_log(b).records);
    CHECK(generate_world(small_world(4)).fingerprint() != a.fingerprint());
}

TEST_CASE("sessions: exposed is a subset of recalled, unexposed the rest") {
    const World w = generate_world(small_world());
    for (UserId u = 0; u < 5; ++u) {
        const auto s = simulate_session(w, u, 20, 5, 0, 0);
        const auto& c = s.candidates;
        CHECK(c.recalled.size() == 20);
        CHECK(c.exposed.size() == 5);
        CHECK(c.unexposed.size() == 15);
        std::set<ItemId> rec(c.recalled.begin(), c.recalled.end());
        CHECK(rec.size() == 20);
        std::set<ItemId> parts(c.exposed.begin(), c.exposed.end());
        parts.insert(c.unexposed.begin(), c.unexposed.end());
        CHECK(parts == rec);
        for (const auto& r : s.records) {
            if (r.exposed) CHECK(r.clicked >= 0);
            else CHECK(r.clicked == -1);
        }
    }
}

TEST_CASE("popularity is long-tailed") {
    const World w = generate_world(small_world());
    CHECK(w.top_popularity_share(0.2) > 0.4);
}

TEST_CASE("clicks are deterministic and track affinity") {
    const World w = generate_world(small_world());
    GroundTruth gt(w);
    for (ItemId h = 0; h < 20; ++h) CHECK(gt.click(1, h, 77) == gt.click(1, h, 77));
    // mean click rate over many timestamps approaches affinity
    const double p = gt.affinity(2, 5);
    int n = 0;
    for (int t = 0; t < 20000; ++t) n += gt.click(2, 5, t) ? 1 : 0;
    CHECK(std::abs(n / 20000.0 - p) < 0.015);
}

TEST_CASE("split holds out the last day") {
    const World w = generate_world(small_world());
    const auto log = simulate_log(w);
    const auto split = split_dataset(log);
    CHECK(split.train_days == 3);
    for (const auto& r : split.train.records) CHECK(day_of(r.timestamp) < 3);
    for (const auto& r : split.validation.records) CHECK(day_of(r.timestamp) == 3);
    CHECK(split.train.records.size() + split.validation.records.size() == log.records.size());
}

TEST_CASE("timestamps keep day and session") {
    const auto ts = make_timestamp(12, 3, 45);
    CHECK(day_of(ts) == 12);
    CHECK(session_of(ts) == 3);
}

TEST_CASE("tsv round trips") {
    const World w = generate_world(small_world());
    const auto log = simulate_log(w);
    const auto dir = std::filesystem::temp_directory_path() / "gpl_corpus_test";
    std::filesystem::create_directories(dir);
    write_log((dir / "log.tsv").string(), log);
    CHECK(read_log((dir / "log.tsv").string()).records == log.records);
    write_items((dir / "items.tsv").string(), w.items());
    const auto items = read_items((dir / "items.tsv").string());
    REQUIRE(items.size() == w.items().size());
    CHECK(items[17].category == w.items()[17].category);
    CHECK(items[17].latent_content == w.items()[17].latent_content);
    std::filesystem::remove_all(dir);
}

TEST_CASE("grouped sessions reproduce the log") {
    const World w = generate_world(small_world());
    const auto log = simulate_log(w);
    const auto sessions = group_sessions(log);
    std::size_t n = 0;
    for (const auto& s : sessions) {
        CHECK(s.exposed.size() == s.clicks.size());
        n += s.exposed.size() + s.unexposed.size();
    }
    CHECK(n == log.records.size());
}

TEST_CASE("bad world configs are rejected") {
    auto c = small_world();
    c.expose_size = 30;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_world();
    c.days = 1;
    CHECK_THROWS(c.validate());
}
