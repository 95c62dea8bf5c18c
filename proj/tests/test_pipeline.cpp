#include "gpl/pipeline.hpp"
#include "gpl/tensor_file.hpp"

#include <doctest.h>

#include <filesystem>

using namespace gpl;
using namespace gpl::pipeline;
namespace fs = std::filesystem;

#ifndef GPL_TEST_DIR
#error "GPL_TEST_DIR must point at tests/"
#endif

namespace {

KvConfig tiny() { return KvConfig::load(std::string(GPL_TEST_DIR) + "/tiny.cfg"); }

struct Scratch {
    fs::path root;
    explicit Scratch(const std::string& name) : root(fs::temp_directory_path() / ("gpl_pipe_" + name)) {
        fs::remove_all(root);
    }
    ~Scratch() { fs::remove_all(root); }
    std::string str() const { return root.string(); }
};

std::map<std::string, std::string> dir_hashes(const std::string& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().filename() != "manifest.txt") {
            out[fs::relative(e.path(), dir).string()] = hex64(file_hash(e.path().string()));
        }
    }
    return out;
}

}  // namespace

TEST_CASE("stage names round trip") {
    for (Stage s : all_stages()) CHECK(parse_stage(stage_name(s)) == s);
    CHECK_THROWS_AS(parse_stage("nope"), ConfigError);
}

TEST_CASE("config errors") {
    KvConfig kv = tiny();
    kv.set("ranker.lamda", "1");
    CHECK_THROWS_AS(resolve(kv, "gpl"), ConfigError);
    CHECK_THROWS_AS(resolve(tiny(), "wo_everything"), ConfigError);
    kv = tiny();
    kv.set("quantizer.method", "pq");
    CHECK_THROWS_AS(resolve(kv, "gpl"), ConfigError);
    kv = tiny();
    kv.set("world.users", "many");
    CHECK_THROWS_AS(resolve(kv, "gpl"), ConfigError);
}

TEST_CASE("mode overrides") {
    CHECK(resolve(tiny(), "bc").ranker.lambda == 0.0);
    CHECK(resolve(tiny(), "wo_max_pooling").pseudo.pooling == pseudolabel::Pooling::mean);
    CHECK_FALSE(resolve(tiny(), "wo_confidence").pseudo.confidence);
    CHECK(resolve(tiny(), "wo_semantic_ids").quantizer_method == "rawid");
    CHECK_FALSE(resolve(tiny(), "wo_actual_labels").ranker.actual_labels);
    CHECK(resolve(tiny(), "wo_history").pseudo.lambda1 == 0.0);
    CHECK(resolve(tiny(), "wo_llm_conf").pseudo.lambda2 == 0.0);
    CHECK_FALSE(resolve(tiny(), "wo_dispersion").pseudo.dispersion);
    CHECK(resolve(tiny(), "gpl", 9).seed == 9);
}

TEST_CASE("evaluate before its upstream stages is a missing artifact") {
    Scratch s("missing");
    Runner r(s.str(), resolve(tiny(), "gpl"));
    try {
        r.run(Stage::evaluate);
        FAIL("expected MissingArtifact");
    } catch (const MissingArtifact& e) {
        CHECK(e.stage() == "train-ranker");
    }
    CHECK_THROWS_AS(r.run(Stage::build_pool), MissingArtifact);
}

TEST_CASE("keys: a tau change reruns only pseudo-label and later stages") {
    Scratch s("iso");
    Runner a(s.str(), resolve(tiny(), "gpl"));
    a.ensure(Stage::evaluate);
    KvConfig kv = tiny();
    kv.set("pseudo.log_tau", "-0.5");
    Runner b(s.str(), resolve(kv, "gpl"));
    for (Stage st : {Stage::gen_data, Stage::build_pool, Stage::train_quantizer, Stage::train_lm, Stage::gen_anchors}) {
        CHECK(a.key(st) == b.key(st));
        CHECK(b.done(st));
    }
    for (Stage st : {Stage::pseudo_label, Stage::train_ranker, Stage::evaluate}) {
        CHECK(a.key(st) != b.key(st));
        CHECK_FALSE(b.done(st));
    }
    // bc reached directly and as gpl's baseline are the same artifact
    Runner bc(s.str(), resolve(tiny(), "bc"));
    CHECK(bc.dir(Stage::train_ranker) == a.baseline_ranker_dir());
    CHECK(bc.done(Stage::train_ranker));
    // max vs mean pooling shares everything upstream of pseudo-label
    Runner mean(s.str(), resolve(tiny(), "wo_max_pooling"));
    CHECK(mean.key(Stage::gen_anchors) == a.key(Stage::gen_anchors));
    CHECK(mean.key(Stage::pseudo_label) != a.key(Stage::pseudo_label));
}

TEST_CASE("tokenizer depends on content only") {
    Scratch s("tok");
    KvConfig kv = tiny();
    Runner a(s.str(), resolve(kv, "gpl"));
    a.ensure(Stage::train_quantizer);
    // exposure noise reshuffles the interaction log but not item content
    kv.set("world.exposure_noise", "0.7");
    Runner b(s.str(), resolve(kv, "gpl"));
    b.ensure(Stage::train_quantizer);
    CHECK(a.dir(Stage::gen_data) != b.dir(Stage::gen_data));
    CHECK(read_file(a.dir(Stage::gen_data) + "/train.tsv") != read_file(b.dir(Stage::gen_data) + "/train.tsv"));
    CHECK(dir_hashes(a.dir(Stage::build_pool)) == dir_hashes(b.dir(Stage::build_pool)));
    CHECK(dir_hashes(a.dir(Stage::train_quantizer)) == dir_hashes(b.dir(Stage::train_quantizer)));
}

TEST_CASE("two runs from scratch give identical reports") {
    Scratch s1("det1"), s2("det2");
    Runner a(s1.str(), resolve(tiny(), "gpl"));
    Runner b(s2.str(), resolve(tiny(), "gpl"));
    a.ensure(Stage::evaluate);
    b.ensure(Stage::evaluate);
    CHECK(a.report().to_text() == b.report().to_text());
    CHECK(dir_hashes(a.dir(Stage::train_lm)) == dir_hashes(b.dir(Stage::train_lm)));
    const auto rep = a.report();
    CHECK(rep.auc > 0.5);
    CHECK(rep.auc_star.has_value());
    CHECK(rep.hr.count(3) == 1);
}

TEST_CASE("ablation and sweep outputs") {
    Scratch s("drv");
    const auto rows = run_ablation(s.str(), tiny(), {"gpl"}, std::nullopt);
    CHECK(rows.size() == 1);
    const auto table = ablation_table(rows);
    CHECK(std::count(table.begin(), table.end(), '\n') == 2);

    const auto pts = run_sweep(s.str(), tiny(), "gpl", "lambda", {0.0, 1.0, 3.0}, std::nullopt);
    CHECK(pts.size() == 6);
    const auto csv = sweep_csv("lambda", pts);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    CHECK(run_sweep(s.str(), tiny(), "gpl", "lambda1", {0.0, 0.6, 1.2}, std::nullopt).size() == 3);

    CHECK_THROWS_AS(run_sweep(s.str(), tiny(), "gpl", "lambda", {0.0, 1.0}, std::nullopt), ConfigError);
    CHECK_THROWS_AS(run_sweep(s.str(), tiny(), "gpl", "tau", {0.0, 1.0, 2.0}, std::nullopt), ConfigError);
    CHECK_THROWS_AS(run_sweep(s.str(), tiny(), "gpl", "B", {0.0, 4.0, 8.0}, std::nullopt), ConfigError);
    CHECK_THROWS_AS(run_sweep(s.str(), tiny(), "gpl", "gamma", {1.0, 2.0, 3.0}, std::nullopt), ConfigError);
}
