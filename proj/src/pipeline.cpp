#include "gpl/pipeline.hpp"

#include "gpl/tensor_file.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace gpl::pipeline {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

bool has_prefix(const std::string& s, const std::string& p) { return s.compare(0, p.size(), p) == 0; }

const std::vector<std::string> kSections = {"world.", "embed.", "quantizer.", "lm.", "pseudo.", "ranker.", "eval."};

void check_keys(const KvConfig& kv) {
    for (const auto& [k, v] : kv.entries()) {
        if (k == "seed" || k == "mode") {
            continue;
        }
        bool ok = false;
        for (const auto& s : kSections) {
            ok = ok || has_prefix(k, s);
        }
        if (!ok) {
            throw ConfigError("unknown config key '" + k + "'");
        }
    }
}

std::string path(const std::string& dir, const std::string& file) { return (fs::path(dir) / file).string(); }

class Timer {
public:
    Timer() : t0_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    }

private:
    std::chrono::steady_clock::time_point t0_;
};

}  // namespace

const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> s = {Stage::gen_data,    Stage::build_pool,   Stage::train_quantizer,
                                         Stage::train_lm,    Stage::gen_anchors,  Stage::pseudo_label,
                                         Stage::train_ranker, Stage::evaluate};
    return s;
}

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::gen_data: return "gen-data";
        case Stage::build_pool: return "build-pool";
        case Stage::train_quantizer: return "train-quantizer";
        case Stage::train_lm: return "train-lm";
        case Stage::gen_anchors: return "gen-anchors";
        case Stage::pseudo_label: return "pseudo-label";
        case Stage::train_ranker: return "train-ranker";
        case Stage::evaluate: return "evaluate";
    }
    return "?";
}

Stage parse_stage(const std::string& name) {
    for (Stage s : all_stages()) {
        if (stage_name(s) == name) {
            return s;
        }
    }
    throw ConfigError("unknown stage '" + name + "'");
}

const std::vector<std::string>& run_modes() {
    static const std::vector<std::string> m = {"gpl",           "bc",           "wo_confidence",
                                               "wo_max_pooling", "wo_semantic_ids", "wo_actual_labels",
                                               "wo_dispersion", "wo_history",   "wo_llm_conf"};
    return m;
}

std::vector<std::pair<std::string, std::string>> mode_overrides(const std::string& mode) {
    if (mode == "gpl") return {};
    if (mode == "bc") return {{"ranker.lambda", "0"}};
    if (mode == "wo_confidence") return {{"pseudo.confidence", "false"}};
    if (mode == "wo_max_pooling") return {{"pseudo.pooling", "mean"}};
    if (mode == "wo_semantic_ids") return {{"quantizer.method", "rawid"}};
    if (mode == "wo_actual_labels") return {{"ranker.actual_labels", "false"}};
    if (mode == "wo_dispersion") return {{"pseudo.dispersion", "false"}};
    if (mode == "wo_history") return {{"pseudo.lambda1", "0"}};
    if (mode == "wo_llm_conf") return {{"pseudo.lambda2", "0"}};
    throw ConfigError("unknown mode '" + mode + "'");
}

ExperimentConfig resolve(const KvConfig& base, const std::string& mode, std::optional<std::uint64_t> seed) {
    check_keys(base);
    ExperimentConfig c;
    c.kv = base;
    c.mode = mode;
    for (const auto& [k, v] : mode_overrides(mode)) {
        c.kv.set(k, v);
    }
    if (seed) {
        c.kv.set("seed", std::to_string(*seed));
    }
    c.kv.set("mode", mode);
    const KvConfig& kv = c.kv;
    const long long s = kv.get_int("seed", 1);
    if (s < 0) {
        throw ConfigError("seed must be non-negative");
    }
    c.seed = static_cast<std::uint64_t>(s);

    c.world = corpus::WorldConfig::from(kv);
    c.world.validate();
    c.embed_noise = kv.get_double("embed.noise", c.embed_noise);
    if (!(c.embed_noise >= 0.0)) {
        throw ConfigError("embed.noise must be >= 0");
    }
    c.quantizer_method = kv.get_string("quantizer.method", c.quantizer_method);
    if (c.quantizer_method != "rqvae" && c.quantizer_method != "rqkmeans" && c.quantizer_method != "rawid") {
        throw ConfigError("quantizer.method must be rqvae, rqkmeans or rawid");
    }
    c.rqvae = quantizer::RqVaeConfig::from(kv);
    c.rqvae.validate();
    c.rqkmeans.levels = c.rqvae.levels;
    c.rqkmeans.entries = c.rqvae.entries;
    c.rqkmeans.max_iters = static_cast<int>(kv.get_int("quantizer.kmeans_iters", c.rqkmeans.max_iters));
    c.rqkmeans.seed = c.seed;
    if (c.rqkmeans.max_iters < 0) {
        throw ConfigError("quantizer.kmeans_iters must be >= 0");
    }
    c.lm = seqmodel::LmConfig::from(kv);
    c.lm.validate();
    c.pseudo = pseudolabel::PseudoConfig::from(kv);
    c.pseudo.validate();
    c.ranker = preranker::RankerConfig::from(kv);
    c.ranker.validate();

    c.eval.hr_k = kv.get_ints("eval.hr_k", c.eval.hr_k);
    c.eval.buckets = static_cast<int>(kv.get_int("eval.buckets", c.eval.buckets));
    c.eval.permutations = static_cast<int>(kv.get_int("eval.permutations", c.eval.permutations));
    c.eval.recommend_k = static_cast<int>(kv.get_int("eval.recommend_k", c.eval.recommend_k));
    if (c.eval.hr_k.empty()) {
        throw ConfigError("eval.hr_k must list at least one K");
    }
    for (int k : c.eval.hr_k) {
        if (k < 1) {
            throw ConfigError("eval.hr_k entries must be >= 1");
        }
    }
    if (c.eval.buckets < 1 || c.eval.permutations < 0 || c.eval.recommend_k < 0) {
        throw ConfigError("eval.buckets must be >= 1, eval.permutations and eval.recommend_k >= 0");
    }

    KvConfig& k = c.canonical;
    c.world.store(k);
    k.set("embed.noise", fmt(c.embed_noise));
    k.set("quantizer.method", c.quantizer_method);
    c.rqvae.store(k);
    k.set("quantizer.kmeans_iters", std::to_string(c.rqkmeans.max_iters));
    c.lm.store(k);
    c.pseudo.store(k);
    c.ranker.store(k);
    std::string ks;
    for (int v : c.eval.hr_k) {
        ks += (ks.empty() ? "" : ",") + std::to_string(v);
    }
    k.set("eval.hr_k", ks);
    k.set("eval.buckets", std::to_string(c.eval.buckets));
    k.set("eval.permutations", std::to_string(c.eval.permutations));
    k.set("eval.recommend_k", std::to_string(c.eval.recommend_k));
    // Every key that was read appears in the canonical form; anything else is a typo.
    for (const auto& [key, v] : base.entries()) {
        if (key != "seed" && key != "mode" && !k.has(key)) {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    return c;
}

Runner::Runner(std::string out, ExperimentConfig cfg, Logger log)
    : out_(std::move(out)), cfg_(std::move(cfg)), log_(std::move(log)) {}

std::vector<Stage> Runner::upstream(Stage s) const {
    switch (s) {
        case Stage::gen_data: return {};
        case Stage::build_pool: return {Stage::gen_data};
        case Stage::train_quantizer: return {Stage::build_pool};
        case Stage::train_lm: return {Stage::train_quantizer};
        case Stage::gen_anchors: return {Stage::train_lm};
        case Stage::pseudo_label: return {Stage::gen_anchors};
        case Stage::train_ranker:
            return cfg_.exposure_only() ? std::vector<Stage>{Stage::build_pool} : std::vector<Stage>{Stage::pseudo_label};
        case Stage::evaluate:
            return cfg_.exposure_only() ? std::vector<Stage>{Stage::train_ranker}
                                        : std::vector<Stage>{Stage::train_ranker, Stage::gen_anchors};
    }
    return {};
}

std::string Runner::subset(Stage s) const {
    std::vector<std::string> prefixes;
    std::set<std::string> only, skip;
    switch (s) {
        case Stage::gen_data: prefixes = {"world."}; break;
        case Stage::build_pool: prefixes = {"embed."}; break;
        case Stage::train_quantizer: prefixes = {"quantizer."}; break;
        case Stage::train_lm:
            prefixes = {"lm."};
            skip = {"lm.beam_width", "lm.exclude_history"};
            break;
        case Stage::gen_anchors: only = {"lm.beam_width", "lm.exclude_history"}; break;
        case Stage::pseudo_label: prefixes = {"pseudo."}; break;
        case Stage::train_ranker: prefixes = {"ranker."}; break;
        case Stage::evaluate: prefixes = {"eval."}; break;
    }
    std::string out;
    for (const auto& [k, v] : cfg_.canonical.entries()) {
        bool in = only.count(k) != 0;
        for (const auto& p : prefixes) {
            in = in || has_prefix(k, p);
        }
        if (in && !skip.count(k)) {
            out += k + "=" + v + "\n";
        }
    }
    return out;
}

std::string Runner::key(Stage s) const {
    std::string material = stage_name(s) + "\n" + subset(s) + "seed=" + std::to_string(cfg_.seed) + "\n";
    for (Stage u : upstream(s)) {
        material += stage_name(u) + ":" + key(u) + "\n";
    }
    if (s == Stage::evaluate && !cfg_.exposure_only()) {
        material += "baseline:" + Runner(out_, baseline_config()).key(Stage::train_ranker) + "\n";
    }
    return hex64(fnv1a64(material));
}

std::string Runner::dir(Stage s) const { return path(path(out_, stage_name(s)), key(s)); }

bool Runner::done(Stage s) const { return fs::exists(path(dir(s), "manifest.txt")); }

ExperimentConfig Runner::baseline_config() const {
    KvConfig kv = cfg_.kv;
    kv.set("ranker.actual_labels", "true");
    return resolve(kv, "bc", cfg_.seed);
}

std::string Runner::baseline_ranker_dir() const {
    if (cfg_.exposure_only()) {
        return dir(Stage::train_ranker);
    }
    return Runner(out_, baseline_config()).dir(Stage::train_ranker);
}

void Runner::require(Stage s) const {
    if (!done(s)) {
        throw MissingArtifact("missing " + stage_name(s) + " artifacts at " + dir(s) + " (run " + stage_name(s) +
                                  (cfg_.mode != "gpl" ? " --mode " + cfg_.mode : std::string()) + " first)",
                              stage_name(s));
    }
}

void Runner::write_manifest(Stage s, const std::vector<std::string>& inputs,
                            const std::vector<std::string>& outputs) const {
    KvConfig m;
    m.set("stage", stage_name(s));
    m.set("key", key(s));
    m.set("mode", cfg_.mode);
    m.set("seed", std::to_string(cfg_.seed));
    m.set("config_hash", hex64(fnv1a64(subset(s))));
    for (Stage u : upstream(s)) {
        m.set("upstream." + stage_name(u), key(u));
    }
    for (const auto& f : inputs) {
        m.set("input." + fs::relative(f, out_).generic_string(), hex64(file_hash(f)));
    }
    for (const auto& f : outputs) {
        m.set("output." + f, hex64(file_hash(path(dir(s), f))));
    }
    write_file(path(dir(s), "manifest.txt"), m.dump());
}

void Runner::run(Stage s) {
    for (Stage u : upstream(s)) {
        require(u);
    }
    if (s == Stage::evaluate && !cfg_.exposure_only()) {
        if (!fs::exists(path(baseline_ranker_dir(), "manifest.txt"))) {
            throw MissingArtifact("missing exposure-only ranker at " + baseline_ranker_dir() +
                                      " (run train-ranker --mode bc first)",
                                  "train-ranker");
        }
    }
    const std::string d = dir(s);
    fs::remove_all(d);
    fs::create_directories(d);
    Timer t;
    switch (s) {
        case Stage::gen_data: gen_data(); break;
        case Stage::build_pool: build_pool(); break;
        case Stage::train_quantizer: train_quantizer(); break;
        case Stage::train_lm: train_lm(); break;
        case Stage::gen_anchors: gen_anchors(); break;
        case Stage::pseudo_label: pseudo_label(); break;
        case Stage::train_ranker: train_ranker(); break;
        case Stage::evaluate: evaluate(); break;
    }
    if (log_) {
        char buf[64];
        std::snprintf(buf, sizeof buf, " %.1fs", t.seconds());
        log_(stage_name(s) + " [" + cfg_.mode + ", seed " + std::to_string(cfg_.seed) + "] " + key(s) + buf);
    }
}

void Runner::ensure(Stage s) {
    if (done(s)) {
        return;
    }
    for (Stage u : upstream(s)) {
        ensure(u);
    }
    if (s == Stage::evaluate && !cfg_.exposure_only()) {
        Runner(out_, baseline_config(), log_).ensure(Stage::train_ranker);
    }
    run(s);
}

evalkit::MetricReport Runner::report() const {
    require(Stage::evaluate);
    return evalkit::MetricReport::from_text(read_file(path(dir(Stage::evaluate), "report.txt")));
}

// ---- stages ----

void Runner::gen_data() {
    const std::string d = dir(Stage::gen_data);
    const corpus::World world = corpus::generate_world(cfg_.world);
    const corpus::InteractionLog log = corpus::simulate_log(world);
    const corpus::Split split = corpus::split_dataset(log);
    corpus::write_items(path(d, "items.tsv"), world.items());
    corpus::write_log(path(d, "train.tsv"), split.train);
    corpus::write_log(path(d, "validation.tsv"), split.validation);
    corpus::write_truth(path(d, "truth.tsv"), corpus::validation_truth(world, split.validation));

    long exposed = 0, clicks = 0;
    for (const auto& r : split.train.records) {
        exposed += r.exposed;
        clicks += r.clicked == 1;
    }
    KvConfig st;
    st.set("train.records", std::to_string(split.train.records.size()));
    st.set("train.exposed", std::to_string(exposed));
    st.set("train.clicks", std::to_string(clicks));
    st.set("train.days", std::to_string(split.train_days));
    st.set("validation.records", std::to_string(split.validation.records.size()));
    st.set("top10pct_popularity_share", fmt(world.top_popularity_share(0.1)));
    st.set("world.fingerprint", world.fingerprint());
    write_file(path(d, "stats.txt"), st.dump());
    write_manifest(Stage::gen_data, {},
                   {"items.tsv", "train.tsv", "validation.tsv", "truth.tsv", "stats.txt"});
}

void Runner::build_pool() {
    const std::string src = dir(Stage::gen_data);
    const std::string d = dir(Stage::build_pool);
    const auto items = corpus::read_items(path(src, "items.tsv"));
    const embed::EmbeddingPool pool = embed::build_pool(items, {cfg_.embed_noise, cfg_.seed});
    embed::save_pool(pool, path(d, "pool.bin"), path(d, "pool.idx"));
    write_manifest(Stage::build_pool, {path(src, "items.tsv")}, {"pool.bin", "pool.idx"});
}

namespace {

embed::EmbeddingPool load_pool_dir(const std::string& d) {
    return embed::load_pool(path(d, "pool.bin"), path(d, "pool.idx"));
}

}  // namespace

void Runner::train_quantizer() {
    const std::string src = dir(Stage::build_pool);
    const std::string d = dir(Stage::train_quantizer);
    const embed::EmbeddingPool pool = load_pool_dir(src);
    const std::string tdir = path(d, "tokenizer");
    fs::create_directories(tdir);

    std::unique_ptr<quantizer::SidTokenizer> tok;
    std::vector<std::string> outputs = {"tokenizer/manifest.txt", "lookup.tsv", "stats.txt"};
    if (cfg_.quantizer_method == "rqvae") {
        quantizer::FitReport rep;
        auto m = std::make_unique<quantizer::RqVaeModel>(quantizer::fit_rqvae(pool, cfg_.rqvae, &rep));
        std::ostringstream csv;
        csv << "epoch,loss,reconstruction_mse";
        for (int l = 0; l < cfg_.rqvae.levels; ++l) {
            csv << ",utilization_" << l;
        }
        csv << '\n';
        for (const auto& e : rep.epochs) {
            csv << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.reconstruction_mse);
            for (double u : e.utilization) {
                csv << ',' << fmt(u);
            }
            csv << '\n';
        }
        write_file(path(d, "epochs.csv"), csv.str());
        outputs.push_back("epochs.csv");
        tok = std::move(m);
    } else if (cfg_.quantizer_method == "rqkmeans") {
        tok = std::make_unique<quantizer::RqKmeansModel>(quantizer::fit_rq_kmeans(pool, cfg_.rqkmeans));
    } else {
        tok = std::make_unique<quantizer::RawIdTokenizer>(pool);
    }
    tok->save(tdir);
    const quantizer::LookupTable lookup = quantizer::build_lookup(*tok, pool);
    lookup.save(path(d, "lookup.tsv"));

    KvConfig st;
    st.set("method", tok->kind());
    st.set("levels", std::to_string(tok->levels()));
    st.set("sids", std::to_string(lookup.num_sids()));
    st.set("items", std::to_string(lookup.num_items()));
    st.set("collision_rate", fmt(lookup.collision_rate()));
    write_file(path(d, "stats.txt"), st.dump());
    write_manifest(Stage::train_quantizer, {path(src, "pool.bin")}, outputs);
}

namespace {

seqmodel::VocabLayout vocab_for(const quantizer::SidTokenizer& tok, int prompt_tokens) {
    seqmodel::VocabLayout v;
    v.prompt_tokens = prompt_tokens;
    for (int l = 0; l < tok.levels(); ++l) {
        v.level_sizes.push_back(tok.codebook_size(l));
    }
    return v;
}

}  // namespace

void Runner::train_lm() {
    const std::string data = dir(Stage::gen_data);
    const std::string qdir = dir(Stage::train_quantizer);
    const std::string d = dir(Stage::train_lm);
    const embed::EmbeddingPool pool = load_pool_dir(dir(Stage::build_pool));
    const auto tok = quantizer::load_tokenizer(path(qdir, "tokenizer"), pool);
    const auto lookup = quantizer::LookupTable::load(path(qdir, "lookup.tsv"));
    const auto train = corpus::read_log(path(data, "train.tsv"));
    const auto histories = train.click_histories(cfg_.world.num_users);

    Rng rng(cfg_.seed, "lm.downsample");
    const auto sampled = seqmodel::downsample_corpus(histories, cfg_.lm.downsample_fraction, rng);
    const seqmodel::VocabLayout vocab = vocab_for(*tok, cfg_.lm.prompt_tokens);
    seqmodel::TrainLog tl;
    const seqmodel::CausalLm model = seqmodel::train_lm(sampled, lookup, vocab, cfg_.lm, &tl);
    model.save(path(d, "model"));

    std::ostringstream csv;
    csv << "phase,epoch,loss\n";
    for (std::size_t e = 0; e < tl.pretrain_loss.size(); ++e) {
        csv << "pretrain," << e + 1 << ',' << fmt(tl.pretrain_loss[e]) << '\n';
    }
    for (std::size_t e = 0; e < tl.lora_loss.size(); ++e) {
        csv << "lora," << e + 1 << ',' << fmt(tl.lora_loss[e]) << '\n';
    }
    write_file(path(d, "loss.csv"), csv.str());
    write_manifest(Stage::train_lm, {path(data, "train.tsv"), path(qdir, "lookup.tsv")},
                   {"model/manifest.txt", "model/base.bin", "model/lora.bin", "loss.csv"});
}

void Runner::gen_anchors() {
    const std::string data = dir(Stage::gen_data);
    const std::string qdir = dir(Stage::train_quantizer);
    const std::string ldir = dir(Stage::train_lm);
    const std::string d = dir(Stage::gen_anchors);
    const embed::EmbeddingPool pool = load_pool_dir(dir(Stage::build_pool));
    const auto tok = quantizer::load_tokenizer(path(qdir, "tokenizer"), pool);
    const auto lookup = quantizer::LookupTable::load(path(qdir, "lookup.tsv"));
    const seqmodel::CausalLm model = seqmodel::CausalLm::load(path(ldir, "model"));
    const auto histories = corpus::read_log(path(data, "train.tsv")).click_histories(cfg_.world.num_users);

    seqmodel::FallbackResolver fallback(*tok, pool);
    std::vector<seqmodel::AnchorSet> sets;
    sets.reserve(histories.size());
    long table = 0, nn = 0, dropped = 0;
    const std::size_t window = static_cast<std::size_t>(cfg_.lm.max_history);
    for (std::size_t u = 0; u < histories.size(); ++u) {
        const auto& h = histories[u];
        const std::span<const ItemId> recent(h.data() + (h.size() > window ? h.size() - window : 0),
                                             std::min(h.size(), window));
        const auto input = seqmodel::build_input(recent, lookup, model.vocab(), false);
        const auto beams = seqmodel::beam_search(model, input.tokens, cfg_.lm.beam_width);
        seqmodel::AnchorSet set = seqmodel::resolve_anchors(beams, lookup, fallback);
        set.user = static_cast<UserId>(u);
        if (cfg_.lm.exclude_history) {
            const std::set<ItemId> seen(h.begin(), h.end());
            seqmodel::AnchorSet kept{set.user, {}};
            for (const auto& a : set.anchors) {
                if (!seen.count(a.item)) {
                    kept.anchors.push_back(a);
                }
            }
            if (!kept.anchors.empty()) {
                dropped += static_cast<long>(set.anchors.size() - kept.anchors.size());
                set = std::move(kept);
            }
        }
        for (const auto& a : set.anchors) {
            (a.via == seqmodel::ResolvedVia::table ? table : nn) += 1;
        }
        sets.push_back(std::move(set));
    }
    seqmodel::write_anchors(path(d, "anchors.tsv"), sets);
    KvConfig st;
    st.set("users", std::to_string(sets.size()));
    st.set("anchors.table", std::to_string(table));
    st.set("anchors.nn_fallback", std::to_string(nn));
    st.set("anchors.dropped_history", std::to_string(dropped));
    st.set("fallback_rate", fmt(table + nn > 0 ? static_cast<double>(nn) / static_cast<double>(table + nn) : 0.0));
    write_file(path(d, "stats.txt"), st.dump());
    write_manifest(Stage::gen_anchors, {path(data, "train.tsv"), path(ldir, "model/base.bin"), path(ldir, "model/lora.bin")},
                   {"anchors.tsv", "stats.txt"});
}

namespace {

// Per-user unique unexposed items of the training sessions, in first-seen order.
std::vector<std::vector<ItemId>> unexposed_by_user(const std::vector<corpus::Session>& sessions, int num_users) {
    std::vector<std::vector<ItemId>> out(static_cast<std::size_t>(num_users));
    std::vector<std::set<ItemId>> seen(static_cast<std::size_t>(num_users));
    for (const auto& s : sessions) {
        for (ItemId h : s.unexposed) {
            if (seen[static_cast<std::size_t>(s.user)].insert(h).second) {
                out[static_cast<std::size_t>(s.user)].push_back(h);
            }
        }
    }
    return out;
}

}  // namespace

void Runner::pseudo_label() {
    const std::string data = dir(Stage::gen_data);
    const std::string adir = dir(Stage::gen_anchors);
    const std::string d = dir(Stage::pseudo_label);
    const embed::EmbeddingPool pool = load_pool_dir(dir(Stage::build_pool));
    const auto train = corpus::read_log(path(data, "train.tsv"));
    const auto histories = train.click_histories(cfg_.world.num_users);
    const auto unexposed = unexposed_by_user(corpus::group_sessions(train), cfg_.world.num_users);
    const auto anchors = seqmodel::read_anchors(path(adir, "anchors.tsv"));

    std::vector<pseudolabel::PseudoSample> all;
    double sigma_sum = 0.0, w_sum = 0.0, r_sum = 0.0;
    int users = 0;
    for (const auto& set : anchors) {
        const auto u = static_cast<std::size_t>(set.user);
        if (u >= unexposed.size() || unexposed[u].empty() || set.anchors.empty()) {
            continue;
        }
        auto labels = pseudolabel::label_unexposed(set.user, unexposed[u], set, histories[u], pool, cfg_.pseudo);
        sigma_sum += labels.report.sigma;
        ++users;
        for (const auto& s : labels.samples) {
            w_sum += s.w;
            r_sum += s.r;
        }
        all.insert(all.end(), labels.samples.begin(), labels.samples.end());
    }
    pseudolabel::write_samples(path(d, "pseudo.tsv"), all);
    const double n = std::max<double>(1.0, static_cast<double>(all.size()));
    KvConfig st;
    st.set("samples", std::to_string(all.size()));
    st.set("users", std::to_string(users));
    st.set("mean_sigma", fmt(users ? sigma_sum / users : 0.0));
    st.set("mean_w", fmt(w_sum / n));
    st.set("mean_r", fmt(r_sum / n));
    write_file(path(d, "stats.txt"), st.dump());
    write_manifest(Stage::pseudo_label, {path(data, "train.tsv"), path(adir, "anchors.tsv")},
                   {"pseudo.tsv", "stats.txt"});
}

namespace {

preranker::ItemFeatures features_for(const std::string& data_dir, const std::string& pool_dir, int num_categories) {
    const auto items = corpus::read_items(path(data_dir, "items.tsv"));
    std::vector<CategoryId> cats(items.size());
    for (const auto& it : items) {
        cats.at(static_cast<std::size_t>(it.id)) = it.category;
    }
    return preranker::make_features(cats, num_categories, load_pool_dir(pool_dir));
}

}  // namespace

void Runner::train_ranker() {
    const std::string data = dir(Stage::gen_data);
    const std::string d = dir(Stage::train_ranker);
    auto features = features_for(data, dir(Stage::build_pool), cfg_.world.num_categories);
    const auto train = corpus::read_log(path(data, "train.tsv"));
    const auto sessions = corpus::group_sessions(train);
    const int window = cfg_.ranker.history_window;

    preranker::Dataset ds;
    ds.context_dim = features.content_dim;
    // Clicks strictly before each session; sessions come sorted by (user, day, session).
    std::vector<ItemId> clicks;
    UserId current = -1;
    for (const auto& s : sessions) {
        if (s.user != current) {
            clicks.clear();
            current = s.user;
        }
        const int row = ds.add_context(preranker::history_context(clicks, features, window));
        for (std::size_t i = 0; i < s.exposed.size(); ++i) {
            ds.exposed.push_back({s.user, s.exposed[i], row, s.clicks[i] == 1 ? 1.0 : 0.0, 1.0});
        }
        for (std::size_t i = 0; i < s.exposed.size(); ++i) {
            if (s.clicks[i] == 1) {
                clicks.push_back(s.exposed[i]);
            }
        }
    }
    std::vector<std::string> inputs = {path(data, "train.tsv")};
    if (!cfg_.exposure_only()) {
        const std::string pdir = dir(Stage::pseudo_label);
        inputs.push_back(path(pdir, "pseudo.tsv"));
        const auto samples = pseudolabel::read_samples(path(pdir, "pseudo.tsv"));
        const auto histories = train.click_histories(cfg_.world.num_users);
        std::map<UserId, std::vector<const pseudolabel::PseudoSample*>> by_user;
        for (const auto& s : samples) {
            by_user[s.user].push_back(&s);
        }
        for (auto& [u, list] : by_user) {
            if (cfg_.ranker.unexposed_cap > 0 && static_cast<int>(list.size()) > cfg_.ranker.unexposed_cap) {
                Rng rng(cfg_.seed, "ranker.cap", static_cast<std::uint64_t>(u));
                shuffle(list, rng);
                list.resize(static_cast<std::size_t>(cfg_.ranker.unexposed_cap));
            }
            const int row =
                ds.add_context(preranker::history_context(histories[static_cast<std::size_t>(u)], features, window));
            for (const auto* s : list) {
                ds.pseudo.push_back({u, s->item, row, s->r, s->w});
            }
        }
    }
    preranker::RankerModel model(cfg_.world.num_users, std::move(features), cfg_.ranker);
    const auto rep = preranker::train(model, ds, cfg_.ranker);
    model.save(path(d, "model"));
    preranker::write_loss_csv(path(d, "loss.csv"), rep);
    KvConfig st;
    st.set("exposed_examples", std::to_string(ds.exposed.size()));
    st.set("pseudo_examples", std::to_string(ds.pseudo.size()));
    st.set("steps", std::to_string(rep.steps.size()));
    for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e) {
        st.set("epoch_loss." + std::to_string(e + 1), fmt(rep.epoch_loss[e]));
    }
    write_file(path(d, "stats.txt"), st.dump());
    write_manifest(Stage::train_ranker, inputs, {"model/manifest.txt", "model/params.bin", "loss.csv", "stats.txt"});
}

namespace {

// Top `k` recalled items per validation session by score; ties to the smaller item id.
std::vector<std::size_t> top_k(const std::vector<double>& scores, const std::vector<ItemId>& items, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] != scores[b] ? scores[a] > scores[b] : items[a] < items[b];
    });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

struct Recommendations {
    std::vector<CategoryId> categories;
    std::vector<evalkit::Impression> impressions;
};

}  // namespace

void Runner::evaluate() {
    const std::string data = dir(Stage::gen_data);
    const std::string rdir = dir(Stage::train_ranker);
    const std::string d = dir(Stage::evaluate);
    const std::string pool_dir = dir(Stage::build_pool);
    const auto features = features_for(data, pool_dir, cfg_.world.num_categories);
    const auto model = preranker::RankerModel::load(path(rdir, "model"), features);
    const auto base_dir = baseline_ranker_dir();
    const auto baseline = preranker::RankerModel::load(path(base_dir, "model"), features);
    const auto train = corpus::read_log(path(data, "train.tsv"));
    const auto validation = corpus::read_log(path(data, "validation.tsv"));
    const auto truth = corpus::read_truth(path(data, "truth.tsv"));
    const auto histories = train.click_histories(cfg_.world.num_users);
    const int window = cfg_.ranker.history_window;

    std::vector<Vec> ctx(histories.size());
    for (std::size_t u = 0; u < histories.size(); ++u) {
        ctx[u] = preranker::history_context(histories[u], features, window);
    }
    auto score = [&](const preranker::RankerModel& m, UserId u, ItemId h) {
        return m.score(u, h, ctx[static_cast<std::size_t>(u)]);
    };

    evalkit::MetricReport rep;

    // Full recalled set against oracle labels.
    {
        std::vector<double> s;
        std::vector<int> y;
        std::map<UserId, evalkit::UserScores> per;
        for (const auto& t : truth) {
            const double v = score(model, t.user, t.item);
            s.push_back(v);
            y.push_back(t.click);
            auto& us = per[t.user];
            us.user = t.user;
            us.items.push_back(t.item);
            us.scores.push_back(v);
            us.labels.push_back(t.click);
        }
        rep.auc = evalkit::auc(s, y);
        std::vector<evalkit::UserScores> users;
        for (auto& [u, us] : per) {
            users.push_back(std::move(us));
        }
        const auto g = evalkit::gauc(users);
        rep.gauc = g.value;
        rep.gauc_users = g.eligible;
        rep.gauc_skipped = g.skipped;
    }

    // Exposed validation items against logged clicks.
    std::vector<UserId> ex_user;
    std::vector<ItemId> ex_item;
    std::vector<int> ex_click;
    {
        std::map<UserId, evalkit::UserScores> per;
        std::vector<double> s;
        for (const auto& r : validation.records) {
            if (!r.exposed) {
                continue;
            }
            const double v = score(model, r.user, r.item);
            ex_user.push_back(r.user);
            ex_item.push_back(r.item);
            ex_click.push_back(r.clicked == 1);
            s.push_back(v);
            auto& us = per[r.user];
            us.user = r.user;
            us.items.push_back(r.item);
            us.scores.push_back(v);
            us.labels.push_back(r.clicked == 1);
        }
        std::vector<evalkit::UserScores> users;
        for (auto& [u, us] : per) {
            users.push_back(std::move(us));
        }
        for (int k : cfg_.eval.hr_k) {
            rep.hr[k] = evalkit::hr_at_k(users, k);
        }
        rep.exposed_auc = evalkit::auc(s, ex_click);
    }

    std::vector<std::string> inputs = {path(data, "validation.tsv"), path(data, "truth.tsv"),
                                       path(rdir, "model/params.bin"), path(base_dir, "model/params.bin")};
    if (!cfg_.exposure_only()) {
        const std::string adir = dir(Stage::gen_anchors);
        inputs.push_back(path(adir, "anchors.tsv"));
        const auto sets = seqmodel::read_anchors(path(adir, "anchors.tsv"));
        const embed::EmbeddingPool pool = load_pool_dir(pool_dir);
        std::map<UserId, const seqmodel::AnchorSet*> by_user;
        for (const auto& s : sets) {
            by_user[s.user] = &s;
        }
        std::vector<double> r;
        std::vector<int> y;
        for (std::size_t i = 0; i < ex_user.size(); ++i) {
            auto it = by_user.find(ex_user[i]);
            if (it == by_user.end() || it->second->anchors.empty()) {
                continue;
            }
            r.push_back(pseudolabel::relevance(*it->second, ex_item[i], pool, cfg_.pseudo.tau(), cfg_.pseudo.pooling).r);
            y.push_back(ex_click[i]);
        }
        Rng rng(cfg_.seed, "eval.null");
        const auto star = evalkit::auc_star(r, y, cfg_.eval.permutations, rng);
        rep.auc_star = star.value;
        if (cfg_.eval.permutations > 0) {
            rep.auc_star_null_p95 = star.null_p95;
        }
    }

    // Simulated top-K recommendations per validation session.
    const std::size_t k = static_cast<std::size_t>(cfg_.eval.recommend_k > 0 ? cfg_.eval.recommend_k
                                                                             : cfg_.world.expose_size);
    std::map<std::tuple<UserId, int, int>, std::vector<const corpus::TruthRecord*>> sessions;
    for (const auto& t : truth) {
        sessions[{t.user, corpus::day_of(t.timestamp), corpus::session_of(t.timestamp)}].push_back(&t);
    }
    auto recommend = [&](const preranker::RankerModel& m) {
        Recommendations out;
        for (const auto& [key, recs] : sessions) {
            std::vector<double> s;
            std::vector<ItemId> items;
            for (const auto* t : recs) {
                items.push_back(t->item);
                s.push_back(score(m, t->user, t->item));
            }
            for (std::size_t i : top_k(s, items, k)) {
                out.categories.push_back(features.category[static_cast<std::size_t>(items[i])]);
                out.impressions.push_back({items[i], recs[i]->affinity});
            }
        }
        return out;
    };
    const Recommendations treat = recommend(model);
    const Recommendations base = recommend(baseline);
    const auto conc = evalkit::category_concentration(treat.categories);
    rep.top10_category_share = conc.top10_share;
    rep.category_flagged = conc.flagged;
    double ctr = 0.0;
    for (const auto& imp : treat.impressions) {
        ctr += imp.ctr;
    }
    rep.recommended_ctr = treat.impressions.empty() ? 0.0 : ctr / static_cast<double>(treat.impressions.size());

    std::vector<double> pv(features.category.size(), 0.0);
    for (const auto& r : train.records) {
        if (r.exposed) {
            pv[static_cast<std::size_t>(r.item)] += 1.0;
        }
    }
    const auto buckets = evalkit::pv_buckets(pv, cfg_.eval.buckets);
    rep.pv = evalkit::pv_bucket_lift(buckets, treat.impressions, base.impressions);

    write_file(path(d, "report.txt"), rep.to_text());
    write_file(path(d, "report.csv"), rep.to_csv());
    write_manifest(Stage::evaluate, inputs, {"report.txt", "report.csv"});
}

// ---- drivers ----

std::vector<AblationRow> run_ablation(const std::string& out, const KvConfig& base, const std::vector<std::string>& modes,
                                      std::optional<std::uint64_t> seed, Logger log) {
    if (modes.empty()) {
        throw ConfigError("ablation needs at least one mode");
    }
    std::vector<ExperimentConfig> cfgs;
    for (const auto& m : modes) {
        cfgs.push_back(resolve(base, m, seed));  // validate every mode before running any
    }
    std::vector<AblationRow> rows;
    for (auto& c : cfgs) {
        Runner r(out, c, log);
        r.ensure(Stage::evaluate);
        rows.push_back({c.mode, r.report()});
    }
    return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
    const evalkit::MetricReport* ref = nullptr;
    for (const auto& r : rows) {
        if (r.mode == "gpl") {
            ref = &r.report;
        }
    }
    std::ostringstream os;
    os << "mode,auc,gauc";
    const auto& hr = rows.front().report.hr;
    for (const auto& [k, v] : hr) {
        os << ",hr@" << k;
    }
    os << ",auc_star,top10_category_share,recommended_ctr,delta_auc,delta_gauc";
    for (const auto& [k, v] : hr) {
        os << ",delta_hr@" << k;
    }
    os << '\n';
    for (const auto& r : rows) {
        const auto& m = r.report;
        os << r.mode << ',' << fmt(m.auc) << ',' << fmt(m.gauc);
        for (const auto& [k, v] : hr) {
            os << ',' << fmt(m.hr.count(k) ? m.hr.at(k) : 0.0);
        }
        os << ',' << (m.auc_star ? fmt(*m.auc_star) : std::string()) << ',' << fmt(m.top10_category_share) << ','
           << fmt(m.recommended_ctr);
        if (ref) {
            os << ',' << fmt(m.auc - ref->auc) << ',' << fmt(m.gauc - ref->gauc);
            for (const auto& [k, v] : hr) {
                const double a = m.hr.count(k) ? m.hr.at(k) : 0.0;
                const double b = ref->hr.count(k) ? ref->hr.at(k) : 0.0;
                os << ',' << fmt(a - b);
            }
        } else {
            os << ",,";
            for (std::size_t i = 0; i < hr.size(); ++i) {
                os << ',';
            }
        }
        os << '\n';
    }
    return os.str();
}

namespace {

std::string int_value(double v, const std::string& param) {
    if (v != std::floor(v)) {
        throw ConfigError(param + " grid values must be integers");
    }
    return std::to_string(static_cast<long long>(v));
}

void apply_sweep_value(KvConfig& kv, const std::string& param, double v) {
    if (param == "lambda") {
        if (v < 0.0) throw ConfigError("lambda grid values must be >= 0");
        kv.set("ranker.lambda", fmt(v));
    } else if (param == "lambda1") {
        kv.set("pseudo.lambda1", fmt(v));
    } else if (param == "lambda2") {
        kv.set("pseudo.lambda2", fmt(v));
    } else if (param == "log_tau") {
        kv.set("pseudo.log_tau", fmt(v));
    } else if (param == "tau") {
        if (!(v > 0.0)) throw ConfigError("tau grid values must be positive");
        kv.set("pseudo.log_tau", fmt(std::log(v)));
    } else if (param == "B") {
        if (!(v > 0.0)) throw ConfigError("B grid values must be positive");
        kv.set("lm.beam_width", int_value(v, param));
    } else {
        throw ConfigError("unknown sweep parameter '" + param + "' (lambda, lambda1, lambda2, log_tau, tau, B)");
    }
}

}  // namespace

std::vector<SweepPoint> run_sweep(const std::string& out, const KvConfig& base, const std::string& mode,
                                  const std::string& param, const std::vector<double>& grid,
                                  std::optional<std::uint64_t> seed, Logger log, std::optional<bool> overlay) {
    if (grid.size() < 3) {
        throw ConfigError("sweep grid needs at least 3 points");
    }
    const bool both = overlay.value_or(param == "lambda" || param == "B");
    std::vector<std::pair<std::string, bool>> series = {{"confidence", true}};
    if (both) {
        series.push_back({"no_confidence", false});
    }
    std::vector<std::pair<SweepPoint, ExperimentConfig>> plan;
    for (const auto& [name, conf] : series) {
        for (double v : grid) {
            KvConfig kv = base;
            apply_sweep_value(kv, param, v);
            if (!conf) {
                kv.set("pseudo.confidence", "false");
            }
            SweepPoint p;
            p.series = name;
            p.value = v;
            plan.emplace_back(p, resolve(kv, mode, seed));
        }
    }
    std::vector<SweepPoint> points;
    for (auto& [p, c] : plan) {
        Runner r(out, c, log);
        r.ensure(Stage::evaluate);
        p.report = r.report();
        points.push_back(p);
    }
    return points;
}

std::string sweep_csv(const std::string& param, const std::vector<SweepPoint>& points) {
    std::ostringstream os;
    os << "series,param,value,auc,gauc,hr@3\n";
    for (const auto& p : points) {
        const auto it = p.report.hr.find(3);
        os << p.series << ',' << param << ',' << fmt(p.value) << ',' << fmt(p.report.auc) << ','
           << fmt(p.report.gauc) << ',' << (it != p.report.hr.end() ? fmt(it->second) : std::string()) << '\n';
    }
    return os.str();
}

}  // namespace gpl::pipeline
