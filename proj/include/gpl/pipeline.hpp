#pragma once

#include "gpl/corpus.hpp"
#include "gpl/evalkit.hpp"
#include "gpl/kvconfig.hpp"
#include "gpl/preranker.hpp"
#include "gpl/pseudolabel.hpp"
#include "gpl/quantizer.hpp"
#include "gpl/seqmodel.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace gpl::pipeline {

enum class Stage { gen_data, build_pool, train_quantizer, train_lm, gen_anchors, pseudo_label, train_ranker, evaluate };

const std::vector<Stage>& all_stages();
std::string stage_name(Stage s);
Stage parse_stage(const std::string& name);

// gpl, bc, wo_confidence, wo_max_pooling, wo_semantic_ids, wo_actual_labels,
// wo_dispersion, wo_history, wo_llm_conf.
const std::vector<std::string>& run_modes();
// Config overrides that define a run mode. Throws ConfigError for unknown modes.
std::vector<std::pair<std::string, std::string>> mode_overrides(const std::string& mode);

struct EvalConfig {
    std::vector<int> hr_k = {1, 3, 5};
    int buckets = 7;
    int permutations = 100;
    int recommend_k = 0;  // 0: the world's exposure size
};

struct ExperimentConfig {
    KvConfig kv;         // effective flat config after mode overrides
    KvConfig canonical;  // every parsed value, defaults included; the input to artifact keys
    std::string mode = "gpl";
    std::uint64_t seed = 1;
    corpus::WorldConfig world;
    double embed_noise = 0.1;
    std::string quantizer_method = "rqvae";
    quantizer::RqVaeConfig rqvae;
    quantizer::RqKmeansConfig rqkmeans;
    seqmodel::LmConfig lm;
    pseudolabel::PseudoConfig pseudo;
    preranker::RankerConfig ranker;
    EvalConfig eval;

    // Pseudo-labels are not consumed (lambda = 0 with actual labels on).
    bool exposure_only() const { return ranker.actual_labels && ranker.lambda == 0.0; }
};

// Applies `mode` and an optional seed override to `base`, parses and validates every section.
ExperimentConfig resolve(const KvConfig& base, const std::string& mode, std::optional<std::uint64_t> seed = {});

using Logger = std::function<void(const std::string&)>;

// Runs stages for one experiment config. Artifacts for stage S live under
// <out>/<stage>/<key>, where key hashes the stage's config keys, the upstream key and the seed.
class Runner {
public:
    Runner(std::string out, ExperimentConfig cfg, Logger log = {});

    const ExperimentConfig& config() const { return cfg_; }
    std::string key(Stage s) const;
    std::string dir(Stage s) const;
    bool done(Stage s) const;

    // Runs one stage; upstream artifacts must exist or MissingArtifact names the stage to run.
    void run(Stage s);
    // Runs `s` and anything upstream that is missing.
    void ensure(Stage s);

    evalkit::MetricReport report() const;
    // Directory of the exposure-only ranker matching this config (the PV/category baseline).
    std::string baseline_ranker_dir() const;
    ExperimentConfig baseline_config() const;

private:
    std::vector<Stage> upstream(Stage s) const;
    std::string subset(Stage s) const;
    void require(Stage s) const;
    void write_manifest(Stage s, const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) const;

    void gen_data();
    void build_pool();
    void train_quantizer();
    void train_lm();
    void gen_anchors();
    void pseudo_label();
    void train_ranker();
    void evaluate();

    std::string out_;
    ExperimentConfig cfg_;
    Logger log_;
};

struct AblationRow {
    std::string mode;
    evalkit::MetricReport report;
};

std::vector<AblationRow> run_ablation(const std::string& out, const KvConfig& base, const std::vector<std::string>& modes,
                                      std::optional<std::uint64_t> seed, Logger log = {});
std::string ablation_table(const std::vector<AblationRow>& rows);

struct SweepPoint {
    std::string series;  // "confidence" or "no_confidence"
    double value = 0.0;
    evalkit::MetricReport report;
};

// param in {lambda, lambda1, lambda2, log_tau, tau, B}. lambda and B also run
// the no-confidence series.
// An unset `overlay` follows that default.
std::vector<SweepPoint> run_sweep(const std::string& out, const KvConfig& base, const std::string& mode,
                                  const std::string& param, const std::vector<double>& grid,
                                  std::optional<std::uint64_t> seed, Logger log = {},
                                  std::optional<bool> overlay = {});
std::string sweep_csv(const std::string& param, const std::vector<SweepPoint>& points);

}  // namespace gpl::pipeline
