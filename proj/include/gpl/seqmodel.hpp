#pragma once

#include "gpl/common.hpp"
#include "gpl/embed.hpp"
#include "gpl/kvconfig.hpp"
#include "gpl/quantizer.hpp"

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gpl::seqmodel {

using quantizer::Sid;

// Token ids: [0, prompt) are prompt tokens, then one contiguous block per SID level.
struct VocabLayout {
    int prompt_tokens = 4;
    std::vector<int> level_sizes;

    int levels() const { return static_cast<int>(level_sizes.size()); }
    int offset(int level) const;
    int vocab_size() const;
    int token(int level, int code) const { return offset(level) + code; }
    // Level of a SID token; throws for prompt tokens and ids out of range.
    int level_of(int token) const;
};

struct LmConfig {
    int layers = 2;
    int dim = 64;
    int heads = 4;
    int ffn_mult = 4;
    int lora_rank = 8;
    int prompt_tokens = 4;
    int max_history = 20;
    int pretrain_epochs = 3;
    int lora_epochs = 2;
    int batch_size = 16;
    int targets_per_user = 3;
    double lr = 1e-3;
    double lora_lr = 2e-3;
    double downsample_fraction = 0.10;
    int beam_width = 32;
    bool exclude_history = false;
    std::uint64_t seed = 1;

    static LmConfig from(const KvConfig& kv);
    void store(KvConfig& kv) const;
    void validate() const;
};

struct SidSequence {
    std::vector<int> tokens;
    int prompt_length = 0;
    // Positions >= target_start are prediction targets; equals tokens.size() when there are none.
    int target_start = 0;
};

// Prompt tokens, then history SIDs oldest to newest. With `reserve_target`
// the last history item becomes the teacher-forced target.
SidSequence build_input(std::span<const ItemId> history, const quantizer::LookupTable& lookup,
                        const VocabLayout& vocab, bool reserve_target);

// Frequency downsampling of click histories: items in the top `top_fraction`
// by click count are kept with probability f_threshold / f_item.
std::map<ItemId, double> retention_probabilities(const std::vector<std::vector<ItemId>>& histories,
                                                 double top_fraction);
std::vector<std::vector<ItemId>> downsample_corpus(const std::vector<std::vector<ItemId>>& histories,
                                                   double top_fraction, Rng& rng);

// W x + B (A x), W: out x in, A: r x in, B: out x r (row-major).
Vec apply_lora(std::span<const double> w, std::span<const double> a, std::span<const double> b,
               std::span<const double> x, int out, int in, int rank);

struct Gradients {
    std::vector<double> base;
    std::vector<double> lora;
};

class CausalLm {
public:
    CausalLm() = default;
    CausalLm(VocabLayout vocab, const LmConfig& cfg, int max_len);

    const VocabLayout& vocab() const { return vocab_; }
    const LmConfig& config() const { return cfg_; }
    int max_len() const { return max_len_; }

    std::vector<double>& base_params() { return base_; }
    const std::vector<double>& base_params() const { return base_; }
    std::vector<double>& lora_params() { return lora_; }
    const std::vector<double>& lora_params() const { return lora_; }

    // A ~ N(0, 1/in), B = 0.
    void reset_lora(Rng& rng);
    void set_lora_enabled(bool on) { lora_on_ = on; }
    bool lora_enabled() const { return lora_on_; }

    // Full-vocabulary logits at every position (T x V, row-major).
    std::vector<Vec> logits(std::span<const int> tokens) const;

    // Sum over target positions of -log p(token | prefix) under the level-restricted softmax.
    // Gradients accumulate into `grads` (base and/or lora, whichever vectors are non-empty).
    double sequence_loss(const SidSequence& seq, Gradients* grads) const;
    // Eq. 3 batch objective: mean over sequences of the per-sequence target sum.
    double ntp_loss(std::span<const SidSequence> batch, Gradients* grads) const;
    // Log-probabilities of each target token, in order.
    std::vector<double> target_log_probs(const SidSequence& seq) const;

    // Incremental decoding with cached keys and values.
    struct State {
        std::vector<std::vector<double>> keys;    // per layer, t x dim
        std::vector<std::vector<double>> values;  // per layer, t x dim
        Vec hidden;                               // final normalized hidden of the last token
        int length = 0;
    };
    State start(std::span<const int> prefix) const;
    void push(State& state, int token) const;
    // Log-softmax of the next token restricted to `level`.
    Vec level_log_probs(const State& state, int level) const;

    void save(const std::string& dir) const;
    static CausalLm load(const std::string& dir);

private:
    struct Block {
        std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    struct LoraBlock {
        std::size_t aq, bq, av, bv;
    };
    struct Cache;

    void layout();
    Vec hidden_to_level_logits(std::span<const double> h, int level) const;
    void forward(std::span<const int> tokens, Cache& cache) const;
    void backward(std::span<const int> tokens, const Cache& cache, const std::vector<double>& dhf,
                  Gradients& g) const;

    VocabLayout vocab_;
    LmConfig cfg_;
    int max_len_ = 0;
    bool lora_on_ = true;
    std::vector<double> base_;
    std::vector<double> lora_;
    std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0, head_w_ = 0, head_b_ = 0;
    std::vector<Block> blocks_;
    std::vector<LoraBlock> lora_blocks_;
};

struct TrainLog {
    std::vector<double> pretrain_loss;  // mean per-token NLL per epoch
    std::vector<double> lora_loss;      // mean Eq. 3 loss per epoch
};

// History chunks of up to max_history + 1 items, every SID token a target.
std::vector<SidSequence> pretrain_corpus(const std::vector<std::vector<ItemId>>& histories,
                                         const quantizer::LookupTable& lookup, const VocabLayout& vocab,
                                         const LmConfig& cfg);
// Up to targets_per_user (history window, next SID) pairs per user, most recent first.
std::vector<SidSequence> adaptation_corpus(const std::vector<std::vector<ItemId>>& histories,
                                           const quantizer::LookupTable& lookup, const VocabLayout& vocab,
                                           const LmConfig& cfg);

void pretrain_base(CausalLm& model, const std::vector<SidSequence>& corpus, const LmConfig& cfg, TrainLog* log);
void train_lora(CausalLm& model, const std::vector<SidSequence>& corpus, const LmConfig& cfg, TrainLog* log);

// Base pre-training, freeze, LoRA adaptation.
CausalLm train_lm(const std::vector<std::vector<ItemId>>& click_histories, const quantizer::LookupTable& lookup,
                  const VocabLayout& vocab, const LmConfig& cfg, TrainLog* log = nullptr);

struct Beam {
    Sid sid;
    double log_prob = 0.0;
};

// Exactly L decode steps; returns `width` distinct SIDs by accumulated log-probability,
// ties broken by parent beam order then token id.
std::vector<Beam> beam_search(const CausalLm& model, std::span<const int> prefix, int width);

enum class ResolvedVia { table, nn_fallback };

struct Anchor {
    ItemId item = 0;
    Sid sid;
    double log_prob = 0.0;
    double conf = 0.0;  // log_prob / L
    ResolvedVia via = ResolvedVia::table;
};

struct AnchorSet {
    UserId user = 0;
    std::vector<Anchor> anchors;
};

// Memoizes decode + nearest_item for out-of-table SIDs.
class FallbackResolver {
public:
    FallbackResolver(const quantizer::SidTokenizer& tok, const embed::EmbeddingPool& pool) : tok_(&tok), pool_(&pool) {}
    ItemId resolve(const Sid& sid);

private:
    const quantizer::SidTokenizer* tok_;
    const embed::EmbeddingPool* pool_;
    std::map<Sid, ItemId> cache_;
};

AnchorSet resolve_anchors(const std::vector<Beam>& beams, const quantizer::LookupTable& lookup,
                          FallbackResolver& fallback);

void write_anchors(const std::string& path, const std::vector<AnchorSet>& sets);
std::vector<AnchorSet> read_anchors(const std::string& path);

}  // namespace gpl::seqmodel
