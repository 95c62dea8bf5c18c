#pragma once

// Randomized oracle, analytic and gradient checks. Each returns the worst
// error seen; unit tests assert on them and the acceptance tool reports them.

#include <cstdint>
#include <string>

namespace checks {

struct Result {
    double worst = 0.0;
    int trials = 0;
};

// Brute-force oracles (criterion 1).
Result auc_vs_pairs(int trials, std::uint64_t seed);
Result gauc_vs_pairs(int trials, std::uint64_t seed);
Result hr_vs_rank_count(int trials, std::uint64_t seed);
Result beam_vs_enumeration(int trials, std::uint64_t seed);
Result nearest_vs_scan(int trials, std::uint64_t seed);  // worst = mismatches
Result sigma_rho_vs_loops(int trials, std::uint64_t seed);

// Analytic values (criterion 2).
double relevance_at_zero();         // |r - 0.5| for an orthogonal anchor
double bce_ln2();                   // worst |loss - ln 2| over the constant-predictor cases
double uniform_ntp();               // |loss - L ln K| for an all-zero model
double ema_rate();                  // worst |ratio - 0.99| of successive codeword distances
Result weight_sum(int trials, std::uint64_t seed);  // |sum w - exp(-sigma)|

// Central-difference gradient checks (criterion 3): worst relative error at 20 coordinates.
double grad_ntp_lora(std::uint64_t seed);
double grad_rqvae_encoder(std::uint64_t seed);
double grad_ranker_actual(std::uint64_t seed);
double grad_ranker_pseudo(std::uint64_t seed);

// Structural properties (criterion 7); true when the property holds exactly.
bool causal_future_invariance(std::uint64_t seed);
bool lora_zero_identity(std::uint64_t seed);

}  // namespace checks
