#pragma once

#include "defacto/geometry.hpp"
#include "defacto/reward.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace defacto {

/// Desk-scale evidence-selection environment and group-relative policy
/// optimizer driven by the real reward engine. The policy is a tabular
/// softmax: one row of logits per feature bucket, so gradients have exact
/// closed forms and finite-difference oracles stay meaningful.

struct SimConfig {
    int num_candidates = 8;   // N selectable boxes
    int num_evidence = 2;     // evidence boxes within the candidate set
    int group_size = 4;       // M rollouts per instance
    int step_cap = 4;         // T
    int iterations = 500;
    double learning_rate = 0.1;
    double clip_epsilon = 0.0;  // 0 disables the optional PPO-style ratio clip
    std::uint64_t seed = 0;
    int eval_rollouts = 200;  // per variant, after training
    int divergence_window = 50;
    int divergence_patience = 50;
    ImageExtent extent{64, 64};

    void validate() const;
    static SimConfig load(const std::filesystem::path& path);
};

/// One synthetic scene variant. The policy never sees `variant` or
/// `gold_answer`; it observes only the candidate layout and which candidates
/// are masked, via the observation-class bucketing below.
struct SimInstance {
    ImageExtent extent;
    std::vector<BBox> candidates;
    RegionPartition partition;        // over candidates
    std::vector<int> evidence_index;  // indices of evidence boxes within candidates
    std::vector<int> masked_index;    // indices of masked candidates
    VariantTag variant = VariantTag::pos;
    std::string gold_answer;
    std::string distractor_answer;
    std::uint64_t feature_seed = 0;
};

/// Tabular softmax policy. Row = feature bucket; selection columns are the N
/// candidate picks plus STOP (column N); answer columns are
/// {gold, distractor, unknown}.
struct PolicyParams {
    Eigen::MatrixXd selection;
    Eigen::MatrixXd answer;

    static PolicyParams zeros(int buckets, int num_candidates);

    PolicyParams& operator+=(const PolicyParams& other);
    PolicyParams& operator*=(double factor);
};

enum class AnswerAction { gold = 0, distractor = 1, unknown = 2 };

struct Decision {
    int bucket = 0;
    bool answer_head = false;
    int action = 0;
};

struct Trajectory {
    std::vector<int> picks;   // candidate indices before STOP
    int answer_action = 0;
    std::vector<Decision> decisions;
    std::string rendered;     // canonical structured output text
    RewardBreakdown reward;
    double logp_current = 0.0;
    double logp_old = 0.0;
};

struct TrajectoryGroup {
    std::vector<Trajectory> trajectories;
    double mean_reward = 0.0;
    std::vector<double> advantages;
};

struct PolicyCollapseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingDivergedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Fixed scene family derived from the config seed: disjoint candidate boxes
/// on a grid, a fixed evidence subset, per-instance variant realizations.
class SimEnvironment {
public:
    explicit SimEnvironment(const SimConfig& cfg);

    SimInstance make_instance(VariantTag variant, std::uint64_t feature_seed) const;

    /// Observation classes: 0 = nothing masked, 1 = evidence not visible,
    /// 2 = masks present but evidence visible. Derived from the image
    /// observables only; this is also the policy's feature bucket.
    int observation_class(const SimInstance& inst) const;
    int bucket(const SimInstance& inst) const { return observation_class(inst); }
    int num_buckets() const { return 3; }

    const SimConfig& config() const { return cfg_; }
    const std::vector<BBox>& candidates() const { return candidates_; }
    const std::vector<int>& evidence_index() const { return evidence_index_; }

private:
    SimConfig cfg_;
    std::vector<BBox> candidates_;
    std::vector<int> evidence_index_;
    RegionPartition partition_;
};

/// Samples picks until STOP or the step cap, then an answer token; renders
/// the canonical structured output and scores it with the composite reward.
Trajectory rollout(const PolicyParams& policy, const SimEnvironment& env, const SimInstance& inst,
                   const RewardConfig& reward_cfg, std::uint64_t rng_seed);

/// A_i = R_i - mean_j R_j. Sums to zero within 1e-9 by construction.
std::vector<double> group_advantages(std::span<const double> rewards);

/// Builds a complete group: M rollouts plus advantages.
TrajectoryGroup make_group(const PolicyParams& policy, const SimEnvironment& env,
                           const SimInstance& inst, const RewardConfig& reward_cfg, int group_size,
                           std::uint64_t seed);

struct ObjectiveResult {
    double loss = 0.0;        // -E_i[ratio_i * A_i]
    PolicyParams gradient;    // d loss / d params
};

/// Flags training runs whose sliding windowed total-reward mean stays below
/// the first window's mean for `patience` consecutive evaluations.
class DivergenceDetector {
public:
    DivergenceDetector(int window, int patience);

    /// Feed one per-iteration total-reward mean; true signals divergence.
    bool observe(double total_mean);

private:
    int window_;
    int patience_;
    std::vector<double> recent_;
    bool has_initial_ = false;
    double initial_ = 0.0;
    int consecutive_below_ = 0;
};

/// Importance-ratio policy-gradient objective over trajectory groups. Ratios
/// come from stored old-policy log-probs against `policy` recomputed from the
/// recorded decisions. Throws PolicyCollapseError on a non-finite ratio.
/// clip_epsilon > 0 applies the optional PPO-style clipped surrogate.
ObjectiveResult grpo_objective(std::span<const TrajectoryGroup> groups, const PolicyParams& policy,
                               double clip_epsilon = 0.0);

struct IterationStats {
    int iteration = 0;
    double r_ans_mean = 0.0, r_ans_std = 0.0;
    double r_fmt_mean = 0.0, r_fmt_std = 0.0;
    double r_sel_mean = 0.0, r_sel_std = 0.0;
    double total_mean = 0.0, total_std = 0.0;
};

struct TrainingResult {
    std::vector<IterationStats> log;
    PolicyParams policy;
    // Post-training behavior, estimated from eval_rollouts fresh rollouts per
    // variant: fraction of pos/rand rollouts whose picks are mostly evidence
    // (mean overlap with the evidence set >= 0.5), and abstention fractions.
    double evidence_selection_rate_pos = 0.0;
    double evidence_selection_rate_rand = 0.0;
    double abstention_rate_cf = 0.0;
    double abstention_rate_rand = 0.0;
};

/// One iteration = one group per variant (pos, cf, rand), a single gradient
/// step, old policy synced afterwards. Deterministic for a fixed (seed,
/// config). Throws TrainingDivergedError when the windowed total-reward mean
/// stays below its initial value for `divergence_patience` consecutive
/// windows.
TrainingResult train(const SimConfig& cfg, const RewardConfig& reward_cfg);

/// Learning curves: iteration plus mean/std of the three reward components
/// and the total.
void write_training_csv(const TrainingResult& result, const std::filesystem::path& path);

/// Final policy matrices and behavior rates as JSON.
void write_policy_snapshot(const TrainingResult& result, const SimConfig& cfg,
                           const std::filesystem::path& path);

/// Means of consecutive non-overlapping windows; trailing partial window
/// dropped. Used by the convergence checks.
std::vector<double> windowed_means(std::span<const double> series, std::size_t window);

}  // namespace defacto
