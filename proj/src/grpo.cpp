#include "defacto/grpo.hpp"

#include "defacto/hash.hpp"
#include "defacto/kvconfig.hpp"
#include "defacto/output_schema.hpp"
#include "defacto/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>

namespace defacto {

namespace {

constexpr int kBoxSide = 12;
constexpr int kBoxPitch = 15;
constexpr int kBoxMargin = 2;

constexpr const char* kAnswerWords[] = {"red",  "blue", "green", "white",
                                        "dog",  "tree", "sign",  "door"};
constexpr std::size_t kAnswerWordCount = sizeof(kAnswerWords) / sizeof(kAnswerWords[0]);

int grid_capacity(const ImageExtent& extent) {
    const int per_x = (extent.width - kBoxMargin - kBoxSide) / kBoxPitch + 1;
    const int per_y = (extent.height - kBoxMargin - kBoxSide) / kBoxPitch + 1;
    return std::max(0, per_x) * std::max(0, per_y);
}

Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
    const double max = logits.maxCoeff();
    const double lse = max + std::log((logits.array() - max).exp().sum());
    return logits.array() - lse;
}

int sample_categorical(const Eigen::VectorXd& log_probs, Rng& rng) {
    const double u = rng.uniform();
    double cumulative = 0.0;
    for (Eigen::Index i = 0; i < log_probs.size(); ++i) {
        cumulative += std::exp(log_probs[i]);
        if (u < cumulative) return static_cast<int>(i);
    }
    return static_cast<int>(log_probs.size() - 1);
}

// The structured-text rendering of a trajectory. An unknown answer commits
// to the joint-abstention form (unknown in both fields, picks discarded); a
// concrete answer with no picks has no valid form and renders an empty box
// array, which the format reward rejects.
std::string render_output(const SimInstance& inst, const std::vector<int>& picks,
                          int answer_action) {
    const auto action = static_cast<AnswerAction>(answer_action);
    if (action == AnswerAction::unknown) return serialize(StructuredOutput::abstention());
    const std::string& text =
        action == AnswerAction::gold ? inst.gold_answer : inst.distractor_answer;
    if (picks.empty())
        return "<think></think>\n<bbox>[]</bbox>\n<answer>" + text + "</answer>";

    std::vector<BoxPrediction> boxes;
    boxes.reserve(picks.size());
    for (int pick : picks)
        boxes.push_back(BoxPrediction{inst.candidates[static_cast<std::size_t>(pick)], 1.0});
    return serialize(StructuredOutput::answered("", std::move(boxes), text));
}

double mean_of(std::span<const double> values) {
    if (values.empty()) return 0.0;
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double std_of(std::span<const double> values, double mean) {
    if (values.empty()) return 0.0;
    double acc = 0.0;
    for (double v : values) acc += (v - mean) * (v - mean);
    return std::sqrt(acc / static_cast<double>(values.size()));
}

}  // namespace

void SimConfig::validate() const {
    if (num_candidates < 2) throw std::invalid_argument("sim: need at least two candidates");
    if (num_evidence < 1 || num_evidence >= num_candidates)
        throw std::invalid_argument("sim: num_evidence must be in [1, num_candidates)");
    if (group_size < 2) throw std::invalid_argument("sim: group_size must be >= 2");
    if (step_cap < 1) throw std::invalid_argument("sim: step_cap must be >= 1");
    if (iterations < 1) throw std::invalid_argument("sim: iterations must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("sim: learning_rate must be positive");
    if (clip_epsilon < 0.0) throw std::invalid_argument("sim: clip_epsilon must be >= 0");
    if (eval_rollouts < 1) throw std::invalid_argument("sim: eval_rollouts must be >= 1");
    if (divergence_window < 1 || divergence_patience < 1)
        throw std::invalid_argument("sim: divergence settings must be positive");
    if (!extent.valid()) throw std::invalid_argument("sim: invalid extent");
    if (num_candidates > grid_capacity(extent))
        throw std::invalid_argument("sim: extent too small for the candidate grid");
}

SimConfig SimConfig::load(const std::filesystem::path& path) {
    const KvConfig kv = KvConfig::load(path);
    kv.require_known({"num_candidates", "num_evidence", "group_size", "step_cap", "iterations",
                      "learning_rate", "clip_epsilon", "seed", "eval_rollouts",
                      "divergence_window", "divergence_patience", "extent_width",
                      "extent_height"});
    SimConfig cfg;
    cfg.num_candidates = static_cast<int>(kv.get_int("num_candidates", cfg.num_candidates));
    cfg.num_evidence = static_cast<int>(kv.get_int("num_evidence", cfg.num_evidence));
    cfg.group_size = static_cast<int>(kv.get_int("group_size", cfg.group_size));
    cfg.step_cap = static_cast<int>(kv.get_int("step_cap", cfg.step_cap));
    cfg.iterations = static_cast<int>(kv.get_int("iterations", cfg.iterations));
    cfg.learning_rate = kv.get_double("learning_rate", cfg.learning_rate);
    cfg.clip_epsilon = kv.get_double("clip_epsilon", cfg.clip_epsilon);
    cfg.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
    cfg.eval_rollouts = static_cast<int>(kv.get_int("eval_rollouts", cfg.eval_rollouts));
    cfg.divergence_window = static_cast<int>(kv.get_int("divergence_window", cfg.divergence_window));
    cfg.divergence_patience =
        static_cast<int>(kv.get_int("divergence_patience", cfg.divergence_patience));
    cfg.extent.width = static_cast<int>(kv.get_int("extent_width", cfg.extent.width));
    cfg.extent.height = static_cast<int>(kv.get_int("extent_height", cfg.extent.height));
    cfg.validate();
    return cfg;
}

PolicyParams PolicyParams::zeros(int buckets, int num_candidates) {
    PolicyParams p;
    p.selection = Eigen::MatrixXd::Zero(buckets, num_candidates + 1);
    p.answer = Eigen::MatrixXd::Zero(buckets, 3);
    return p;
}

PolicyParams& PolicyParams::operator+=(const PolicyParams& other) {
    selection += other.selection;
    answer += other.answer;
    return *this;
}

PolicyParams& PolicyParams::operator*=(double factor) {
    selection *= factor;
    answer *= factor;
    return *this;
}

SimEnvironment::SimEnvironment(const SimConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int per_x = (cfg_.extent.width - kBoxMargin - kBoxSide) / kBoxPitch + 1;
    for (int i = 0; i < cfg_.num_candidates; ++i) {
        const int gx = i % per_x;
        const int gy = i / per_x;
        const int x = kBoxMargin + gx * kBoxPitch;
        const int y = kBoxMargin + gy * kBoxPitch;
        candidates_.push_back(BBox{x, y, x + kBoxSide, y + kBoxSide});
    }

    Rng rng(mix_seed(cfg_.seed, 0x5ce8e));
    std::vector<std::size_t> chosen =
        rng.sample_indices(candidates_.size(), static_cast<std::size_t>(cfg_.num_evidence));
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t idx : chosen) evidence_index_.push_back(static_cast<int>(idx));

    for (std::size_t i = 0; i < candidates_.size(); ++i) {
        const bool is_evidence =
            std::find(chosen.begin(), chosen.end(), i) != chosen.end();
        (is_evidence ? partition_.evidence : partition_.irrelevant).push_back(candidates_[i]);
    }
}

SimInstance SimEnvironment::make_instance(VariantTag variant, std::uint64_t feature_seed) const {
    SimInstance inst;
    inst.extent = cfg_.extent;
    inst.candidates = candidates_;
    inst.partition = partition_;
    inst.evidence_index = evidence_index_;
    inst.variant = variant;
    inst.feature_seed = feature_seed;

    Rng rng(feature_seed);
    const std::size_t gold = rng.bounded(kAnswerWordCount);
    const std::size_t offset = 1 + rng.bounded(kAnswerWordCount - 1);
    inst.gold_answer = kAnswerWords[gold];
    inst.distractor_answer = kAnswerWords[(gold + offset) % kAnswerWordCount];

    if (variant == VariantTag::cf) {
        inst.masked_index = evidence_index_;
    } else if (variant == VariantTag::rand) {
        std::vector<int> irrelevant_index;
        for (int i = 0; i < cfg_.num_candidates; ++i)
            if (std::find(evidence_index_.begin(), evidence_index_.end(), i) ==
                evidence_index_.end())
                irrelevant_index.push_back(i);
        const std::size_t k = std::max<std::size_t>(
            1, std::min(evidence_index_.size(), irrelevant_index.size()));
        std::vector<std::size_t> chosen = rng.sample_indices(irrelevant_index.size(), k);
        std::sort(chosen.begin(), chosen.end());
        for (std::size_t idx : chosen) inst.masked_index.push_back(irrelevant_index[idx]);
    }
    return inst;
}

int SimEnvironment::observation_class(const SimInstance& inst) const {
    if (inst.masked_index.empty()) return 0;
    for (int e : inst.evidence_index)
        if (std::find(inst.masked_index.begin(), inst.masked_index.end(), e) !=
            inst.masked_index.end())
            return 1;
    return 2;
}

Trajectory rollout(const PolicyParams& policy, const SimEnvironment& env, const SimInstance& inst,
                   const RewardConfig& reward_cfg, std::uint64_t rng_seed) {
    const SimConfig& cfg = env.config();
    Rng rng(rng_seed);
    Trajectory traj;
    double logp = 0.0;

    const int stop_action = cfg.num_candidates;
    const int b = env.bucket(inst);
    for (int step = 0; step < cfg.step_cap; ++step) {
        const Eigen::VectorXd lp = log_softmax(policy.selection.row(b).transpose());
        const int action = sample_categorical(lp, rng);
        traj.decisions.push_back(Decision{b, false, action});
        logp += lp[action];
        if (action == stop_action) break;
        traj.picks.push_back(action);
    }

    const Eigen::VectorXd lp = log_softmax(policy.answer.row(b).transpose());
    traj.answer_action = sample_categorical(lp, rng);
    traj.decisions.push_back(Decision{b, true, traj.answer_action});
    logp += lp[traj.answer_action];

    traj.rendered = render_output(inst, traj.picks, traj.answer_action);

    ScoringContext ctx;
    ctx.variant = inst.variant;
    ctx.gold_answer = inst.gold_answer;
    ctx.partition = inst.partition;
    ctx.extent = inst.extent;
    traj.reward = composite_reward(parse(traj.rendered), ctx, reward_cfg);

    traj.logp_current = logp;
    traj.logp_old = logp;  // sampled under the current policy; synced at rollout time
    return traj;
}

std::vector<double> group_advantages(std::span<const double> rewards) {
    const double baseline = mean_of(rewards);
    std::vector<double> advantages;
    advantages.reserve(rewards.size());
    for (double r : rewards) advantages.push_back(r - baseline);
    return advantages;
}

TrajectoryGroup make_group(const PolicyParams& policy, const SimEnvironment& env,
                           const SimInstance& inst, const RewardConfig& reward_cfg, int group_size,
                           std::uint64_t seed) {
    TrajectoryGroup group;
    std::vector<double> rewards;
    for (int m = 0; m < group_size; ++m) {
        group.trajectories.push_back(
            rollout(policy, env, inst, reward_cfg, mix_seed(seed, static_cast<std::uint64_t>(m))));
        rewards.push_back(group.trajectories.back().reward.total);
    }
    group.mean_reward = mean_of(rewards);
    group.advantages = group_advantages(rewards);
    return group;
}

ObjectiveResult grpo_objective(std::span<const TrajectoryGroup> groups, const PolicyParams& policy,
                               double clip_epsilon) {
    ObjectiveResult result;
    result.gradient = PolicyParams::zeros(static_cast<int>(policy.selection.rows()),
                                          static_cast<int>(policy.selection.cols()) - 1);

    std::size_t count = 0;
    for (const TrajectoryGroup& group : groups) count += group.trajectories.size();
    if (count == 0) return result;
    const double inv_count = 1.0 / static_cast<double>(count);

    for (const TrajectoryGroup& group : groups) {
        for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
            const Trajectory& traj = group.trajectories[i];
            const double advantage = group.advantages[i];

            double logp = 0.0;
            for (const Decision& d : traj.decisions) {
                const Eigen::MatrixXd& m = d.answer_head ? policy.answer : policy.selection;
                logp += log_softmax(m.row(d.bucket).transpose())[d.action];
            }
            const double ratio = std::exp(logp - traj.logp_old);
            if (!std::isfinite(ratio))
                throw PolicyCollapseError("non-finite importance ratio; policy collapsed");

            double objective = ratio * advantage;
            bool clipped_active = false;
            if (clip_epsilon > 0.0) {
                const double clipped =
                    std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage;
                if (clipped < objective) {
                    objective = clipped;
                    clipped_active = true;  // constant in theta: no gradient flows
                }
            }
            result.loss -= inv_count * objective;

            if (clipped_active) continue;
            const double coeff = -inv_count * ratio * advantage;
            for (const Decision& d : traj.decisions) {
                Eigen::MatrixXd& grad =
                    d.answer_head ? result.gradient.answer : result.gradient.selection;
                const Eigen::MatrixXd& m = d.answer_head ? policy.answer : policy.selection;
                const Eigen::VectorXd probs =
                    log_softmax(m.row(d.bucket).transpose()).array().exp();
                grad.row(d.bucket) -= coeff * probs.transpose();
                grad(d.bucket, d.action) += coeff;
            }
        }
    }
    return result;
}

DivergenceDetector::DivergenceDetector(int window, int patience)
    : window_(window), patience_(patience) {}

bool DivergenceDetector::observe(double total_mean) {
    recent_.push_back(total_mean);
    if (recent_.size() < static_cast<std::size_t>(window_)) return false;
    if (recent_.size() > static_cast<std::size_t>(window_)) recent_.erase(recent_.begin());
    const double mean = mean_of(recent_);
    if (!has_initial_) {
        has_initial_ = true;
        initial_ = mean;
        return false;
    }
    consecutive_below_ = mean < initial_ ? consecutive_below_ + 1 : 0;
    return consecutive_below_ >= patience_;
}

namespace {

bool trajectory_abstained(const Trajectory& traj) {
    const ParseOutcome outcome = parse(traj.rendered);
    return outcome.ok() && is_abstention(outcome.output());
}

bool trajectory_selects_evidence(const Trajectory& traj, const SimInstance& inst) {
    if (traj.picks.empty()) return false;
    double sum = 0.0;
    for (int pick : traj.picks)
        sum += max_overlap(inst.candidates[static_cast<std::size_t>(pick)],
                           inst.partition.evidence);
    return sum / static_cast<double>(traj.picks.size()) >= 0.5;
}

}  // namespace

TrainingResult train(const SimConfig& cfg, const RewardConfig& reward_cfg) {
    cfg.validate();
    reward_cfg.validate();

    const SimEnvironment env(cfg);
    TrainingResult result;
    result.policy = PolicyParams::zeros(env.num_buckets(), cfg.num_candidates);

    constexpr VariantTag kVariants[] = {VariantTag::pos, VariantTag::cf, VariantTag::rand};
    DivergenceDetector detector(cfg.divergence_window, cfg.divergence_patience);

    for (int it = 0; it < cfg.iterations; ++it) {
        std::vector<TrajectoryGroup> groups;
        groups.reserve(3);
        for (int v = 0; v < 3; ++v) {
            const std::uint64_t inst_seed =
                mix_seed(cfg.seed, mix_seed(static_cast<std::uint64_t>(it), 0x100u + v));
            const SimInstance inst = env.make_instance(kVariants[v], inst_seed);
            groups.push_back(make_group(result.policy, env, inst, reward_cfg, cfg.group_size,
                                        mix_seed(inst_seed, 0xabcdu)));
        }

        const ObjectiveResult step = grpo_objective(groups, result.policy, cfg.clip_epsilon);
        PolicyParams update = step.gradient;
        update *= -cfg.learning_rate;  // descend the loss = ascend the objective
        result.policy += update;

        IterationStats stats;
        stats.iteration = it;
        std::vector<double> r_ans, r_fmt, r_sel, total;
        for (const TrajectoryGroup& group : groups)
            for (const Trajectory& traj : group.trajectories) {
                r_ans.push_back(traj.reward.r_ans);
                r_fmt.push_back(traj.reward.r_fmt);
                r_sel.push_back(traj.reward.r_sel);
                total.push_back(traj.reward.total);
            }
        stats.r_ans_mean = mean_of(r_ans);
        stats.r_ans_std = std_of(r_ans, stats.r_ans_mean);
        stats.r_fmt_mean = mean_of(r_fmt);
        stats.r_fmt_std = std_of(r_fmt, stats.r_fmt_mean);
        stats.r_sel_mean = mean_of(r_sel);
        stats.r_sel_std = std_of(r_sel, stats.r_sel_mean);
        stats.total_mean = mean_of(total);
        stats.total_std = std_of(total, stats.total_mean);
        result.log.push_back(stats);

        if (detector.observe(stats.total_mean))
            throw TrainingDivergedError(
                "windowed total reward stayed below its initial level for " +
                std::to_string(cfg.divergence_patience) + " consecutive windows");
    }

    // Behavior rates under the trained policy, fresh instances.
    for (int v = 0; v < 3; ++v) {
        const VariantTag variant = kVariants[v];
        int abstained = 0;
        int selected = 0;
        for (int k = 0; k < cfg.eval_rollouts; ++k) {
            const std::uint64_t eval_seed =
                mix_seed(cfg.seed, mix_seed(0xe7a1u + v, static_cast<std::uint64_t>(k)));
            const SimInstance inst = env.make_instance(variant, eval_seed);
            const Trajectory traj =
                rollout(result.policy, env, inst, reward_cfg, mix_seed(eval_seed, 0x7777u));
            if (trajectory_abstained(traj)) ++abstained;
            if (trajectory_selects_evidence(traj, inst)) ++selected;
        }
        const double n = static_cast<double>(cfg.eval_rollouts);
        if (variant == VariantTag::pos) {
            result.evidence_selection_rate_pos = selected / n;
        } else if (variant == VariantTag::cf) {
            result.abstention_rate_cf = abstained / n;
        } else {
            result.evidence_selection_rate_rand = selected / n;
            result.abstention_rate_rand = abstained / n;
        }
    }
    return result;
}

void write_training_csv(const TrainingResult& result, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write: " + path.string());
    out << "iteration,r_ans_mean,r_ans_std,r_fmt_mean,r_fmt_std,"
           "r_sel_mean,r_sel_std,total_mean,total_std\n";
    char buf[256];
    for (const IterationStats& s : result.log) {
        std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                      s.iteration, s.r_ans_mean, s.r_ans_std, s.r_fmt_mean, s.r_fmt_std,
                      s.r_sel_mean, s.r_sel_std, s.total_mean, s.total_std);
        out << buf;
    }
    if (!out) throw std::runtime_error("short write: " + path.string());
}

void write_policy_snapshot(const TrainingResult& result, const SimConfig& cfg,
                           const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["config"] = {{"num_candidates", cfg.num_candidates},
                   {"num_evidence", cfg.num_evidence},
                   {"group_size", cfg.group_size},
                   {"step_cap", cfg.step_cap},
                   {"iterations", cfg.iterations},
                   {"learning_rate", cfg.learning_rate},
                   {"clip_epsilon", cfg.clip_epsilon},
                   {"seed", cfg.seed}};
    j["metrics"] = {{"evidence_selection_rate_pos", result.evidence_selection_rate_pos},
                    {"evidence_selection_rate_rand", result.evidence_selection_rate_rand},
                    {"abstention_rate_cf", result.abstention_rate_cf},
                    {"abstention_rate_rand", result.abstention_rate_rand}};
    auto matrix_json = [](const Eigen::MatrixXd& m) {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            nlohmann::ordered_json row = nlohmann::ordered_json::array();
            for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
            rows.push_back(std::move(row));
        }
        return rows;
    };
    j["selection_logits"] = matrix_json(result.policy.selection);
    j["answer_logits"] = matrix_json(result.policy.answer);

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write: " + path.string());
    out << j.dump(2) << '\n';
}

std::vector<double> windowed_means(std::span<const double> series, std::size_t window) {
    std::vector<double> means;
    if (window == 0) return means;
    for (std::size_t start = 0; start + window <= series.size(); start += window)
        means.push_back(mean_of(series.subspan(start, window)));
    return means;
}

}  // namespace defacto
