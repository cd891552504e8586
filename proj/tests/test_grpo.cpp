#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "defacto/grpo.hpp"
#include "defacto/hash.hpp"
#include "defacto/output_schema.hpp"
#include "defacto/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

using namespace defacto;

namespace {

SimConfig small_config() {
    SimConfig cfg;
    cfg.num_candidates = 3;
    cfg.num_evidence = 1;
    cfg.step_cap = 2;
    cfg.group_size = 4;
    cfg.iterations = 10;
    cfg.eval_rollouts = 20;
    cfg.seed = 11;
    return cfg;
}

PolicyParams random_policy(int buckets, int num_candidates, Rng& rng) {
    PolicyParams p = PolicyParams::zeros(buckets, num_candidates);
    for (Eigen::Index r = 0; r < p.selection.rows(); ++r)
        for (Eigen::Index c = 0; c < p.selection.cols(); ++c)
            p.selection(r, c) = 2.0 * rng.uniform() - 1.0;
    for (Eigen::Index r = 0; r < p.answer.rows(); ++r)
        for (Eigen::Index c = 0; c < p.answer.cols(); ++c)
            p.answer(r, c) = 2.0 * rng.uniform() - 1.0;
    return p;
}

// One-hot-ish logits forcing the given action sequence.
void force_row(Eigen::MatrixXd& m, int row, int action) {
    m.row(row).setConstant(-50.0);
    m(row, action) = 50.0;
}

double loss_at(const PolicyParams& policy, std::span<const TrajectoryGroup> groups) {
    return grpo_objective(groups, policy).loss;
}

}  // namespace

TEST_CASE("group advantages subtract the group mean") {
    const std::vector<double> rewards{1.0, 0.0, 0.5, 0.5};
    const std::vector<double> advantages = group_advantages(rewards);
    CHECK(advantages == std::vector<double>{0.5, -0.5, 0.0, 0.0});

    CHECK(group_advantages(std::vector<double>{0.75, 0.75, 0.75}) ==
          std::vector<double>{0.0, 0.0, 0.0});

    const std::vector<double> pair = group_advantages(std::vector<double>{3.0, 1.0});
    CHECK(pair[0] == (3.0 - 1.0) / 2.0);
    CHECK(pair[1] == (1.0 - 3.0) / 2.0);
}

TEST_CASE("advantages sum to zero on random groups") {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> rewards;
        const std::size_t m = 2 + rng.bounded(6);
        for (std::size_t i = 0; i < m; ++i) rewards.push_back(10.0 * rng.uniform() - 5.0);
        const std::vector<double> advantages = group_advantages(rewards);
        const double sum = std::accumulate(advantages.begin(), advantages.end(), 0.0);
        CHECK(std::abs(sum) <= 1e-9);
    }
}

TEST_CASE("forced-policy rollouts reproduce the composite reward values") {
    SimConfig cfg;
    cfg.seed = 3;
    const SimEnvironment env(cfg);
    const RewardConfig reward;

    // Evidence picks up to the step cap, then the gold answer, on a pos
    // instance: every pick is an evidence box.
    PolicyParams policy = PolicyParams::zeros(env.num_buckets(), cfg.num_candidates);
    const SimInstance pos = env.make_instance(VariantTag::pos, 77);
    const int first_evidence = env.evidence_index()[0];
    force_row(policy.selection, env.bucket(pos), first_evidence);
    force_row(policy.answer, env.bucket(pos), static_cast<int>(AnswerAction::gold));

    const Trajectory traj = rollout(policy, env, pos, reward, 123);
    REQUIRE(traj.picks == std::vector<int>(static_cast<std::size_t>(cfg.step_cap), first_evidence));
    CHECK(traj.reward.r_ans == 1.0);
    CHECK(traj.reward.r_fmt == 0.5);
    CHECK(traj.reward.r_sel == 1.0);
    CHECK(traj.reward.total == 2.25);

    // Immediate STOP plus unknown on a cf instance renders the canonical
    // abstention and scores 1.25.
    PolicyParams abstain = PolicyParams::zeros(env.num_buckets(), cfg.num_candidates);
    const SimInstance cf = env.make_instance(VariantTag::cf, 78);
    force_row(abstain.selection, env.bucket(cf), cfg.num_candidates);
    force_row(abstain.answer, env.bucket(cf), static_cast<int>(AnswerAction::unknown));
    const Trajectory cf_traj = rollout(abstain, env, cf, reward, 124);
    CHECK(cf_traj.picks.empty());
    const auto parsed = parse(cf_traj.rendered);
    REQUIRE(parsed.ok());
    CHECK(is_abstention(parsed.output()));
    CHECK(cf_traj.reward.total == 1.25);
}

TEST_CASE("rollouts are deterministic in the seed") {
    const SimConfig cfg = small_config();
    const SimEnvironment env(cfg);
    Rng rng(2);
    const PolicyParams policy = random_policy(env.num_buckets(), cfg.num_candidates, rng);
    const SimInstance inst = env.make_instance(VariantTag::rand, 9);

    const Trajectory a = rollout(policy, env, inst, RewardConfig{}, 55);
    const Trajectory b = rollout(policy, env, inst, RewardConfig{}, 55);
    CHECK(a.picks == b.picks);
    CHECK(a.answer_action == b.answer_action);
    CHECK(a.rendered == b.rendered);
    CHECK(a.logp_current == b.logp_current);
    CHECK(a.reward == b.reward);
}

TEST_CASE("observation classes never leak the variant directly") {
    const SimConfig cfg = small_config();
    const SimEnvironment env(cfg);
    const SimInstance pos = env.make_instance(VariantTag::pos, 1);
    const SimInstance cf = env.make_instance(VariantTag::cf, 1);
    const SimInstance rnd = env.make_instance(VariantTag::rand, 1);
    CHECK(env.observation_class(pos) == 0);
    CHECK(env.observation_class(cf) == 1);   // evidence not visible
    CHECK(env.observation_class(rnd) == 2);  // masks present, evidence visible

    // rand masks irrelevant candidates only.
    for (int idx : rnd.masked_index)
        CHECK(std::find(rnd.evidence_index.begin(), rnd.evidence_index.end(), idx) ==
              rnd.evidence_index.end());
}

TEST_CASE("objective is zero with synced policies and zero-sum advantages") {
    const SimConfig cfg = small_config();
    const SimEnvironment env(cfg);
    Rng rng(21);
    const PolicyParams policy = random_policy(env.num_buckets(), cfg.num_candidates, rng);

    std::vector<TrajectoryGroup> groups;
    groups.push_back(make_group(policy, env, env.make_instance(VariantTag::pos, 5), RewardConfig{},
                                cfg.group_size, 101));
    const ObjectiveResult result = grpo_objective(groups, policy);
    CHECK(result.loss == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("objective matches hand-computed ratios") {
    // Two trajectories with no recorded decisions: current log-prob is zero,
    // so ratios come from logp_old alone. advantages [1,-1], ratios [2,1].
    TrajectoryGroup group;
    Trajectory a;
    a.logp_old = -std::log(2.0);
    a.reward.total = 1.0;
    Trajectory b;
    b.logp_old = 0.0;
    b.reward.total = -1.0;
    group.trajectories = {a, b};
    group.advantages = group_advantages(std::vector<double>{1.0, -1.0});

    const PolicyParams policy = PolicyParams::zeros(3, 2);
    const std::vector<TrajectoryGroup> groups{group};
    const ObjectiveResult result = grpo_objective(groups, policy);
    CHECK(result.loss == doctest::Approx(-(2.0 * 1.0 + 1.0 * (-1.0)) / 2.0).epsilon(1e-12));
}

TEST_CASE("non-finite ratio halts with a policy-collapse error") {
    TrajectoryGroup group;
    Trajectory a;
    a.logp_old = -std::numeric_limits<double>::infinity();
    group.trajectories = {a, a};
    group.advantages = {0.5, -0.5};
    const PolicyParams policy = PolicyParams::zeros(3, 2);
    const std::vector<TrajectoryGroup> groups{group};
    CHECK_THROWS_AS(grpo_objective(groups, policy), PolicyCollapseError);
}

TEST_CASE("analytic gradient matches central finite differences") {
    Rng rng(97);
    for (int trial = 0; trial < 20; ++trial) {
        SimConfig cfg = small_config();
        cfg.seed = 1000 + static_cast<std::uint64_t>(trial);
        const SimEnvironment env(cfg);
        PolicyParams sampling = random_policy(env.num_buckets(), cfg.num_candidates, rng);

        std::vector<TrajectoryGroup> groups;
        for (int v = 0; v < 3; ++v) {
            const auto variant = static_cast<VariantTag>(v);
            groups.push_back(make_group(sampling, env,
                                        env.make_instance(variant, 40 + static_cast<std::uint64_t>(v)),
                                        RewardConfig{}, cfg.group_size,
                                        mix_seed(cfg.seed, static_cast<std::uint64_t>(v))));
        }

        // Evaluate the objective away from the sampling policy so ratios != 1.
        PolicyParams theta = sampling;
        theta.selection.array() += 0.05;
        theta.answer.array() -= 0.03;
        for (Eigen::Index r = 0; r < theta.selection.rows(); ++r)
            theta.selection(r, 0) += 0.1 * rng.uniform();

        const ObjectiveResult analytic = grpo_objective(groups, theta);
        const double eps = 1e-5;
        double worst_rel = 0.0;

        auto check_matrix = [&](Eigen::MatrixXd PolicyParams::*member) {
            Eigen::MatrixXd& m = theta.*member;
            const Eigen::MatrixXd& grad = analytic.gradient.*member;
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c) {
                    const double saved = m(r, c);
                    m(r, c) = saved + eps;
                    const double up = loss_at(theta, groups);
                    m(r, c) = saved - eps;
                    const double down = loss_at(theta, groups);
                    m(r, c) = saved;
                    const double numeric = (up - down) / (2.0 * eps);
                    const double denom = std::max({std::abs(numeric), std::abs(grad(r, c)), 1e-6});
                    worst_rel = std::max(worst_rel, std::abs(numeric - grad(r, c)) / denom);
                }
        };
        check_matrix(&PolicyParams::selection);
        check_matrix(&PolicyParams::answer);
        CHECK(worst_rel < 1e-4);
    }
}

TEST_CASE("adding a constant to group rewards changes nothing") {
    const SimConfig cfg = small_config();
    const SimEnvironment env(cfg);
    Rng rng(13);
    const PolicyParams policy = random_policy(env.num_buckets(), cfg.num_candidates, rng);

    TrajectoryGroup group = make_group(policy, env, env.make_instance(VariantTag::pos, 8),
                                       RewardConfig{}, cfg.group_size, 300);
    TrajectoryGroup shifted = group;
    std::vector<double> rewards;
    for (Trajectory& t : shifted.trajectories) {
        t.reward.total += 17.5;
        rewards.push_back(t.reward.total);
    }
    shifted.advantages = group_advantages(rewards);

    for (std::size_t i = 0; i < group.advantages.size(); ++i)
        CHECK(shifted.advantages[i] == doctest::Approx(group.advantages[i]).epsilon(1e-12));

    const std::vector<TrajectoryGroup> a{group};
    const std::vector<TrajectoryGroup> b{shifted};
    const ObjectiveResult ra = grpo_objective(a, policy);
    const ObjectiveResult rb = grpo_objective(b, policy);
    CHECK(ra.loss == doctest::Approx(rb.loss).epsilon(1e-12));
    CHECK((ra.gradient.selection - rb.gradient.selection).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((ra.gradient.answer - rb.gradient.answer).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("optional ratio clipping caps the surrogate") {
    TrajectoryGroup group;
    Trajectory a;
    a.logp_old = -std::log(2.0);  // ratio 2
    Trajectory b;
    b.logp_old = 0.0;  // ratio 1
    group.trajectories = {a, b};
    group.advantages = {1.0, -1.0};
    const PolicyParams policy = PolicyParams::zeros(3, 2);
    const std::vector<TrajectoryGroup> groups{group};

    const double unclipped = grpo_objective(groups, policy, 0.0).loss;
    const double clipped = grpo_objective(groups, policy, 0.2).loss;
    CHECK(unclipped == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(clipped == doctest::Approx(-(1.2 * 1.0 + 1.0 * (-1.0)) / 2.0).epsilon(1e-12));
}

TEST_CASE("divergence detector flags sustained decline") {
    DivergenceDetector detector(5, 3);
    bool fired = false;
    for (int i = 0; i < 5; ++i) fired |= detector.observe(1.0);  // initial window mean = 1
    CHECK_FALSE(fired);
    for (int i = 0; i < 10 && !fired; ++i) fired = detector.observe(-1.0);
    CHECK(fired);

    DivergenceDetector healthy(5, 3);
    bool bad = false;
    for (int i = 0; i < 40; ++i) bad |= healthy.observe(1.0 + 0.1 * i);
    CHECK_FALSE(bad);
}

TEST_CASE("windowed means drop the trailing partial window") {
    const std::vector<double> series{1, 1, 3, 3, 5, 5, 9};
    const std::vector<double> means = windowed_means(series, 2);
    CHECK(means == std::vector<double>{1.0, 3.0, 5.0});
}

TEST_CASE("short training runs are reproducible bit for bit") {
    SimConfig cfg = small_config();
    cfg.iterations = 25;
    const TrainingResult a = train(cfg, RewardConfig{});
    const TrainingResult b = train(cfg, RewardConfig{});
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].total_mean == b.log[i].total_mean);
        CHECK(a.log[i].r_sel_std == b.log[i].r_sel_std);
    }
    CHECK(a.policy.selection == b.policy.selection);
    CHECK(a.policy.answer == b.policy.answer);
    CHECK(a.evidence_selection_rate_pos == b.evidence_selection_rate_pos);

    SimConfig other = cfg;
    other.seed = cfg.seed + 1;
    const TrainingResult c = train(other, RewardConfig{});
    bool any_difference = c.policy.selection != a.policy.selection;
    CHECK(any_difference);
}

TEST_CASE("training artifacts: csv log and policy snapshot") {
    SimConfig cfg = small_config();
    cfg.iterations = 8;
    const TrainingResult result = train(cfg, RewardConfig{});

    const auto dir = std::filesystem::temp_directory_path() / "defacto_grpo_artifacts";
    std::filesystem::create_directories(dir);
    write_training_csv(result, dir / "log.csv");
    write_policy_snapshot(result, cfg, dir / "policy.json");

    std::ifstream csv(dir / "log.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header ==
          "iteration,r_ans_mean,r_ans_std,r_fmt_mean,r_fmt_std,r_sel_mean,r_sel_std,"
          "total_mean,total_std");
    int rows = 0;
    std::string line;
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 8);

    std::ifstream snap(dir / "policy.json");
    CHECK(snap.good());
}
