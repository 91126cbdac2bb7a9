use preflab_core::algorithms::{
    unified_train, AlgorithmKind, AlgorithmSpec, DataSource, GoldReward, OfflineData,
    RewardSource, TrainerConfig,
};
use preflab_core::bandit::{
    build_offline_preference_dataset, sample_prompts, sample_reference_pool, BanditProblem,
    Pairing, RewardKind,
};
use preflab_core::policy::TabularPolicy;
use preflab_core::rng::{derive_seed, salts};

fn problem(reward: RewardKind) -> (BanditProblem, Vec<usize>) {
    let p = BanditProblem::standard(reward, 0).unwrap();
    let prompts = sample_prompts(100, 10, derive_seed(0, salts::PROMPTS)).unwrap();
    (p, prompts)
}

fn steps_to(rows: &[preflab_core::algorithms::MetricsRow], final_r: f64, thr: f64, total: usize) -> Option<usize> {
    rows.iter().find(|r| r.expected_gold_reward >= thr).map(|r| r.step).or(if final_r >= thr {
        Some(total)
    } else {
        None
    })
}

#[test]
#[ignore]
fn tune_fig3() {
    for reward in [RewardKind::R1, RewardKind::R2] {
        let (problem, prompts) = problem(reward.clone());
        let gold = GoldReward::new(&problem);
        for lr in [0.3, 0.1, 0.03] {
            for b in [100usize, 400] {
                let mut line = format!("{:?} lr={lr} B={b}:", reward);
                for seed in 0..5u64 {
                    let policy = TabularPolicy::init_from_reference(&problem, &prompts).unwrap();
                    let config = TrainerConfig {
                        total_samples: b,
                        responses_per_prompt: 10,
                        inner_passes: 1,
                        minibatch_size: 100,
                        lr,
                        outer_iterations: 400 / (b / 100),
                        seed,
                        data_source: DataSource::OnPolicy,
                        reward_source: RewardSource::Gold,
                    };
                    let spec = AlgorithmSpec::online(AlgorithmKind::BestOfN);
                    let out = unified_train(&spec, &config, &problem, policy, &gold, None).unwrap();
                    let total = out.trace.rows.len();
                    let final_r = preflab_core::algorithms::expected_reward(
                        &out.policy,
                        problem.token_rewards(),
                    );
                    let s = steps_to(&out.trace.rows, final_r, 0.9, total);
                    line += &format!(" s{seed}={:?}(f={final_r:.3})", s);
                }
                println!("{line}");
            }
        }
    }
}

#[test]
#[ignore]
fn tune_fig7() {
    let (problem, prompts) = problem(RewardKind::R1);
    let gold = GoldReward::new(&problem);
    for lr in [0.1, 0.03, 0.01] {
        for kind in [
            AlgorithmKind::BestOfN,
            AlgorithmKind::BestOfNNeg,
            AlgorithmKind::Ipo,
            AlgorithmKind::Rwr,
        ] {
            let mut finals = Vec::new();
            for seed in 0..5u64 {
                let ds_seed = derive_seed(seed, salts::DATASET);
                let pool = sample_reference_pool(&problem, &prompts, 30, ds_seed).unwrap();
                let dataset = build_offline_preference_dataset(
                    &problem,
                    &prompts,
                    30,
                    Pairing::AllPairs,
                    ds_seed,
                )
                .unwrap();
                let offline = OfflineData::new(pool, &dataset);
                let policy = TabularPolicy::init_from_reference(&problem, &prompts).unwrap();
                let config = TrainerConfig {
                    total_samples: 100,
                    responses_per_prompt: 10,
                    inner_passes: 20,
                    minibatch_size: 100,
                    lr,
                    outer_iterations: 100,
                    seed,
                    data_source: DataSource::OfflineFixed,
                    reward_source: RewardSource::Gold,
                };
                let mut spec = AlgorithmSpec::offline(kind);
                spec.hyper.neg_floor = 1e-30;
                let out = unified_train(&spec, &config, &problem, policy, &gold, Some(&offline))
                    .unwrap();
                finals.push(preflab_core::algorithms::expected_reward(
                    &out.policy,
                    problem.token_rewards(),
                ));
            }
            let mean = finals.iter().sum::<f64>() / finals.len() as f64;
            let var = finals.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>()
                / (finals.len() - 1) as f64;
            let se = (var / finals.len() as f64).sqrt();
            println!("lr={lr} {:?}: mean={mean:.4} se={se:.4} finals={finals:?}", kind);
        }
        println!();
    }
}

#[test]
#[ignore]
fn tune_fig12() {
    for reward in [RewardKind::R1, RewardKind::R2] {
        let (problem, prompts) = problem(reward.clone());
        let gold = GoldReward::new(&problem);
        for lr in [0.1, 0.03] {
            for (label, kind, source) in [
                ("online-ipo", AlgorithmKind::Ipo, DataSource::OnPolicy),
                ("offline-ipo", AlgorithmKind::Ipo, DataSource::OfflineFixed),
                ("online-rwr", AlgorithmKind::Rwr, DataSource::OnPolicy),
            ] {
                let mut finals = Vec::new();
                for seed in 0..5u64 {
                    let ds_seed = derive_seed(seed, salts::DATASET);
                    let pool = sample_reference_pool(&problem, &prompts, 30, ds_seed).unwrap();
                    let dataset = build_offline_preference_dataset(
                        &problem,
                        &prompts,
                        30,
                        Pairing::AllPairs,
                        ds_seed,
                    )
                    .unwrap();
                    let offline = OfflineData::new(pool, &dataset);
                    let policy = TabularPolicy::init_from_reference(&problem, &prompts).unwrap();
                    let config = TrainerConfig {
                        total_samples: 100,
                        responses_per_prompt: 10,
                        inner_passes: 20,
                        minibatch_size: 100,
                        lr,
                        outer_iterations: 50,
                        seed,
                        data_source: source,
                        reward_source: RewardSource::Gold,
                    };
                    let online = source == DataSource::OnPolicy;
                    let spec = AlgorithmSpec::new(kind, online);
                    let out =
                        unified_train(&spec, &config, &problem, policy, &gold, Some(&offline))
                            .unwrap();
                    finals.push(preflab_core::algorithms::expected_reward(
                        &out.policy,
                        problem.token_rewards(),
                    ));
                }
                let mean = finals.iter().sum::<f64>() / finals.len() as f64;
                println!("{:?} lr={lr} {label}: mean={mean:.4} finals={finals:?}", reward);
            }
            println!();
        }
    }
}
