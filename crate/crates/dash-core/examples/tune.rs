// Scratch harness for tuning the desk-scale spirals ablation.
use dash_core::data::gen_spirals;
use dash_core::metrics::{evaluate_ensemble, EvalOptions};
use dash_core::model::{Activation, Ensemble};
use dash_core::optimizer::{train, DescentLoss, GammaCMode, OptimizerKind, TrainConfig};

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key)
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let classes: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let noise: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let turns: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.4);
    let rho1: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let eta: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let epochs: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(50);
    let test_noise: f64 = env_f64("TEST_NOISE", 0.02);

    println!(
        "classes={classes} noise={noise} turns={turns} rho1={rho1} eta={eta} epochs={epochs} test_noise={test_noise}"
    );
    println!("variant,seed,acc,ld,d,avg_acc,congruence");
    let start = std::time::Instant::now();
    let mut rows: Vec<(String, u64, f64, f64)> = Vec::new();
    for seed in 0..5u64 {
        let n_train = 1000 / classes * classes;
        let train_set = gen_spirals(n_train, turns, noise, classes, seed).unwrap();
        let test_set =
            gen_spirals(500 / classes * classes, turns, test_noise, classes, 1000 + seed).unwrap();
        for (name, optimizer, rho, rho2, gamma, descent) in [
            ("sgd", OptimizerKind::Sgd, 0.0, 0.0, 0.0, DescentLoss::Plain),
            (
                "dash_f",
                OptimizerKind::DashTwoDirection,
                rho1,
                0.0,
                0.1,
                DescentLoss::Tilde,
            ),
            (
                "dash",
                OptimizerKind::DashTwoDirection,
                rho1,
                env_f64("RHO2", rho1),
                0.1,
                DescentLoss::Tilde,
            ),
        ] {
            // heterogeneous members, mirroring a mixed-architecture ensemble
            let sizes = vec![
                vec![2, 64, classes],
                vec![2, 32, classes],
                vec![2, 16, 16, classes],
            ];
            let act = if std::env::var("TANH").is_ok() { Activation::Tanh } else { Activation::Relu };
            let mut ens = Ensemble::init(&sizes, act, seed).unwrap();
            let cfg = TrainConfig {
                rho1: rho,
                rho2: Some(rho2),
                gamma,
                eta,
                weight_decay: env_f64("WD", 0.0005),
                epochs,
                seed,
                optimizer,
                descent_loss: descent,
                gamma_c_mode: GammaCMode::Adaptive,
                lr_decay_epoch: std::env::var("DECAY").ok().and_then(|s| s.parse().ok()),
                batch_size: env_f64("BS", 32.0) as usize,
                ..TrainConfig::default()
            };
            let report = train(&mut ens, &train_set, None, &cfg).unwrap();
            let m = evaluate_ensemble(&ens, &test_set, None, EvalOptions::default()).unwrap();
            println!(
                "{name},{seed},{:.4},{:.3},{:.4},{:.4},{:.4},train={:.4}",
                m.accuracy,
                m.log_det,
                m.disagreement,
                m.avg_member_accuracy,
                report.mean_congruence().unwrap_or(f64::NAN),
                report.epochs.last().unwrap().train_accuracy,
            );
            rows.push((name.to_string(), seed, m.accuracy, m.log_det));
        }
    }
    let get = |name: &str, seed: u64| rows.iter().find(|r| r.0 == name && r.1 == seed).unwrap();
    let mut chain1 = 0;
    let mut chain2 = 0;
    let mut ld_wins = 0;
    for seed in 0..5u64 {
        let sgd = get("sgd", seed);
        let dash_f = get("dash_f", seed);
        let dash = get("dash", seed);
        if dash.2 >= dash_f.2 {
            chain1 += 1;
        }
        if dash_f.2 >= sgd.2 {
            chain2 += 1;
        }
        if dash.3 > dash_f.3 {
            ld_wins += 1;
        }
    }
    println!("dash>=dash_f: {chain1}/5, dash_f>=sgd: {chain2}/5, LD(dash)>LD(dash_f): {ld_wins}/5");
    println!("elapsed: {:.1}s", start.elapsed().as_secs_f64());
}
