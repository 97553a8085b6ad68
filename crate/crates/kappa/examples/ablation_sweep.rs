//! Runs the three-arm ablation over several seeds and prints one line per seed.
//!
//! ```text
//! cargo run --release -p kappa --example ablation_sweep -- [config.toml] [seeds]
//! ```

use kappa::{ablation_suite, generate_dataset, Arm, RunConfig, WorldConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first() {
        Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p).expect("config readable")).expect("config parses"),
        None => RunConfig::default(),
    };
    let seeds: Vec<u64> = args
        .get(1)
        .map(|s| s.split(',').map(|x| x.parse().expect("seed")).collect())
        .unwrap_or_else(|| vec![1, 2, 3]);
    let policy = cfg.policy();
    let mut all = 0;
    for &s in &seeds {
        let train = generate_dataset(&WorldConfig { n_cases: 1000, ..cfg.world.clone() }, s).unwrap();
        let eval = generate_dataset(&WorldConfig { n_cases: 200, ..cfg.world.clone() }, 10_000 + s).unwrap();
        let tcfg = kappa::TrainConfig { seed: s, ..cfg.train.clone() };
        let ecfg = kappa::EvalConfig { seed: s, ..cfg.eval.clone() };
        let rep = ablation_suite(&train, &eval, &policy, &cfg.reward, &cfg.init, &tcfg, &ecfg).unwrap();
        let checks = rep.checks(0.10, 0.02);
        let ok = checks[..3].iter().all(|c| c.passed);
        all += usize::from(ok);
        let r = |a: Arm| rep.arm(a).report.clone();
        let (n, a, u) = (r(Arm::NoRl), r(Arm::AccuracyOnly), r(Arm::Uncertainty));
        println!(
            "seed {s:>4}  gap {:.3}/{:.3}/{:.3}  ece {:.3}/{:.3}/{:.3}  align {:.3}/{:.3}/{:.3}  acc {:.3}/{:.3}/{:.3}  {}",
            n.entropy_gap.unwrap_or(f64::NAN), a.entropy_gap.unwrap_or(f64::NAN), u.entropy_gap.unwrap_or(f64::NAN),
            n.ece, a.ece, u.ece, n.align, a.align, u.align,
            n.acc.unwrap_or(f64::NAN), a.acc.unwrap_or(f64::NAN), u.acc.unwrap_or(f64::NAN),
            checks.iter().map(|c| if c.passed { '+' } else { '-' }).collect::<String>(),
        );
    }
    println!("a-c pass on {all}/{} seeds", seeds.len());
}
