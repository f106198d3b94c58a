use mivins_core::config::RunConfig;
use mivins_core::runner::{aggregate, run_monte_carlo};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let imus: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cams: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let runs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let fej: bool = args.get(4).map(|s| s == "fej").unwrap_or(true);
    let mut cfg = RunConfig::default();
    cfg.scenario.duration = 60.0;
    cfg.scenario.imus = imus;
    cfg.scenario.cams = cams;
    cfg.estimator.fej = fej;
    cfg.seed = 100;
    if let Ok(mult) = std::env::var("NOISE_MULT") {
        let m: f64 = mult.parse().unwrap();
        cfg.scenario.imu_noise.sigma_g *= m;
        cfg.scenario.imu_noise.sigma_wg *= m;
        cfg.scenario.imu_noise.sigma_a *= m;
        cfg.scenario.imu_noise.sigma_wa *= m;
    }
    if let Ok(d) = std::env::var("DURATION") {
        cfg.scenario.duration = d.parse().unwrap();
    }
    if let Ok(s) = std::env::var("SCALE") {
        cfg.scenario.scale = s.parse().unwrap();
    }
    let t0 = std::time::Instant::now();
    let results = run_monte_carlo(&cfg, runs);
    let agg = aggregate(&results);
    println!(
        "imus={} cams={} fej={} runs={} aborted={} ate_deg={:.3} ate_m={:.3} (std {:.3}) nees={:.2} cov_min={:.3} [{:.1}s]",
        imus, cams, fej, runs, agg.aborted, agg.ate_deg_mean, agg.ate_m_mean, agg.ate_m_std,
        agg.nees_mean, agg.coverage_min, t0.elapsed().as_secs_f64()
    );
    for r in &agg.reports {
        println!("  seed={} ate={:.3}deg/{:.3}m nees={:.1} cov={:?} pairs={}",
            r.seed, r.ate_deg, r.ate_m, r.nees_mean,
            r.coverage.map(|c| (c*100.0).round()/100.0), r.matched_pairs);
    }
}
