use ttas_core::experiment::{run_experiment, ExperimentSpec};
use ttas_core::losses::TauSchedule;
use ttas_core::train::Method;

fn main() {
    // args: seeds epochs noise gamma tau interleave(0/1) [methods]
    let a: Vec<String> = std::env::args().collect();
    let seeds: Vec<u64> = a.get(1).map(|s| s.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or(vec![1]);
    let epochs: usize = a.get(2).map(|s| s.parse().unwrap()).unwrap_or(60);
    let noise: f64 = a.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let gamma: f64 = a.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.9);
    let tau: f64 = a.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.7);
    let inter: bool = a.get(6).map(|s| s == "1").unwrap_or(false);
    let mut spec = ExperimentSpec::default();
    if let Some(ms) = a.get(7) {
        spec.methods = ms.split(',').map(|m| Method::parse(m).unwrap()).collect();
        spec.train.retain(|m, _| spec.methods.contains(m));
    }
    spec.seeds = seeds;
    spec.dataset.phantom.noise_sigma = noise;
    for cfg in spec.train.values_mut() {
        cfg.epochs = epochs; cfg.gamma = gamma; cfg.interleave = inter;
        cfg.tau_schedule = TauSchedule::Constant { tau };
    }
    let t0 = std::time::Instant::now();
    let report = run_experiment(&spec).unwrap();
    println!("epochs={epochs} noise={noise} gamma={gamma} tau={tau} interleave={inter} in {:.1}s", t0.elapsed().as_secs_f64());
    for m in spec.methods.iter() {
        let dice = report.mean_metric(*m, "dice").unwrap();
        let abvd = report.mean_metric(*m, "abvd_ml").unwrap();
        println!("{m:<11} dice {dice:.4}  abvd {abvd:.4}");
    }
    for pt in report.paired_tests() {
        if pt.metric == "dice" {
            println!("t-test {} vs {}: t={:.3} p={:.2e}", pt.method_a, pt.method_b, pt.t, pt.p);
        }
    }
}
