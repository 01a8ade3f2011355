use std::time::Instant;
use ttas_core::net::NetworkArchitecture;
use ttas_core::synth::{generate_split, PhantomParams};
use ttas_core::train::{Method, TrainConfig, Trainer};

fn main() {
    let split = generate_split(&PhantomParams::default(), 10, 90, 30).unwrap();
    let labeled: Vec<_> = split.labeled.iter().map(|c| c.to_labeled_example()).collect();
    let unlabeled: Vec<_> = split.unlabeled.iter().map(|c| c.image.clone()).collect();
    for method in [Method::Ttas, Method::Ts, Method::Supervised] {
        let cfg = TrainConfig { method, epochs: 3, seed: 1, ..TrainConfig::default() };
        let mut trainer = Trainer::new(NetworkArchitecture::default(), cfg).unwrap();
        let t0 = Instant::now();
        trainer.train(&labeled, &unlabeled).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!("{method}: {:.2}s for 3 epochs -> {:.2}s/epoch; est 60 epochs = {:.0}s", dt, dt / 3.0, dt / 3.0 * 60.0);
    }
}
