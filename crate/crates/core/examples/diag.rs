use ttas_core::experiment::ExperimentSpec;
use ttas_core::losses::TauSchedule;
use ttas_core::metrics::dice_coefficient;
use ttas_core::net::SegNet;
use ttas_core::synth::{generate_split, MaskVolume, PhantomParams};
use ttas_core::train::{Method, TrainConfig, Trainer};

fn test_dice(net: &SegNet, params: &ttas_core::net::ParameterSet, test: &[ttas_core::synth::Case]) -> f64 {
    let mut total = 0.0;
    for case in test {
        let probs = net.forward(params, &case.image.clone().into_batch()).unwrap();
        let pred = MaskVolume::from_probs(&probs, case.mask.spacing_mm).unwrap();
        total += dice_coefficient(&pred, &case.mask).unwrap();
    }
    total / test.len() as f64
}

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let method = Method::parse(&a[1]).unwrap();
    let epochs: usize = a.get(2).map(|s| s.parse().unwrap()).unwrap_or(60);
    let noise: f64 = a.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.25);
    let gamma: f64 = a.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.9);
    let tau: f64 = a.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.7);

    let spec = ExperimentSpec::default();
    let phantom = PhantomParams { noise_sigma: noise, seed: 1234, ..spec.dataset.phantom };
    let split = generate_split(&phantom, 10, 90, 30).unwrap();
    let labeled: Vec<_> = split.labeled.iter().map(|c| c.to_labeled_example()).collect();
    let unlabeled: Vec<_> = split.unlabeled.iter().map(|c| c.image.clone()).collect();

    let cfg = TrainConfig {
        method, gamma, epochs,
        tau_schedule: TauSchedule::Constant { tau },
        seed: 99,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(spec.arch.clone(), cfg).unwrap();
    let net = SegNet::new(spec.arch.clone()).unwrap();
    println!("epoch teacher_test student_test assist_test kept skip labloss ulloss");
    for e in 0..epochs {
        trainer.run_epoch(&labeled, &unlabeled).unwrap();
        if e % 5 == 4 || e < 6 || e == epochs - 1 {
            let r = trainer.state.history.last().unwrap().clone();
            let td = test_dice(&net, &trainer.state.models.teacher, &split.test);
            let sd = test_dice(&net, &trainer.state.models.student, &split.test);
            let ad = test_dice(&net, &trainer.state.models.assistant, &split.test);
            println!("{e:>4} {td:.4} {sd:.4} {ad:.4}  {:.3} {} {:.4} {:?}", r.kept_fraction, r.skipped_batches, r.labeled_loss, r.unlabeled_loss.map(|x| (x*1e4).round()/1e4));
        }
    }
}
