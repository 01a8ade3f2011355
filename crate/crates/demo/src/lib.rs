//! Browser demo of the effusion-phantom segmentation lab.
//!
//! Three interactive surfaces, exported through wasm-bindgen:
//! explore the synthetic phantom generator, watch pseudo-label thresholding
//! select voxels, and train the three methods live while the Dice curve
//! updates.

mod render;

use wasm_bindgen::prelude::*;

use ttas_core::losses::{make_pseudo_labels, PseudoMode, TauSchedule};
use ttas_core::net::NetworkArchitecture;
use ttas_core::synth::{generate_split, Case, PhantomParams, SplitSet};
use ttas_core::tensor::Tensor;
use ttas_core::train::{LabeledExample, Method, TrainConfig, Trainer};

const DEMO_SIDE: usize = 32;
const N_LABELED: usize = 6;
const N_UNLABELED: usize = 20;
const N_TEST: usize = 6;

fn demo_params(seed: u64, noise_sigma: f64) -> PhantomParams {
    PhantomParams {
        image_size: (DEMO_SIDE, DEMO_SIDE),
        effusion_area_range: (0.04, 0.18),
        noise_sigma,
        seed,
        ..PhantomParams::default()
    }
}

fn case_rgba(case: &Case, show_mask: bool) -> Vec<u8> {
    let mut rgba = render::grayscale_rgba(case.image.values(), 0.0, 1.0);
    if show_mask {
        let mask: Vec<bool> = case.mask.voxels().iter().map(|v| *v != 0).collect();
        render::outline_mask(&mut rgba, &mask, DEMO_SIDE, [255, 64, 64]);
    }
    rgba
}

/// Pixel side length of every demo image.
#[wasm_bindgen]
pub fn image_side() -> u32 {
    DEMO_SIDE as u32
}

/// Render one phantom case as RGBA bytes, optionally with the reference
/// mask outlined.
#[wasm_bindgen]
pub fn phantom_rgba(seed: u32, case_index: u32, noise_sigma: f64, show_mask: bool) -> Vec<u8> {
    let params = demo_params(u64::from(seed), noise_sigma);
    let case = ttas_core::synth::generate_case(&params, case_index as usize)
        .expect("demo params are valid");
    case_rgba(&case, show_mask)
}

/// Physical effusion volume of the case, in mL.
#[wasm_bindgen]
pub fn phantom_volume_ml(seed: u32, case_index: u32, noise_sigma: f64) -> f64 {
    let params = demo_params(u64::from(seed), noise_sigma);
    ttas_core::synth::generate_case(&params, case_index as usize)
        .expect("demo params are valid")
        .true_volume_ml
}

/// A small live training session over a fixed phantom split.
#[wasm_bindgen]
pub struct DemoLab {
    trainer: Trainer,
    labeled: Vec<LabeledExample>,
    unlabeled: Vec<Tensor>,
    split: SplitSet,
}

#[wasm_bindgen]
impl DemoLab {
    /// Start a session. `method` is ttas, ts or supervised.
    #[wasm_bindgen(constructor)]
    pub fn new(method: &str, seed: u32, alpha: f64, gamma: f64, tau: f64) -> DemoLab {
        let method = Method::parse(method).expect("method is ttas, ts or supervised");
        let split = generate_split(
            &demo_params(u64::from(seed), 0.1),
            N_LABELED,
            N_UNLABELED,
            N_TEST,
        )
        .expect("demo params are valid");
        let labeled: Vec<LabeledExample> =
            split.labeled.iter().map(|c| c.to_labeled_example()).collect();
        let unlabeled: Vec<Tensor> = split.unlabeled.iter().map(|c| c.image.clone()).collect();
        let cfg = TrainConfig {
            method,
            alpha,
            gamma,
            tau_schedule: TauSchedule::Constant { tau },
            epochs: usize::MAX / 2,
            seed: u64::from(seed),
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(NetworkArchitecture::default(), cfg).expect("valid config");
        DemoLab {
            trainer,
            labeled,
            unlabeled,
            split,
        }
    }

    /// Run one epoch; returns
    /// `[epoch, labeled_loss, unlabeled_loss (-1 when absent), kept_fraction, labeled_dice, test_dice]`.
    pub fn run_epoch(&mut self) -> Vec<f64> {
        let record = self
            .trainer
            .run_epoch(&self.labeled, &self.unlabeled)
            .expect("demo data is consistent")
            .clone();
        vec![
            record.epoch as f64,
            record.labeled_loss,
            record.unlabeled_loss.unwrap_or(-1.0),
            record.kept_fraction,
            record.val_dice,
            self.test_dice(),
        ]
    }

    pub fn epoch(&self) -> u32 {
        self.trainer.state.epoch as u32
    }

    pub fn n_test(&self) -> u32 {
        self.split.test.len() as u32
    }

    /// Mean Dice of the inference model over the held-out test cases.
    pub fn test_dice(&self) -> f64 {
        let mut total = 0.0;
        for case in &self.split.test {
            let probs = self
                .trainer
                .predict(&case.image.clone().into_batch())
                .expect("shapes fixed");
            let pred = ttas_core::synth::MaskVolume::from_probs(&probs, case.mask.spacing_mm)
                .expect("single case");
            total +=
                ttas_core::metrics::dice_coefficient(&pred, &case.mask).expect("same dims");
        }
        total / self.split.test.len() as f64
    }

    /// Render the inference model's probabilities for a test case, with the
    /// reference mask outlined.
    pub fn prediction_rgba(&self, test_index: u32) -> Vec<u8> {
        let case = &self.split.test[test_index as usize % self.split.test.len()];
        let probs = self
            .trainer
            .predict(&case.image.clone().into_batch())
            .expect("shapes fixed");
        let mut rgba = render::grayscale_rgba(probs.values(), 0.0, 1.0);
        let mask: Vec<bool> = case.mask.voxels().iter().map(|v| *v != 0).collect();
        render::outline_mask(&mut rgba, &mask, DEMO_SIDE, [255, 64, 64]);
        rgba
    }

    /// Render a test-case image for side-by-side display.
    pub fn test_image_rgba(&self, test_index: u32, show_mask: bool) -> Vec<u8> {
        let case = &self.split.test[test_index as usize % self.split.test.len()];
        case_rgba(case, show_mask)
    }

    /// Visualize thresholding of the current teacher's predictions on an
    /// unlabeled case: kept foreground voxels in red, kept background in
    /// blue, dropped voxels untouched.
    pub fn threshold_rgba(&self, unlabeled_index: u32, tau: f64, two_sided: bool) -> Vec<u8> {
        let image = &self.unlabeled[unlabeled_index as usize % self.unlabeled.len()];
        let probs = self
            .trainer
            .predict(&image.clone().into_batch())
            .expect("shapes fixed");
        let mode = if two_sided {
            PseudoMode::TwoSided
        } else {
            PseudoMode::ForegroundOnly
        };
        let batch = make_pseudo_labels(&probs, tau.clamp(0.01, 0.99), mode).expect("tau in range");
        let mut rgba = render::grayscale_rgba(image.values(), 0.0, 1.0);
        let kept_fg: Vec<bool> = batch
            .keep_mask
            .iter()
            .zip(probs.values())
            .map(|(k, p)| *k && *p > 0.5)
            .collect();
        let kept_bg: Vec<bool> = batch
            .keep_mask
            .iter()
            .zip(probs.values())
            .map(|(k, p)| *k && *p <= 0.5)
            .collect();
        render::tint_mask(&mut rgba, &kept_fg, [255, 60, 60], 0.45);
        render::tint_mask(&mut rgba, &kept_bg, [60, 90, 255], 0.35);
        rgba
    }

    /// Fraction of voxels the threshold keeps on an unlabeled case.
    pub fn kept_fraction(&self, unlabeled_index: u32, tau: f64, two_sided: bool) -> f64 {
        let image = &self.unlabeled[unlabeled_index as usize % self.unlabeled.len()];
        let probs = self
            .trainer
            .predict(&image.clone().into_batch())
            .expect("shapes fixed");
        let mode = if two_sided {
            PseudoMode::TwoSided
        } else {
            PseudoMode::ForegroundOnly
        };
        make_pseudo_labels(&probs, tau.clamp(0.01, 0.99), mode)
            .expect("tau in range")
            .kept_fraction()
    }
}
