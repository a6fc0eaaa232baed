//! Shared oracles for the integration suites. These stay independent of
//! the implementation paths they check.
#![allow(dead_code)]

pub mod gradsuite;

use spikepool_core::events::{gen_synthetic, ClassSpec, SynthConfig};
use spikepool_core::spectral::Complex64;
use spikepool_core::train::Dataset;

/// Direct O(N^2) 2D DFT, the slow reference for the FFT path.
pub fn naive_dft2(input: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for ku in 0..h {
        for kv in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * (ku as f64 * y as f64 / h as f64 + kv as f64 * x as f64 / w as f64);
                    acc += input[y * w + x] * Complex64::new(phase.cos(), phase.sin());
                }
            }
            out[ku * w + kv] = acc;
        }
    }
    out
}

/// Independent scalar LIF simulator: leak, integrate, fire (strict >),
/// hard reset. Returns (spikes, post-reset membranes) per step.
pub fn scalar_lif_trace(tau: f64, v_th: f64, inputs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut membrane = 0.0;
    let mut spikes = Vec::with_capacity(inputs.len());
    let mut membranes = Vec::with_capacity(inputs.len());
    for &i in inputs {
        let u = tau * membrane + i;
        let s = if u > v_th { 1.0 } else { 0.0 };
        membrane = u * (1.0 - s);
        spikes.push(s);
        membranes.push(membrane);
    }
    (spikes, membranes)
}

/// The acceptance toy task: four-direction moving bars, clean (rho = 0),
/// voxelized to T=4 binarized grids.
pub fn bars4_datasets(n_train: usize, n_test: usize, seed: u64) -> (Dataset, Dataset) {
    let mut cfg = SynthConfig::new(ClassSpec::Bars4);
    cfg.noise_bins = 4;
    let train = gen_synthetic(&cfg, n_train, seed).unwrap();
    // disjoint deterministic stream for the test split
    let test = gen_synthetic(&cfg, n_test, seed.wrapping_add(0x9E3779B9)).unwrap();
    (
        Dataset::from_streams(&train, 4, true).unwrap(),
        Dataset::from_streams(&test, 4, true).unwrap(),
    )
}
