//! 2D Fourier tooling: centered log-amplitude spectra, relative log
//! amplitude (RLA) profiles across model layers, and frequency-band
//! noise perturbation.
//!
//! Conventions: the forward transform is unnormalized, the inverse
//! carries the 1/(H*W) factor. Normalized radial frequency uses the
//! per-axis Nyquist as 1.0, so the spectrum corner sits at sqrt(2).
//! RLA samples along the main diagonal, where the endpoint radius 1.0
//! lands exactly on the corner bin.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Tape, Tensor};

/// Amplitudes are floored before the log to keep zero bins finite.
pub const AMPLITUDE_FLOOR: f64 = 1e-12;

/// Unnormalized forward 2D FFT of a row-major real H x W image.
pub fn fft2(input: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let buf: Vec<Complex<f64>> = input.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2_complex(buf, h, w, false)
}

/// Inverse 2D FFT, normalized by 1/(H*W).
pub fn ifft2(freq: &[Complex<f64>], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut out = fft2_complex(freq.to_vec(), h, w, true);
    let scale = 1.0 / (h * w) as f64;
    for v in &mut out {
        *v *= scale;
    }
    out
}

fn fft2_complex(mut buf: Vec<Complex<f64>>, h: usize, w: usize, inverse: bool) -> Vec<Complex<f64>> {
    assert_eq!(buf.len(), h * w);
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
    buf
}

/// Centered log-magnitude spectrum: `log(|F(x)| + floor)` with the DC bin
/// moved to the image center.
pub fn fft2_logamp(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::Dim(format!(
            "fft2_logamp expects an [H, W] map, got {:?}",
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if h < 2 || w < 2 {
        return Err(Error::Dim(format!("spectrum needs H,W >= 2, got {h}x{w}")));
    }
    let freq = fft2(&x.data(), h, w);
    let mut out = vec![0.0; h * w];
    for (ui, row) in freq.chunks_exact(w).enumerate() {
        let ci = (ui + h / 2) % h;
        for (uj, v) in row.iter().enumerate() {
            let cj = (uj + w / 2) % w;
            out[ci * w + cj] = (v.norm() + AMPLITUDE_FLOOR).ln();
        }
    }
    Tensor::from_vec(&[h, w], out)
}

/// Normalized radial frequency of an unshifted bin (per-axis Nyquist = 1).
fn radial(ui: usize, uj: usize, h: usize, w: usize) -> f64 {
    let ky = signed_freq(ui, h) / (h as f64 / 2.0);
    let kx = signed_freq(uj, w) / (w as f64 / 2.0);
    (ky * ky + kx * kx).sqrt()
}

fn signed_freq(u: usize, n: usize) -> f64 {
    if u <= n / 2 {
        u as f64
    } else {
        u as f64 - n as f64
    }
}

/// Mean log amplitude over all bins with radial frequency >= `r_min`
/// (helper for low/high-band comparisons).
pub fn band_mean_logamp(x: &Tensor, r_min: f64) -> Result<f64> {
    if x.ndim() != 2 {
        return Err(Error::Dim(format!(
            "band_mean_logamp expects [H, W], got {:?}",
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let freq = fft2(&x.data(), h, w);
    let mut sum = 0.0;
    let mut count = 0usize;
    for ui in 0..h {
        for uj in 0..w {
            if radial(ui, uj, h, w) >= r_min {
                sum += (freq[ui * w + uj].norm() + AMPLITUDE_FLOOR).ln();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Dim(format!("no bins at radius >= {r_min}")));
    }
    Ok(sum / count as f64)
}

/// Per-radius mean log amplitude sampled along the spectrum diagonal,
/// plus the derived RLA scalar (endpoint difference).
#[derive(Clone, Debug)]
pub struct SpectrumProfile {
    /// Sampled normalized frequencies in [0, 1], units of pi.
    pub radii: Vec<f64>,
    /// Mean log amplitude at each radius (channel-averaged).
    pub log_amp: Vec<f64>,
    /// `log_amp(1.0 pi) - log_amp(0.0 pi)`; positive means high-frequency
    /// emphasis.
    pub rla: f64,
}

/// RLA profile of a `[C, H, W]` feature map (H == W required).
///
/// Per channel, the log spectrum is sampled at `k_radii` evenly spaced
/// radii along the main diagonal from center to corner, averaging the two
/// point-symmetric samples; channels are then averaged.
pub fn rla_profile(feature_map: &Tensor, k_radii: usize) -> Result<SpectrumProfile> {
    if feature_map.ndim() != 3 {
        return Err(Error::Dim(format!(
            "rla_profile expects [C, H, W], got {:?}",
            feature_map.shape()
        )));
    }
    let (c, h, w) = (
        feature_map.shape()[0],
        feature_map.shape()[1],
        feature_map.shape()[2],
    );
    if h != w {
        return Err(Error::Dim(format!(
            "rla_profile requires square maps, got {h}x{w}"
        )));
    }
    if k_radii < 2 {
        return Err(Error::Config("rla_profile needs at least 2 radii".into()));
    }
    let half = h / 2;
    let mut log_amp = vec![0.0; k_radii];
    let data = feature_map.data();
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        let freq = fft2(plane, h, w);
        for (ri, amp) in log_amp.iter_mut().enumerate() {
            let r = ri as f64 / (k_radii - 1) as f64;
            let k = (r * half as f64).round() as usize;
            // two point-symmetric diagonal samples in the unshifted frame
            // (equal magnitude for real inputs; averaged anyway)
            let (i1, j1) = ((h - k) % h, (w - k) % w);
            let (i2, j2) = (k % h, k % w);
            let a1 = (freq[i1 * w + j1].norm() + AMPLITUDE_FLOOR).ln();
            let a2 = (freq[i2 * w + j2].norm() + AMPLITUDE_FLOOR).ln();
            *amp += 0.5 * (a1 + a2);
        }
    }
    for amp in &mut log_amp {
        *amp /= c as f64;
    }
    let radii: Vec<f64> = (0..k_radii)
        .map(|i| i as f64 / (k_radii - 1) as f64)
        .collect();
    let rla = log_amp[k_radii - 1] - log_amp[0];
    Ok(SpectrumProfile {
        radii,
        log_amp,
        rla,
    })
}

/// Binary annular selector in the frequency plane.
///
/// The mask is 1 exactly where `|r - center| <= half_width` in normalized
/// radial frequency. It is symmetric under point reflection modulo the
/// grid, so masked spectra of real noise invert to real images.
#[derive(Clone, Debug)]
pub struct FreqMask {
    pub center: f64,
    pub half_width: f64,
    h: usize,
    w: usize,
    /// Unshifted-layout 0/1 grid.
    grid: Vec<f64>,
}

impl FreqMask {
    pub fn annulus(h: usize, w: usize, center: f64, half_width: f64) -> Result<FreqMask> {
        if !(0.0..=2.0).contains(&center) || half_width < 0.0 {
            return Err(Error::Config(format!(
                "invalid mask band: center {center}, half_width {half_width}"
            )));
        }
        let mut grid = vec![0.0; h * w];
        for ui in 0..h {
            for uj in 0..w {
                if (radial(ui, uj, h, w) - center).abs() <= half_width {
                    grid[ui * w + uj] = 1.0;
                }
            }
        }
        Ok(FreqMask {
            center,
            half_width,
            h,
            w,
            grid,
        })
    }

    /// All-pass mask (identity perturbation support).
    pub fn all_ones(h: usize, w: usize) -> FreqMask {
        FreqMask {
            center: 0.0,
            half_width: f64::INFINITY,
            h,
            w,
            grid: vec![1.0; h * w],
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

/// Frequency-band noise perturbation: `x_p = x_0 + f^-1(f(n) . M_f)` with
/// `n ~ N(0, sigma^2)` i.i.d. per pixel per channel. Deterministic given
/// the seed; the imaginary residue of the inverse transform is discarded.
pub fn perturb(x0: &Tensor, mask: &FreqMask, sigma: f64, seed: u64) -> Result<Tensor> {
    if x0.ndim() != 3 {
        return Err(Error::Dim(format!(
            "perturb expects [C, H, W], got {:?}",
            x0.shape()
        )));
    }
    if sigma < 0.0 {
        return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    let (c, h, w) = (x0.shape()[0], x0.shape()[1], x0.shape()[2]);
    if (h, w) != mask.dims() {
        return Err(Error::ShapeMismatch {
            left: vec![h, w],
            right: vec![mask.dims().0, mask.dims().1],
            context: "perturb mask vs image".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x0.to_vec();
    for ch in 0..c {
        let noise: Vec<f64> = (0..h * w)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * sigma
            })
            .collect();
        let mut freq = fft2(&noise, h, w);
        for (f, &m) in freq.iter_mut().zip(mask.grid()) {
            *f *= m;
        }
        let filtered = ifft2(&freq, h, w);
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (o, f) in plane.iter_mut().zip(&filtered) {
            *o += f.re;
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// One row of the layer-wise RLA table.
#[derive(Clone, Debug)]
pub struct RlaRow {
    pub layer: usize,
    pub tag: String,
    pub mean_rla: f64,
    pub std_rla: f64,
}

/// Mean RLA per tapped layer over an input batch.
///
/// Runs the model once on `inputs` (`[T, B, C, H, W]`), taps the feature
/// maps after the embedding and after every attention and MLP block,
/// time-averages each tap into per-sample `[D, h, w]` rate maps, and
/// reports mean and standard deviation of the RLA over the batch.
pub fn layer_rla_sweep(model: &Model, inputs: &Tensor, k_radii: usize) -> Result<Vec<RlaRow>> {
    if inputs.ndim() != 5 {
        return Err(Error::Dim(format!(
            "layer_rla_sweep expects [T,B,C,H,W] inputs, got {:?}",
            inputs.shape()
        )));
    }
    let batch = inputs.shape()[1];
    if batch == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let tape = Tape::inference();
    let mut taps = Vec::new();
    model.forward_with_taps(&tape, inputs, false, &mut taps)?;

    let mut rows = Vec::with_capacity(taps.len());
    for tap in &taps {
        let fm = &tap.feature; // [T, B, D, h, w]
        let (t, b, d, h, w) = (
            fm.shape()[0],
            fm.shape()[1],
            fm.shape()[2],
            fm.shape()[3],
            fm.shape()[4],
        );
        let data = fm.data();
        let mut rlas = Vec::with_capacity(b);
        for bi in 0..b {
            // time-averaged rate map for this sample
            let mut map = vec![0.0; d * h * w];
            for ti in 0..t {
                let base = (ti * b + bi) * d * h * w;
                for (m, &v) in map.iter_mut().zip(&data[base..base + d * h * w]) {
                    *m += v;
                }
            }
            let inv_t = 1.0 / t as f64;
            for m in &mut map {
                *m *= inv_t;
            }
            let profile = rla_profile(&Tensor::from_vec(&[d, h, w], map)?, k_radii)?;
            rlas.push(profile.rla);
        }
        let n = rlas.len() as f64;
        let mean = rlas.iter().sum::<f64>() / n;
        let var = rlas.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        rows.push(RlaRow {
            layer: tap.index,
            tag: tap.tag.clone(),
            mean_rla: mean,
            std_rla: var.sqrt(),
        });
    }
    Ok(rows)
}

/// [`layer_rla_sweep`] over a stream of input batches, aggregating exact
/// whole-set means and standard deviations. Bounds memory on large sets.
pub fn layer_rla_over_batches<I>(model: &Model, batches: I, k_radii: usize) -> Result<Vec<RlaRow>>
where
    I: IntoIterator<Item = Tensor>,
{
    let mut acc: Vec<(usize, String, f64, f64, usize)> = Vec::new();
    for batch in batches {
        let n = batch.shape()[1];
        let rows = layer_rla_sweep(model, &batch, k_radii)?;
        for (i, r) in rows.iter().enumerate() {
            if acc.len() <= i {
                acc.push((r.layer, r.tag.clone(), 0.0, 0.0, 0));
            }
            let nf = n as f64;
            acc[i].2 += r.mean_rla * nf;
            acc[i].3 += (r.std_rla * r.std_rla + r.mean_rla * r.mean_rla) * nf;
            acc[i].4 += n;
        }
    }
    if acc.is_empty() {
        return Err(Error::Data("no batches for RLA sweep".into()));
    }
    Ok(acc
        .into_iter()
        .map(|(layer, tag, sum, sum_sq, n)| {
            let mean = sum / n as f64;
            let var = (sum_sq / n as f64 - mean * mean).max(0.0);
            RlaRow {
                layer,
                tag,
                mean_rla: mean,
                std_rla: var.sqrt(),
            }
        })
        .collect())
}

/// Writes `layer_rla.csv` with columns (layer, tag, mean_rla, std_rla).
pub fn write_layer_rla_csv(path: &std::path::Path, rows: &[RlaRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "layer,tag,mean_rla,std_rla")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.layer, r.tag, r.mean_rla, r.std_rla)?;
    }
    Ok(())
}
