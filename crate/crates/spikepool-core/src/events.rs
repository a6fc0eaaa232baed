//! Event-stream ingestion: the bit-exact EVTS file format, synthetic
//! event datasets, voxelization into spike tensors, and light
//! augmentation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One DVS event: microsecond timestamp, pixel coordinates, polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub t_us: u32,
    pub x: u16,
    pub y: u16,
    /// 0 = negative, 1 = positive.
    pub polarity: u8,
}

/// Ordered event records plus sensor geometry and an optional label.
#[derive(Clone, Debug)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub label: Option<u32>,
    pub events: Vec<EventRecord>,
}

impl EventStream {
    pub fn validate(&self) -> Result<()> {
        let mut last_t = 0u32;
        for (i, e) in self.events.iter().enumerate() {
            if e.t_us < last_t {
                return Err(Error::Data(format!(
                    "event {i} timestamp {} precedes {}",
                    e.t_us, last_t
                )));
            }
            last_t = e.t_us;
            if e.x >= self.width || e.y >= self.height {
                return Err(Error::Data(format!(
                    "event {i} at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, self.width, self.height
                )));
            }
            if e.polarity > 1 {
                return Err(Error::Data(format!(
                    "event {i} polarity {} not in {{0, 1}}",
                    e.polarity
                )));
            }
        }
        Ok(())
    }
}

/// `[T, 2, H, W]` spike tensor; channel 0 = negative polarity, channel 1
/// = positive.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub tensor: Tensor,
    pub bin_width_us: u32,
}

impl VoxelGrid {
    pub fn time_bins(&self) -> usize {
        self.tensor.shape()[0]
    }
}

/// Discretizes a stream into `t_bins` fixed time windows.
///
/// `bin = floor((t - t0) / bin_width)` with `bin_width = ceil(duration /
/// t_bins)`; final-instant events clamp into the last bin. Counts
/// accumulate per (bin, polarity, y, x); `binarize` maps count > 0 to 1.
pub fn voxelize(s: &EventStream, t_bins: usize, binarize: bool) -> Result<VoxelGrid> {
    if t_bins == 0 {
        return Err(Error::Config("voxelize needs at least one time bin".into()));
    }
    s.validate()?;
    let (h, w) = (s.height as usize, s.width as usize);
    let mut data = vec![0.0; t_bins * 2 * h * w];
    let mut bin_width = 1u32;
    if !s.events.is_empty() {
        let t0 = s.events.first().unwrap().t_us;
        let t_last = s.events.last().unwrap().t_us;
        let duration = t_last - t0;
        bin_width = (duration.div_ceil(t_bins as u32)).max(1);
        for e in &s.events {
            let bin = (((e.t_us - t0) / bin_width) as usize).min(t_bins - 1);
            let idx = ((bin * 2 + e.polarity as usize) * h + e.y as usize) * w + e.x as usize;
            data[idx] += 1.0;
        }
    }
    if binarize {
        for v in &mut data {
            if *v > 0.0 {
                *v = 1.0;
            }
        }
    }
    Ok(VoxelGrid {
        tensor: Tensor::from_vec(&[t_bins, 2, h, w], data)?,
        bin_width_us: bin_width,
    })
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Built-in synthetic families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassSpec {
    /// Moving bar, four directions -> four classes
    /// (0 right, 1 left, 2 down, 3 up).
    Bars4,
    /// Moving dot along the main diagonal at `speeds` distinct speeds;
    /// class = speed index.
    Dots { speeds: usize },
}

impl ClassSpec {
    pub fn parse(s: &str) -> Result<ClassSpec> {
        if s == "bars4" {
            return Ok(ClassSpec::Bars4);
        }
        if let Some(rest) = s.strip_prefix("dots") {
            let speeds: usize = rest
                .parse()
                .map_err(|_| Error::Config(format!("invalid class spec '{s}'")))?;
            if !(2..=8).contains(&speeds) {
                return Err(Error::Config(format!(
                    "dots spec needs 2..=8 speed classes, got {speeds}"
                )));
            }
            return Ok(ClassSpec::Dots { speeds });
        }
        Err(Error::Config(format!(
            "unknown class spec '{s}' (expected 'bars4' or 'dots<k>')"
        )))
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ClassSpec::Bars4 => 4,
            ClassSpec::Dots { speeds } => *speeds,
        }
    }

    pub fn name(&self) -> String {
        match self {
            ClassSpec::Bars4 => "bars4".into(),
            ClassSpec::Dots { speeds } => format!("dots{speeds}"),
        }
    }
}

/// Generation parameters for the synthetic families.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub spec: ClassSpec,
    pub width: u16,
    pub height: u16,
    pub duration_us: u32,
    /// Background-noise rate in events per pixel per time bin.
    pub noise_rate: f64,
    /// Time bins assumed when scaling the background noise budget.
    pub noise_bins: usize,
}

impl SynthConfig {
    pub fn new(spec: ClassSpec) -> SynthConfig {
        SynthConfig {
            spec,
            width: 64,
            height: 64,
            duration_us: 100_000,
            noise_rate: 0.0,
            noise_bins: 16,
        }
    }
}

/// Deterministically generates `n_samples` labeled streams, class-balanced
/// round-robin. Bar/dot events carry positive polarity and stay within one
/// pixel of the analytic trajectory; background noise events are uniform
/// in space/time with random polarity.
pub fn gen_synthetic(cfg: &SynthConfig, n_samples: usize, seed: u64) -> Result<Vec<EventStream>> {
    if cfg.width < 8 || cfg.height < 8 {
        return Err(Error::Config("sensor must be at least 8x8".into()));
    }
    if cfg.noise_rate < 0.0 {
        return Err(Error::Config(format!(
            "noise rate must be >= 0, got {}",
            cfg.noise_rate
        )));
    }
    let classes = cfg.spec.num_classes();
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % classes;
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64),
        );
        let mut events = match cfg.spec {
            ClassSpec::Bars4 => gen_bar(cfg, class, &mut rng),
            ClassSpec::Dots { speeds } => gen_dot(cfg, class, speeds, &mut rng),
        };
        add_background_noise(cfg, &mut events, &mut rng);
        events.sort_by_key(|e| e.t_us);
        let stream = EventStream {
            width: cfg.width,
            height: cfg.height,
            label: Some(class as u32),
            events,
        };
        stream.validate()?;
        out.push(stream);
    }
    Ok(out)
}

/// Bar position along its sweep at time fraction `frac`, in pixels.
pub fn bar_position(extent: u16, frac: f64) -> f64 {
    frac * (extent - 1) as f64
}

fn gen_bar(cfg: &SynthConfig, class: usize, rng: &mut ChaCha8Rng) -> Vec<EventRecord> {
    let steps = 256usize;
    let dur = cfg.duration_us;
    // timestamp jitter small enough that events stay within 1 px of the
    // analytic trajectory: speed ~ extent/duration
    let jitter_us = (dur / steps as u32 / 2).max(1) as i64;
    let mut events = Vec::new();
    for s in 0..steps {
        let t = (s as u64 * (dur as u64 - 1) / (steps as u64 - 1)) as u32;
        let frac = s as f64 / (steps - 1) as f64;
        let (sweep_extent, lateral_extent) = match class {
            0 | 1 => (cfg.width, cfg.height),
            _ => (cfg.height, cfg.width),
        };
        let pos = bar_position(sweep_extent, frac).round() as u16;
        let pos = match class {
            0 | 2 => pos,                    // right / down
            _ => sweep_extent - 1 - pos,     // left / up
        };
        for lane in 0..lateral_extent {
            if rng.random::<f64>() < 0.5 {
                let jit = rng.random_range(-jitter_us..=jitter_us);
                let tt = (t as i64 + jit).clamp(0, dur as i64 - 1) as u32;
                let (x, y) = match class {
                    0 | 1 => (pos, lane),
                    _ => (lane, pos),
                };
                events.push(EventRecord {
                    t_us: tt,
                    x,
                    y,
                    polarity: 1,
                });
            }
        }
    }
    events
}

fn gen_dot(cfg: &SynthConfig, class: usize, speeds: usize, rng: &mut ChaCha8Rng) -> Vec<EventRecord> {
    let steps = 256usize;
    let dur = cfg.duration_us;
    // speed class k traverses a fraction (k+1)/speeds of the diagonal
    let reach = (class + 1) as f64 / speeds as f64;
    let mut events = Vec::new();
    for s in 0..steps {
        let t = (s as u64 * (dur as u64 - 1) / (steps as u64 - 1)) as u32;
        let frac = s as f64 / (steps - 1) as f64 * reach;
        let cx = (frac * (cfg.width - 1) as f64).round() as i32;
        let cy = (frac * (cfg.height - 1) as f64).round() as i32;
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= cfg.width as i32 || y >= cfg.height as i32 {
                    continue;
                }
                if rng.random::<f64>() < 0.6 {
                    events.push(EventRecord {
                        t_us: t,
                        x: x as u16,
                        y: y as u16,
                        polarity: 1,
                    });
                }
            }
        }
    }
    events
}

fn add_background_noise(cfg: &SynthConfig, events: &mut Vec<EventRecord>, rng: &mut ChaCha8Rng) {
    if cfg.noise_rate <= 0.0 {
        return;
    }
    let expected =
        cfg.noise_rate * cfg.noise_bins as f64 * cfg.height as f64 * cfg.width as f64;
    let count = sample_poisson(expected, rng);
    for _ in 0..count {
        events.push(EventRecord {
            t_us: rng.random_range(0..cfg.duration_us),
            x: rng.random_range(0..cfg.width),
            y: rng.random_range(0..cfg.height),
            polarity: rng.random_range(0..2u8),
        });
    }
}

/// Knuth sampling is fine here; expected counts stay modest at desk scale.
fn sample_poisson(lambda: f64, rng: &mut ChaCha8Rng) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    if lambda > 30.0 {
        // normal approximation for large lambda
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        return (lambda + z * lambda.sqrt()).round().max(0.0) as u64;
    }
    let l = (-lambda).exp();
    let mut k = 0u64;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Pixel-coordinate bijections on voxel grids; event mass is conserved
/// exactly.
#[derive(Clone, Copy, Debug)]
pub enum AugmentOp {
    HFlip,
    Roll { dx: isize, dy: isize },
    Rotate90 { k: u8 },
}

/// Applies ops left to right. Rotations may swap the H/W dims.
pub fn augment(grid: &VoxelGrid, ops: &[AugmentOp]) -> VoxelGrid {
    let mut tensor = grid.tensor.clone();
    for op in ops {
        tensor = apply_op(&tensor, *op);
    }
    VoxelGrid {
        tensor,
        bin_width_us: grid.bin_width_us,
    }
}

fn apply_op(t: &Tensor, op: AugmentOp) -> Tensor {
    let shape = t.shape().to_vec();
    let (maps, h, w) = (
        shape[..shape.len() - 2].iter().product::<usize>(),
        shape[shape.len() - 2],
        shape[shape.len() - 1],
    );
    let src = t.data();
    match op {
        AugmentOp::HFlip => {
            let mut out = vec![0.0; src.len()];
            for m in 0..maps {
                for y in 0..h {
                    for x in 0..w {
                        out[(m * h + y) * w + (w - 1 - x)] = src[(m * h + y) * w + x];
                    }
                }
            }
            Tensor::new_raw(shape, out)
        }
        AugmentOp::Roll { dx, dy } => {
            let mut out = vec![0.0; src.len()];
            let (sh, sw) = (h as isize, w as isize);
            for m in 0..maps {
                for y in 0..h {
                    let ny = (((y as isize + dy) % sh) + sh) % sh;
                    for x in 0..w {
                        let nx = (((x as isize + dx) % sw) + sw) % sw;
                        out[(m * h + ny as usize) * w + nx as usize] = src[(m * h + y) * w + x];
                    }
                }
            }
            Tensor::new_raw(shape, out)
        }
        AugmentOp::Rotate90 { k } => {
            let mut cur: Vec<f64> = src.clone();
            let (mut ch, mut cw) = (h, w);
            for _ in 0..(k % 4) {
                // 90 degrees counterclockwise: (y, x) -> (cw-1-x, y)
                let mut next = vec![0.0; cur.len()];
                for m in 0..maps {
                    for y in 0..ch {
                        for x in 0..cw {
                            next[(m * cw + (cw - 1 - x)) * ch + y] = cur[(m * ch + y) * cw + x];
                        }
                    }
                }
                cur = next;
                std::mem::swap(&mut ch, &mut cw);
            }
            let mut out_shape = shape[..shape.len() - 2].to_vec();
            out_shape.extend_from_slice(&[ch, cw]);
            Tensor::new_raw(out_shape, cur)
        }
    }
}

// ---------------------------------------------------------------------------
// EVTS file format + dataset directories
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"EVTS";
const VERSION: u32 = 1;
const NO_LABEL: u32 = 0xFFFF_FFFF;

/// Writes the bit-exact event file: magic `EVTS`, u32 version, u16 width,
/// u16 height, u32 label (0xFFFFFFFF = none), u64 count, then records of
/// (u32 t_us, u16 x, u16 y, u8 polarity, u8 pad), all little-endian.
pub fn write_event_file(path: &Path, s: &EventStream) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&s.width.to_le_bytes())?;
    w.write_all(&s.height.to_le_bytes())?;
    w.write_all(&s.label.unwrap_or(NO_LABEL).to_le_bytes())?;
    w.write_all(&(s.events.len() as u64).to_le_bytes())?;
    for e in &s.events {
        w.write_all(&e.t_us.to_le_bytes())?;
        w.write_all(&e.x.to_le_bytes())?;
        w.write_all(&e.y.to_le_bytes())?;
        w.write_all(&[e.polarity, 0u8])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_event_file(path: &Path) -> Result<EventStream> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad event-file magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported EVTS version {version}")));
    }
    let width = read_u16(&mut r)?;
    let height = read_u16(&mut r)?;
    let label_raw = read_u32(&mut r)?;
    let label = if label_raw == NO_LABEL {
        None
    } else {
        Some(label_raw)
    };
    let mut count_buf = [0u8; 8];
    r.read_exact(&mut count_buf)?;
    let count = u64::from_le_bytes(count_buf) as usize;
    let mut events = Vec::with_capacity(count);
    let mut rec = [0u8; 10];
    for _ in 0..count {
        r.read_exact(&mut rec)?;
        events.push(EventRecord {
            t_us: u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]),
            x: u16::from_le_bytes([rec[4], rec[5]]),
            y: u16::from_le_bytes([rec[6], rec[7]]),
            polarity: rec[8],
        });
    }
    let stream = EventStream {
        width,
        height,
        label,
        events,
    };
    stream.validate()?;
    Ok(stream)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

/// Writes one EVTS file per sample plus a plain-text `index.txt` of
/// `relative-path<TAB>label` lines.
pub fn write_dataset(dir: &Path, streams: &[EventStream]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (i, s) in streams.iter().enumerate() {
        let name = format!("sample_{i:05}.evts");
        write_event_file(&dir.join(&name), s)?;
        let label = s
            .label
            .map(|l| l.to_string())
            .unwrap_or_else(|| "-".into());
        index.push_str(&format!("{name}\t{label}\n"));
    }
    std::fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

/// Reads a dataset directory back in index order.
pub fn read_dataset(dir: &Path) -> Result<Vec<EventStream>> {
    let index_path = dir.join("index.txt");
    let reader = BufReader::new(File::open(&index_path).map_err(|e| {
        Error::Data(format!(
            "cannot open dataset index {}: {e}",
            index_path.display()
        ))
    })?);
    let mut streams = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rel: PathBuf = match line.split('\t').next() {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => {
                return Err(Error::Format(format!(
                    "malformed index line {} in {}",
                    ln + 1,
                    index_path.display()
                )))
            }
        };
        streams.push(read_event_file(&dir.join(rel))?);
    }
    Ok(streams)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_event_stream() -> EventStream {
        EventStream {
            width: 8,
            height: 8,
            label: Some(2),
            events: vec![EventRecord {
                t_us: 0,
                x: 3,
                y: 5,
                polarity: 1,
            }],
        }
    }

    #[test]
    fn empty_stream_voxelizes_to_zero_grid() {
        let s = EventStream {
            width: 4,
            height: 4,
            label: None,
            events: vec![],
        };
        let g = voxelize(&s, 3, false).unwrap();
        assert_eq!(g.tensor.shape(), &[3, 2, 4, 4]);
        assert!(g.tensor.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_event_lands_in_expected_cell() {
        let g = voxelize(&single_event_stream(), 4, false).unwrap();
        let v = g.tensor.to_vec();
        let nonzero: Vec<usize> = v
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero.len(), 1);
        // index [0, 1, 5, 3] in [T,2,H,W]
        assert_eq!(g.tensor.get(&[0, 1, 5, 3]), 1.0);
    }

    #[test]
    fn count_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut events: Vec<EventRecord> = (0..1000)
            .map(|_| EventRecord {
                t_us: rng.random_range(0..100_000),
                x: rng.random_range(0..32),
                y: rng.random_range(0..32),
                polarity: rng.random_range(0..2u8),
            })
            .collect();
        events.sort_by_key(|e| e.t_us);
        let s = EventStream {
            width: 32,
            height: 32,
            label: None,
            events,
        };
        let g = voxelize(&s, 7, false).unwrap();
        let total: f64 = g.tensor.to_vec().iter().sum();
        assert_eq!(total, 1000.0);
    }

    #[test]
    fn final_instant_event_clamps_to_last_bin() {
        let s = EventStream {
            width: 4,
            height: 4,
            label: None,
            events: vec![
                EventRecord { t_us: 0, x: 0, y: 0, polarity: 1 },
                EventRecord { t_us: 999, x: 1, y: 1, polarity: 1 },
            ],
        };
        let g = voxelize(&s, 4, false).unwrap();
        assert_eq!(g.tensor.get(&[3, 1, 1, 1]), 1.0);
    }

    #[test]
    fn out_of_bounds_coordinate_rejected() {
        let s = EventStream {
            width: 4,
            height: 4,
            label: None,
            events: vec![EventRecord { t_us: 0, x: 4, y: 0, polarity: 1 }],
        };
        assert!(voxelize(&s, 2, false).is_err());
        assert!(s.validate().is_err());
    }

    #[test]
    fn bars_stay_within_one_pixel_of_trajectory() {
        let cfg = SynthConfig::new(ClassSpec::Bars4);
        let streams = gen_synthetic(&cfg, 4, 42).unwrap();
        // class 0: bar moving right, x(t) = t/dur * (W-1)
        let s = &streams[0];
        assert_eq!(s.label, Some(0));
        for e in &s.events {
            let frac = e.t_us as f64 / (cfg.duration_us - 1) as f64;
            let expected_x = bar_position(cfg.width, frac);
            assert!(
                (e.x as f64 - expected_x).abs() <= 1.0,
                "event x {} vs trajectory {expected_x} at t {}",
                e.x,
                e.t_us
            );
        }
    }

    #[test]
    fn class_balance_is_exact() {
        let cfg = SynthConfig::new(ClassSpec::Bars4);
        let streams = gen_synthetic(&cfg, 100, 1).unwrap();
        let mut counts = [0usize; 4];
        for s in &streams {
            counts[s.label.unwrap() as usize] += 1;
        }
        assert_eq!(counts, [25, 25, 25, 25]);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = SynthConfig::new(ClassSpec::Bars4);
        let a = gen_synthetic(&cfg, 8, 7).unwrap();
        let b = gen_synthetic(&cfg, 8, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.events, y.events);
        }
        let c = gen_synthetic(&cfg, 8, 8).unwrap();
        assert_ne!(a[0].events, c[0].events);
    }

    #[test]
    fn noise_rate_adds_expected_background_count() {
        let mut cfg = SynthConfig::new(ClassSpec::Bars4);
        cfg.noise_rate = 0.01;
        cfg.noise_bins = 16;
        let expected = 0.01 * 16.0 * 64.0 * 64.0; // ~655 per sample
        let clean = gen_synthetic(&SynthConfig::new(ClassSpec::Bars4), 100, 3).unwrap();
        let noisy = gen_synthetic(&cfg, 100, 3).unwrap();
        let mut extra = 0f64;
        for (c, n) in clean.iter().zip(&noisy) {
            extra += n.events.len() as f64 - c.events.len() as f64;
        }
        let mean_extra = extra / 100.0;
        assert!(
            (mean_extra - expected).abs() < 0.1 * expected,
            "mean extra {mean_extra} vs expected {expected}"
        );
    }

    #[test]
    fn dots_speed_classes_differ() {
        let cfg = SynthConfig::new(ClassSpec::parse("dots3").unwrap());
        let streams = gen_synthetic(&cfg, 3, 11).unwrap();
        // faster classes reach farther along the diagonal
        let max_x = |s: &EventStream| s.events.iter().map(|e| e.x).max().unwrap();
        assert!(max_x(&streams[0]) < max_x(&streams[1]));
        assert!(max_x(&streams[1]) < max_x(&streams[2]));
    }

    #[test]
    fn hflip_is_an_involution() {
        let g = voxelize(&single_event_stream(), 2, false).unwrap();
        let once = augment(&g, &[AugmentOp::HFlip]);
        let twice = augment(&once, &[AugmentOp::HFlip]);
        assert_eq!(twice.tensor.to_vec(), g.tensor.to_vec());
        assert_ne!(once.tensor.to_vec(), g.tensor.to_vec());
    }

    #[test]
    fn zero_roll_is_identity() {
        let g = voxelize(&single_event_stream(), 2, false).unwrap();
        let rolled = augment(&g, &[AugmentOp::Roll { dx: 0, dy: 0 }]);
        assert_eq!(rolled.tensor.to_vec(), g.tensor.to_vec());
    }

    #[test]
    fn augment_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut events: Vec<EventRecord> = (0..500)
            .map(|_| EventRecord {
                t_us: rng.random_range(0..10_000),
                x: rng.random_range(0..16),
                y: rng.random_range(0..16),
                polarity: rng.random_range(0..2u8),
            })
            .collect();
        events.sort_by_key(|e| e.t_us);
        let s = EventStream { width: 16, height: 16, label: None, events };
        let g = voxelize(&s, 4, false).unwrap();
        let total: f64 = g.tensor.to_vec().iter().sum();
        for ops in [
            vec![AugmentOp::Rotate90 { k: 1 }],
            vec![AugmentOp::Rotate90 { k: 3 }, AugmentOp::HFlip],
            vec![AugmentOp::Roll { dx: 5, dy: -3 }],
        ] {
            let a = augment(&g, &ops);
            let t: f64 = a.tensor.to_vec().iter().sum();
            assert_eq!(t, total);
        }
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let g = voxelize(&single_event_stream(), 2, true).unwrap();
        let r = augment(&g, &[AugmentOp::Rotate90 { k: 4 }]);
        assert_eq!(r.tensor.to_vec(), g.tensor.to_vec());
    }

    #[test]
    fn event_file_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(ClassSpec::Bars4);
        let streams = gen_synthetic(&cfg, 2, 77).unwrap();
        let path = dir.path().join("a.evts");
        write_event_file(&path, &streams[0]).unwrap();
        let back = read_event_file(&path).unwrap();
        assert_eq!(back.width, streams[0].width);
        assert_eq!(back.height, streams[0].height);
        assert_eq!(back.label, streams[0].label);
        assert_eq!(back.events, streams[0].events);
        // byte-for-byte stability of a rewrite
        let path2 = dir.path().join("b.evts");
        write_event_file(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(ClassSpec::Bars4);
        let streams = gen_synthetic(&cfg, 8, 5).unwrap();
        write_dataset(dir.path(), &streams).unwrap();
        let index = std::fs::read_to_string(dir.path().join("index.txt")).unwrap();
        assert_eq!(index.lines().count(), 8);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 8);
        for (a, b) in streams.iter().zip(&back) {
            assert_eq!(a.events, b.events);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn unlabeled_stream_roundtrips_none() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = single_event_stream();
        s.label = None;
        let path = dir.path().join("u.evts");
        write_event_file(&path, &s).unwrap();
        assert_eq!(read_event_file(&path).unwrap().label, None);
    }
}
