//! Stochastic input perturbation ("mutation").
//!
//! Each iteration one network is drawn uniformly and its copy of the batch is
//! transformed by one function drawn uniformly from the pool. Every random
//! quantity is recorded in a [`PerturbEvent`], and [`apply`] replays an event
//! without touching any RNG.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Provenance};
use crate::error::{Error, Result};
use crate::losses::LabelDist;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    RandomCrop,
    NoiseInject,
    Fusion,
    Splice,
    Deform,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 5] = [
        PerturbKind::RandomCrop,
        PerturbKind::NoiseInject,
        PerturbKind::Fusion,
        PerturbKind::Splice,
        PerturbKind::Deform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::RandomCrop => "random_crop",
            PerturbKind::NoiseInject => "noise_inject",
            PerturbKind::Fusion => "fusion",
            PerturbKind::Splice => "splice",
            PerturbKind::Deform => "deform",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pool membership and parameter ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub kinds: Vec<PerturbKind>,
    /// Cropped area as a fraction of the input.
    pub crop_scale: (f64, f64),
    /// Mixing weight for fusion; pasted-area fraction for splice.
    pub mix_lambda: (f64, f64),
    /// Noise standard deviation as a fraction of the batch's dynamic range.
    pub noise_sigma: (f64, f64),
    /// Largest deformation shift as a fraction of height/width.
    pub max_shift: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            kinds: PerturbKind::ALL.to_vec(),
            crop_scale: (0.3, 0.7),
            mix_lambda: (0.3, 0.7),
            noise_sigma: (0.05, 0.2),
            max_shift: 0.25,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::Config("perturbation pool is empty".into()));
        }
        for (name, (lo, hi)) in [
            ("crop_scale", self.crop_scale),
            ("mix_lambda", self.mix_lambda),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1")));
            }
        }
        if !(0.0..=0.5).contains(&self.max_shift) {
            return Err(Error::Config(format!("max_shift must lie in [0, 0.5], got {}", self.max_shift)));
        }
        Ok(())
    }
}

/// Sampled parameters of one perturbation; enough to replay it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbParams {
    RandomCrop {
        scale: f64,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    NoiseInject {
        sigma: f64,
        noise_seed: u64,
    },
    Fusion {
        lambda: f64,
        partner_offset: usize,
    },
    Splice {
        lambda: f64,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        partner_offset: usize,
    },
    Deform {
        flip: bool,
        shift_y: i64,
        shift_x: i64,
    },
}

impl PerturbParams {
    pub fn kind(&self) -> PerturbKind {
        match self {
            PerturbParams::RandomCrop { .. } => PerturbKind::RandomCrop,
            PerturbParams::NoiseInject { .. } => PerturbKind::NoiseInject,
            PerturbParams::Fusion { .. } => PerturbKind::Fusion,
            PerturbParams::Splice { .. } => PerturbKind::Splice,
            PerturbParams::Deform { .. } => PerturbKind::Deform,
        }
    }

    /// Compact `key=value;...` rendering for the metrics CSV.
    pub fn summary(&self) -> String {
        match *self {
            PerturbParams::RandomCrop { scale, top, left, height, width } => {
                format!("scale={scale};box={top},{left},{height},{width}")
            }
            PerturbParams::NoiseInject { sigma, noise_seed } => format!("sigma={sigma};seed={noise_seed}"),
            PerturbParams::Fusion { lambda, partner_offset } => format!("lambda={lambda};offset={partner_offset}"),
            PerturbParams::Splice { lambda, top, left, height, width, partner_offset } => {
                format!("lambda={lambda};box={top},{left},{height},{width};offset={partner_offset}")
            }
            PerturbParams::Deform { flip, shift_y, shift_x } => {
                format!("flip={};shift={shift_y},{shift_x}", u8::from(flip))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbEvent {
    pub iteration: u64,
    pub target_net: usize,
    pub params: PerturbParams,
}

impl PerturbEvent {
    pub fn kind(&self) -> PerturbKind {
        self.params.kind()
    }
}

/// `(channels, height, width)` view of a per-sample shape. Vectors are `1×1×D`.
fn layout(sample_shape: &[usize]) -> (usize, usize, usize) {
    match *sample_shape {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => (1, 1, sample_shape.iter().product()),
    }
}

/// Side lengths of a box covering roughly `area` of an `h×w` plane.
fn box_dims(h: usize, w: usize, area: f64) -> (usize, usize) {
    let side = |n: usize, frac: f64| ((n as f64 * frac).round() as usize).clamp(1, n);
    if h == 1 {
        (1, side(w, area))
    } else if w == 1 {
        (side(h, area), 1)
    } else {
        (side(h, area.sqrt()), side(w, area.sqrt()))
    }
}

fn draw_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws the parameters of `kind` for a batch. Fusion and splice need a
/// partner sample, so a one-sample batch falls back to noise injection.
pub fn sample_params(
    kind: PerturbKind,
    sample_shape: &[usize],
    batch_len: usize,
    cfg: &PerturbConfig,
    rng: &mut ChaCha8Rng,
) -> PerturbParams {
    let (_, h, w) = layout(sample_shape);
    let kind = match kind {
        PerturbKind::Fusion | PerturbKind::Splice if batch_len < 2 => PerturbKind::NoiseInject,
        k => k,
    };
    match kind {
        PerturbKind::RandomCrop => {
            let scale = draw_in(rng, cfg.crop_scale);
            let (height, width) = box_dims(h, w, scale);
            PerturbParams::RandomCrop {
                scale,
                top: rng.random_range(0..=h - height),
                left: rng.random_range(0..=w - width),
                height,
                width,
            }
        }
        PerturbKind::NoiseInject => PerturbParams::NoiseInject {
            sigma: draw_in(rng, cfg.noise_sigma),
            noise_seed: rng.random(),
        },
        PerturbKind::Fusion => PerturbParams::Fusion {
            lambda: draw_in(rng, cfg.mix_lambda),
            partner_offset: rng.random_range(1..batch_len),
        },
        PerturbKind::Splice => {
            let lambda = draw_in(rng, cfg.mix_lambda);
            let (height, width) = box_dims(h, w, lambda);
            PerturbParams::Splice {
                lambda,
                top: rng.random_range(0..=h - height),
                left: rng.random_range(0..=w - width),
                height,
                width,
                partner_offset: rng.random_range(1..batch_len),
            }
        }
        PerturbKind::Deform => {
            let max_y = (h as f64 * cfg.max_shift).floor() as i64;
            let max_x = (w as f64 * cfg.max_shift).floor() as i64;
            PerturbParams::Deform {
                flip: rng.random_bool(0.5),
                shift_y: rng.random_range(-max_y..=max_y),
                shift_x: rng.random_range(-max_x..=max_x),
            }
        }
    }
}

/// Applies previously drawn parameters. Output shapes equal input shapes and
/// label rows stay valid distributions.
pub fn apply(inputs: &Tensor, labels: &LabelDist, params: &PerturbParams) -> Result<(Tensor, LabelDist)> {
    if inputs.rows() != labels.tensor().rows() {
        return Err(Error::dim("perturb", inputs.shape(), labels.tensor().shape()));
    }
    let (c, h, w) = layout(&inputs.shape()[1..]);
    let batch = inputs.rows();
    let plane = h * w;
    let partner = |j: usize, offset: usize| (j + offset) % batch;
    match *params {
        PerturbParams::RandomCrop { top, left, height, width, .. } => {
            let mut out = inputs.clone();
            for b in 0..batch {
                let src = inputs.row(b);
                let dst = out.row_mut(b);
                for ch in 0..c {
                    for y in 0..h {
                        let sy = top + y * height / h;
                        for x in 0..w {
                            let sx = left + x * width / w;
                            dst[ch * plane + y * w + x] = src[ch * plane + sy * w + sx];
                        }
                    }
                }
            }
            Ok((out, labels.clone()))
        }
        PerturbParams::NoiseInject { sigma, noise_seed } => {
            let lo = inputs.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = inputs.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let std = sigma * (hi - lo);
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let out = inputs.map(|v| {
                let n: f64 = rng.sample(StandardNormal);
                (v + std * n).clamp(lo, hi)
            });
            Ok((out, labels.clone()))
        }
        PerturbParams::Fusion { lambda, partner_offset } => {
            let mut out = inputs.clone();
            let mut y = labels.tensor().clone();
            for j in 0..batch {
                let p = partner(j, partner_offset);
                for (o, (&a, &b)) in out.row_mut(j).iter_mut().zip(inputs.row(j).iter().zip(inputs.row(p))) {
                    *o = lambda * a + (1.0 - lambda) * b;
                }
                let (ya, yb) = (labels.tensor().row(j), labels.tensor().row(p));
                for (o, (&a, &b)) in y.row_mut(j).iter_mut().zip(ya.iter().zip(yb)) {
                    *o = lambda * a + (1.0 - lambda) * b;
                }
            }
            Ok((out, LabelDist::from_trusted(y)))
        }
        PerturbParams::Splice { top, left, height, width, partner_offset, .. } => {
            let frac = (height * width) as f64 / plane as f64;
            let mut out = inputs.clone();
            let mut y = labels.tensor().clone();
            for j in 0..batch {
                let p = partner(j, partner_offset);
                let src = inputs.row(p);
                let dst = out.row_mut(j);
                for ch in 0..c {
                    for yy in top..top + height {
                        for xx in left..left + width {
                            let i = ch * plane + yy * w + xx;
                            dst[i] = src[i];
                        }
                    }
                }
                let (ya, yb) = (labels.tensor().row(j), labels.tensor().row(p));
                for (o, (&a, &b)) in y.row_mut(j).iter_mut().zip(ya.iter().zip(yb)) {
                    *o = (1.0 - frac) * a + frac * b;
                }
            }
            Ok((out, LabelDist::from_trusted(y)))
        }
        PerturbParams::Deform { flip, shift_y, shift_x } => {
            let mut out = Tensor::zeros(inputs.shape());
            for b in 0..batch {
                let src = inputs.row(b);
                let dst = out.row_mut(b);
                for ch in 0..c {
                    for y in 0..h {
                        let sy = y as i64 - shift_y;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        for x in 0..w {
                            let fx = if flip { w - 1 - x } else { x };
                            let sx = fx as i64 - shift_x;
                            if sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            dst[ch * plane + y * w + x] = src[ch * plane + sy as usize * w + sx as usize];
                        }
                    }
                }
            }
            Ok((out, labels.clone()))
        }
    }
}

/// Draws parameters for `kind` and applies them to the batch.
pub fn stochastic_perturb(
    batch: &Batch,
    kind: PerturbKind,
    cfg: &PerturbConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Batch, PerturbParams)> {
    let params = sample_params(kind, &batch.inputs.shape()[1..], batch.len(), cfg, rng);
    let (inputs, labels) = apply(&batch.inputs, &batch.labels, &params)?;
    Ok((
        Batch {
            inputs,
            labels,
            indices: batch.indices.clone(),
            provenance: Provenance::Perturbed,
        },
        params,
    ))
}

/// Uniform draw over `0..n`; a cohort needs at least two networks.
pub fn select_mutation_target(n: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
    if n < 2 {
        return Err(Error::Config(format!("mutation needs a cohort of at least 2 networks, got {n}")));
    }
    Ok(rng.random_range(0..n))
}

/// The two RNG streams that drive mutation.
#[derive(Debug, Clone)]
pub struct MutationRngs {
    pub choice: ChaCha8Rng,
    pub params: ChaCha8Rng,
}

impl MutationRngs {
    pub fn new(seed: u64) -> Self {
        use crate::rng::{stream, Stream};
        Self {
            choice: stream(Stream::PerturbChoice, seed, 0),
            params: stream(Stream::PerturbParams, seed, 0),
        }
    }
}

/// Per-network batches for one iteration: every network gets the clean batch
/// except one, which gets a perturbed copy.
pub fn mutate_cohort(
    clean: &Batch,
    n: usize,
    cfg: &PerturbConfig,
    rngs: &mut MutationRngs,
    iteration: u64,
) -> Result<(Vec<Batch>, PerturbEvent)> {
    let target = select_mutation_target(n, &mut rngs.choice)?;
    let kind = cfg.kinds[rngs.choice.random_range(0..cfg.kinds.len())];
    let (perturbed, params) = stochastic_perturb(clean, kind, cfg, &mut rngs.params)?;
    let mut out = vec![clean.clone(); n];
    out[target] = perturbed;
    Ok((
        out,
        PerturbEvent {
            iteration,
            target_net: target,
            params,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn image_batch(b: usize, c: usize, h: usize, w: usize) -> (Tensor, LabelDist) {
        let n = b * c * h * w;
        let x = Tensor::new(vec![b, c, h, w], (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y = LabelDist::one_hot(&(0..b).map(|i| i % 3).collect::<Vec<_>>(), 3).unwrap();
        (x, y)
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let (x, y) = image_batch(4, 2, 5, 5);
        let (x2, y2) = apply(&x, &y, &PerturbParams::NoiseInject { sigma: 0.0, noise_seed: 3 }).unwrap();
        assert_eq!(x2, x);
        assert_eq!(y2, y);
    }

    #[test]
    fn noise_stays_in_range() {
        let (x, y) = image_batch(4, 2, 5, 5);
        let (x2, _) = apply(&x, &y, &PerturbParams::NoiseInject { sigma: 0.2, noise_seed: 3 }).unwrap();
        let lo = x.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(x2.data().iter().all(|&v| (lo..=hi).contains(&v)));
        assert_ne!(x2, x);
    }

    #[test]
    fn fusion_mixes_labels_convexly() {
        let (x, y) = image_batch(3, 1, 2, 2);
        let (x2, y2) = apply(&x, &y, &PerturbParams::Fusion { lambda: 0.5, partner_offset: 1 }).unwrap();
        for j in 0..3 {
            let p = (j + 1) % 3;
            for k in 0..3 {
                let want = 0.5 * y.tensor().row(j)[k] + 0.5 * y.tensor().row(p)[k];
                assert_eq!(y2.tensor().row(j)[k], want);
            }
            assert!((y2.tensor().row(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(x2.row(j)[0], 0.5 * x.row(j)[0] + 0.5 * x.row(p)[0]);
        }
    }

    #[test]
    fn splice_label_weight_equals_pasted_pixel_fraction() {
        let (x, y) = image_batch(2, 1, 6, 7);
        // Make the partner distinguishable pixel-by-pixel.
        let mut x = x;
        for v in x.row_mut(1) {
            *v += 10.0;
        }
        let mut rng = stream(Stream::PerturbParams, 5, 0);
        let params = sample_params(PerturbKind::Splice, &[1, 6, 7], 2, &PerturbConfig::default(), &mut rng);
        let (x2, y2) = apply(&x, &y, &params).unwrap();
        let pasted = x2.row(0).iter().filter(|&&v| v >= 5.0).count();
        let f = pasted as f64 / 42.0;
        // Sample 0 is class 0, partner (sample 1) is class 1.
        assert!((y2.tensor().row(0)[1] - f).abs() <= 1.0 / 42.0);
        assert!((y2.tensor().row(0)[1] - f).abs() < 1e-12);
    }

    #[test]
    fn deform_flips_and_shifts() {
        let x = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = LabelDist::one_hot(&[0], 2).unwrap();
        let (flipped, _) = apply(&x, &y, &PerturbParams::Deform { flip: true, shift_y: 0, shift_x: 0 }).unwrap();
        assert_eq!(flipped.data(), &[4.0, 3.0, 2.0, 1.0]);
        let (shifted, _) = apply(&x, &y, &PerturbParams::Deform { flip: false, shift_y: 0, shift_x: 1 }).unwrap();
        assert_eq!(shifted.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn full_crop_is_identity() {
        let (x, y) = image_batch(2, 3, 4, 4);
        let params = PerturbParams::RandomCrop { scale: 1.0, top: 0, left: 0, height: 4, width: 4 };
        assert_eq!(apply(&x, &y, &params).unwrap().0, x);
    }

    #[test]
    fn single_sample_batch_falls_back_to_noise() {
        let mut rng = stream(Stream::PerturbParams, 1, 0);
        for kind in [PerturbKind::Fusion, PerturbKind::Splice] {
            let p = sample_params(kind, &[8], 1, &PerturbConfig::default(), &mut rng);
            assert_eq!(p.kind(), PerturbKind::NoiseInject);
        }
    }

    #[test]
    fn target_selection_rules() {
        let mut rng = stream(Stream::PerturbChoice, 1, 0);
        assert!(matches!(select_mutation_target(1, &mut rng), Err(Error::Config(_))));
        let mut a = stream(Stream::PerturbChoice, 2, 0);
        let mut b = stream(Stream::PerturbChoice, 2, 0);
        let sa: Vec<usize> = (0..50).map(|_| select_mutation_target(3, &mut a).unwrap()).collect();
        let sb: Vec<usize> = (0..50).map(|_| select_mutation_target(3, &mut b).unwrap()).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn target_selection_is_uniform() {
        let mut rng = stream(Stream::PerturbChoice, 3, 0);
        let n = 10_000;
        let ones = (0..n).filter(|_| select_mutation_target(2, &mut rng).unwrap() == 1).count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ones as f64 - n as f64 / 2.0).abs() < 5.0 * sigma, "{ones}");
    }

    #[test]
    fn mutate_cohort_perturbs_exactly_one() {
        let (x, y) = image_batch(4, 1, 4, 4);
        let clean = Batch {
            inputs: x,
            labels: y,
            indices: vec![0, 1, 2, 3],
            provenance: Provenance::Clean,
        };
        let mut rngs = MutationRngs::new(4);
        for it in 0..20 {
            let (batches, event) = mutate_cohort(&clean, 3, &PerturbConfig::default(), &mut rngs, it).unwrap();
            let perturbed: Vec<usize> = (0..3).filter(|&i| batches[i].provenance == Provenance::Perturbed).collect();
            assert_eq!(perturbed, vec![event.target_net]);
            for (i, b) in batches.iter().enumerate() {
                if i != event.target_net {
                    assert_eq!(b, &clean);
                }
            }
        }
    }
}
