//! Masked squared-error losses and their weighting schedule.
//!
//! Every loss is a mean over the pixels it covers, `(1/n) Σ ‖a - b‖²`, so
//! learning rates do not depend on batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{FeatureImage, ProbImage};

/// One loss value with gradients for both of its arguments.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
    /// Number of pixels that contributed. Zero signals an empty mask; the
    /// value and gradients are then all zero.
    pub count: usize,
}

impl LossTerm {
    pub fn zero(len: usize) -> Self {
        LossTerm {
            value: 0.0,
            grad_a: vec![0.0; len],
            grad_b: vec![0.0; len],
            count: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn scale(&mut self, s: f64) {
        self.value *= s;
        self.grad_a
            .iter_mut()
            .chain(self.grad_b.iter_mut())
            .for_each(|g| *g *= s);
    }
}

/// Mean over masked pixels of `‖a - b‖²` for row-major `pixels × channels`
/// arrays. Without a mask every pixel counts.
pub fn masked_sq_loss(a: &[f64], b: &[f64], channels: usize, mask: Option<&[bool]>) -> Result<LossTerm> {
    if a.len() != b.len() || channels == 0 || !a.len().is_multiple_of(channels) {
        return Err(Error::input("loss arguments differ in shape"));
    }
    let pixels = a.len() / channels;
    if mask.is_some_and(|m| m.len() != pixels) {
        return Err(Error::input("mask length does not match pixel count"));
    }
    let on = |p: usize| mask.is_none_or(|m| m[p]);
    let count = (0..pixels).filter(|&p| on(p)).count();
    let mut term = LossTerm::zero(a.len());
    if count == 0 {
        return Ok(term);
    }
    term.count = count;
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for p in (0..pixels).filter(|&p| on(p)) {
        for k in p * channels..(p + 1) * channels {
            let d = a[k] - b[k];
            sum += d * d;
            term.grad_a[k] = 2.0 * d * inv;
            term.grad_b[k] = -2.0 * d * inv;
        }
    }
    term.value = sum * inv;
    Ok(term)
}

/// Consensus between the encoded 2D map and the rendered 3D map over the ray
/// mask.
pub fn loss_2d3d(f2d: &FeatureImage, f3d: &FeatureImage, mask: &[bool]) -> Result<LossTerm> {
    if !f2d.same_shape(f3d) {
        return Err(Error::input("F2D and F3D differ in shape"));
    }
    masked_sq_loss(&f2d.data, &f3d.data, f2d.channels, Some(mask))
}

/// Fidelity of the fidelity-head output to the frozen teacher, all pixels.
pub fn loss_fid(fid: &FeatureImage, teacher: &FeatureImage) -> Result<LossTerm> {
    if !fid.same_shape(teacher) {
        return Err(Error::input("fidelity map and teacher differ in shape"));
    }
    masked_sq_loss(&fid.data, &teacher.data, fid.channels, None)
}

/// Keypoint consensus between the 2D and rendered 3D probability maps.
pub fn loss_p(p2d: &ProbImage, p3d: &ProbImage, mask: &[bool]) -> Result<LossTerm> {
    if p2d.width != p3d.width || p2d.height != p3d.height {
        return Err(Error::input("probability maps differ in shape"));
    }
    masked_sq_loss(&p2d.data, &p3d.data, 1, Some(mask))
}

/// Training stages, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    /// Student and fidelity head start from the teacher.
    A,
    /// 2D keypoint head fitted to the teacher heatmaps.
    B,
    /// 3D distillation with the 2D side frozen.
    C,
    /// Everything trained jointly.
    D,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::A, Stage::B, Stage::C, Stage::D];

    pub fn name(self) -> &'static str {
        match self {
            Stage::A => "A",
            Stage::B => "B",
            Stage::C => "C",
            Stage::D => "D",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_2d3d: f64,
    pub lambda_fid: f64,
    pub lambda_p: f64,
    /// Fraction of stage D over which `λ_fid` and `λ_p` ramp up linearly.
    pub warmup_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_2d3d: 1.0,
            lambda_fid: 1.0,
            lambda_p: 0.1,
            warmup_fraction: 1.0 / 6.0,
        }
    }
}

/// Effective weights for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    pub l2d3d: f64,
    pub fid: f64,
    pub p: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_2d3d, self.lambda_fid, self.lambda_p]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && (0.0..=1.0).contains(&self.warmup_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "loss weights must be nonnegative and warm-up fraction in [0, 1]".into(),
            ))
        }
    }

    /// Linear ramp factor at `step` of a stage lasting `stage_steps`.
    pub fn ramp(&self, step: usize, stage_steps: usize) -> f64 {
        let warm = self.warmup_fraction * stage_steps as f64;
        if warm <= 0.0 {
            1.0
        } else {
            (step as f64 / warm).min(1.0)
        }
    }

    /// Weights in effect at `step` of `stage`. Stage A trains the fidelity
    /// anchor only, stage C distills with `λ_fid = λ_p = 0`, and stage D ramps
    /// `λ_fid` and `λ_p` in. Stage B has its own objective (heatmap fitting)
    /// and reports zero here.
    pub fn resolve(&self, stage: Stage, step: usize, stage_steps: usize) -> Lambdas {
        match stage {
            Stage::A => Lambdas {
                l2d3d: 0.0,
                fid: self.lambda_fid,
                p: 0.0,
            },
            Stage::B => Lambdas {
                l2d3d: 0.0,
                fid: 0.0,
                p: 0.0,
            },
            Stage::C => Lambdas {
                l2d3d: self.lambda_2d3d,
                fid: 0.0,
                p: 0.0,
            },
            Stage::D => {
                let r = self.ramp(step, stage_steps);
                Lambdas {
                    l2d3d: self.lambda_2d3d,
                    fid: r * self.lambda_fid,
                    p: r * self.lambda_p,
                }
            }
        }
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub l2d3d: LossTerm,
    pub fid: LossTerm,
    pub p: LossTerm,
}

/// Weighted total; each term's gradients are scaled by its weight.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub lambdas: Lambdas,
    /// Unweighted values, for logging.
    pub raw: [f64; 3],
    pub weighted: LossParts,
}

pub fn total_loss(parts: LossParts, weights: &LossWeights, step: usize, stage: Stage, stage_steps: usize) -> TotalLoss {
    let lambdas = weights.resolve(stage, step, stage_steps);
    combine(parts, lambdas)
}

/// [`total_loss`] with explicit weights.
pub fn combine(mut parts: LossParts, lambdas: Lambdas) -> TotalLoss {
    let raw = [parts.l2d3d.value, parts.fid.value, parts.p.value];
    parts.l2d3d.scale(lambdas.l2d3d);
    parts.fid.scale(lambdas.fid);
    parts.p.scale(lambdas.p);
    TotalLoss {
        value: parts.l2d3d.value + parts.fid.value + parts.p.value,
        lambdas,
        raw,
        weighted: parts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(data: Vec<f64>, channels: usize) -> FeatureImage {
        let n = data.len() / channels;
        FeatureImage::from_data(n, 1, channels, data).unwrap()
    }

    #[test]
    fn identical_maps_cost_nothing() {
        let a = img(vec![0.3, -1.0, 2.0, 4.0], 2);
        let t = loss_2d3d(&a, &a, &[true, true]).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(t.grad_a.iter().chain(&t.grad_b).all(|g| *g == 0.0));
    }

    #[test]
    fn single_pixel_closed_form() {
        let a = img(vec![1.0, 2.0, 5.0, 5.0], 2);
        let b = img(vec![0.5, 4.0, 0.0, 0.0], 2);
        let t = loss_2d3d(&a, &b, &[true, false]).unwrap();
        assert_eq!(t.value, 0.25 + 4.0);
        assert_eq!(t.grad_a, vec![1.0, -4.0, 0.0, 0.0]);
        assert_eq!(t.grad_b, vec![-1.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_mask_is_zero_with_signal() {
        let a = img(vec![1.0, 2.0], 1);
        let b = img(vec![3.0, 0.0], 1);
        let t = loss_2d3d(&a, &b, &[false, false]).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.value, 0.0);
    }

    #[test]
    fn fid_covers_every_pixel() {
        let a = img(vec![1.0, 2.0, 3.0], 1);
        let b = img(vec![0.0, 0.0, 0.0], 1);
        let t = loss_fid(&a, &b).unwrap();
        assert_eq!(t.count, 3);
        assert!((t.value - 14.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn prob_loss_closed_form() {
        let a = ProbImage {
            width: 2,
            height: 1,
            data: vec![0.9, 0.2],
        };
        let b = ProbImage {
            width: 2,
            height: 1,
            data: vec![0.4, 0.2],
        };
        let t = loss_p(&a, &b, &[true, true]).unwrap();
        assert!((t.value - 0.125).abs() < 1e-15);
        assert!((t.grad_a[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = img(vec![1.0, 2.0], 1);
        let b = img(vec![1.0, 2.0], 2);
        assert!(loss_2d3d(&a, &b, &[true]).is_err());
    }

    #[test]
    fn distillation_stage_uses_consensus_only() {
        let w = LossWeights::default();
        let l = w.resolve(Stage::C, 10, 100);
        assert_eq!((l.l2d3d, l.fid, l.p), (1.0, 0.0, 0.0));
    }

    #[test]
    fn warmup_is_linear() {
        let w = LossWeights {
            lambda_2d3d: 1.0,
            lambda_fid: 2.0,
            lambda_p: 0.5,
            warmup_fraction: 0.25,
        };
        // 400-step stage: ramp over the first 100 steps.
        let l = w.resolve(Stage::D, 30, 400);
        assert!((l.fid - 0.3 * 2.0).abs() < 1e-15);
        assert!((l.p - 0.3 * 0.5).abs() < 1e-15);
        assert_eq!(w.resolve(Stage::D, 250, 400).fid, 2.0);
    }
}
