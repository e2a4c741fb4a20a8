//! Small per-pixel and per-voxel networks with hand-written gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::image::{FeatureImage, ProbImage};

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Sigmoid),
            _ => Err(Error::format(format!("unknown activation code {code}"))),
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Fully connected network. All parameters live in one flat vector: for each
/// layer, its `out × in` row-major weight matrix followed by its bias.
///
/// Every mutable access to the parameters bumps a revision number; caches
/// from an older revision are rejected by the backward pass.
#[derive(Clone, Debug)]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    revision: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.activations == other.activations && self.params == other.params
    }
}

/// Intermediate values of a batched forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    revision: u64,
    batch: usize,
    /// Input of each layer (`batch × in`), plus the final output at the end.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of each layer (`batch × out`).
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache has at least the input")
    }

    /// Activation output of layer `layer` (the input of layer `layer + 1`).
    pub fn layer_output(&self, layer: usize) -> &[f64] {
        &self.acts[layer + 1]
    }

    pub fn pre_activation(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }
}

impl Mlp {
    /// `dims = [in, hidden…, out]`, one activation per layer.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 || dims.contains(&0) {
            return Err(Error::input("mlp needs positive dims and one activation per layer"));
        }
        let n = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Mlp {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; n],
            revision: fresh_revision(),
        })
    }

    pub fn from_parts(dims: &[usize], activations: &[Activation], params: Vec<f64>) -> Result<Self> {
        let mut m = Mlp::zeros(dims, activations)?;
        if params.len() != m.params.len() {
            return Err(Error::input("parameter count does not match mlp dims"));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::input("mlp parameters must be finite"));
        }
        m.params = params;
        Ok(m)
    }

    /// Weights drawn from `N(0, 1/in)`, zero biases.
    pub fn random(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        let mut m = Mlp::zeros(dims, activations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..m.layer_count() {
            let (w, _) = m.layer_range(l);
            let scale = 1.0 / (m.dims[l] as f64).sqrt();
            for p in &mut m.params[w] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(m)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("nonempty dims")
    }

    pub fn layer_count(&self) -> usize {
        self.activations.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.revision = fresh_revision();
        &mut self.params
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Index ranges of the weight matrix and bias of layer `l`.
    pub fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.dims.windows(2).take(l).map(|w| w[0] * w[1] + w[1]).sum();
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        (start..start + i * o, start + i * o..start + i * o + o)
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        &self.params[self.layer_range(l).0]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        &self.params[self.layer_range(l).1]
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let cache = self.forward_batch(x, 1)?;
        Ok((cache.output().to_vec(), cache))
    }

    /// Forward pass over `batch` row-major inputs.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<MlpCache> {
        if x.len() != batch * self.input_dim() {
            return Err(Error::input(format!(
                "mlp input has {} values, expected {} × {}",
                x.len(),
                batch,
                self.input_dim()
            )));
        }
        let mut acts = Vec::with_capacity(self.layer_count() + 1);
        let mut pre = Vec::with_capacity(self.layer_count());
        acts.push(x.to_vec());
        for l in 0..self.layer_count() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let (w, b) = (self.weights(l), self.bias(l));
            let input = &acts[l];
            let mut z = vec![0.0; batch * o];
            for n in 0..batch {
                let xin = &input[n * i..(n + 1) * i];
                for (r, zr) in z[n * o..(n + 1) * o].iter_mut().enumerate() {
                    let row = &w[r * i..(r + 1) * i];
                    *zr = b[r] + row.iter().zip(xin).map(|(a, c)| a * c).sum::<f64>();
                }
            }
            let act = self.activations[l];
            acts.push(z.iter().map(|&v| act.apply(v)).collect());
            pre.push(z);
        }
        Ok(MlpCache {
            revision: self.revision,
            batch,
            acts,
            pre,
        })
    }

    /// Reverse pass. Returns parameter gradients (summed over the batch, same
    /// layout as [`Mlp::params`]) and the per-row input gradients.
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.backward_tapped(cache, upstream, None)
    }

    /// Like [`Mlp::backward`], with an extra gradient `(layer, grad)` arriving
    /// at the activation output of an inner layer, for heads that branch off
    /// a hidden representation.
    pub fn backward_tapped(
        &self,
        cache: &MlpCache,
        upstream: &[f64],
        tap: Option<(usize, &[f64])>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if cache.revision != self.revision {
            return Err(Error::Contract(
                "mlp cache is stale: parameters changed after the forward pass".into(),
            ));
        }
        let batch = cache.batch;
        if upstream.len() != batch * self.output_dim() {
            return Err(Error::input("upstream gradient does not match mlp output"));
        }
        if let Some((l, g)) = tap {
            if l + 1 >= self.layer_count() || g.len() != batch * self.dims[l + 1] {
                return Err(Error::input("tap gradient does not match an inner layer"));
            }
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta_out = upstream.to_vec();
        for l in (0..self.layer_count()).rev() {
            if let Some((tl, g)) = tap {
                if tl == l {
                    delta_out.iter_mut().zip(g).for_each(|(d, t)| *d += t);
                }
            }
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let act = self.activations[l];
            let z = &cache.pre[l];
            let y = &cache.acts[l + 1];
            let dz: Vec<f64> = delta_out
                .iter()
                .zip(z.iter().zip(y))
                .map(|(d, (&z, &y))| d * act.derivative(z, y))
                .collect();
            let (wr, br) = self.layer_range(l);
            let w = &self.params[wr.clone()];
            let input = &cache.acts[l];
            let mut dx = vec![0.0; batch * i];
            for n in 0..batch {
                let xin = &input[n * i..(n + 1) * i];
                let dzn = &dz[n * o..(n + 1) * o];
                let dxn = &mut dx[n * i..(n + 1) * i];
                for r in 0..o {
                    let g = dzn[r];
                    if g == 0.0 {
                        continue;
                    }
                    grads[br.start + r] += g;
                    let gw = &mut grads[wr.start + r * i..wr.start + (r + 1) * i];
                    for (gwv, xv) in gw.iter_mut().zip(xin) {
                        *gwv += g * xv;
                    }
                    for (dxv, wv) in dxn.iter_mut().zip(&w[r * i..(r + 1) * i]) {
                        *dxv += g * wv;
                    }
                }
            }
            delta_out = dx;
        }
        Ok((grads, delta_out))
    }
}

/// Two-layer `c → h → c` network that reproduces its input exactly:
/// the hidden layer holds `[relu(x), relu(-x)]` and the output layer takes
/// their difference. Requires `h ≥ 2c`; spare hidden units get zero weights.
pub fn identity_student(c: usize, h: usize) -> Result<Mlp> {
    if h < 2 * c {
        return Err(Error::input(
            "identity student needs hidden width at least twice the feature dim",
        ));
    }
    let mut m = Mlp::zeros(&[c, h, c], &[Activation::Relu, Activation::Identity])?;
    let (w1, _) = m.layer_range(0);
    let (w2, _) = m.layer_range(1);
    let p = m.params_mut();
    for k in 0..c {
        p[w1.start + k * c + k] = 1.0;
        p[w1.start + (c + k) * c + k] = -1.0;
        p[w2.start + k * h + k] = 1.0;
        p[w2.start + k * h + c + k] = -1.0;
    }
    Ok(m)
}

/// Single identity layer reading the `[relu(x), relu(-x)]` hidden code.
pub fn identity_fid_head(c: usize, h: usize) -> Result<Mlp> {
    if h < 2 * c {
        return Err(Error::input(
            "fidelity head needs hidden width at least twice the feature dim",
        ));
    }
    let mut m = Mlp::zeros(&[h, c], &[Activation::Identity])?;
    let (w, _) = m.layer_range(0);
    let p = m.params_mut();
    for k in 0..c {
        p[w.start + k * h + k] = 1.0;
        p[w.start + k * h + c + k] = -1.0;
    }
    Ok(m)
}

/// Adds `N(0, std)` noise to every parameter.
pub fn perturb(mlp: &mut Mlp, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in mlp.params_mut() {
        *p += std * rng.sample::<f64, _>(StandardNormal);
    }
}

/// All learnable 2D heads plus the 3D keypoint head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Per-pixel student `C → H → C`.
    pub student2d: Mlp,
    /// Fidelity head `H → C` on the student's hidden layer.
    pub fid_head: Mlp,
    /// 2D keypoint head `C → H → 1`, sigmoid output.
    pub det2d: Mlp,
    /// 3D keypoint head `C → H → 1`, relu output.
    pub det3d: Mlp,
}

impl ModelParams {
    /// Student and fidelity head start at identity plus `init_noise`; the
    /// detectors start random.
    pub fn init(c: usize, h: usize, init_noise: f64, seed: u64) -> Result<Self> {
        let mut student2d = identity_student(c, h)?;
        let mut fid_head = identity_fid_head(c, h)?;
        if init_noise > 0.0 {
            perturb(&mut student2d, init_noise, seed ^ 0x11);
            perturb(&mut fid_head, init_noise, seed ^ 0x22);
        }
        let det2d = Mlp::random(&[c, h, 1], &[Activation::Relu, Activation::Sigmoid], seed ^ 0x33)?;
        let mut det3d = Mlp::random(&[c, h, 1], &[Activation::Relu, Activation::Relu], seed ^ 0x44)?;
        // A small positive output bias keeps the relu head alive at start.
        let (_, b) = det3d.layer_range(1);
        det3d.params_mut()[b.start] = 0.05;
        let p = ModelParams {
            student2d,
            fid_head,
            det2d,
            det3d,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.student2d.input_dim();
        let s = &self.student2d;
        let ok = s.layer_count() == 2
            && s.output_dim() == c
            && self.fid_head.input_dim() == s.dims()[1]
            && self.fid_head.output_dim() == c
            && self.det2d.input_dim() == c
            && self.det2d.output_dim() == 1
            && self.det3d.input_dim() == c
            && self.det3d.output_dim() == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::input("model heads disagree on feature dims"))
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.student2d.input_dim()
    }

    pub fn mlps(&self) -> [&Mlp; 4] {
        [&self.student2d, &self.fid_head, &self.det2d, &self.det3d]
    }

    pub fn mlps_mut(&mut self) -> [&mut Mlp; 4] {
        [
            &mut self.student2d,
            &mut self.fid_head,
            &mut self.det2d,
            &mut self.det3d,
        ]
    }
}

/// Everything the 2D branch produces for a batch of pixels, with the caches
/// needed to backpropagate.
#[derive(Clone, Debug)]
pub struct StudentPass {
    pub batch: usize,
    student: MlpCache,
    fid: MlpCache,
    det: MlpCache,
}

impl StudentPass {
    pub fn f2d(&self) -> &[f64] {
        self.student.output()
    }

    pub fn hidden(&self) -> &[f64] {
        self.student.layer_output(0)
    }

    pub fn fid(&self) -> &[f64] {
        self.fid.output()
    }

    pub fn p2d(&self) -> &[f64] {
        self.det.output()
    }

    /// Caches of the student, fidelity head and 2D detector.
    pub fn caches(&self) -> (&MlpCache, &MlpCache, &MlpCache) {
        (&self.student, &self.fid, &self.det)
    }
}

/// Gradients for the three 2D heads.
#[derive(Clone, Debug)]
pub struct StudentGrads {
    pub student2d: Vec<f64>,
    pub fid_head: Vec<f64>,
    pub det2d: Vec<f64>,
}

/// Runs student, fidelity head and 2D detector on `batch` teacher pixels.
pub fn student_pass(params: &ModelParams, teacher: &[f64], batch: usize) -> Result<StudentPass> {
    let student = params.student2d.forward_batch(teacher, batch)?;
    let fid = params.fid_head.forward_batch(student.layer_output(0), batch)?;
    let det = params.det2d.forward_batch(student.output(), batch)?;
    Ok(StudentPass {
        batch,
        student,
        fid,
        det,
    })
}

/// Backpropagates gradients on `F₂D`, `F_fid` and `P₂D` into the 2D heads.
/// `None` means a zero upstream for that output.
pub fn student_backward(
    params: &ModelParams,
    pass: &StudentPass,
    grad_f2d: Option<&[f64]>,
    grad_fid: Option<&[f64]>,
    grad_p2d: Option<&[f64]>,
) -> Result<StudentGrads> {
    let c = params.feature_dim();
    let h = params.student2d.dims()[1];
    let n = pass.batch;
    let zeros_c = vec![0.0; n * c];
    let (det_grads, det_dx) = match grad_p2d {
        Some(g) => params.det2d.backward(&pass.det, g)?,
        None => (vec![0.0; params.det2d.params().len()], zeros_c.clone()),
    };
    let (fid_grads, fid_dx) = match grad_fid {
        Some(g) => params.fid_head.backward(&pass.fid, g)?,
        None => (vec![0.0; params.fid_head.params().len()], vec![0.0; n * h]),
    };
    let mut up = grad_f2d.map_or(zeros_c, |g| g.to_vec());
    if up.len() != n * c {
        return Err(Error::input("F2D gradient does not match the batch"));
    }
    up.iter_mut().zip(&det_dx).for_each(|(u, d)| *u += d);
    let (student_grads, _) = params
        .student2d
        .backward_tapped(&pass.student, &up, Some((0, &fid_dx)))?;
    Ok(StudentGrads {
        student2d: student_grads,
        fid_head: fid_grads,
        det2d: det_grads,
    })
}

/// Full-image 2D branch outputs.
#[derive(Clone, Debug)]
pub struct StudentMaps {
    pub f2d: FeatureImage,
    pub hidden: FeatureImage,
    pub fid: FeatureImage,
    pub p2d: ProbImage,
}

pub fn student2d_forward(params: &ModelParams, teacher: &FeatureImage) -> Result<StudentMaps> {
    if teacher.channels != params.feature_dim() {
        return Err(Error::input("teacher map channels do not match the model feature dim"));
    }
    let (w, h) = (teacher.width, teacher.height);
    let pass = student_pass(params, &teacher.data, teacher.pixel_count())?;
    Ok(StudentMaps {
        f2d: FeatureImage::from_data(w, h, teacher.channels, pass.f2d().to_vec())?,
        hidden: FeatureImage::from_data(w, h, params.student2d.dims()[1], pass.hidden().to_vec())?,
        fid: FeatureImage::from_data(w, h, teacher.channels, pass.fid().to_vec())?,
        p2d: ProbImage {
            width: w,
            height: h,
            data: pass.p2d().to_vec(),
        },
    })
}

/// Evaluates the 3D keypoint head on every voxel. Returns the forward cache;
/// `kp_logits` receives the final pre-activation so that `relu(kp_logits)`
/// is the head output.
pub fn det3d_logits_to_grid(params: &ModelParams, grid: &mut FeatureGrid) -> Result<MlpCache> {
    if grid.channels() != params.det3d.input_dim() {
        return Err(Error::input("grid feature dim does not match the 3D keypoint head"));
    }
    let cache = params.det3d.forward_batch(&grid.features, grid.len())?;
    grid.kp_logits = cache.pre_activation(params.det3d.layer_count() - 1).to_vec();
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_forward(m: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for l in 0..m.layer_count() {
            let (i, o) = (m.dims()[l], m.dims()[l + 1]);
            let w = nalgebra::DMatrix::from_row_slice(o, i, m.weights(l));
            let b = nalgebra::DVector::from_column_slice(m.bias(l));
            let z = w * nalgebra::DVector::from_column_slice(&v) + b;
            v = z.iter().map(|&z| m.activations()[l].apply(z)).collect();
        }
        v
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut m = Mlp::zeros(&[3, 3], &[Activation::Identity]).unwrap();
        let (w, _) = m.layer_range(0);
        for k in 0..3 {
            m.params_mut()[w.start + 4 * k] = 1.0;
        }
        let (y, _) = m.forward(&[0.5, -2.0, 7.0]).unwrap();
        assert_eq!(y, vec![0.5, -2.0, 7.0]);
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let mut m = Mlp::zeros(&[2, 2], &[Activation::Relu]).unwrap();
        m.params_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0, -0.1, -0.1]);
        assert_eq!(m.forward(&[-1.0, -3.0]).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_matrix_oracle() {
        let m = Mlp::random(&[5, 7, 3], &[Activation::Relu, Activation::Sigmoid], 3).unwrap();
        let x = [0.3, -0.2, 0.9, 1.1, -0.7];
        let (y, _) = m.forward(&x).unwrap();
        for (a, b) in y.iter().zip(reference_forward(&m, &x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let m = Mlp::random(&[4, 2], &[Activation::Identity], 0).unwrap();
        assert!(matches!(m.forward(&[1.0; 3]), Err(Error::Input(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = Mlp::random(&[4, 6, 2], &[Activation::Relu, Activation::Identity], 1).unwrap();
        let (_, cache) = m.forward(&[0.1, 0.2, -0.3, 0.4]).unwrap();
        let (g, dx) = m.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.iter().chain(&dx).all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let m = Mlp::random(&[3, 2], &[Activation::Identity], 5).unwrap();
        let x = [1.5, -0.5, 2.0];
        let u = [0.25, -4.0];
        let (_, cache) = m.forward(&x).unwrap();
        let (g, _) = m.backward(&cache, &u).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(g[r * 3 + c], u[r] * x[c]);
            }
            assert_eq!(g[6 + r], u[r]);
        }
    }

    #[test]
    fn stale_cache_is_contract_violation() {
        let mut m = Mlp::random(&[2, 2], &[Activation::Identity], 5).unwrap();
        let (_, cache) = m.forward(&[1.0, 2.0]).unwrap();
        m.params_mut()[0] += 1.0;
        assert!(matches!(m.backward(&cache, &[1.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_student_reproduces_teacher() {
        let p = ModelParams::init(4, 10, 0.0, 0).unwrap();
        let t = FeatureImage::from_data(3, 2, 4, (0..24).map(|v| (v as f64 - 11.0) * 0.17).collect()).unwrap();
        let out = student2d_forward(&p, &t).unwrap();
        assert_eq!(out.f2d, t);
        assert_eq!(out.fid, t);
        assert!(out.p2d.data.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn det3d_logits_match_loop() {
        let p = ModelParams::init(3, 6, 1e-3, 2).unwrap();
        let occ = crate::grid::Occupancy::new(4, vec![[0, 0, 0], [1, 2, 3], [3, 3, 3]]).unwrap();
        let mut g = FeatureGrid::from_parts(
            4,
            3,
            occ.coords().to_vec(),
            vec![1.0; 3],
            vec![0.1, -0.4, 0.9, 1.0, 0.2, -0.3, -0.8, 0.5, 0.05],
            vec![0.0; 3],
        )
        .unwrap();
        det3d_logits_to_grid(&p, &mut g).unwrap();
        for s in 0..3 {
            let (y, _) = p.det3d.forward(g.feature(s)).unwrap();
            assert!((g.kp_logits[s].max(0.0) - y[0]).abs() < 1e-12);
        }
    }
}
