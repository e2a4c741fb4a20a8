//! Optimizer, staged training loops and the gradient-check harness.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{project, Camera, Vec3};
use crate::grid::{
    axis_directions, sample_grid, sparse_conv3, sparse_conv3_backward, ConvKernel, FeatureGrid, SampledGrid,
};
use crate::image::{FeatureImage, ProbImage};
use crate::losses::{combine, masked_sq_loss, LossParts, LossTerm, LossWeights, Stage};
use crate::model::{det3d_logits_to_grid, student_backward, student_pass, Mlp, MlpCache, ModelParams};
use crate::oracle::{render_teacher_feature_map, teacher_keypoint_heatmap, CorpusEntry, OracleScene, TeacherNoise};
use crate::render::{compile_camera, RayFootprint};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the learning rate ramps linearly from zero.
    pub warmup_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3.3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
            warmup_steps: 0,
        }
    }
}

impl OptimConfig {
    pub fn with_lr(lr: f64) -> Self {
        OptimConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer settings out of range".into()))
        }
    }
}

/// Adaptive-moment state for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimState {
    pub fn new(config: OptimConfig, len: usize) -> Self {
        OptimState {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn learning_rate(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 {
            self.config.lr
        } else {
            self.config.lr * (self.step as f64 / w as f64).min(1.0)
        }
    }
}

/// One AdamW step with bias correction and decoupled weight decay.
pub fn optimizer_step(state: &mut OptimState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::input("optimizer shapes do not match"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient {} at index {i} (step {})",
            grads[i], state.step
        )));
    }
    state.step += 1;
    let c = state.config;
    let lr = state.learning_rate();
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        *p -= lr * (update + c.weight_decay * *p);
    }
    Ok(())
}

/// Independently optimized parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Student2d,
    FidHead,
    Det2d,
    Det3d,
    /// Per-scene grid features (or the conv head producing them).
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: Stage,
    pub steps: usize,
    pub trainable: Vec<ParamGroup>,
}

/// Ordered stages with step counts and trainable sets; everything else is
/// frozen for the stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn new(steps: StageSteps) -> Self {
        use ParamGroup::*;
        StagePlan {
            stages: vec![
                StageSpec {
                    stage: Stage::A,
                    steps: steps.a,
                    trainable: vec![Student2d, FidHead],
                },
                StageSpec {
                    stage: Stage::B,
                    steps: steps.b,
                    trainable: vec![Det2d],
                },
                StageSpec {
                    stage: Stage::C,
                    steps: steps.c,
                    trainable: vec![Grid],
                },
                StageSpec {
                    stage: Stage::D,
                    steps: steps.d,
                    trainable: vec![Student2d, FidHead, Det2d, Det3d, Grid],
                },
            ],
        }
    }

    pub fn steps(&self, stage: Stage) -> usize {
        self.stages.iter().filter(|s| s.stage == stage).map(|s| s.steps).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSteps {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
}

impl Default for StageSteps {
    fn default() -> Self {
        StageSteps {
            a: 0,
            b: 300,
            c: 600,
            d: 600,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Grid features are free parameters.
    Direct,
    /// Grid features come from two sparse convolutions over the sampled
    /// density and colors.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: StageSteps,
    /// Rays per step; 0 uses every pixel of every view.
    pub batch_rays: usize,
    pub samples_per_ray: usize,
    pub weights: LossWeights,
    pub optim_grid: OptimConfig,
    pub optim_2d: OptimConfig,
    /// Fidelity head; it has to keep pace with the student.
    pub optim_fid: OptimConfig,
    pub optim_det3d: OptimConfig,
    /// Multiplies every learning rate during the joint stage.
    pub joint_lr_scale: f64,
    pub feature_mode: FeatureMode,
    pub conv_hidden: usize,
    pub hidden_dim: usize,
    pub init_noise: f64,
    pub log_every: usize,
    /// Fan stage C out over scenes on worker threads.
    pub parallel_scenes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: StageSteps::default(),
            batch_rays: 1024,
            samples_per_ray: 64,
            weights: LossWeights::default(),
            optim_grid: OptimConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            optim_2d: OptimConfig {
                lr: 2e-3,
                weight_decay: 0.0,
                ..Default::default()
            },
            optim_fid: OptimConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..Default::default()
            },
            optim_det3d: OptimConfig {
                lr: 5e-3,
                weight_decay: 0.0,
                ..Default::default()
            },
            joint_lr_scale: 1.0,
            feature_mode: FeatureMode::Direct,
            conv_hidden: 16,
            hidden_dim: 32,
            init_noise: 1e-3,
            log_every: 10,
            parallel_scenes: false,
        }
    }
}

impl TrainConfig {
    /// Settings for many scenes sharing one 2D model. The shared heads see
    /// one update per step while each grid sees one per round, so the joint
    /// stage runs at a tenth of the rates. Grid updates use a large Adam eps,
    /// which damps voxels that barely reach any pixel, and weight decay, which
    /// keeps them from absorbing per-view teacher bias.
    pub fn corpus() -> Self {
        let d = TrainConfig::default();
        TrainConfig {
            steps: StageSteps {
                a: 0,
                b: 300,
                c: 300,
                d: 100,
            },
            batch_rays: 512,
            optim_grid: OptimConfig {
                eps: 1e-4,
                weight_decay: 1.0,
                ..d.optim_grid
            },
            joint_lr_scale: 0.1,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray == 0 || self.hidden_dim == 0 || self.conv_hidden == 0 {
            return Err(Error::Config(
                "samples per ray and hidden widths must be positive".into(),
            ));
        }
        if !(self.joint_lr_scale > 0.0 && self.joint_lr_scale.is_finite()) {
            return Err(Error::Config("joint learning-rate scale must be positive".into()));
        }
        if !(self.init_noise >= 0.0) {
            return Err(Error::Config("init noise must be nonnegative".into()));
        }
        self.weights.validate()?;
        self.optim_grid.validate()?;
        self.optim_2d.validate()?;
        self.optim_fid.validate()?;
        self.optim_det3d.validate()
    }

    pub fn plan(&self) -> StagePlan {
        StagePlan::new(self.steps)
    }
}

/// How the lattice and teachers are built for a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSetup {
    pub resolution: usize,
    pub theta: f64,
    pub feature_dim: usize,
    pub teacher_noise: TeacherNoise,
    /// Samples per ray for the teacher renders.
    pub teacher_samples: usize,
}

impl Default for SceneSetup {
    fn default() -> Self {
        SceneSetup {
            resolution: 32,
            theta: 0.01,
            feature_dim: 16,
            teacher_noise: TeacherNoise {
                iid_sigma: 0.1,
                view_bias_sigma: 0.1,
            },
            teacher_samples: 64,
        }
    }
}

impl SceneSetup {
    pub fn validate(&self) -> Result<()> {
        if !(2..=1024).contains(&self.resolution) || !(0.0..1.0).contains(&self.theta) {
            return Err(Error::Config(
                "grid resolution must be in [2, 1024] and theta in [0, 1)".into(),
            ));
        }
        if self.feature_dim == 0 || self.teacher_samples == 0 {
            return Err(Error::Config("feature dim and teacher samples must be positive".into()));
        }
        self.teacher_noise.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Fixed per-view training inputs.
#[derive(Clone, Debug)]
pub struct ViewData {
    pub camera: Camera,
    pub teacher: FeatureImage,
    pub heatmap: ProbImage,
    /// Compiled pixel rays; `None` outside the ray mask.
    pub footprints: Vec<Option<RayFootprint>>,
}

/// Everything fixed about one scene during training.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub id: String,
    pub views: Vec<ViewData>,
    pub sampled: SampledGrid,
}

impl SceneData {
    pub fn pixel_total(&self) -> usize {
        self.views.iter().map(|v| v.teacher.pixel_count()).sum()
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (vi, v) in self.views.iter().enumerate() {
            let n = v.teacher.pixel_count();
            if flat < n {
                return (vi, flat);
            }
            flat -= n;
        }
        unreachable!("pixel index past the last view")
    }
}

/// Seed of the teacher noise for view `view` of scene `scene`.
pub fn teacher_seed(seed: u64, scene: usize, view: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ ((scene as u64) << 20) ^ view as u64 ^ 0x7e4c
}

/// Samples the lattice, renders teachers and compiles the pixel rays.
pub fn prepare_scene(
    id: &str,
    scene: &OracleScene,
    cameras: &[Camera],
    setup: &SceneSetup,
    samples_per_ray: usize,
    noise_seed: impl Fn(usize) -> u64,
) -> Result<(SceneData, FeatureGrid)> {
    setup.validate()?;
    if scene.feature_dim != setup.feature_dim {
        return Err(Error::Config(
            "scene feature dim differs from the configured feature dim".into(),
        ));
    }
    let sampled = sample_grid(scene, setup.resolution, &axis_directions(), setup.theta)?;
    let grid = FeatureGrid::from_sampled(&sampled, setup.feature_dim);
    let mut views = Vec::with_capacity(cameras.len());
    for (v, cam) in cameras.iter().enumerate() {
        views.push(ViewData {
            camera: *cam,
            teacher: render_teacher_feature_map(
                scene,
                cam,
                &setup.teacher_noise,
                noise_seed(v),
                setup.teacher_samples,
            )?,
            heatmap: teacher_keypoint_heatmap(scene, cam),
            footprints: compile_camera(&grid, cam, samples_per_ray)?,
        });
    }
    Ok((
        SceneData {
            id: id.to_string(),
            views,
            sampled,
        },
        grid,
    ))
}

/// Two sparse convolutions `embedding → hidden → features` with a relu.
#[derive(Clone, Debug)]
pub struct ConvHead {
    pub embedding: Vec<f64>,
    pub k1: ConvKernel,
    pub k2: ConvKernel,
}

impl ConvHead {
    pub fn new(sampled: &SampledGrid, hidden: usize, out: usize, seed: u64) -> Result<Self> {
        let (embedding, cin) = sampled.input_embedding();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut k1 = ConvKernel::zeros(3, cin, hidden)?;
        let mut k2 = ConvKernel::zeros(3, hidden, out)?;
        let s1 = 1.0 / ((27 * cin) as f64).sqrt();
        let s2 = 1.0 / ((27 * hidden) as f64).sqrt();
        k1.weights
            .iter_mut()
            .for_each(|w| *w = s1 * rng.random_range(-1.0..1.0));
        k2.weights
            .iter_mut()
            .for_each(|w| *w = s2 * rng.random_range(-1.0..1.0));
        Ok(ConvHead { embedding, k1, k2 })
    }

    fn forward(&self, grid: &FeatureGrid) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut hidden = sparse_conv3(grid.occupancy(), &self.embedding, &self.k1)?;
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let out = sparse_conv3(grid.occupancy(), &hidden, &self.k2)?;
        Ok((hidden, out))
    }

    /// Gradients `[k1.w, k1.b, k2.w, k2.b]` for an upstream on the features.
    fn backward(&self, grid: &FeatureGrid, hidden: &[f64], upstream: &[f64]) -> Result<[Vec<f64>; 4]> {
        let g2 = sparse_conv3_backward(grid.occupancy(), hidden, &self.k2, upstream)?;
        let dh: Vec<f64> = g2
            .input
            .iter()
            .zip(hidden)
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        let g1 = sparse_conv3_backward(grid.occupancy(), &self.embedding, &self.k1, &dh)?;
        Ok([g1.weights, g1.bias, g2.weights, g2.bias])
    }
}

/// Trainable per-scene state.
#[derive(Clone, Debug)]
pub struct SceneState {
    pub grid: FeatureGrid,
    pub conv: Option<ConvHead>,
    optim: Vec<OptimState>,
}

impl SceneState {
    pub fn new(grid: FeatureGrid, conv: Option<ConvHead>, config: OptimConfig) -> Result<Self> {
        let mut s = SceneState {
            optim: Vec::new(),
            grid,
            conv,
        };
        s.optim = match &s.conv {
            None => vec![OptimState::new(config, s.grid.features.len())],
            Some(h) => [h.k1.weights.len(), h.k1.bias.len(), h.k2.weights.len(), h.k2.bias.len()]
                .iter()
                .map(|&n| OptimState::new(config, n))
                .collect(),
        };
        s.refresh()?;
        Ok(s)
    }

    /// Recomputes conv-mode features from the kernels.
    fn refresh(&mut self) -> Result<Option<Vec<f64>>> {
        let Some(h) = &self.conv else {
            return Ok(None);
        };
        let (hidden, out) = h.forward(&self.grid)?;
        self.grid.features = out;
        Ok(Some(hidden))
    }

    fn apply(&mut self, feature_grads: &[f64], hidden: Option<&[f64]>) -> Result<()> {
        match &mut self.conv {
            None => optimizer_step(&mut self.optim[0], &mut self.grid.features, feature_grads),
            Some(head) => {
                let grads = head.backward(&self.grid, hidden.expect("conv forward ran"), feature_grads)?;
                let tensors = [
                    &mut head.k1.weights,
                    &mut head.k1.bias,
                    &mut head.k2.weights,
                    &mut head.k2.bias,
                ];
                for ((state, p), g) in self.optim.iter_mut().zip(tensors).zip(&grads) {
                    optimizer_step(state, p, g)?;
                }
                Ok(())
            }
        }
    }
}

/// Optimizer states for the shared heads.
#[derive(Clone, Debug)]
pub struct ModelOptim {
    pub student2d: OptimState,
    pub fid_head: OptimState,
    pub det2d: OptimState,
    pub det3d: OptimState,
}

impl ModelOptim {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        ModelOptim {
            student2d: OptimState::new(config.optim_2d, params.student2d.params().len()),
            fid_head: OptimState::new(config.optim_fid, params.fid_head.params().len()),
            det2d: OptimState::new(config.optim_2d, params.det2d.params().len()),
            det3d: OptimState::new(config.optim_det3d, params.det3d.params().len()),
        }
    }
}

/// Gradients of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGrads {
    pub student2d: Vec<f64>,
    pub fid_head: Vec<f64>,
    pub det2d: Vec<f64>,
    pub det3d: Vec<f64>,
    pub features: Vec<f64>,
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub l2d3d: f64,
    pub fid: f64,
    pub p: f64,
}

#[derive(Clone, Debug)]
pub struct StepEval {
    pub loss: StepLoss,
    pub grads: StepGrads,
    /// Relu activation patterns of every cache involved, for kink detection.
    pub relu_signature: Vec<bool>,
}

/// Loss and gradients for a set of `(view, pixel)` rays of one scene.
///
/// Stage B fits `P₂D` to the teacher heatmaps (reported as `p`); every
/// other stage uses the scheduled consensus objective with `lambdas`.
pub fn evaluate_step(
    scene: &SceneData,
    grid: &FeatureGrid,
    params: &ModelParams,
    stage: Stage,
    lambdas: crate::losses::Lambdas,
    rays: &[(usize, usize)],
) -> Result<StepEval> {
    let c = params.feature_dim();
    if grid.channels() != c {
        return Err(Error::input("grid channels do not match the model feature dim"));
    }
    let n = rays.len();
    let mut teacher = Vec::with_capacity(n * c);
    let mut mask = Vec::with_capacity(n);
    for &(v, p) in rays {
        teacher.extend_from_slice(scene.views[v].teacher.pixel(p));
        mask.push(scene.views[v].footprints[p].is_some());
    }
    let pass = student_pass(params, &teacher, n)?;
    let mut signature = relu_pattern(&params.student2d, pass_cache_student(&pass));
    let mut grads = StepGrads {
        student2d: vec![0.0; params.student2d.params().len()],
        fid_head: vec![0.0; params.fid_head.params().len()],
        det2d: vec![0.0; params.det2d.params().len()],
        det3d: vec![0.0; params.det3d.params().len()],
        features: vec![0.0; grid.features.len()],
    };

    if stage == Stage::B {
        let target: Vec<f64> = rays.iter().map(|&(v, p)| scene.views[v].heatmap.data[p]).collect();
        let term = masked_sq_loss(pass.p2d(), &target, 1, None)?;
        let sg = student_backward(params, &pass, None, None, Some(&term.grad_a))?;
        grads.det2d = sg.det2d;
        signature.extend(relu_pattern(&params.det2d, pass_cache_det(&pass)));
        return Ok(StepEval {
            loss: StepLoss {
                total: term.value,
                l2d3d: 0.0,
                fid: 0.0,
                p: term.value,
            },
            grads,
            relu_signature: signature,
        });
    }

    let mut f3d = vec![0.0; n * c];
    for (k, &(v, p)) in rays.iter().enumerate() {
        if let Some(fp) = &scene.views[v].footprints[p] {
            fp.apply(&grid.features, c, &mut f3d[k * c..(k + 1) * c]);
        }
    }
    let l2d3d = if lambdas.l2d3d > 0.0 {
        masked_sq_loss(pass.f2d(), &f3d, c, Some(&mask))?
    } else {
        LossTerm::zero(n * c)
    };
    // Stage D reports every raw term, including during the warm-up.
    let report = stage == Stage::D;
    let fid = if lambdas.fid > 0.0 || report {
        masked_sq_loss(pass.fid(), &teacher, c, None)?
    } else {
        LossTerm::zero(n * c)
    };
    let mut det3d_cache = None;
    let p = if lambdas.p > 0.0 || report {
        let mut g = grid.clone();
        let cache = det3d_logits_to_grid(params, &mut g)?;
        let prob = g.kp_prob();
        let p3d: Vec<f64> = rays
            .iter()
            .map(|&(v, p)| {
                scene.views[v].footprints[p]
                    .as_ref()
                    .map_or(0.0, |fp| fp.apply_scalar(&prob))
            })
            .collect();
        det3d_cache = Some(cache);
        masked_sq_loss(pass.p2d(), &p3d, 1, Some(&mask))?
    } else {
        LossTerm::zero(n)
    };
    let total = combine(LossParts { l2d3d, fid, p }, lambdas);
    let w = &total.weighted;

    let active = |t: &LossTerm, lambda: f64| lambda > 0.0 && !t.is_empty();
    let sg = student_backward(
        params,
        &pass,
        active(&w.l2d3d, lambdas.l2d3d).then_some(&w.l2d3d.grad_a[..]),
        active(&w.fid, lambdas.fid).then_some(&w.fid.grad_a[..]),
        active(&w.p, lambdas.p).then_some(&w.p.grad_a[..]),
    )?;
    grads.student2d = sg.student2d;
    grads.fid_head = sg.fid_head;
    grads.det2d = sg.det2d;

    for (k, &(v, p)) in rays.iter().enumerate() {
        if let Some(fp) = &scene.views[v].footprints[p] {
            fp.scatter(&w.l2d3d.grad_b[k * c..(k + 1) * c], &mut grads.features);
        }
    }
    signature.extend(relu_pattern(&params.det2d, pass_cache_det(&pass)));
    if let Some(cache) = det3d_cache {
        let mut prob_grad = vec![0.0; grid.len()];
        for (k, &(v, p)) in rays.iter().enumerate() {
            if let Some(fp) = &scene.views[v].footprints[p] {
                fp.scatter_scalar(w.p.grad_b[k], &mut prob_grad);
            }
        }
        let (g3, gf) = params.det3d.backward(&cache, &prob_grad)?;
        grads.det3d = g3;
        grads.features.iter_mut().zip(&gf).for_each(|(a, b)| *a += b);
        signature.extend(relu_pattern(&params.det3d, &cache));
    }
    Ok(StepEval {
        loss: StepLoss {
            total: total.value,
            l2d3d: total.raw[0],
            fid: total.raw[1],
            p: total.raw[2],
        },
        grads,
        relu_signature: signature,
    })
}

fn pass_cache_student(pass: &crate::model::StudentPass) -> &MlpCache {
    pass.caches().0
}

fn pass_cache_det(pass: &crate::model::StudentPass) -> &MlpCache {
    pass.caches().2
}

/// Sign pattern of every relu pre-activation in `cache`.
pub fn relu_pattern(mlp: &Mlp, cache: &MlpCache) -> Vec<bool> {
    let mut out = Vec::new();
    for (l, act) in mlp.activations().iter().enumerate() {
        if *act == crate::model::Activation::Relu {
            out.extend(cache.pre_activation(l).iter().map(|z| *z > 0.0));
        }
    }
    out
}

/// One CSV training-log row.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub stage: Stage,
    pub step: usize,
    pub loss: StepLoss,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "stage,step,loss_total,loss_2d3d,loss_fid,loss_p";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e}",
                r.stage.name(),
                r.step,
                r.loss.total,
                r.loss.l2d3d,
                r.loss.fid,
                r.loss.p
            );
        }
        s
    }

    pub fn stage_rows(&self, stage: Stage) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }
}

/// Result of training a corpus: one grid per scene and the shared heads.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub grids: Vec<FeatureGrid>,
    pub params: ModelParams,
    pub log: TrainingLog,
}

fn stage_rng(seed: u64, stage: Stage, scene: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((stage as u64 + 1) << 56) ^ ((scene as u64) << 24) ^ 0xb47c)
}

fn draw_rays(scene: &SceneData, batch: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let total = scene.pixel_total();
    if batch == 0 || batch >= total {
        return (0..total).map(|i| scene.locate(i)).collect();
    }
    let mut idx = sample(rng, total, batch).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| scene.locate(i)).collect()
}

fn check_divergence(loss: &StepLoss, scene: &SceneData, stage: Stage, step: usize) -> Result<()> {
    if !(loss.total <= DIVERGENCE_LIMIT) {
        return Err(Error::Numeric(format!(
            "training diverged in stage {} at step {step}: loss {}",
            stage.name(),
            loss.total
        ))
        .in_scene(&scene.id));
    }
    Ok(())
}

fn apply_model(
    params: &mut ModelParams,
    optim: &mut ModelOptim,
    grads: &StepGrads,
    trainable: &[ParamGroup],
) -> Result<()> {
    use ParamGroup::*;
    if trainable.contains(&Student2d) {
        optimizer_step(&mut optim.student2d, params.student2d.params_mut(), &grads.student2d)?;
    }
    if trainable.contains(&FidHead) {
        optimizer_step(&mut optim.fid_head, params.fid_head.params_mut(), &grads.fid_head)?;
    }
    if trainable.contains(&Det2d) {
        optimizer_step(&mut optim.det2d, params.det2d.params_mut(), &grads.det2d)?;
    }
    if trainable.contains(&Det3d) {
        optimizer_step(&mut optim.det3d, params.det3d.params_mut(), &grads.det3d)?;
    }
    Ok(())
}

struct Trainer<'a> {
    scenes: &'a [SceneData],
    config: &'a TrainConfig,
    seed: u64,
    log: TrainingLog,
}

impl Trainer<'_> {
    fn record(&mut self, stage: Stage, step: usize, last: bool, loss: StepLoss) {
        let every = self.config.log_every.max(1);
        if step.is_multiple_of(every) || last {
            self.log.rows.push(LogRow { stage, step, loss });
        }
    }

    /// Stages that only touch shared 2D heads; scenes are visited round-robin.
    fn shared_2d_stage(&mut self, spec: &StageSpec, params: &mut ModelParams, optim: &mut ModelOptim) -> Result<()> {
        let mut rngs: Vec<_> = (0..self.scenes.len())
            .map(|s| stage_rng(self.seed, spec.stage, s))
            .collect();
        let n_steps = spec.steps;
        for step in 0..n_steps {
            let si = step % self.scenes.len();
            let scene = &self.scenes[si];
            let rays = draw_rays(scene, self.config.batch_rays, &mut rngs[si]);
            let lambdas = self.config.weights.resolve(spec.stage, step, n_steps);
            // Grid contents do not matter for these stages.
            let grid_stub = FeatureGrid::from_sampled(&scene.sampled, params.feature_dim());
            let eval = evaluate_step(scene, &grid_stub, params, spec.stage, lambdas, &rays)?;
            check_divergence(&eval.loss, scene, spec.stage, step)?;
            self.record(spec.stage, step, step + 1 == n_steps, eval.loss);
            apply_model(params, optim, &eval.grads, &spec.trainable)?;
        }
        Ok(())
    }
}

/// Stage C for one scene: grid features only, 2D heads frozen.
fn distill_scene(
    scene: &SceneData,
    state: &mut SceneState,
    params: &ModelParams,
    spec: &StageSpec,
    config: &TrainConfig,
    seed: u64,
    scene_index: usize,
) -> Result<Vec<LogRow>> {
    let mut rng = stage_rng(seed, spec.stage, scene_index);
    let mut rows = Vec::new();
    let every = config.log_every.max(1);
    for step in 0..spec.steps {
        let hidden = state.refresh()?;
        let rays = draw_rays(scene, config.batch_rays, &mut rng);
        let lambdas = config.weights.resolve(spec.stage, step, spec.steps);
        let eval = evaluate_step(scene, &state.grid, params, spec.stage, lambdas, &rays)?;
        check_divergence(&eval.loss, scene, spec.stage, step)?;
        if step % every == 0 || step + 1 == spec.steps {
            rows.push(LogRow {
                stage: spec.stage,
                step,
                loss: eval.loss,
            });
        }
        if spec.trainable.contains(&ParamGroup::Grid) {
            state.apply(&eval.grads.features, hidden.as_deref())?;
        }
    }
    state.refresh()?;
    Ok(rows)
}

/// Runs every stage of `plan` over prepared scenes. Grids are per scene; the
/// 2D heads and the 3D keypoint head are shared. Stage C treats scenes
/// independently; stage D visits scenes round-robin, `steps` per scene.
pub fn train_prepared(
    scenes: &[SceneData],
    grids: Vec<FeatureGrid>,
    mut params: ModelParams,
    plan: &StagePlan,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if scenes.is_empty() || scenes.len() != grids.len() {
        return Err(Error::input("need one grid per scene and at least one scene"));
    }
    params.validate()?;
    let mut optim = ModelOptim::new(&params, config);
    let mut states = Vec::with_capacity(scenes.len());
    for (i, (scene, grid)) in scenes.iter().zip(grids).enumerate() {
        let conv = match config.feature_mode {
            FeatureMode::Direct => None,
            FeatureMode::Conv => Some(ConvHead::new(
                &scene.sampled,
                config.conv_hidden,
                params.feature_dim(),
                seed ^ (i as u64) << 8 ^ 0xc0,
            )?),
        };
        states.push(SceneState::new(grid, conv, config.optim_grid).map_err(|e| e.in_scene(&scene.id))?);
    }
    let mut trainer = Trainer {
        scenes,
        config,
        seed,
        log: TrainingLog::default(),
    };
    for spec in &plan.stages {
        if spec.steps == 0 {
            continue;
        }
        match spec.stage {
            Stage::A | Stage::B => trainer.shared_2d_stage(spec, &mut params, &mut optim)?,
            Stage::C => {
                let results: Vec<Result<Vec<LogRow>>> = if config.parallel_scenes && scenes.len() > 1 {
                    let p = &params;
                    std::thread::scope(|s| {
                        let handles: Vec<_> = states
                            .iter_mut()
                            .zip(scenes)
                            .enumerate()
                            .map(|(i, (st, sc))| s.spawn(move || distill_scene(sc, st, p, spec, config, seed, i)))
                            .collect();
                        handles
                            .into_iter()
                            .map(|h| {
                                h.join()
                                    .unwrap_or_else(|_| Err(Error::Numeric("worker panicked".into())))
                            })
                            .collect()
                    })
                } else {
                    states
                        .iter_mut()
                        .zip(scenes)
                        .enumerate()
                        .map(|(i, (st, sc))| distill_scene(sc, st, &params, spec, config, seed, i))
                        .collect()
                };
                // Per-scene curves are logged as the mean over scenes.
                let mut merged: Vec<LogRow> = Vec::new();
                for (i, r) in results.into_iter().enumerate() {
                    let rows = r.map_err(|e| match e {
                        Error::Scene { .. } => e,
                        other => other.in_scene(&scenes[i].id),
                    })?;
                    if merged.is_empty() {
                        merged = rows;
                    } else {
                        for (m, r) in merged.iter_mut().zip(rows) {
                            m.loss.total += r.loss.total;
                            m.loss.l2d3d += r.loss.l2d3d;
                            m.loss.fid += r.loss.fid;
                            m.loss.p += r.loss.p;
                        }
                    }
                }
                let k = scenes.len() as f64;
                for m in &mut merged {
                    m.loss.total /= k;
                    m.loss.l2d3d /= k;
                    m.loss.fid /= k;
                    m.loss.p /= k;
                }
                trainer.log.rows.extend(merged);
            }
            Stage::D => {
                let k = config.joint_lr_scale;
                for o in [
                    &mut optim.student2d,
                    &mut optim.fid_head,
                    &mut optim.det2d,
                    &mut optim.det3d,
                ] {
                    o.config.lr *= k;
                }
                for st in &mut states {
                    st.optim.iter_mut().for_each(|o| o.config.lr *= k);
                }
                let mut rngs: Vec<_> = (0..scenes.len()).map(|s| stage_rng(seed, Stage::D, s)).collect();
                let total = spec.steps * scenes.len();
                for step in 0..total {
                    let si = step % scenes.len();
                    let scene = &scenes[si];
                    let state = &mut states[si];
                    let hidden = state.refresh()?;
                    let rays = draw_rays(scene, config.batch_rays, &mut rngs[si]);
                    let lambdas = config.weights.resolve(Stage::D, step / scenes.len(), spec.steps);
                    let eval = evaluate_step(scene, &state.grid, &params, Stage::D, lambdas, &rays)
                        .map_err(|e| e.in_scene(&scene.id))?;
                    check_divergence(&eval.loss, scene, Stage::D, step)?;
                    trainer.record(Stage::D, step, step + 1 == total, eval.loss);
                    apply_model(&mut params, &mut optim, &eval.grads, &spec.trainable)?;
                    if spec.trainable.contains(&ParamGroup::Grid) {
                        state.apply(&eval.grads.features, hidden.as_deref())?;
                    }
                }
                for st in &mut states {
                    st.refresh()?;
                }
            }
        }
    }
    let mut grids = Vec::with_capacity(states.len());
    for st in states {
        let mut g = st.grid;
        det3d_logits_to_grid(&params, &mut g)?;
        grids.push(g);
    }
    Ok(TrainOutcome {
        grids,
        params,
        log: trainer.log,
    })
}

/// Prepares the corpus scenes (grids, teachers, rays) with the configured
/// seeds.
pub fn prepare_corpus(
    corpus: &[CorpusEntry],
    setup: &SceneSetup,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Vec<SceneData>, Vec<FeatureGrid>)> {
    let mut scenes = Vec::with_capacity(corpus.len());
    let mut grids = Vec::with_capacity(corpus.len());
    for (i, entry) in corpus.iter().enumerate() {
        let id = scene_id(i);
        let run = || {
            let scene = entry.scene()?;
            prepare_scene(&id, &scene, &entry.cameras, setup, config.samples_per_ray, |v| {
                teacher_seed(seed, i, v)
            })
        };
        let (data, grid) = run().map_err(|e| e.in_scene(&id))?;
        scenes.push(data);
        grids.push(grid);
    }
    Ok((scenes, grids))
}

/// Canonical id of corpus entry `i`.
pub fn scene_id(i: usize) -> String {
    format!("scene-{i:04}")
}

pub fn train_corpus(
    corpus: &[CorpusEntry],
    setup: &SceneSetup,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::input("corpus is empty"));
    }
    let (scenes, grids) = prepare_corpus(corpus, setup, config, seed)?;
    let params = ModelParams::init(setup.feature_dim, config.hidden_dim, config.init_noise, seed)?;
    train_prepared(&scenes, grids, params, &config.plan(), config, seed)
}

/// Trains one scene from scratch; identical to a one-scene corpus.
pub fn train_scene(
    scene: &SceneData,
    grid: FeatureGrid,
    params: ModelParams,
    plan: &StagePlan,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_prepared(std::slice::from_ref(scene), vec![grid], params, plan, config, seed)
}

/// Mean over tracks of the summed per-channel variance across views.
/// A track lists `(view, pixel)` observations of one 3D point; tracks with
/// fewer than two observations are skipped.
pub fn cross_view_variance(maps: &[&FeatureImage], tracks: &[Vec<(usize, usize)>]) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for t in tracks.iter().filter(|t| t.len() >= 2) {
        let c = maps[t[0].0].channels;
        let mut mean = vec![0.0; c];
        for &(v, p) in t {
            if v >= maps.len() || p >= maps[v].pixel_count() {
                return Err(Error::input("track observation outside the maps"));
            }
            mean.iter_mut().zip(maps[v].pixel(p)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= t.len() as f64);
        let var: f64 = t
            .iter()
            .map(|&(v, p)| {
                maps[v]
                    .pixel(p)
                    .iter()
                    .zip(&mean)
                    .map(|(x, m)| (x - m).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / t.len() as f64;
        total += var;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Insufficient("no track is seen by two views".into()));
    }
    Ok(total / used as f64)
}

/// Tracks of points on the blobs' surfaces (where the density falls to
/// `surface_fraction` of the peak). A point is observed by a view when it
/// projects inside the image, faces the camera (`|n·d| ≥ min_facing`), and
/// the transmittance in front of it exceeds one half.
pub fn surface_tracks(
    scene: &OracleScene,
    cameras: &[Camera],
    count: usize,
    min_views: usize,
    seed: u64,
) -> Vec<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracks = Vec::new();
    let surface_fraction: f64 = 0.5;
    let min_facing = 0.5;
    for _ in 0..count * 200 {
        if tracks.len() >= count || scene.blobs.is_empty() {
            break;
        }
        let b = &scene.blobs[rng.random_range(0..scene.blobs.len())];
        let n = loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 1e-3 && v.norm() <= 1.0 {
                break v.normalize();
            }
        };
        let s = 0.5 * b.radius;
        let r = s * (-2.0 * surface_fraction.ln()).sqrt();
        let x = b.center + n * r;
        let mut obs = Vec::new();
        for (vi, cam) in cameras.iter().enumerate() {
            let Ok((px, _)) = project(cam, &x) else {
                continue;
            };
            if !(px[0] >= 0.0 && px[1] >= 0.0 && px[0] < cam.width as f64 && px[1] < cam.height as f64) {
                continue;
            }
            let d = (x - cam.translation).normalize();
            if n.dot(&-d) < min_facing {
                continue;
            }
            if scene.transmittance_to(&cam.translation, &x, 256) <= 0.5 {
                continue;
            }
            obs.push((vi, px[1] as usize * cam.width as usize + px[0] as usize));
        }
        if obs.len() >= min_views.max(2) {
            tracks.push(obs);
        }
    }
    tracks
}

/// Per-component outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub component: String,
    pub checked: usize,
    /// Coordinates skipped because a relu changed state within `±h`.
    pub excluded: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn get(&self, component: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.component == component)
    }
}

/// Components known to [`grad_check`].
pub const GRAD_CHECK_COMPONENTS: [&str; 11] = [
    "linear_quadratic",
    "trilerp",
    "render",
    "loss_2d3d",
    "loss_fid",
    "loss_p",
    "mlp_student2d",
    "mlp_fid_head",
    "mlp_det2d",
    "mlp_det3d",
    "chain",
];

/// Relative error used by the gradient checks.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central-difference check of analytic gradients.
///
/// `f` evaluates the scalar and a relu signature at a parameter vector;
/// coordinates whose ±h evaluations change the signature are excluded.
fn fd_check(
    name: &str,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<bool>)>,
) -> Result<GradCheckEntry> {
    let (_, sig0) = f(x0)?;
    let mut x = x0.to_vec();
    let mut worst: f64 = 0.0;
    let (mut checked, mut excluded) = (0, 0);
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let (fp, sp) = f(&x)?;
        x[i] = x0[i] - h;
        let (fm, sm) = f(&x)?;
        x[i] = x0[i];
        if sp != sig0 || sm != sig0 {
            excluded += 1;
            continue;
        }
        worst = worst.max(rel_error(analytic[i], (fp - fm) / (2.0 * h)));
        checked += 1;
    }
    Ok(GradCheckEntry {
        component: name.to_string(),
        checked,
        excluded,
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

/// A small random grid with every lattice site occupied and smooth density.
fn random_dense_grid(resolution: usize, channels: usize, rng: &mut ChaCha8Rng) -> Result<FeatureGrid> {
    let mut coords = Vec::new();
    for k in 0..resolution as u32 {
        for j in 0..resolution as u32 {
            for i in 0..resolution as u32 {
                coords.push([i, j, k]);
            }
        }
    }
    let n = coords.len();
    let densities = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    let features = random_vec(rng, n * channels, 1.0);
    FeatureGrid::from_parts(resolution, channels, coords, densities, features, vec![0.0; n])
}

/// Runs the requested gradient checks (all when `components` is empty) on
/// random instances drawn from `seed`.
pub fn grad_check(components: &[&str], seed: u64, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let wanted: Vec<&str> = if components.is_empty() {
        GRAD_CHECK_COMPONENTS.to_vec()
    } else {
        components.to_vec()
    };
    let mut entries = Vec::new();
    for name in wanted {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name.bytes().fold(0u64, |a, b| a.wrapping_mul(31) + b as u64));
        let entry = match name {
            "linear_quadratic" => check_linear_quadratic(&mut rng, h, tolerance)?,
            "trilerp" => check_trilerp(&mut rng, h, tolerance)?,
            "render" => check_render(&mut rng, h, tolerance)?,
            "loss_2d3d" | "loss_fid" | "loss_p" => check_loss(name, &mut rng, h, tolerance)?,
            "mlp_student2d" | "mlp_fid_head" | "mlp_det2d" | "mlp_det3d" => check_mlp(name, &mut rng, h, tolerance)?,
            "chain" => check_chain(&mut rng, h, tolerance)?,
            other => return Err(Error::input(format!("unknown grad-check component '{other}'"))),
        };
        entries.push(entry);
    }
    Ok(GradCheckReport { h, entries })
}

fn check_linear_quadratic(rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<GradCheckEntry> {
    let m = Mlp::random(&[4, 3], &[crate::model::Activation::Identity], rng.random())?;
    let x = random_vec(rng, 4, 1.0);
    let target = random_vec(rng, 3, 1.0);
    let (y, cache) = m.forward(&x)?;
    let term = masked_sq_loss(&y, &target, 3, None)?;
    let (g, _) = m.backward(&cache, &term.grad_a)?;
    fd_check("linear_quadratic", m.params(), &g, h, tol, |p| {
        let mm = Mlp::from_parts(m.dims(), m.activations(), p.to_vec())?;
        let (y, _) = mm.forward(&x)?;
        Ok((masked_sq_loss(&y, &target, 3, None)?.value, Vec::new()))
    })
}

fn check_trilerp(rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<GradCheckEntry> {
    let grid = random_dense_grid(4, 3, rng)?;
    let x = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let u = random_vec(rng, 3, 1.0);
    let mut g = vec![0.0; grid.features.len()];
    grid.trilerp_adjoint_into(&x, &u, &mut g)?;
    fd_check("trilerp", &grid.features, &g, h, tol, |f| {
        let mut gg = grid.clone();
        gg.features.copy_from_slice(f);
        let v = gg.trilerp(&x)?;
        Ok((v.iter().zip(&u).map(|(a, b)| a * b).sum(), Vec::new()))
    })
}

fn check_render(rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<GradCheckEntry> {
    use crate::render::{render_adjoint, render_quantity, RaySamples};
    let n = 16;
    let c = 3;
    let samples = RaySamples {
        ts: (0..n).map(|i| i as f64 * 0.1).collect(),
        positions: vec![Vec3::zeros(); n],
        deltas: vec![0.1; n],
        sigmas: (0..n).map(|_| rng.random_range(0.0..4.0)).collect(),
    };
    let values = random_vec(rng, n * c, 1.0);
    let u = random_vec(rng, c, 1.0);
    let g = render_adjoint(&samples, &u)?;
    fd_check("render", &values, &g, h, tol, |v| {
        let out = render_quantity(&samples, v, c)?;
        Ok((out.value.iter().zip(&u).map(|(a, b)| a * b).sum(), Vec::new()))
    })
}

fn check_loss(name: &str, rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<GradCheckEntry> {
    let (pixels, c) = (12, if name == "loss_p" { 1 } else { 4 });
    let a = random_vec(rng, pixels * c, 1.0);
    let b = random_vec(rng, pixels * c, 1.0);
    let mask: Option<Vec<bool>> = (name != "loss_fid").then(|| (0..pixels).map(|i| i % 3 != 0).collect());
    let term = masked_sq_loss(&a, &b, c, mask.as_deref())?;
    let both: Vec<f64> = a.iter().chain(&b).copied().collect();
    let grads: Vec<f64> = term.grad_a.iter().chain(&term.grad_b).copied().collect();
    let n = a.len();
    fd_check(name, &both, &grads, h, tol, |x| {
        Ok((masked_sq_loss(&x[..n], &x[n..], c, mask.as_deref())?.value, Vec::new()))
    })
}

fn check_mlp(name: &str, rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<GradCheckEntry> {
    let params = ModelParams::init(4, 9, 0.3, rng.random())?;
    let mut m = match name {
        "mlp_student2d" => params.student2d,
        "mlp_fid_head" => params.fid_head,
        "mlp_det2d" => params.det2d,
        _ => params.det3d,
    };
    if name == "mlp_det3d" {
        // Lift the relu output off zero so its gradient is not trivially zero.
        let (_, b) = m.layer_range(1);
        m.params_mut()[b.start] = 1.0;
    }
    let batch = 5;
    let x = random_vec(rng, batch * m.input_dim(), 1.0);
    let u = random_vec(rng, batch * m.output_dim(), 1.0);
    let cache = m.forward_batch(&x, batch)?;
    let (gp, gx) = m.backward(&cache, &u)?;
    let analytic: Vec<f64> = gp.iter().chain(&gx).copied().collect();
    let x0: Vec<f64> = m.params().iter().chain(&x).copied().collect();
    let np = m.params().len();
    fd_check(name, &x0, &analytic, h, tol, |z| {
        let mm = Mlp::from_parts(m.dims(), m.activations(), z[..np].to_vec())?;
        let cache = mm.forward_batch(&z[np..], batch)?;
        let v = cache.output().iter().zip(&u).map(|(a, b)| a * b).sum();
        Ok((v, relu_pattern(&mm, &cache)))
    })
}

/// Full scheduled loss through rendering on a 4³ grid seen by an 8×8 camera,
/// differentiated with respect to grid features and every head.
fn check_chain(rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<GradCheckEntry> {
    let c = 3;
    let grid = random_dense_grid(4, c, rng)?;
    let camera = Camera::look_at(Vec3::new(0.4, -0.3, -3.0), Vec3::zeros(), Vec3::y(), 0.9, 8, 8)?;
    let teacher = FeatureImage::from_data(8, 8, c, random_vec(rng, 64 * c, 1.0))?;
    let heatmap = ProbImage {
        width: 8,
        height: 8,
        data: (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let sampled = SampledGrid {
        resolution: 4,
        spacing: grid.spacing(),
        theta: 0.0,
        directions: axis_directions(),
        densities: Vec::new(),
        colors: Vec::new(),
        occupancy: grid.occupancy().clone(),
    };
    let scene = SceneData {
        id: "chain".into(),
        views: vec![ViewData {
            footprints: compile_camera(&grid, &camera, 16)?,
            camera,
            teacher,
            heatmap,
        }],
        sampled,
    };
    let params = ModelParams::init(c, 7, 0.3, rng.random())?;
    let lambdas = crate::losses::Lambdas {
        l2d3d: 1.0,
        fid: 0.7,
        p: 0.5,
    };
    let rays: Vec<(usize, usize)> = (0..64).map(|p| (0, p)).collect();
    let eval = evaluate_step(&scene, &grid, &params, Stage::D, lambdas, &rays)?;
    let sizes = [
        grid.features.len(),
        params.student2d.params().len(),
        params.fid_head.params().len(),
        params.det2d.params().len(),
        params.det3d.params().len(),
    ];
    let x0: Vec<f64> = grid
        .features
        .iter()
        .chain(params.student2d.params())
        .chain(params.fid_head.params())
        .chain(params.det2d.params())
        .chain(params.det3d.params())
        .copied()
        .collect();
    let g = &eval.grads;
    let analytic: Vec<f64> = g
        .features
        .iter()
        .chain(&g.student2d)
        .chain(&g.fid_head)
        .chain(&g.det2d)
        .chain(&g.det3d)
        .copied()
        .collect();
    fd_check("chain", &x0, &analytic, h, tol, |x| {
        let mut gr = grid.clone();
        let mut pm = params.clone();
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &x[off..off + n];
            off += n;
            s
        };
        gr.features.copy_from_slice(take(sizes[0]));
        pm.student2d.params_mut().copy_from_slice(take(sizes[1]));
        pm.fid_head.params_mut().copy_from_slice(take(sizes[2]));
        pm.det2d.params_mut().copy_from_slice(take(sizes[3]));
        pm.det3d.params_mut().copy_from_slice(take(sizes[4]));
        let e = evaluate_step(&scene, &gr, &pm, Stage::D, lambdas, &rays)?;
        Ok((e.loss.total, e.relu_signature))
    })
}
