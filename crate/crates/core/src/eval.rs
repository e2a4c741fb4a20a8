//! Corpus-level evaluation: retrieval top-1 in every mode and duplicate
//! detection.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::grid::FeatureGrid;
use crate::image::FeatureImage;
use crate::model::{student2d_forward, ModelParams};
use crate::oracle::{add_teacher_noise, render_clean_feature_map, CameraRig, CorpusEntry, OracleScene};
use crate::retrieval::{
    build_entry, dup_detect, image_query, normalized, query_image, ren5_rank, DupReport, ImageQuery, Intrinsics,
    QueryMode, QueryResult, RetrievalConfig, SceneIndexEntry, ViewEmbeddings,
};
use crate::training::{scene_id, teacher_seed, SceneSetup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub queries_per_scene: u32,
    /// Negative pairs for duplicate detection; `None` matches the number of
    /// positives.
    pub negative_pairs: Option<usize>,
    pub retrieval: RetrievalConfig,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            queries_per_scene: 1,
            negative_pairs: None,
            retrieval: RetrievalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Top1 {
    /// Keypoint mode with PnP-verified scores where available.
    pub kp: f64,
    /// Keypoint mode ranked by raw mutual-match counts.
    pub kp_raw: f64,
    pub global: f64,
    pub ren5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DupAp {
    pub kp: f64,
    pub global: f64,
}

/// Which protocols an evaluation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Retrieval,
    Dup,
    Both,
}

impl Protocol {
    fn retrieval(self) -> bool {
        self != Protocol::Dup
    }

    fn dup(self) -> bool {
        self != Protocol::Retrieval
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub scenes: usize,
    pub n_queries: usize,
    pub kp_fallbacks: usize,
    pub top1: Option<Top1>,
    pub n_pairs: usize,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub ap75: Option<DupAp>,
    pub theta: f64,
}

/// Duplicate group of every entry: the index of its original.
pub fn duplicate_groups(corpus: &[CorpusEntry]) -> Vec<usize> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, e)| e.duplicate_of.map_or(i, |o| o as usize))
        .collect()
}

/// Every (original, duplicate) pair labeled positive plus seeded negatives
/// drawn from different groups.
pub fn duplicate_pairs(
    corpus: &[CorpusEntry],
    negatives: Option<usize>,
    seed: u64,
) -> Vec<(usize, usize, Option<bool>)> {
    let groups = duplicate_groups(corpus);
    let mut pairs: Vec<(usize, usize, Option<bool>)> = corpus
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.duplicate_of.map(|o| (o as usize, i, Some(true))))
        .collect();
    let want = negatives.unwrap_or(pairs.len());
    let n = corpus.len();
    let distinct_groups = {
        let mut g = groups.clone();
        g.sort_unstable();
        g.dedup();
        g.len()
    };
    if n < 2 || distinct_groups < 2 {
        return pairs;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0b1);
    let mut seen = std::collections::BTreeSet::new();
    let mut tries = 0;
    while seen.len() < want && tries < 100 * want.max(1) {
        tries += 1;
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let key = (a.min(b), a.max(b));
        if groups[a] != groups[b] && seen.insert(key) {
            pairs.push((key.0, key.1, Some(false)));
        }
    }
    pairs
}

/// Normalized mean of `img` over `valid` pixels; zero when nothing is valid.
pub fn image_embedding(img: &FeatureImage, valid: &[bool]) -> Vec<f64> {
    let mut mean = vec![0.0; img.channels];
    for p in (0..img.pixel_count()).filter(|&p| valid[p]) {
        mean.iter_mut().zip(img.pixel(p)).for_each(|(m, f)| *m += f);
    }
    normalized(&mean).unwrap_or_else(|| vec![0.0; img.channels])
}

/// Pixels count as foreground for image embeddings when the scene covers
/// them at least this opaquely (final transmittance at most this value).
pub const FOREGROUND_TRANSMITTANCE: f64 = 0.5;

/// A rendered view: teacher map and its foreground pixels.
pub struct TeacherView {
    pub teacher: FeatureImage,
    pub valid: Vec<bool>,
}

pub fn teacher_view(scene: &OracleScene, camera: &Camera, setup: &SceneSetup, noise_seed: u64) -> Result<TeacherView> {
    let (mut teacher, t_end) = render_clean_feature_map(scene, camera, setup.teacher_samples)?;
    add_teacher_noise(&mut teacher, &setup.teacher_noise, noise_seed);
    Ok(TeacherView {
        teacher,
        valid: t_end.iter().map(|t| *t <= FOREGROUND_TRANSMITTANCE).collect(),
    })
}

/// Query built from a teacher view through the trained 2D heads.
pub fn view_query(
    params: &ModelParams,
    view: &TeacherView,
    camera: &Camera,
    config: &RetrievalConfig,
) -> Result<ImageQuery> {
    let maps = student2d_forward(params, &view.teacher)?;
    image_query(
        &maps.f2d,
        &maps.p2d,
        Some(&view.valid),
        Intrinsics::of(camera),
        &config.keypoints_2d,
    )
}

/// Index of trained grids, ids in corpus order.
pub fn build_index(grids: &[FeatureGrid], config: &RetrievalConfig) -> Result<Vec<SceneIndexEntry>> {
    grids
        .iter()
        .enumerate()
        .map(|(i, g)| build_entry(&scene_id(i), g, &config.keypoints_3d))
        .collect()
}

/// Ren5 baseline index: teacher embeddings of `views` seeded training views
/// per scene.
pub fn ren5_index(corpus: &[CorpusEntry], setup: &SceneSetup, views: usize, seed: u64) -> Result<Vec<ViewEmbeddings>> {
    let mut out = Vec::with_capacity(corpus.len());
    for (i, entry) in corpus.iter().enumerate() {
        let scene = entry.scene()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64) << 16 ^ 0x5e5);
        let k = views.min(entry.cameras.len());
        let mut picks = sample(&mut rng, entry.cameras.len(), k).into_vec();
        picks.sort_unstable();
        let mut embeds = Vec::with_capacity(k);
        for v in picks {
            let tv = teacher_view(&scene, &entry.cameras[v], setup, teacher_seed(seed, i, v))?;
            embeds.push(image_embedding(&tv.teacher, &tv.valid));
        }
        out.push(ViewEmbeddings {
            id: scene_id(i),
            views: embeds,
        });
    }
    Ok(out)
}

/// Seed of the teacher noise for query `q` of scene `scene`.
pub fn query_seed(seed: u64, scene: usize, q: u32) -> u64 {
    teacher_seed(seed ^ 0x9ee7, scene, 1000 + q as usize)
}

fn rank_of_raw(r: &QueryResult) -> Option<&str> {
    r.ranking
        .iter()
        .max_by(|a, b| {
            a.matches
                .cmp(&b.matches)
                .then(a.mean_cosine.total_cmp(&b.mean_cosine))
                .then(b.id.cmp(&a.id))
        })
        .map(|x| x.id.as_str())
}

/// Retrieval accuracy of every scene's held-out query views. Top-1 counts
/// as correct when the winner belongs to the query's duplicate group.
pub fn evaluate_retrieval(
    corpus: &[CorpusEntry],
    rig: &CameraRig,
    index: &[SceneIndexEntry],
    params: &ModelParams,
    setup: &SceneSetup,
    spec: &EvalSpec,
    seed: u64,
) -> Result<(Top1, usize, usize)> {
    let cfg = &spec.retrieval;
    let ren5 = ren5_index(corpus, setup, cfg.ren5_views, seed)?;
    let groups = duplicate_groups(corpus);
    let group_of = |id: &str| -> Option<usize> {
        id.strip_prefix("scene-")
            .and_then(|s| s.parse::<usize>().ok())
            .and_then(|i| groups.get(i).copied())
    };
    let (mut hits_kp, mut hits_raw, mut hits_global, mut hits_ren5) = (0usize, 0usize, 0usize, 0usize);
    let (mut queries, mut fallbacks) = (0usize, 0usize);
    for (i, entry) in corpus.iter().enumerate() {
        let scene = entry.scene()?;
        for q in 0..spec.queries_per_scene {
            let cam = entry.query_camera(i, q, rig)?;
            let tv = teacher_view(&scene, &cam, setup, query_seed(seed, i, q))?;
            let query = view_query(params, &tv, &cam, cfg)?;
            let qseed = seed ^ (i as u64) << 20 ^ q as u64;
            let kp = query_image(index, &query, QueryMode::Kp, cfg, qseed)?;
            let global = query_image(index, &query, QueryMode::Global, cfg, qseed)?;
            let r5 = ren5_rank(&ren5, &image_embedding(&tv.teacher, &tv.valid))?;
            let ok = |id: Option<&str>| id.and_then(group_of) == Some(groups[i]);
            hits_kp += ok(kp.top()) as usize;
            hits_raw += ok(if kp.fell_back { kp.top() } else { rank_of_raw(&kp) }) as usize;
            hits_global += ok(global.top()) as usize;
            hits_ren5 += ok(r5.first().map(|r| r.id.as_str())) as usize;
            fallbacks += kp.fell_back as usize;
            queries += 1;
        }
    }
    let frac = |h: usize| if queries == 0 { 0.0 } else { h as f64 / queries as f64 };
    let top1 = Top1 {
        kp: frac(hits_kp),
        kp_raw: frac(hits_raw),
        global: frac(hits_global),
        ren5: frac(hits_ren5),
    };
    Ok((top1, queries, fallbacks))
}

/// Full evaluation of an indexed corpus.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    corpus: &[CorpusEntry],
    rig: &CameraRig,
    index: &[SceneIndexEntry],
    params: &ModelParams,
    setup: &SceneSetup,
    spec: &EvalSpec,
    protocol: Protocol,
    seed: u64,
) -> Result<EvalReport> {
    spec.retrieval.validate()?;
    if corpus.len() != index.len() || corpus.is_empty() {
        return Err(Error::input("need one index entry per corpus scene"));
    }
    let cfg = &spec.retrieval;
    let mut report = EvalReport {
        protocol,
        scenes: corpus.len(),
        n_queries: 0,
        kp_fallbacks: 0,
        top1: None,
        n_pairs: 0,
        positive_pairs: 0,
        negative_pairs: 0,
        ap75: None,
        theta: cfg.theta,
    };
    if protocol.retrieval() {
        let (top1, queries, fallbacks) = evaluate_retrieval(corpus, rig, index, params, setup, spec, seed)?;
        report.top1 = Some(top1);
        report.n_queries = queries;
        report.kp_fallbacks = fallbacks;
    }
    if protocol.dup() {
        let pairs = duplicate_pairs(corpus, spec.negative_pairs, seed);
        let kp = dup_detect(index, &pairs, QueryMode::Kp, cfg, seed)?;
        let global = dup_detect(index, &pairs, QueryMode::Global, cfg, seed)?;
        report.n_pairs = pairs.len();
        report.positive_pairs = pairs.iter().filter(|p| p.2 == Some(true)).count();
        report.negative_pairs = report.n_pairs - report.positive_pairs;
        report.ap75 = Some(DupAp {
            kp: kp.ap75.unwrap_or(0.0),
            global: global.ap75.unwrap_or(0.0),
        });
    }
    Ok(report)
}

/// Duplicate-detection reports in both modes, for inspection.
pub fn duplicate_reports(
    corpus: &[CorpusEntry],
    index: &[SceneIndexEntry],
    config: &RetrievalConfig,
    negatives: Option<usize>,
    seed: u64,
) -> Result<(DupReport, DupReport)> {
    let pairs = duplicate_pairs(corpus, negatives, seed);
    Ok((
        dup_detect(index, &pairs, QueryMode::Kp, config, seed)?,
        dup_detect(index, &pairs, QueryMode::Global, config, seed)?,
    ))
}
