//! Command-line pipeline. Every command is a pure function of its inputs,
//! the configuration and the seed; artifacts come with a manifest of
//! SHA-256 digests that readers verify.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{duplicate_pairs, evaluate, query_seed, teacher_view, view_query, Protocol};
use crate::grid::{axis_directions, sample_grid, FeatureGrid};
use crate::io;
use crate::model::{det3d_logits_to_grid, student2d_forward, ModelParams};
use crate::oracle::{generate_corpus, CorpusEntry};
use crate::retrieval::{build_entry, dup_detect, image_query, query_image, QueryMode, SceneIndexEntry};
use crate::training::{scene_id, train_corpus, GradCheckReport, GRAD_CHECK_COMPONENTS};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "voxdistill",
    version,
    about = "Distill noisy 2D features into sparse voxel grids and query them"
)]
pub struct Cli {
    /// JSON configuration; defaults describe the ten-scene demo.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.steps.d=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the effective configuration.
    ShowConfig,
    /// Generate the synthetic corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one scene's lattice into an untrained grid.
    SampleGrid {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every scene of a corpus; writes grids, model and log to a directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fan the distillation stage out over scenes on worker threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Build a retrieval index from trained grids.
    BuildIndex {
        /// Directory of `.cdgf` grids, indexed in file-name order.
        #[arg(long)]
        grids: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank indexed scenes for one image query.
    Query(QueryArgs),
    /// Duplicate verdicts for scene pairs.
    DupDetect {
        #[arg(long)]
        index: PathBuf,
        /// JSON list of `{"a": id, "b": id, "label": bool?}`.
        #[arg(long, conflicts_with = "corpus")]
        pairs: Option<PathBuf>,
        /// Derive labeled pairs from a corpus instead.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long, value_enum, default_value = "kp")]
        mode: ModeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieval and duplicate-detection metrics over a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        protocol: ProtocolArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        /// Comma-separated components; all when omitted.
        #[arg(long, value_delimiter = ',')]
        components: Vec<String>,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Query with a held-out view of this corpus scene.
    #[arg(long, requires = "corpus", conflicts_with = "feature_map")]
    pub scene: Option<usize>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Held-out view number.
    #[arg(long, default_value_t = 0)]
    pub view: u32,
    /// External teacher feature map (`.cdfm`).
    #[arg(long)]
    pub feature_map: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "kp")]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum ModeArg {
    Kp,
    Global,
}

impl From<ModeArg> for QueryMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Kp => QueryMode::Kp,
            ModeArg::Global => QueryMode::Global,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum ProtocolArg {
    Retrieval,
    Dup,
    Both,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Retrieval => Protocol::Retrieval,
            ProtocolArg::Dup => Protocol::Dup,
            ProtocolArg::Both => Protocol::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

/// Provenance of a command's outputs. The only nondeterministic file a
/// command writes, because of the wall-clock timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Config,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub phases: Vec<Phase>,
}

impl RunManifest {
    fn new(command: &str, config: &Config) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            phases: Vec::new(),
        }
    }

    fn phase(&mut self, name: &str, start: Instant) {
        self.phases.push(Phase {
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

fn artifact(path: String, bytes: &[u8]) -> Artifact {
    Artifact {
        path,
        sha256: io::sha256_hex(bytes),
        bytes: bytes.len() as u64,
    }
}

/// Manifest written next to a single-file output.
pub fn sidecar_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    io::write_file(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Checks `bytes` read from `path` against any manifest that lists it: the
/// file's sidecar, or a `manifest.json` in one of its two parent directories.
pub fn verify_digest(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut candidates = vec![(sidecar_manifest_path(path), path.file_name().map(PathBuf::from))];
    let mut dir = path.parent();
    let mut rel = path.file_name().map(PathBuf::from);
    for _ in 0..2 {
        let (Some(d), Some(r)) = (dir, rel.clone()) else { break };
        candidates.push((d.join(MANIFEST_NAME), Some(r.clone())));
        rel = d.file_name().map(|n| Path::new(n).join(&r));
        dir = d.parent();
    }
    for (manifest, rel) in candidates {
        let (Some(rel), true) = (rel, manifest.is_file()) else {
            continue;
        };
        let m = read_manifest(&manifest)?;
        let key = rel.to_string_lossy().replace('\\', "/");
        if let Some(a) = m.artifacts.iter().find(|a| a.path == key) {
            let found = io::sha256_hex(bytes);
            if found != a.sha256 {
                return Err(Error::Digest {
                    artifact: path.display().to_string(),
                    expected: a.sha256.clone(),
                    found,
                });
            }
        }
    }
    Ok(())
}

/// Reads an input file, verifies it against its manifest and records it.
fn read_input(path: &Path, manifest: &mut RunManifest) -> Result<Vec<u8>> {
    let bytes = io::read_file(path)?;
    verify_digest(path, &bytes)?;
    manifest.inputs.push(artifact(path.display().to_string(), &bytes));
    Ok(bytes)
}

/// Writes a single-file output and its sidecar manifest.
fn write_output(out: &Path, bytes: &[u8], mut manifest: RunManifest) -> Result<()> {
    io::write_file(out, bytes)?;
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    manifest.artifacts.push(artifact(name, bytes));
    write_manifest(&sidecar_manifest_path(out), &manifest)
}

/// A JSON report with the configuration echoed, to a file or stdout.
fn emit_report(out: Option<&Path>, report: serde_json::Value, config: &Config, manifest: RunManifest) -> Result<()> {
    let mut doc = report;
    doc["config"] = serde_json::to_value(config).expect("config serializes");
    let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
    text.push('\n');
    match out {
        Some(p) => write_output(p, text.as_bytes(), manifest),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_corpus(path: &Path, manifest: &mut RunManifest) -> Result<Vec<CorpusEntry>> {
    io::decode_corpus(&read_input(path, manifest)?)
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> Result<ModelParams> {
    io::decode_model(&read_input(path, manifest)?)
}

fn load_index(path: &Path, manifest: &mut RunManifest) -> Result<Vec<SceneIndexEntry>> {
    io::decode_index(&read_input(path, manifest)?)
}

fn check_corpus_dims(corpus: &[CorpusEntry], config: &Config) -> Result<()> {
    if corpus
        .iter()
        .any(|e| e.spec.feature_dim as usize != config.setup.feature_dim)
    {
        return Err(Error::Config(
            "corpus feature dim differs from setup.feature_dim".into(),
        ));
    }
    Ok(())
}

/// Path of scene `i`'s grid inside a training output directory.
pub fn grid_file(dir: &Path, i: usize) -> PathBuf {
    dir.join("grids").join(format!("{}.cdgf", scene_id(i)))
}

pub fn run(cli: Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref(), &cli.overrides)?;
    let seed = config.seed;
    match cli.command {
        Command::ShowConfig => {
            println!("{}", config.to_json());
            Ok(())
        }
        Command::GenCorpus { out } => {
            let t = Instant::now();
            let mut m = RunManifest::new("gen-corpus", &config);
            let corpus = generate_corpus(seed, &config.corpus)?;
            let bytes = io::encode_corpus(&corpus)?;
            m.phase("generate", t);
            write_output(&out, &bytes, m)
        }
        Command::SampleGrid { corpus, scene, out } => {
            let t = Instant::now();
            let mut m = RunManifest::new("sample-grid", &config);
            let entries = load_corpus(&corpus, &mut m)?;
            let entry = entries.get(scene).ok_or_else(|| {
                Error::input(format!(
                    "scene {scene} is outside the corpus ({} scenes)",
                    entries.len()
                ))
            })?;
            let s = config.setup.clone();
            let sampled = sample_grid(&entry.scene()?, s.resolution, &axis_directions(), s.theta)?;
            let grid = FeatureGrid::from_sampled(&sampled, s.feature_dim);
            m.phase("sample", t);
            write_output(&out, &io::encode_grid(&grid)?, m)
        }
        Command::Train { corpus, out, parallel } => {
            let mut m = RunManifest::new("train", &config);
            let entries = load_corpus(&corpus, &mut m)?;
            check_corpus_dims(&entries, &config)?;
            let mut train = config.train.clone();
            train.parallel_scenes |= parallel;
            let t = Instant::now();
            let outcome = train_corpus(&entries, &config.setup, &train, seed)?;
            m.phase("train", t);
            let t = Instant::now();
            let mut files: Vec<(String, Vec<u8>)> = Vec::new();
            for (i, g) in outcome.grids.iter().enumerate() {
                files.push((format!("grids/{}.cdgf", scene_id(i)), io::encode_grid(g)?));
            }
            files.push(("model.cdmp".into(), io::encode_model(&outcome.params)?));
            files.push(("train_log.csv".into(), outcome.log.to_csv().into_bytes()));
            for (rel, bytes) in &files {
                io::write_file(&out.join(rel), bytes)?;
                m.artifacts.push(artifact(rel.clone(), bytes));
            }
            m.phase("write", t);
            write_manifest(&out.join(MANIFEST_NAME), &m)
        }
        Command::BuildIndex { grids, model, out } => {
            let t = Instant::now();
            let mut m = RunManifest::new("build-index", &config);
            let params = load_model(&model, &mut m)?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&grids)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "cdgf"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::input(format!("no .cdgf grids in {}", grids.display())));
            }
            let mut index = Vec::with_capacity(paths.len());
            for p in &paths {
                let mut g = io::decode_grid(&read_input(p, &mut m)?)?;
                det3d_logits_to_grid(&params, &mut g)?;
                let id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                index.push(build_entry(&id, &g, &config.eval.retrieval.keypoints_3d)?);
            }
            m.phase("index", t);
            write_output(&out, &io::encode_index(&index)?, m)
        }
        Command::Query(q) => cmd_query(q, &config),
        Command::DupDetect {
            index,
            pairs,
            corpus,
            theta,
            mode,
            out,
        } => {
            let mut m = RunManifest::new("dup-detect", &config);
            let idx = load_index(&index, &mut m)?;
            let mut cfg = config.eval.retrieval.clone();
            if let Some(t) = theta {
                cfg.theta = t;
                cfg.validate()?;
            }
            let labeled = match (pairs, corpus) {
                (Some(p), _) => parse_pairs(&read_input(&p, &mut m)?, &idx)?,
                (None, Some(c)) => {
                    let entries = load_corpus(&c, &mut m)?;
                    if entries.len() != idx.len() {
                        return Err(Error::input("corpus and index differ in scene count"));
                    }
                    duplicate_pairs(&entries, config.eval.negative_pairs, seed)
                }
                (None, None) => return Err(Error::input("dup-detect needs --pairs or --corpus")),
            };
            let report = dup_detect(&idx, &labeled, mode.into(), &cfg, seed)?;
            let value = json!({
                "mode": report.mode,
                "theta": report.theta,
                "n_pairs": report.verdicts.len(),
                "ap75": report.ap75,
                "verdicts": report.verdicts,
            });
            emit_report(out.as_deref(), value, &config, m)
        }
        Command::Eval {
            corpus,
            index,
            model,
            protocol,
            out,
        } => {
            let t = Instant::now();
            let mut m = RunManifest::new("eval", &config);
            let entries = load_corpus(&corpus, &mut m)?;
            check_corpus_dims(&entries, &config)?;
            let idx = load_index(&index, &mut m)?;
            let params = load_model(&model, &mut m)?;
            let report = evaluate(
                &entries,
                &config.corpus.rig,
                &idx,
                &params,
                &config.setup,
                &config.eval,
                protocol.into(),
                seed,
            )?;
            m.phase("eval", t);
            let mut value = serde_json::to_value(&report).expect("report serializes");
            value["mode"] = json!(["kp", "global", "ren5"]);
            emit_report(out.as_deref(), value, &config, m)
        }
        Command::GradCheck {
            components,
            h,
            tolerance,
            out,
        } => {
            let mut m = RunManifest::new("grad-check", &config);
            let t = Instant::now();
            let names: Vec<&str> = components.iter().map(String::as_str).collect();
            if let Some(bad) = names.iter().find(|n| !GRAD_CHECK_COMPONENTS.contains(n)) {
                return Err(Error::input(format!(
                    "unknown component '{bad}'; known: {}",
                    GRAD_CHECK_COMPONENTS.join(", ")
                )));
            }
            let report: GradCheckReport = crate::training::grad_check(&names, seed, h, tolerance)?;
            m.phase("grad-check", t);
            let passed = report.passed();
            let mut value = serde_json::to_value(&report).expect("report serializes");
            value["passed"] = json!(passed);
            emit_report(out.as_deref(), value, &config, m)?;
            if passed {
                Ok(())
            } else {
                Err(Error::Numeric("gradient check failed".into()))
            }
        }
    }
}

fn cmd_query(q: QueryArgs, config: &Config) -> Result<()> {
    let mut m = RunManifest::new("query", config);
    let idx = load_index(&q.index, &mut m)?;
    let params = load_model(&q.model, &mut m)?;
    let cfg = &config.eval.retrieval;
    let seed = config.seed;
    let (query, source) = match (q.scene, &q.corpus, &q.feature_map) {
        (Some(scene), Some(corpus), None) => {
            let entries = load_corpus(corpus, &mut m)?;
            check_corpus_dims(&entries, config)?;
            let entry = entries
                .get(scene)
                .ok_or_else(|| Error::input(format!("scene {scene} is outside the corpus")))?;
            let cam = entry.query_camera(scene, q.view, &config.corpus.rig)?;
            let tv = teacher_view(&entry.scene()?, &cam, &config.setup, query_seed(seed, scene, q.view))?;
            (
                view_query(&params, &tv, &cam, cfg)?,
                json!({"scene": scene_id(scene), "view": q.view}),
            )
        }
        (None, _, Some(path)) => {
            let f = io::decode_feature_map(&read_input(path, &mut m)?)?;
            let maps = student2d_forward(&params, &f.map)?;
            let query = image_query(&maps.f2d, &maps.p2d, Some(&f.valid), f.intrinsics, &cfg.keypoints_2d)?;
            (query, json!({"feature_map": path.display().to_string()}))
        }
        _ => return Err(Error::input("query needs --scene with --corpus, or --feature-map")),
    };
    let result = query_image(&idx, &query, q.mode.into(), cfg, seed ^ 0x9e)?;
    if result.fell_back {
        eprintln!("warning: query has no keypoints; ranked in global mode");
    }
    let value = json!({
        "mode": result.mode,
        "fell_back": result.fell_back,
        "theta": cfg.theta,
        "query": source,
        "query_keypoints": query.keypoints.len(),
        "top": result.top(),
        "ranking": result.ranking,
    });
    emit_report(q.out.as_deref(), value, config, m)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairSpec {
    a: String,
    b: String,
    #[serde(default)]
    label: Option<bool>,
}

fn parse_pairs(bytes: &[u8], index: &[SceneIndexEntry]) -> Result<Vec<(usize, usize, Option<bool>)>> {
    let specs: Vec<PairSpec> = serde_json::from_slice(bytes).map_err(|e| Error::input(format!("pairs file: {e}")))?;
    let pos = |id: &str| {
        index
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| Error::input(format!("scene '{id}' is not in the index")))
    };
    specs.iter().map(|p| Ok((pos(&p.a)?, pos(&p.b)?, p.label))).collect()
}

/// Process entry point: parses arguments, runs, and reports failures as a
/// JSON object on stderr with the error's code as exit status.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = json!({"error": {"kind": "usage", "code": 1, "message": e.to_string().trim()}});
            eprintln!("{err}");
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let err = json!({"error": {"kind": e.kind(), "code": e.code(), "message": e.to_string()}});
            eprintln!("{err}");
            e.code()
        }
    }
}
