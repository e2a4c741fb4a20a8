//! Little-endian binary formats. Every file starts with a four-byte magic and
//! a `u32` version; readers reject anything else, and trailing bytes.
//!
//! | magic  | contents                                   |
//! |--------|--------------------------------------------|
//! | `CDCP` | corpus: scene seeds, specs, cameras, duplicates |
//! | `CDGF` | one trained feature grid (f32 payload)     |
//! | `CDMP` | model parameters (f64 payload)             |
//! | `CDIX` | retrieval index (f32 payload)              |
//! | `CDFM` | external query feature map (f32 payload)  |
//!
//! f32 payloads are lossy on the first write only: values read back are
//! exactly representable, so write → read → write is byte-identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Mat3, RigidTransform, Vec3};
use crate::grid::FeatureGrid;
use crate::image::FeatureImage;
use crate::model::{Activation, Mlp, ModelParams};
use crate::oracle::{CorpusEntry, SceneSpec};
use crate::retrieval::{Intrinsics, KeyPoint3D, SceneIndexEntry};

pub const VERSION: u32 = 1;

pub const CORPUS_MAGIC: &[u8; 4] = b"CDCP";
pub const GRID_MAGIC: &[u8; 4] = b"CDGF";
pub const MODEL_MAGIC: &[u8; 4] = b"CDMP";
pub const INDEX_MAGIC: &[u8; 4] = b"CDIX";
pub const FEATURE_MAP_MAGIC: &[u8; 4] = b"CDFM";

/// Upper bound on any length field, to fail fast on corrupt headers.
const MAX_LEN: u64 = 1 << 31;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer { buf: magic.to_vec() };
        w.u32(VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) -> Result<()> {
        if n as u64 > MAX_LEN {
            return Err(Error::format("length does not fit the format"));
        }
        self.u32(n as u32);
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }

    fn f32s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f32(*x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let m = r.take(4)?;
        if m != magic {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = r.u32()?;
        if v != VERSION {
            return Err(Error::format(format!("unsupported version {v}, expected {VERSION}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }

    /// A length field, checked against the bytes that remain.
    fn len(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n as u64 > MAX_LEN || n.saturating_mul(elem_bytes.max(1)) > self.buf.len() - self.pos {
            return Err(Error::format("length field exceeds file size"));
        }
        Ok(n)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.arr()?) as f64)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f32()).collect()
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::format(format!("bad flag byte {v}"))),
        }
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::format(format!("non-finite value in {what}")))
    }
}

fn put_mat3(w: &mut Writer, m: &Mat3) {
    for r in 0..3 {
        for c in 0..3 {
            w.f64(m[(r, c)]);
        }
    }
}

fn get_mat3(r: &mut Reader) -> Result<Mat3> {
    let v = r.f64s(9)?;
    Ok(Mat3::from_row_slice(&v))
}

fn get_vec3(r: &mut Reader) -> Result<Vec3> {
    Ok(Vec3::new(r.f64()?, r.f64()?, r.f64()?))
}

/// Pose (rotation row-major, then origin), intrinsics, then size.
fn put_camera(w: &mut Writer, c: &Camera) {
    put_mat3(w, &c.rotation);
    w.f64s(c.translation.as_slice());
    w.f64s(&[c.fx, c.fy, c.cx, c.cy]);
    w.u32(c.width);
    w.u32(c.height);
}

fn get_camera(r: &mut Reader) -> Result<Camera> {
    let rotation = get_mat3(r)?;
    let translation = get_vec3(r)?;
    let k = r.f64s(4)?;
    let (width, height) = (r.u32()?, r.u32()?);
    Camera::new(k[0], k[1], k[2], k[3], width, height, rotation, translation)
        .map_err(|e| Error::format(format!("bad camera: {e}")))
}

fn put_scene_spec(w: &mut Writer, s: &SceneSpec) {
    w.u32(s.min_blobs);
    w.u32(s.max_blobs);
    w.f64s(&s.radius);
    w.f64s(&s.peak_density);
    w.u32(s.feature_dim);
    w.f64(s.shared_feature_weight);
    w.f64(s.tangent_probability);
    w.f64(s.placement_radius);
}

fn get_scene_spec(r: &mut Reader) -> Result<SceneSpec> {
    let spec = SceneSpec {
        min_blobs: r.u32()?,
        max_blobs: r.u32()?,
        radius: [r.f64()?, r.f64()?],
        peak_density: [r.f64()?, r.f64()?],
        feature_dim: r.u32()?,
        shared_feature_weight: r.f64()?,
        tangent_probability: r.f64()?,
        placement_radius: r.f64()?,
    };
    spec.validate()
        .map_err(|e| Error::format(format!("bad scene spec: {e}")))?;
    Ok(spec)
}

pub fn encode_corpus(corpus: &[CorpusEntry]) -> Result<Vec<u8>> {
    let mut w = Writer::new(CORPUS_MAGIC);
    w.len(corpus.len())?;
    for e in corpus {
        w.u64(e.seed);
        put_scene_spec(&mut w, &e.spec);
        w.len(e.cameras.len())?;
        e.cameras.iter().for_each(|c| put_camera(&mut w, c));
        match e.duplicate_of {
            Some(o) => {
                w.u8(1);
                w.u32(o);
            }
            None => w.u8(0),
        }
        match &e.transform {
            Some(t) => {
                w.u8(1);
                put_mat3(&mut w, &t.rotation);
                w.f64s(t.translation.as_slice());
            }
            None => w.u8(0),
        }
    }
    Ok(w.buf)
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Vec<CorpusEntry>> {
    let mut r = Reader::new(bytes, CORPUS_MAGIC)?;
    let n = r.len(8)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let seed = r.u64()?;
        let spec = get_scene_spec(&mut r)?;
        let nc = r.len(136)?;
        let cameras = (0..nc).map(|_| get_camera(&mut r)).collect::<Result<Vec<_>>>()?;
        let duplicate_of = if r.flag()? { Some(r.u32()?) } else { None };
        let transform = if r.flag()? {
            let rotation = get_mat3(&mut r)?;
            let translation = get_vec3(&mut r)?;
            check_finite(rotation.as_slice(), "transform")?;
            check_finite(translation.as_slice(), "transform")?;
            Some(RigidTransform { rotation, translation })
        } else {
            None
        };
        out.push(CorpusEntry {
            seed,
            spec,
            cameras,
            duplicate_of,
            transform,
        });
    }
    r.finish()?;
    if out
        .iter()
        .enumerate()
        .any(|(i, e)| e.duplicate_of.is_some_and(|o| o as usize >= n || o as usize == i))
    {
        return Err(Error::format("duplicate reference out of range"));
    }
    Ok(out)
}

pub fn encode_grid(grid: &FeatureGrid) -> Result<Vec<u8>> {
    let mut w = Writer::new(GRID_MAGIC);
    w.len(grid.resolution())?;
    w.len(grid.channels())?;
    w.len(grid.len())?;
    for c in grid.occupancy().coords() {
        c.iter().for_each(|v| w.u32(*v));
    }
    w.f32s(&grid.densities);
    w.f32s(&grid.features);
    w.f32s(&grid.kp_logits);
    Ok(w.buf)
}

pub fn decode_grid(bytes: &[u8]) -> Result<FeatureGrid> {
    let mut r = Reader::new(bytes, GRID_MAGIC)?;
    let resolution = r.u32()? as usize;
    let channels = r.u32()? as usize;
    if channels == 0 || channels > 4096 {
        return Err(Error::format("grid channel count out of range"));
    }
    let n = r.len(12 + 4 * (channels + 2))?;
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        let c = [r.u32()?, r.u32()?, r.u32()?];
        if c.iter().any(|&v| v as usize >= resolution) {
            return Err(Error::format("grid coordinate outside the lattice"));
        }
        coords.push(c);
    }
    let densities = r.f32s(n)?;
    let features = r.f32s(n * channels)?;
    let kp_logits = r.f32s(n)?;
    r.finish()?;
    for (v, what) in [
        (&densities, "densities"),
        (&features, "features"),
        (&kp_logits, "keypoint logits"),
    ] {
        check_finite(v, what)?;
    }
    FeatureGrid::from_parts(resolution, channels, coords, densities, features, kp_logits)
        .map_err(|e| Error::format(format!("bad grid: {e}")))
}

/// Per network: layer count, dims, activation codes, then the flat f64
/// parameter vector.
pub fn encode_model(params: &ModelParams) -> Result<Vec<u8>> {
    let mut w = Writer::new(MODEL_MAGIC);
    let mlps = params.mlps();
    w.len(mlps.len())?;
    for m in mlps {
        w.len(m.layer_count())?;
        for d in m.dims() {
            w.len(*d)?;
        }
        m.activations().iter().for_each(|a| w.u8(a.code()));
        w.len(m.params().len())?;
        w.f64s(m.params());
    }
    Ok(w.buf)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes, MODEL_MAGIC)?;
    if r.u32()? != 4 {
        return Err(Error::format("model checkpoint must hold four networks"));
    }
    let mut mlps = Vec::with_capacity(4);
    for _ in 0..4 {
        let layers = r.len(4)?;
        if layers == 0 || layers > 64 {
            return Err(Error::format("layer count out of range"));
        }
        let dims = (0..=layers)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let acts = (0..layers)
            .map(|_| r.u8().and_then(Activation::from_code))
            .collect::<Result<Vec<_>>>()?;
        let count = r.len(8)?;
        let p = r.f64s(count)?;
        check_finite(&p, "model parameters")?;
        mlps.push(Mlp::from_parts(&dims, &acts, p).map_err(|e| Error::format(format!("bad network: {e}")))?);
    }
    r.finish()?;
    let mut it = mlps.into_iter();
    let params = ModelParams {
        student2d: it.next().expect("four"),
        fid_head: it.next().expect("four"),
        det2d: it.next().expect("four"),
        det3d: it.next().expect("four"),
    };
    params
        .validate()
        .map_err(|e| Error::format(format!("bad model: {e}")))?;
    Ok(params)
}

pub fn encode_index(index: &[SceneIndexEntry]) -> Result<Vec<u8>> {
    let mut w = Writer::new(INDEX_MAGIC);
    w.len(index.len())?;
    for e in index {
        w.len(e.id.len())?;
        w.buf.extend_from_slice(e.id.as_bytes());
        w.len(e.global.len())?;
        w.f32s(&e.global);
        w.len(e.keypoints.len())?;
        for k in &e.keypoints {
            if k.descriptor.len() != e.global.len() {
                return Err(Error::input(
                    "keypoint descriptor length differs from the global descriptor",
                ));
            }
            w.f32s(k.position.as_slice());
            w.f32(k.score);
            w.f32s(&k.descriptor);
        }
    }
    Ok(w.buf)
}

pub fn decode_index(bytes: &[u8]) -> Result<Vec<SceneIndexEntry>> {
    let mut r = Reader::new(bytes, INDEX_MAGIC)?;
    let n = r.len(12)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.len(1)?;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("index id is not UTF-8"))?
            .to_string();
        let c = r.len(4)?;
        let global = r.f32s(c)?;
        let nk = r.len(4 * (4 + c))?;
        let mut keypoints = Vec::with_capacity(nk);
        for _ in 0..nk {
            let position = Vec3::new(r.f32()?, r.f32()?, r.f32()?);
            let score = r.f32()?;
            let descriptor = r.f32s(c)?;
            check_finite(&descriptor, "descriptor")?;
            keypoints.push(KeyPoint3D {
                position,
                score,
                descriptor,
            });
        }
        check_finite(&global, "global descriptor")?;
        out.push(SceneIndexEntry { id, global, keypoints });
    }
    r.finish()?;
    Ok(out)
}

/// A query feature map with its intrinsics and foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapFile {
    pub map: FeatureImage,
    pub intrinsics: Intrinsics,
    pub valid: Vec<bool>,
}

pub fn encode_feature_map(f: &FeatureMapFile) -> Result<Vec<u8>> {
    let m = &f.map;
    if f.valid.len() != m.pixel_count() {
        return Err(Error::input("mask length does not match pixel count"));
    }
    if f.intrinsics.width as usize != m.width || f.intrinsics.height as usize != m.height {
        return Err(Error::input("intrinsics and feature map differ in size"));
    }
    let mut w = Writer::new(FEATURE_MAP_MAGIC);
    w.len(m.width)?;
    w.len(m.height)?;
    w.len(m.channels)?;
    let k = &f.intrinsics;
    w.f64s(&[k.fx, k.fy, k.cx, k.cy]);
    w.f32s(&m.data);
    f.valid.iter().for_each(|v| w.u8(*v as u8));
    Ok(w.buf)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMapFile> {
    let mut r = Reader::new(bytes, FEATURE_MAP_MAGIC)?;
    let (width, height, channels) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let pixels = width
        .checked_mul(height)
        .filter(|p| p.saturating_mul(channels.max(1)).saturating_mul(4) <= bytes.len())
        .ok_or_else(|| Error::format("feature map size exceeds file size"))?;
    let k = r.f64s(4)?;
    check_finite(&k, "intrinsics")?;
    let data = r.f32s(pixels * channels)?;
    check_finite(&data, "feature map")?;
    let valid = (0..pixels).map(|_| r.flag()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let map = FeatureImage::from_data(width, height, channels, data).map_err(|e| Error::format(format!("{e}")))?;
    Ok(FeatureMapFile {
        map,
        intrinsics: Intrinsics {
            fx: k[0],
            fy: k[1],
            cx: k[2],
            cy: k[3],
            width: width as u32,
            height: height as u32,
        },
        valid,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{generate_corpus, CorpusSpec};

    #[test]
    fn corpus_round_trip() {
        let spec = CorpusSpec {
            n_scenes: 4,
            duplicate_fraction: 0.5,
            ..Default::default()
        };
        let corpus = generate_corpus(3, &spec).unwrap();
        let bytes = encode_corpus(&corpus).unwrap();
        let back = decode_corpus(&bytes).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(encode_corpus(&back).unwrap(), bytes);
    }

    #[test]
    fn wrong_magic_and_version_fail() {
        let mut bytes = encode_corpus(&[]).unwrap();
        assert!(decode_grid(&bytes).is_err());
        bytes[4] = 9;
        assert!(matches!(decode_corpus(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes_fail() {
        let corpus = generate_corpus(3, &CorpusSpec::default()).unwrap();
        let mut bytes = encode_corpus(&corpus).unwrap();
        assert!(decode_corpus(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(decode_corpus(&bytes).is_err());
    }

    #[test]
    fn model_round_trip_is_exact() {
        let p = ModelParams::init(4, 8, 1e-2, 5).unwrap();
        let bytes = encode_model(&p).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn grid_round_trip_is_stable() {
        let coords = vec![[0, 0, 0], [1, 2, 3], [3, 3, 3]];
        let g = FeatureGrid::from_parts(
            4,
            2,
            coords,
            vec![0.5, 1.0 / 3.0, 2.0],
            vec![0.1, -0.2, 0.3, 0.4, 0.5, 0.6],
            vec![0.0, 1.5, -2.0],
        )
        .unwrap();
        let bytes = encode_grid(&g).unwrap();
        let back = decode_grid(&bytes).unwrap();
        assert_eq!(encode_grid(&back).unwrap(), bytes);
        assert!((back.densities[1] - 1.0 / 3.0).abs() < 1e-7);
    }
}
