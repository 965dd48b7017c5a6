//! On-disk formats: the versioned parameter container and scene files.
//!
//! Container layout: `b"MVSSMPAR"`, `u32` version, `u64` manifest length, the
//! JSON manifest, then little-endian `f64` tensor data in manifest order,
//! followed by the Adam moments when the manifest says they are present.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, Point3};
use crate::pipeline::{FeatureLevel, FeaturePyramid, ModelParams, ParamSet, PipelineConfig};
use crate::sim::Scene;
use crate::training::{AdamState, EpochMetrics, TrainState};

pub const MAGIC: &[u8; 8] = b"MVSSMPAR";
pub const VERSION: u32 = 1;

/// Write through a sibling temporary file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: PipelineConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
    adam_step: Option<u64>,
    epochs_done: usize,
    log: Vec<EpochMetrics>,
}

fn push_f64s(out: &mut Vec<u8>, values: &[Array2<f64>]) {
    for v in values {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn tensors(&mut self, entries: &[TensorEntry]) -> Result<Vec<Array2<f64>>> {
        entries
            .iter()
            .map(|e| {
                let data = self.f64s(e.shape[0] * e.shape[1])?;
                Array2::from_shape_vec((e.shape[0], e.shape[1]), data).map_err(|err| Error::Format(err.to_string()))
            })
            .collect()
    }
}

pub fn encode_state(state: &TrainState, with_adam: bool) -> Vec<u8> {
    let p = &state.model.params;
    let manifest = Manifest {
        config: state.model.config.clone(),
        seed: state.model.seed,
        tensors: p
            .names()
            .iter()
            .zip(p.values())
            .map(|(n, v)| TensorEntry {
                name: n.clone(),
                shape: [v.nrows(), v.ncols()],
            })
            .collect(),
        adam_step: with_adam.then_some(state.adam.step),
        epochs_done: state.epochs_done,
        log: state.log.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    push_f64s(&mut out, p.values());
    if with_adam {
        push_f64s(&mut out, &state.adam.m);
        push_f64s(&mut out, &state.adam.v);
    }
    out
}

pub fn decode_state(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a parameter container".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)?;
    manifest.config.validate()?;
    let mut params = ParamSet::default();
    for (e, v) in manifest.tensors.iter().zip(r.tensors(&manifest.tensors)?) {
        params.insert(e.name.clone(), v);
    }
    let expected = ModelParams::init(&manifest.config, manifest.seed)?;
    if expected.params.names() != params.names()
        || expected.params.values().iter().zip(params.values()).any(|(a, b)| a.dim() != b.dim())
    {
        return Err(Error::Format("tensor layout does not match the configuration".into()));
    }
    let model = ModelParams {
        config: manifest.config,
        params,
        seed: manifest.seed,
    };
    let adam = match manifest.adam_step {
        Some(step) => AdamState {
            m: r.tensors(&manifest.tensors)?,
            v: r.tensors(&manifest.tensors)?,
            step,
        },
        None => AdamState::new(&model.params),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Ok(TrainState {
        model,
        adam,
        epochs_done: manifest.epochs_done,
        log: manifest.log,
    })
}

pub fn save_state(path: &Path, state: &TrainState, with_adam: bool) -> Result<()> {
    write_atomic(path, &encode_state(state, with_adam))
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    decode_state(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelEntry {
    stride: f64,
    height: usize,
    width: usize,
    channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneManifest {
    rig: CameraRig,
    actors: Vec<Vec<[f64; 3]>>,
    /// `[view][level]` grid shapes of the companion binary file.
    levels: Vec<Vec<LevelEntry>>,
}

/// `(json, bin)` encodings of a scene.
pub fn encode_scene(scene: &Scene) -> (String, Vec<u8>) {
    let manifest = SceneManifest {
        rig: scene.rig.clone(),
        actors: scene
            .actors
            .iter()
            .map(|a| a.iter().map(|p| [p.x, p.y, p.z]).collect())
            .collect(),
        levels: scene
            .pyramids
            .iter()
            .map(|p| {
                p.levels
                    .iter()
                    .map(|l| LevelEntry {
                        stride: l.stride,
                        height: l.height,
                        width: l.width,
                        channels: l.channels,
                    })
                    .collect()
            })
            .collect(),
    };
    let mut bin = Vec::new();
    for p in &scene.pyramids {
        for l in &p.levels {
            for x in &l.data {
                bin.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    (
        serde_json::to_string_pretty(&manifest).expect("scene manifest serialises"),
        bin,
    )
}

pub fn decode_scene(json: &str, bin: &[u8]) -> Result<Scene> {
    let m: SceneManifest = serde_json::from_str(json)?;
    if m.levels.len() != m.rig.len() {
        return Err(Error::Format("one pyramid per view is required".into()));
    }
    let mut r = Reader { bytes: bin, pos: 0 };
    let mut pyramids = Vec::with_capacity(m.levels.len());
    for view in &m.levels {
        let mut levels = Vec::with_capacity(view.len());
        for e in view {
            let data = r.f64s(e.height * e.width * e.channels)?;
            let level = FeatureLevel {
                stride: e.stride,
                height: e.height,
                width: e.width,
                channels: e.channels,
                data,
            };
            level.validate()?;
            levels.push(level);
        }
        pyramids.push(FeaturePyramid { levels });
    }
    if r.pos != bin.len() {
        return Err(Error::Format("trailing bytes in scene data".into()));
    }
    Ok(Scene {
        rig: m.rig,
        actors: m
            .actors
            .into_iter()
            .map(|a| a.into_iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
            .collect(),
        pyramids,
    })
}

/// Writes `<stem>.json` and `<stem>.bin` inside `dir`.
pub fn save_scene(dir: &Path, stem: &str, scene: &Scene) -> Result<()> {
    let (json, bin) = encode_scene(scene);
    write_atomic(&dir.join(format!("{stem}.bin")), &bin)?;
    write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())
}

pub fn load_scene(dir: &Path, stem: &str) -> Result<Scene> {
    let json = fs::read_to_string(dir.join(format!("{stem}.json")))?;
    let bin = fs::read(dir.join(format!("{stem}.bin")))?;
    decode_scene(&json, &bin)
}
