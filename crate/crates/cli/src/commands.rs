use std::fs;
use std::path::Path;

use mvssm_core::eval::{evaluate, EvalReport, Frame, MAP_THRESHOLDS_MM};
use mvssm_core::geometry::CameraRig;
use mvssm_core::io::{load_scene, load_state, save_scene, save_state, write_atomic};
use mvssm_core::pipeline::{ModelParams, PipelineConfig};
use mvssm_core::sim::{generate_scenes, Scene, SceneConfig};
use mvssm_core::tokens::tpose;
use mvssm_core::training::{self, metrics_csv, PreparedScene, TrainData, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig};
use crate::plot::{bar_chart, line_chart, Series};
use crate::{CliError, Common};

const MODEL_FILE: &str = "model.mvssm";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    Ok(write_atomic(path, bytes.as_ref())?)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serialisable") + "\n"
}

/// Loads the run configuration and applies a single `--cameras` value.
fn prepare(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = config::load(common.config.as_deref(), &common.sets, common.seed)?;
    match common.cameras.as_slice() {
        [] => {}
        [k] => cfg.scene.num_cameras = *k,
        _ => return Err(CliError::Config("this command takes a single --cameras value".into())),
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Limbs of the reference skeleton restricted to the first `joints` joints.
fn limbs(joints: usize) -> Vec<[usize; 2]> {
    tpose().limbs.iter().copied().filter(|&[a, b]| a < joints && b < joints).collect()
}

fn prepared(scenes: Vec<Scene>) -> Vec<PreparedScene> {
    scenes.into_iter().map(PreparedScene::from).collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneManifest {
    seed: u64,
    scene_config: SceneConfig,
    scenes: Vec<String>,
}

pub fn generate(common: &Common) -> Result<(), CliError> {
    let cfg = prepare(common)?;
    let scene_cfg = cfg.scene_config();
    let scenes = generate_scenes(&scene_cfg, cfg.generate.num_scenes)?;
    let stems: Vec<String> = (0..scenes.len()).map(|i| format!("scene_{i:04}")).collect();
    for (stem, scene) in stems.iter().zip(&scenes) {
        save_scene(&common.out, stem, scene)?;
    }
    let manifest = SceneManifest {
        seed: cfg.seed,
        scene_config: scene_cfg,
        scenes: stems,
    };
    write(&common.out.join("manifest.json"), to_json(&manifest))?;
    eprintln!("wrote {} scenes to {}", scenes.len(), common.out.display());
    Ok(())
}

fn loss_plot(state: &TrainState, cls_weight: f64) -> String {
    let series = |name: &str, f: &dyn Fn(&training::EpochMetrics) -> f64| Series {
        name: name.into(),
        points: state.log.iter().map(|m| (m.epoch as f64, f(m))).collect(),
    };
    line_chart(
        "Training loss",
        "epoch",
        "loss",
        &[
            series("pose", &|m| m.pose_loss),
            series("weighted classification", &|m| cls_weight * m.cls_loss),
        ],
    )
}

/// Trains with periodic checkpoints; returns the final state.
fn train_into(cfg: &RunConfig, state: TrainState, val: &[PreparedScene], out: &Path) -> Result<TrainState, CliError> {
    let data = TrainData::Synthetic {
        config: cfg.scene_config(),
        count: cfg.train.train_scenes,
    };
    let mut failure = None;
    let state = training::train(state, &cfg.train, &data, val, |s| {
        let m = s.log.last().expect("epoch logged");
        eprintln!(
            "epoch {:>3}  pose {:>12.3}  cls {:.5}  val_mpjpe {:>8.2}  ap25 {:.3}",
            m.epoch, m.pose_loss, m.cls_loss, m.val_mpjpe_mm, m.ap25
        );
        if failure.is_none() {
            let saved = save_state(&out.join(MODEL_FILE), s, true)
                .and_then(|_| write_atomic(&out.join("metrics.csv"), metrics_csv(&s.log).as_bytes()));
            if let Err(e) = saved {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    save_state(&out.join(MODEL_FILE), &state, true)?;
    write(&out.join("metrics.csv"), metrics_csv(&state.log))?;
    write(&out.join("loss.svg"), loss_plot(&state, cfg.train.cls_weight))?;
    Ok(state)
}

pub fn train(common: &Common, resume: Option<&Path>) -> Result<(), CliError> {
    let cfg = prepare(common)?;
    let state = match resume {
        Some(path) => {
            let s = load_state(path)?;
            if s.model.config != cfg.pipeline {
                return Err(CliError::Config(format!(
                    "checkpoint {} was trained with a different pipeline configuration",
                    path.display()
                )));
            }
            s
        }
        None => TrainState::new(ModelParams::init(&cfg.pipeline, cfg.seed)?),
    };
    let val = prepared(generate_scenes(&cfg.val_scene_config(), cfg.train.val_scenes)?);
    write(&common.out.join("config.json"), to_json(&cfg))?;
    train_into(&cfg, state, &val, &common.out)?;
    Ok(())
}

fn check_compatible(scene: &SceneConfig, model: &PipelineConfig) -> Result<(), CliError> {
    if scene.channels != model.feature_dim || scene.strides.len() != model.scales {
        return Err(CliError::Config(format!(
            "scenes have {} channels over {} levels; the model expects {} over {}",
            scene.channels,
            scene.strides.len(),
            model.feature_dim,
            model.scales
        )));
    }
    Ok(())
}

/// The first `k` views of a stored scene.
fn keep_views(mut scene: Scene, k: usize) -> Result<Scene, CliError> {
    if k > scene.rig.len() {
        return Err(CliError::Config(format!(
            "--cameras {k} exceeds the {} cameras of the stored scenes",
            scene.rig.len()
        )));
    }
    scene.rig = CameraRig::new(scene.rig.views[..k].to_vec())?;
    scene.pyramids.truncate(k);
    Ok(scene)
}

fn layer_csv(layers: &[Vec<Frame>], limbs: &[[usize; 2]]) -> Result<String, CliError> {
    let mut s = String::from("layer,mpjpe_mm,ap25,map,recall500,num_predictions\n");
    for (m, frames) in layers.iter().enumerate() {
        let r = evaluate(frames, limbs)?;
        s.push_str(&format!(
            "{m},{},{:.6},{:.6},{:.6},{}\n",
            r.mpjpe_mm.map_or("nan".into(), |v| format!("{v:.6}")),
            r.ap_at(25.0).unwrap_or(0.0),
            r.map,
            r.recall,
            r.num_predictions
        ));
    }
    Ok(s)
}

pub fn eval(common: &Common, model_path: &Path, scenes_dir: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = config::load(common.config.as_deref(), &common.sets, common.seed)?;
    let state = load_state(model_path).map_err(|e| CliError::Config(format!("{}: {e}", model_path.display())))?;
    let model = state.model;
    cfg.seed = common.seed.unwrap_or(model.seed);
    let limbs = limbs(model.config.num_joints);

    let stored = match scenes_dir {
        Some(dir) => {
            let text = fs::read_to_string(dir.join("manifest.json"))
                .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
            let manifest: SceneManifest =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
            check_compatible(&manifest.scene_config, &model.config)?;
            Some((dir, manifest))
        }
        None => {
            check_compatible(&cfg.scene, &model.config)?;
            None
        }
    };
    let sweep: Vec<Option<usize>> = if common.cameras.is_empty() {
        vec![None]
    } else {
        common.cameras.iter().map(|&k| Some(k)).collect()
    };
    for k in sweep.iter().flatten() {
        let camera_cfg = SceneConfig {
            num_cameras: *k,
            ..cfg.scene.clone()
        };
        camera_cfg.validate()?;
        if let Some((_, m)) = &stored {
            if *k > m.scene_config.num_cameras {
                return Err(CliError::Config(format!(
                    "--cameras {k} exceeds the {} cameras of the stored scenes",
                    m.scene_config.num_cameras
                )));
            }
        }
    }

    let mut sweep_rows: Vec<(usize, EvalReport)> = Vec::new();
    for k in &sweep {
        let scenes: Vec<Scene> = match &stored {
            Some((dir, manifest)) => manifest
                .scenes
                .iter()
                .map(|stem| {
                    let s = load_scene(dir, stem)?;
                    match k {
                        Some(k) => keep_views(s, *k),
                        None => Ok(s),
                    }
                })
                .collect::<Result<_, CliError>>()?,
            None => {
                let mut c = cfg.val_scene_config();
                if let Some(k) = k {
                    c.num_cameras = *k;
                }
                generate_scenes(&c, cfg.eval_scene_count())?
            }
        };
        let cameras = scenes.first().map_or(k.unwrap_or(cfg.scene.num_cameras), |s| s.rig.len());
        let scenes = prepared(scenes);
        let frames = training::predict_frames(&model, &scenes)?;
        let report = evaluate(&frames, &limbs)?;
        let layers = training::frames_by_layer(&model, &scenes)?;
        let suffix = k.map_or(String::new(), |k| format!("_cams{k}"));
        write(&common.out.join(format!("report{suffix}.json")), report.to_json() + "\n")?;
        write(&common.out.join(format!("report{suffix}.csv")), report.to_csv())?;
        write(&common.out.join(format!("layers{suffix}.csv")), layer_csv(&layers, &limbs)?)?;
        eprintln!(
            "{cameras} cameras: mpjpe {}  ap25 {:.3}  map {:.3}",
            report.mpjpe_mm.map_or("n/a".into(), |v| format!("{v:.2} mm")),
            report.ap_at(25.0).unwrap_or(0.0),
            report.map
        );
        sweep_rows.push((cameras, report));
    }
    if sweep_rows.len() > 1 {
        let mut csv = String::from("cameras");
        for t in MAP_THRESHOLDS_MM {
            csv.push_str(&format!(",ap{}", t as i64));
        }
        csv.push_str(",map\n");
        for (k, r) in &sweep_rows {
            csv.push_str(&k.to_string());
            for (_, a) in &r.ap {
                csv.push_str(&format!(",{a:.6}"));
            }
            csv.push_str(&format!(",{:.6}\n", r.map));
        }
        write(&common.out.join("ap_vs_cameras.csv"), csv)?;
        let mut series: Vec<Series> = MAP_THRESHOLDS_MM
            .iter()
            .map(|&t| Series {
                name: format!("AP{}", t as i64),
                points: sweep_rows.iter().map(|(k, r)| (*k as f64, r.ap_at(t).unwrap_or(0.0))).collect(),
            })
            .collect();
        series.truncate(4);
        write(
            &common.out.join("ap_vs_cameras.svg"),
            line_chart("AP vs camera count", "cameras", "AP", &series),
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    variant: String,
    mpjpe_mm: Option<f64>,
    ap25: f64,
    map: f64,
    recall500: f64,
    pcp: f64,
    final_pose_loss: f64,
}

pub fn ablate(common: &Common) -> Result<(), CliError> {
    let cfg = prepare(common)?;
    let runs: Vec<RunConfig> = cfg
        .ablation
        .variants
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.pipeline.block_variant = v;
            c.validate().map(|_| c)
        })
        .collect::<Result<_, _>>()?;
    let val = prepared(generate_scenes(&cfg.val_scene_config(), cfg.train.val_scenes)?);
    write(&common.out.join("config.json"), to_json(&cfg))?;
    let limbs = limbs(cfg.pipeline.num_joints);
    let mut rows = Vec::new();
    for run in &runs {
        let name = run.pipeline.block_variant.name();
        eprintln!("training variant {name}");
        let dir = common.out.join(name);
        let state = TrainState::new(ModelParams::init(&run.pipeline, run.seed)?);
        let state = train_into(run, state, &val, &dir)?;
        let report = evaluate(&training::predict_frames(&state.model, &val)?, &limbs)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            mpjpe_mm: report.mpjpe_mm,
            ap25: report.ap_at(25.0).unwrap_or(0.0),
            map: report.map,
            recall500: report.recall,
            pcp: report.pcp_mean,
            final_pose_loss: state.log.last().map_or(f64::NAN, |m| m.pose_loss),
        });
    }
    let mut csv = String::from("variant,mpjpe_mm,ap25,map,recall500,pcp,final_pose_loss\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.variant,
            r.mpjpe_mm.map_or("nan".into(), |v| format!("{v:.6}")),
            r.ap25,
            r.map,
            r.recall500,
            r.pcp,
            r.final_pose_loss
        ));
    }
    write(&common.out.join("ablation.csv"), csv)?;
    write(&common.out.join("ablation.json"), to_json(&rows))?;
    let bars: Vec<(String, f64)> = rows
        .iter()
        .map(|r| (r.variant.clone(), r.mpjpe_mm.unwrap_or(f64::NAN)))
        .collect();
    write(&common.out.join("ablation.svg"), bar_chart("Block ablation", "MPJPE (mm)", &bars))?;
    Ok(())
}
