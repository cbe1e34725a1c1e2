//! Command-line entry point. Data goes to files or stdout, diagnostics to stderr.

use std::ffi::OsString;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::eval::evaluate;
use crate::losses::box_term;
use crate::maps::{read_tensor, write_atomic, write_tensor, DenseMap};
use crate::net::{grad_check, load_checkpoint, save_checkpoint, Net, NetConfig, NetParams, Precision};
use crate::proposal::{propose, ProposalConfig};
use crate::rbox::{gauss_distance, RBox};
use crate::real::Real;
use crate::scene::{detections_to_json, read_annotation, write_annotation, Scene};
use crate::skeleton::build_targets;
use crate::train::{gen_dataset, train_loop, LabeledSample, SynthConfig, TrainConfig, TrainState};

/// Every tunable in one document. Missing keys take their defaults; unknown
/// keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub proposal: ProposalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.synth.validate()?;
        cfg.net.validate()?;
        cfg.train.validate()?;
        cfg.proposal.validate()?;
        Ok(cfg)
    }

    /// Writes the resolved config, defaults included.
    pub fn echo(&self, path: &Path) -> anyhow::Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "a2bis", version, about = "Rotated-box instance segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes as A2BT images plus annotation JSON.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build skeleton, segmentation, box and owner maps for one annotation.
    Targets {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        n_cls: usize,
        #[arg(long)]
        out_prefix: String,
    },
    /// Finite-difference check of the tiny double-precision network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a student/teacher pair and write both checkpoints.
    Train {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint on one image and write the three head maps.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    /// Turn head maps into scored detections with masks.
    Propose {
        #[arg(long)]
        skl: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long = "box")]
        boxes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nms_iou: Option<f64>,
        /// Score by class probability alone.
        #[arg(long)]
        no_skeleton_score: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score detections against annotations (files, or directories paired by stem).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gaussian distance and box loss between two boxes given as x,y,w,h,theta.
    Boxdist {
        #[arg(long, allow_hyphen_values = true)]
        a: String,
        #[arg(long, allow_hyphen_values = true)]
        b: String,
    },
}

/// Parses `argv` and runs it: 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn prefixed(prefix: &str, name: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}_{name}"))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn parse_box(s: &str) -> anyhow::Result<RBox> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<_, _>>().with_context(|| format!("box {s:?}"))?;
    let Ok(a) = <[f64; 5]>::try_from(v) else { bail!("box {s:?} needs five comma-separated numbers x,y,w,h,theta") };
    let b = RBox::from_array(a);
    b.validate()?;
    Ok(b)
}

fn dispatch(cmd: Command) -> anyhow::Result<i32> {
    match cmd {
        Command::Synth { out, scenes, seed, config } => {
            let cfg = RunConfig::load(config.as_deref())?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (k, (image, scene)) in gen_dataset(&cfg.synth, scenes, seed)?.into_iter().enumerate() {
                write_tensor(&image, out.join(format!("scene_{k:04}.a2bt")))?;
                write_annotation(&scene.to_annotation(), out.join(format!("scene_{k:04}.json")))?;
            }
            cfg.echo(&out.join("config.json"))?;
            eprintln!("wrote {scenes} scenes to {}", out.display());
        }
        Command::Targets { annotations, n_cls, out_prefix } => {
            let scene = Scene::from_annotation(&read_annotation(&annotations)?)?;
            let t = build_targets(&scene, n_cls)?;
            ensure_parent(&prefixed(&out_prefix, "skl.a2bt"))?;
            for (name, map) in [("skl", &t.skl), ("seg", &t.seg), ("box", &t.boxes), ("owner", &t.owner)] {
                write_tensor(map, prefixed(&out_prefix, &format!("{name}.a2bt")))?;
            }
            let cfg = RunConfig { net: NetConfig { n_cls, ..NetConfig::default() }, ..RunConfig::default() };
            cfg.echo(&prefixed(&out_prefix, "config.json"))?;
        }
        Command::Gradcheck { seed } => {
            let report = grad_check(&NetConfig::tiny(), seed)?;
            println!("{}", serde_json::to_string(&report)?);
            println!("max_rel_error {:e}", report.max_rel_error);
            if report.max_rel_error >= 1e-4 {
                eprintln!("gradient check failed at {}", report.worst_param);
                return Ok(1);
            }
        }
        Command::Train { labeled, unlabeled, config, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let samples = load_labeled(&labeled, &cfg.net)?;
            let unl = match &unlabeled {
                Some(dir) => load_images(dir, &cfg.net)?,
                None => Vec::new(),
            };
            eprintln!("training on {} labeled and {} unlabeled images", samples.len(), unl.len());
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            cfg.echo(&out.join("config.json"))?;
            match cfg.net.precision {
                Precision::Single => train_into::<f32>(&cfg, &samples, &unl, &out)?,
                Precision::Double => train_into::<f64>(&cfg, &samples, &unl, &out)?,
            }
        }
        Command::Infer { checkpoint, image, out_prefix } => {
            let (net_cfg, params) = load_checkpoint(&checkpoint)?;
            let net = Net::new(net_cfg.clone())?;
            let image = read_tensor(&image)?;
            let (skl, seg, boxes) = match net_cfg.precision {
                Precision::Single => infer_with(&net, &params, &image)?,
                Precision::Double => infer_with(&net, &params.cast::<f64>(), &image)?,
            };
            ensure_parent(&prefixed(&out_prefix, "skl.a2bt"))?;
            write_tensor(&skl, prefixed(&out_prefix, "skl.a2bt"))?;
            write_tensor(&seg, prefixed(&out_prefix, "seg.a2bt"))?;
            write_tensor(&boxes, prefixed(&out_prefix, "box.a2bt"))?;
            RunConfig { net: net_cfg, ..RunConfig::default() }.echo(&prefixed(&out_prefix, "config.json"))?;
        }
        Command::Propose { skl, seg, boxes, out, nms_iou, no_skeleton_score, config } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(iou) = nms_iou {
                cfg.proposal.nms_iou = iou;
            }
            if no_skeleton_score {
                cfg.proposal.skeleton_score = false;
            }
            cfg.proposal.validate()?;
            let (skl, seg, boxes) = (read_tensor(&skl)?, read_tensor(&seg)?, read_tensor(&boxes)?);
            let dets = propose(&skl, &seg, &boxes, &cfg.proposal)?;
            ensure_parent(&out)?;
            write_atomic(&out, detections_to_json(&dets, skl.width())?.as_bytes())?;
            cfg.echo(&with_suffix(&out, ".config.json"))?;
            eprintln!("{} detections", dets.len());
        }
        Command::Eval { pred, gt, out } => {
            let report = evaluate(&pred, &gt)?;
            ensure_parent(&out)?;
            write_atomic(&out, report.to_json()?.as_bytes())?;
            RunConfig::default().echo(&with_suffix(&out, ".config.json"))?;
            println!("map50 {} mpq {} bpq {}", report.map50, report.mpq, report.bpq);
        }
        Command::Boxdist { a, b } => {
            let (a, b) = (parse_box(&a)?, parse_box(&b)?);
            let d = gauss_distance(&a, &b);
            println!("D={d}");
            println!("loss={}", box_term(d, crate::losses::LossConfig::default().tau));
        }
    }
    Ok(0)
}

fn check_image(image: &DenseMap, net: &NetConfig, path: &Path) -> anyhow::Result<()> {
    let [h, w] = net.input_size;
    if image.shape() != (h, w, 3) {
        bail!("{}: image shape {:?} does not match the network input {h}x{w}x3", path.display(), image.shape());
    }
    Ok(())
}

fn sorted_with_ext(dir: &Path, ext: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Annotation JSON files with a sibling image of the same stem.
fn load_labeled(dir: &Path, net: &NetConfig) -> anyhow::Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for ann_path in sorted_with_ext(dir, "json")? {
        let img_path = ann_path.with_extension("a2bt");
        if !img_path.exists() {
            continue;
        }
        let image = read_tensor(&img_path)?;
        check_image(&image, net, &img_path)?;
        let scene = Scene::from_annotation(&read_annotation(&ann_path)?)?;
        let targets = build_targets(&scene, net.n_cls).with_context(|| ann_path.display().to_string())?;
        out.push(LabeledSample { image, targets });
    }
    if out.is_empty() {
        bail!("no annotated images in {}", dir.display());
    }
    Ok(out)
}

fn load_images(dir: &Path, net: &NetConfig) -> anyhow::Result<Vec<DenseMap>> {
    sorted_with_ext(dir, "a2bt")?
        .into_iter()
        .map(|p| {
            let image = read_tensor(&p)?;
            check_image(&image, net, &p)?;
            Ok(image)
        })
        .collect()
}

fn train_into<T: Real>(cfg: &RunConfig, labeled: &[LabeledSample], unlabeled: &[DenseMap], out: &Path) -> anyhow::Result<()> {
    let net = Net::new(cfg.net.clone())?;
    let mut state = TrainState::new(net.init_params::<T>(cfg.train.seed));
    let mut log = Vec::new();
    train_loop(&net, &mut state, labeled, unlabeled, &cfg.train, Some(&mut log as &mut dyn std::io::Write), |e, _| {
        eprintln!("epoch {} lr {:.3e} total {:.4} labeled {:.4} unlabeled {:.4}", e.epoch, e.lr, e.loss.total, e.loss.labeled, e.loss.unlabeled);
        ControlFlow::Continue(())
    })?;
    write_atomic(&out.join("train_log.jsonl"), &log)?;
    save_checkpoint(out, &cfg.net, &state.student)?;
    save_checkpoint(out.join("teacher"), &cfg.net, &state.teacher)?;
    Ok(())
}

fn infer_with<T: Real>(net: &Net, params: &NetParams<T>, image: &DenseMap) -> anyhow::Result<(DenseMap, DenseMap, DenseMap)> {
    check_image(image, net.config(), Path::new("image"))?;
    let x = image.map(|v| T::of(v as f64));
    let o = net.forward(params, &x)?;
    let back = |g: &crate::maps::Grid<T>| g.map(|v| v.f64() as f32);
    Ok((back(&o.skl), back(&o.seg), back(&o.boxes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["a2bis"]), 2);
        assert_eq!(run(["a2bis", "frobnicate"]), 2);
        assert_eq!(run(["a2bis", "boxdist", "--a", "0,0,4,4,0"]), 2);
    }

    #[test]
    fn runtime_errors_exit_one() {
        assert_eq!(run(["a2bis", "boxdist", "--a", "0,0,4,4", "--b", "0,0,4,4,0"]), 1);
        assert_eq!(run(["a2bis", "boxdist", "--a", "0,0,-4,4,0", "--b", "0,0,4,4,0"]), 1);
        assert_eq!(run(["a2bis", "eval", "--pred", "/nonexistent/p.json", "--gt", "/nonexistent/g.json", "--out", "/tmp/x.json"]), 1);
    }

    #[test]
    fn boxdist_accepts_negative_angles() {
        assert_eq!(run(["a2bis", "boxdist", "--a", "1,2,8,3,-0.4", "--b", "1,2,8,3,0.4"]), 0);
    }

    #[test]
    fn run_config_rejects_unknown_keys_and_fills_defaults() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 1e-4);
        let echoed: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        assert_eq!(echoed["train"]["loss"]["lambda_labeled"], 4.0);
        assert_eq!(echoed["proposal"]["nms_iou"], 0.3);
    }
}
