use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use zmask::attacks::{craft_defense_aware, craft_patch, AttackMode};
use zmask::calibration::CalibrationProfile;
use zmask::defense::Defense;
use zmask::fusion::{BinaryMask, FusionParams};
use zmask::lab;
use zmask::learn::TrainConfig;
use zmask::metrics::{detection_rates, mask_iou, Confusion};
use zmask::tensor::{image_decode, image_read, image_write, npy_read, npy_write};
use zmask::toy::{apply_patch, corpus, SyntheticScene, ToySegNet};
use zmask::trace::TraceManifest;
use zmask::{Image, Tensor};

use crate::config::{Loaded, RunConfig, SceneRange, Source};
use crate::error::CliError;
use crate::report::Report;

pub struct Context {
    pub config: RunConfig,
    pub config_bytes: Vec<u8>,
    pub out: PathBuf,
    pub seed: u64,
}

impl Context {
    pub fn new(loaded: Loaded, out: PathBuf, seed: Option<u64>) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("{}: {e}", out.display())))?;
        let seed = seed.unwrap_or(loaded.config.attack.seed);
        Ok(Context { config: loaded.config, config_bytes: loaded.bytes, out, seed })
    }

    fn report(&self, command: &'static str) -> Report {
        let echo = serde_json::to_value(&self.config).expect("config serializes");
        Report::new(command, &self.out, &self.config_bytes, echo, self.seed)
    }

    fn net(&self) -> Result<ToySegNet, CliError> {
        match &self.config.model.weights {
            Some(dir) => ToySegNet::load(dir).map_err(CliError::from_config),
            None => ToySegNet::golden().map_err(CliError::Lib),
        }
    }

    fn profile(&self) -> Result<CalibrationProfile, CliError> {
        let path = self.config.require(&self.config.profile, "profile")?;
        CalibrationProfile::load(path).map_err(CliError::from_config)
    }

    fn defense(&self) -> Result<Defense, CliError> {
        let path = self.config.require(&self.config.fusion, "fusion")?;
        let params = FusionParams::load(path).map_err(CliError::from_config)?;
        Defense::new(self.profile()?, self.config.layer_set()?, params).map_err(CliError::from_config)
    }

    fn traces_dir(&self) -> Result<&Path, CliError> {
        self.config.require(&self.config.model.traces, "model.traces")
    }

    fn ensure_dir(&self, rel: &str) -> Result<PathBuf, CliError> {
        let dir = self.out.join(rel);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }
}

fn scenes(range: SceneRange) -> Vec<SyntheticScene> {
    corpus(range.start, range.count)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Lib(zmask::Error::Io { path: path.into(), source: e }))
}

fn labels_tensor(labels: &[usize], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![1, h, w], labels.iter().map(|&c| c as f32).collect()).expect("label map shape")
}

fn tensor_labels(t: &Tensor) -> Result<Vec<usize>, CliError> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CliError::Lib(zmask::Error::Format(format!("label value {v} is not a class id"))))
            }
        })
        .collect()
}

pub fn calibrate(ctx: &Context) -> Result<(), CliError> {
    let mut report = ctx.report("calibrate");
    let profile = match ctx.config.model.source {
        Source::Toy => {
            let range = ctx.config.scenes.calibration;
            lab::calibrate(&ctx.net()?, &scenes(range), &format!("toy-scenes-{}-{}", range.start, range.count))?
        }
        Source::Traces => {
            let dir = ctx.traces_dir()?;
            let manifest = TraceManifest::load(dir).map_err(CliError::from_config)?;
            manifest.validate(dir)?;
            if manifest.images.is_empty() {
                return Err(zmask::Error::InvalidArgument("trace directory lists no images".into()).into());
            }
            let mut profile = CalibrationProfile::new(manifest.model_id.clone(), dir.display().to_string());
            for i in 0..manifest.images.len() {
                let trace = manifest.load_trace(dir, i)?;
                profile.observe(trace.iter())?;
            }
            profile
        }
    };
    for (name, stats) in &profile.layers {
        eprintln!("layer {name}: {} channels", stats.channels());
        report.record(json!({ "layer": name, "channels": stats.channels() }));
    }
    profile.save(ctx.out.join("profile.json"))?;
    report.metric("images", profile.image_count);
    report.metric("layers", profile.layers.len());
    report.artifact("profile.json");
    report.write()
}

/// Expands directories in the patch list to their `.npy` files, sorted by name.
fn patch_files(list: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in list {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "npy"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("config field `patches` lists no patch files".into()));
    }
    Ok(out)
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let mut report = ctx.report("train");
    let net = ctx.net()?;
    let profile = ctx.profile()?;
    let layers = ctx.config.layer_set()?;
    let files = patch_files(&ctx.config.patches)?;
    let patches: Vec<Tensor> =
        files.iter().map(|f| npy_read(f).map_err(CliError::from_config)).collect::<Result<_, _>>()?;
    let train_scenes = scenes(ctx.config.scenes.train);
    let patched = lab::patched_training_set(
        &train_scenes,
        &patches,
        &ctx.config.attack.ranges,
        ctx.seed.wrapping_add(lab::PLACEMENT_SEED_OFFSET),
    )?;
    let t = &ctx.config.train;
    let cfg =
        TrainConfig { epochs: t.epochs, lr: t.lr, batch_size: t.batch_size, seed: ctx.seed, ..Default::default() };
    let fitted = lab::fit_defense(&net, &profile, &layers, &train_scenes, &patched, &cfg)?;
    let params = fitted.defense.params;
    params.save(ctx.out.join("fusion.json"))?;
    write_text(&ctx.out.join("train_log.csv"), &fitted.training.to_csv())?;
    write_text(&ctx.out.join("roc.csv"), &fitted.roc.to_csv())?;
    let roc = json!({ "auc": fitted.roc.auc, "lambda0": params.lambda0, "cutoff": "youden_j" });
    write_text(&ctx.out.join("roc.json"), &serde_json::to_string_pretty(&roc).expect("serializes"))?;
    for f in &files {
        report.record(json!({ "patch": f.display().to_string() }));
    }
    report.metric("auc", fitted.roc.auc);
    report.metric("lambda0", params.lambda0);
    report.metric("initial_loss", fitted.training.initial_loss);
    report.metric("final_loss", fitted.training.final_loss());
    report.metric("examples", patched.len());
    for a in ["fusion.json", "train_log.csv", "roc.csv", "roc.json"] {
        report.artifact(a);
    }
    report.write()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Plain,
    Beta,
    AdvMask,
    AdvFlag,
}

impl ModeArg {
    fn with(self, v: f64) -> AttackMode {
        match self {
            ModeArg::Plain => AttackMode::Plain,
            ModeArg::Beta => AttackMode::BetaMixed { beta: v },
            ModeArg::AdvMask => AttackMode::AdvMask { alpha: v },
            ModeArg::AdvFlag => AttackMode::AdvFlag { alpha: v },
        }
    }

    fn of(mode: &AttackMode) -> (Self, f64) {
        match *mode {
            AttackMode::Plain => (ModeArg::Plain, 1.0),
            AttackMode::BetaMixed { beta } => (ModeArg::Beta, beta),
            AttackMode::AdvMask { alpha } => (ModeArg::AdvMask, alpha),
            AttackMode::AdvFlag { alpha } => (ModeArg::AdvFlag, alpha),
        }
    }
}

pub struct AttackArgs {
    pub mode: Option<ModeArg>,
    pub value: Option<f64>,
    pub sweep: bool,
}

pub fn attack(ctx: &Context, args: &AttackArgs) -> Result<(), CliError> {
    let mut report = ctx.report("attack");
    let (cfg_mode, cfg_value) = ModeArg::of(&ctx.config.attack.mode);
    let mode = args.mode.unwrap_or(cfg_mode);
    let values: Vec<f64> = match (args.sweep, mode) {
        (true, ModeArg::Plain) => return Err(CliError::Config("plain mode has no sweep".into())),
        (true, ModeArg::Beta) => ctx.config.sweep_beta.clone(),
        (true, _) => ctx.config.sweep_alpha.clone(),
        (false, _) => vec![args.value.unwrap_or(cfg_value)],
    };
    if values.is_empty() {
        return Err(CliError::Config("sweep list is empty".into()));
    }
    let net = ctx.net()?;
    let train_scenes = scenes(ctx.config.scenes.train);
    let defense = match mode {
        ModeArg::AdvMask | ModeArg::AdvFlag => Some(ctx.defense()?),
        _ => None,
    };
    let profile = match (&defense, mode) {
        (None, ModeArg::Beta) => Some(ctx.profile()?),
        _ => None,
    };
    let dir = ctx.ensure_dir("patches")?;
    for (i, &v) in values.iter().enumerate() {
        let mut cfg = ctx.config.attack.clone();
        cfg.mode = mode.with(v);
        cfg.seed = ctx.seed.wrapping_add(i as u64);
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let crafted = match &defense {
            Some(d) => craft_defense_aware(&net, d, &train_scenes, &cfg)?,
            None => craft_patch(&net, &train_scenes, profile.as_ref(), &cfg)?,
        };
        let stem = cfg.mode.label();
        crafted.save(&dir, &stem)?;
        eprintln!("{stem}: final objective {:.5}", crafted.losses.last().copied().unwrap_or(f64::NAN));
        report.record(json!({
            "patch": format!("patches/{stem}.npy"),
            "mode": cfg.mode,
            "seed": cfg.seed,
            "final_losses": crafted.provenance.final_losses,
        }));
        report.artifact(format!("patches/{stem}.npy"));
        report.artifact(format!("patches/{stem}.json"));
    }
    report.metric("patches", values.len());
    report.write()
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|f| f.extension().is_some_and(|x| x == "ppm" || x == "pgm" || x == "pnm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!("{} holds no PPM/PGM images", input.display())));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

pub fn defend(ctx: &Context, input: Option<&Path>) -> Result<(), CliError> {
    let mut report = ctx.report("defend");
    let defense = ctx.defense()?;
    let mut records = Vec::new();
    match ctx.config.model.source {
        Source::Toy => {
            let input = input.ok_or_else(|| CliError::Config("defend needs --input with the toy model".into()))?;
            let net = ctx.net()?;
            let (out_dir, mask_dir, pred_dir) =
                (ctx.ensure_dir("defended")?, ctx.ensure_dir("masks")?, ctx.ensure_dir("predictions")?);
            for file in image_files(input)? {
                let bytes = std::fs::read(&file).map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?;
                let image = image_decode(&bytes)?;
                let (masked, outcome) = defense.defend(&net, &image)?;
                let name = stem(&file);
                let out_rel = format!("defended/{name}.ppm");
                if outcome.flagged {
                    image_write(&masked, out_dir.join(format!("{name}.ppm")))?;
                } else {
                    write_text_bytes(&out_dir.join(format!("{name}.ppm")), &bytes)?;
                }
                image_write(&outcome.mask.as_image(), mask_dir.join(format!("{name}.pgm")))?;
                let pred = net.predict(&masked)?;
                npy_write(
                    &labels_tensor(&pred, masked.height(), masked.width()),
                    pred_dir.join(format!("{name}.npy")),
                )?;
                let mask_rel = format!("masks/{name}.pgm");
                let pred_rel = format!("predictions/{name}.npy");
                for a in [&out_rel, &mask_rel, &pred_rel] {
                    report.artifact(a.as_str());
                }
                records.push(json!({
                    "image": file.display().to_string(),
                    "d": outcome.score,
                    "flag": outcome.flagged,
                    "mask": mask_rel,
                    "output": out_rel,
                    "prediction": pred_rel,
                }));
            }
        }
        Source::Traces => {
            let dir = match input {
                Some(p) => p,
                None => ctx.traces_dir()?,
            };
            let manifest = TraceManifest::load(dir).map_err(CliError::from_config)?;
            manifest.validate(dir)?;
            let mask_dir = ctx.ensure_dir("masks")?;
            let (h, w) = defense.layers.resize_dims();
            for (i, entry) in manifest.images.iter().enumerate() {
                let outcome = defense.analyze(&manifest.load_trace(dir, i)?, h, w)?;
                let mask_rel = format!("masks/{}.npy", entry.id);
                npy_write(outcome.mask.tensor(), mask_dir.join(format!("{}.npy", entry.id)))?;
                report.artifact(mask_rel.as_str());
                records
                    .push(json!({ "image": entry.id, "d": outcome.score, "flag": outcome.flagged, "mask": mask_rel }));
            }
        }
    }
    let flagged = records.iter().filter(|r| r["flag"] == Value::Bool(true)).count();
    report.metric("images", records.len());
    report.metric("flagged", flagged);
    write_text(&ctx.out.join("defend.json"), &serde_json::to_string_pretty(&records).expect("serializes"))?;
    report.artifact("defend.json");
    for r in records {
        report.record(r);
    }
    report.write()
}

fn write_text_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Lib(zmask::Error::Io { path: path.into(), source: e }))
}

/// Reads a keep-mask from NPY or PGM/PPM (first channel, values in `[0, 1]`).
fn read_mask(path: &Path) -> Result<BinaryMask, CliError> {
    let t = if path.extension().is_some_and(|x| x == "npy") {
        npy_read(path)?
    } else {
        let img: Image = image_read(path)?;
        let (_, h, w) = img.tensor().dims3()?;
        Tensor::new(vec![1, h, w], img.tensor().data()[..h * w].to_vec())?
    };
    Ok(BinaryMask::new(t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))?)
}

pub fn metrics(ctx: &Context) -> Result<(), CliError> {
    let mut report = ctx.report("metrics");
    let m =
        ctx.config.metrics.as_ref().ok_or_else(|| CliError::Config("config section `metrics` is required".into()))?;
    if m.classes == 0 {
        return Err(CliError::Config("metrics.classes must be positive".into()));
    }
    let mut conf = Confusion::new(m.classes);
    let mut ious = Vec::new();
    for item in &m.items {
        let pred = npy_read(&item.prediction).map_err(CliError::from_config)?;
        let labels = npy_read(&item.labels).map_err(CliError::from_config)?;
        pred.expect_same_shape(&labels)?;
        let footprint = item.footprint.as_ref().map(|p| npy_read(p).map_err(CliError::from_config)).transpose()?;
        if let Some(f) = &footprint {
            if f.numel() != labels.numel() {
                return Err(zmask::Error::Shape("footprint and labels differ in size".into()).into());
            }
        }
        conf.add(&tensor_labels(&pred)?, &tensor_labels(&labels)?, footprint.as_ref().map(|f| f.data()))?;
        let iou = match (&item.mask, &footprint) {
            (Some(mask), Some(f)) => Some(mask_iou(&read_mask(mask)?.removed(), f)?),
            _ => None,
        };
        ious.extend(iou);
        report.record(json!({ "prediction": item.prediction.display().to_string(), "mask_iou": iou }));
    }
    let mut summary = serde_json::Map::new();
    summary.insert("miou".into(), conf.miou().into());
    summary.insert("class_iou".into(), json!(conf.class_iou()));
    if !ious.is_empty() {
        summary.insert("mask_iou".into(), (ious.iter().sum::<f64>() / ious.len() as f64).into());
    }
    if let Some(d) = &m.detection {
        let (tpr, fpr) = detection_rates(&d.scores, &d.positive, d.lambda0)?;
        summary.insert("tpr".into(), tpr.into());
        summary.insert("fpr".into(), fpr.into());
    }
    let mut csv = String::from("metric,value\n");
    for (k, v) in &summary {
        if let Some(x) = v.as_f64() {
            csv.push_str(&format!("{k},{x}\n"));
        }
        report.metric(k, v.clone());
    }
    write_text(&ctx.out.join("metrics.json"), &serde_json::to_string_pretty(&summary).expect("serializes"))?;
    write_text(&ctx.out.join("metrics.csv"), &csv)?;
    report.artifact("metrics.json");
    report.artifact("metrics.csv");
    report.write()
}

/// Writes toy scenes (and optionally patched copies) for use with `defend` and `metrics`.
pub fn export_scenes(ctx: &Context, patch: Option<&Path>) -> Result<(), CliError> {
    let mut report = ctx.report("scenes");
    let range = ctx.config.scenes.test;
    let list = scenes(range);
    ctx.ensure_dir("scenes")?;
    let patch = patch.map(|p| npy_read(p).map_err(CliError::from_config)).transpose()?;
    let transforms = match &patch {
        Some(p) => {
            let (_, ph, pw) = p.dims3()?;
            Some(lab::placements(&list, (ph, pw), &ctx.config.attack.ranges, ctx.seed)?)
        }
        None => None,
    };
    for (i, s) in list.iter().enumerate() {
        let id = format!("{:05}", range.start + i as u64);
        let clean = format!("scenes/clean_{id}.ppm");
        let labels = format!("scenes/labels_{id}.npy");
        image_write(&s.image, ctx.out.join(&clean))?;
        npy_write(&labels_tensor(&s.labels, s.height(), s.width()), ctx.out.join(&labels))?;
        let mut rec = json!({ "scene": range.start + i as u64, "clean": clean, "labels": labels });
        report.artifact(clean);
        report.artifact(labels);
        if let (Some(p), Some(ts)) = (&patch, &transforms) {
            let patched = apply_patch(&s.image, p, &ts[i])?;
            let (img, fp) = (format!("scenes/patched_{id}.ppm"), format!("scenes/footprint_{id}.npy"));
            image_write(&patched.image, ctx.out.join(&img))?;
            npy_write(&patched.footprint, ctx.out.join(&fp))?;
            rec["patched"] = img.clone().into();
            rec["footprint"] = fp.clone().into();
            report.artifact(img);
            report.artifact(fp);
        }
        report.record(rec);
    }
    report.metric("scenes", list.len());
    report.write()
}
