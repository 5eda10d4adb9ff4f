//! The `generate`, `train`, `eval` and `report` commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hyperlearner::backbone::SideBranchInit;
use hyperlearner::config::ExperimentConfig;
use hyperlearner::dataset::{scene_seed, Record};
use hyperlearner::evalkit::{DifficultySpec, FpCategory, GroundTruth};
use hyperlearner::experiment::{
    inference_sample, keep_pedestrians, score_detections, DifficultyMetrics, EvalConfig, Metrics,
};
use hyperlearner::io::{
    digest_files, format_detections, load_checkpoint, parse_detections, read_dataset, record_paths, save_checkpoint,
    write_manifest, write_record, DatasetManifest,
};
use hyperlearner::model::{pixel_accuracy, Mode, Model};
use hyperlearner::synthworld::generate_scene;
use hyperlearner::trainer::{build_stage_plan, pretrain_side_branch, LogEntry, Trainer};
use hyperlearner::Error;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Command failure with its exit code class.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Format { .. } | Error::NonFiniteLoss { .. } | Error::Undefined(_) => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {}", path.display(), e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn prepare_output(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Validation(format!(
                "{} exists and is not empty (use --force)",
                dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Split directory inside a generated dataset, or `root` itself when it is
/// already a split.
pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    let sub = root.join(split);
    if sub.join("manifest.json").exists() {
        sub
    } else {
        root.to_path_buf()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

/// Write `train/` and `test/` splits. Scene `i` of the combined sequence
/// uses seed `scene_seed(scene.seed, i)`; the test split continues the
/// train sequence.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path, force: bool) -> CliResult<GenerateSummary> {
    cfg.validate()?;
    prepare_output(out, force)?;
    let channels = cfg.dataset.channels.clone();
    let mut manifests = Vec::new();
    let mut offset = 0;
    for (split, count) in [("train", cfg.dataset.train_count), ("test", cfg.dataset.test_count)] {
        let dir = out.join(split);
        let mut files = Vec::new();
        for i in 0..count {
            let scene = generate_scene(&cfg.scene.with_seed(scene_seed(cfg.scene.seed, offset + i)))?;
            let rec = Record::from_scene(&scene, &channels)?;
            write_record(&dir, i, &rec)?;
            files.extend(record_paths(i, &channels, cfg.scene.frame_pair));
        }
        let m = DatasetManifest {
            seed: cfg.scene.seed,
            count,
            scene: cfg.scene.clone(),
            channels: channels.clone(),
            digest: digest_files(&dir, &files)?,
        };
        write_manifest(&dir, &m)?;
        manifests.push(m);
        offset += count;
    }
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let test = manifests.pop().expect("two splits");
    let train = manifests.pop().expect("two splits");
    Ok(GenerateSummary { train, test })
}

#[derive(Clone, Debug, Default)]
pub struct TrainFlags {
    pub resume: bool,
    pub force: bool,
    /// Stop after this many iterations in this invocation.
    pub max_iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub finished: bool,
    pub stages: Vec<String>,
    pub iterations: usize,
    pub param_hash: String,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Per-iteration loss log; one column per loss term, empty when inactive.
pub fn format_train_log(log: &[LogEntry]) -> String {
    let terms = ["cfn", "rpn_cls", "rpn_bbox", "frcnn_cls", "frcnn_bbox"];
    let mut s = String::from("stage,iteration,sample,total");
    for t in terms {
        s.push(',');
        s.push_str(t);
    }
    s.push('\n');
    for e in log {
        let _ = write!(s, "{},{},{},{}", e.stage, e.iteration, e.sample, e.total);
        for t in terms {
            s.push(',');
            if let Some(v) = e.terms.get(t) {
                let _ = write!(s, "{}", v);
            }
        }
        s.push('\n');
    }
    s
}

fn save_progress(out: &Path, trainer: &Trainer) -> CliResult<()> {
    save_checkpoint(&out.join(CHECKPOINT_FILE), &trainer.checkpoint())?;
    write_text(&out.join(TRAIN_LOG_FILE), &format_train_log(trainer.log()))
}

/// Train on `data` (a dataset root or its train split) and write the
/// checkpoint and log to `out`.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path, flags: &TrainFlags) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let root = split_dir(data, "train");
    let channels: Vec<_> = cfg.channel.into_iter().collect();
    let (manifest, records) = read_dataset(&root, &channels)?;
    if records.is_empty() {
        return Err(CliError::Validation(format!("{} holds no images", root.display())));
    }
    let samples = records
        .iter()
        .map(|r| r.sample(cfg.channel))
        .collect::<hyperlearner::Result<Vec<_>>>()?;
    let model_cfg = cfg.model();
    let opts = cfg.training_options();
    let mut trainer = if flags.resume {
        let ck = load_checkpoint(&out.join(CHECKPOINT_FILE))?;
        Trainer::resume(ck, &model_cfg, &opts, &manifest.digest)?
    } else {
        prepare_output(out, flags.force)?;
        write_text(&out.join("config.toml"), &cfg.to_toml())?;
        let model = if model_cfg.mode == Mode::SideBranch && model_cfg.side_branch.init == SideBranchInit::Pretrained {
            let side = pretrain_side_branch(&model_cfg, &samples, &opts)?;
            Model::with_side_branch(model_cfg.clone(), cfg.seed, Some(&side))?
        } else {
            Model::new(model_cfg.clone(), cfg.seed)?
        };
        Trainer::new(model, build_stage_plan(cfg.mode, &opts), opts.clone(), &manifest.digest)?
    };
    let every = cfg.training.checkpoint_every;
    let mut budget = flags.max_iterations;
    let finished = loop {
        let chunk = match (every, budget) {
            (0, b) => b,
            (e, None) => Some(e),
            (e, Some(b)) => Some(e.min(b)),
        };
        let before = trainer.log().len();
        let done = trainer.run(&samples, chunk)?;
        let ran = trainer.log().len() - before;
        save_progress(out, &trainer)?;
        if let Some(b) = budget.as_mut() {
            *b -= ran.min(*b);
        }
        if done || budget == Some(0) {
            break done;
        }
    };
    Ok(TrainSummary {
        finished,
        stages: trainer.plan().iter().map(|s| s.name.to_string()).collect(),
        iterations: trainer.log().len(),
        param_hash: trainer.model().params.hash_all(),
    })
}

/// Where detections come from in [`cmd_eval`].
#[derive(Clone, Debug)]
pub enum DetectionSource {
    Checkpoint(PathBuf),
    /// Directory of `NNNNNN.txt` detection files.
    Files(PathBuf),
}

pub const METRICS_FILE: &str = "metrics.json";

/// Evaluate on `data` (a dataset root or its test split); writes detection
/// files, `metrics.json` and CSV tables to `out`.
pub fn cmd_eval(source: &DetectionSource, data: &Path, out: &Path, difficulty: Option<&str>) -> CliResult<Metrics> {
    let root = split_dir(data, "test");
    let mut eval_cfg = EvalConfig::default();
    if let Some(name) = difficulty {
        let d = DifficultySpec::by_name(name)
            .ok_or_else(|| CliError::Validation(format!("unknown difficulty `{}`", name)))?;
        eval_cfg.difficulties = vec![d];
    }
    let (dets, records, accuracy) = match source {
        DetectionSource::Checkpoint(path) => {
            let ck = load_checkpoint(path)?;
            let model = Model {
                config: ck.config,
                params: ck.params,
            };
            let wanted: Vec<_> = model.config.channel.into_iter().collect();
            let manifest = hyperlearner::io::read_manifest(&root)?;
            let available: Vec<_> = wanted
                .iter()
                .copied()
                .filter(|c| manifest.channels.contains(c) || *c == hyperlearner::channels::ChannelName::Icf)
                .collect();
            if model.config.mode.uses_side_branch() && available.len() != wanted.len() {
                return Err(CliError::Validation(format!(
                    "model consumes the {} channel, absent from {}",
                    wanted[0].as_str(),
                    root.display()
                )));
            }
            let (_, records) = read_dataset(&root, &available)?;
            let mut all = Vec::with_capacity(records.len());
            let (mut acc, mut n) = (0.0, 0usize);
            for (i, r) in records.iter().enumerate() {
                let sample = inference_sample(&model, r)?;
                let inf = model.infer(&sample)?;
                if let (Some(p), Some(t)) = (&inf.channel, &sample.channel) {
                    if let Ok(a) = pixel_accuracy(p, t) {
                        acc += a;
                        n += 1;
                    }
                }
                write_text(
                    &out.join(format!("detections/{}.txt", hyperlearner::io::image_stem(i))),
                    &format_detections(&inf.detections)?,
                )?;
                all.push(keep_pedestrians(inf.detections));
            }
            (all, records, (n > 0).then(|| acc / n as f64))
        }
        DetectionSource::Files(dir) => {
            let (_, records) = read_dataset(&root, &[])?;
            let mut all = Vec::with_capacity(records.len());
            for i in 0..records.len() {
                let p = dir.join(format!("{}.txt", hyperlearner::io::image_stem(i)));
                let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                all.push(keep_pedestrians(parse_detections(&text, &p)?));
            }
            (all, records, None)
        }
    };
    let gts: Vec<Vec<GroundTruth>> = records.iter().map(|r| r.ground_truth.clone()).collect();
    let mut metrics = score_detections(&dets, &gts, &eval_cfg)?;
    metrics.pixel_accuracy = accuracy;
    write_eval_outputs(out, &metrics)?;
    Ok(metrics)
}

/// Column order of summary tables.
pub const DIFFICULTY_COLUMNS: [(&str, &str); 3] = [("moderate", "Mod"), ("easy", "Easy"), ("hard", "Hard")];

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "undefined".into())
}

pub fn write_eval_outputs(out: &Path, m: &Metrics) -> CliResult<()> {
    let json = serde_json::to_string_pretty(m).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(&out.join(METRICS_FILE), &json)?;
    let present: Vec<(&str, &str, &DifficultyMetrics)> = DIFFICULTY_COLUMNS
        .iter()
        .filter_map(|(k, label)| m.difficulties.get(*k).map(|d| (*k, *label, d)))
        .collect();

    let mut summary = String::from("metric");
    for (_, label, _) in &present {
        let _ = write!(summary, ",{}", label);
    }
    summary.push('\n');
    type Getter = fn(&DifficultyMetrics) -> Option<f64>;
    let rows: [(&str, Getter); 3] = [
        ("AP", |d| (d.gt_count > 0).then_some(d.average_precision)),
        ("MR-2", |d| d.log_average_miss_rate_2),
        ("MR-4", |d| d.log_average_miss_rate_4),
    ];
    for (name, get) in rows {
        summary.push_str(name);
        for (_, _, d) in &present {
            let _ = write!(summary, ",{}", opt_pct(get(d)));
        }
        summary.push('\n');
    }
    write_text(&out.join("summary.csv"), &summary)?;

    let mut recall = String::from("difficulty,bucket,gt_count,recall\n");
    let mut fp = String::from("difficulty,selection,localization,background,cyclist,annotation\n");
    for (key, _, d) in &present {
        for b in &d.recall_buckets {
            let _ = writeln!(recall, "{},\"{}\",{},{}", key, b.bucket, b.gt_count, opt_pct(b.recall));
        }
        let _ = writeln!(recall, "{},all,{},{}", key, d.gt_count, opt_pct(d.recall_overall));
        for (sel, b) in [("at-recall", &d.fp_at_recall), ("top-n", &d.fp_top_n)] {
            let _ = write!(fp, "{},{}", key, sel);
            for c in FpCategory::ALL {
                let _ = write!(fp, ",{}", b.get(c));
            }
            fp.push('\n');
        }
        let mut pr = String::from("recall,precision\n");
        for (r, p) in &d.pr_curve {
            let _ = writeln!(pr, "{},{}", r, p);
        }
        write_text(&out.join(format!("pr_{}.csv", key)), &pr)?;
    }
    write_text(&out.join("recall_by_height.csv"), &recall)?;
    write_text(&out.join("fp_breakdown.csv"), &fp)
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Side-by-side AP table (percent, 2 decimals) of several runs. With more
/// than one run, deltas against `baseline` (default: the first run) and
/// their average are appended.
pub fn cmd_report(runs: &[PathBuf], baseline: Option<&str>) -> CliResult<String> {
    if runs.is_empty() {
        return Err(CliError::Validation("report needs at least one run".into()));
    }
    let mut rows = Vec::new();
    for dir in runs {
        let p = dir.join(METRICS_FILE);
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        let m: Metrics = serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {}", p.display(), e)))?;
        rows.push((run_name(dir), m));
    }
    let base = match baseline {
        None => 0,
        Some(b) => rows
            .iter()
            .position(|(n, _)| n == b)
            .ok_or_else(|| CliError::Validation(format!("baseline run `{}` not among the runs", b)))?,
    };
    let ap = |m: &Metrics, k: &str| m.difficulties.get(k).map(|d| d.average_precision);
    let with_delta = rows.len() > 1;
    let mut header = vec!["run".to_string()];
    header.extend(DIFFICULTY_COLUMNS.iter().map(|(_, l)| l.to_string()));
    if with_delta {
        header.extend(DIFFICULTY_COLUMNS.iter().map(|(_, l)| format!("d{}", l)));
        header.push("dAvg".into());
    }
    let mut table = vec![header];
    for (name, m) in &rows {
        let mut line = vec![name.clone()];
        for (k, _) in DIFFICULTY_COLUMNS {
            line.push(ap(m, k).map(pct).unwrap_or_else(|| "-".into()));
        }
        if with_delta {
            let mut deltas = Vec::new();
            for (k, _) in DIFFICULTY_COLUMNS {
                match (ap(m, k), ap(&rows[base].1, k)) {
                    (Some(a), Some(b)) => {
                        let d = 100.0 * (a - b);
                        deltas.push(d);
                        line.push(format!("{:+.2}", d));
                    }
                    _ => line.push("-".into()),
                }
            }
            line.push(if deltas.is_empty() {
                "-".into()
            } else {
                format!("{:+.2}", deltas.iter().sum::<f64>() / deltas.len() as f64)
            });
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in &table {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{:<w$}", v, w = widths[c]) } else { format!("{:>w$}", v, w = widths[c]) })
            .collect();
        s.push_str(cells.join("  ").trim_end());
        s.push('\n');
    }
    Ok(s)
}
