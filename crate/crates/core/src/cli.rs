//! Command-line front end. Each subcommand wraps one library operation and
//! writes its outputs, plus the effective `config.toml`, into `--out-dir`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::config::RunConfig;
use crate::data::{generate, read_scenes, scene_file_bytes, Dataset};
use crate::embedding::CategoryStatus;
use crate::error::{Error, Result};
use crate::eval::{owod_report, SceneResult, TaskLabeling};
use crate::infer::{detect, detections_text, parse_detections, SceneDetections};
use crate::textenc::{checkpoint_bytes, load_checkpoint, ToyTextEncoder};
use crate::train::{calibrate, tune_known, tune_unknown, tune_wildcard_obj, StepLog};
use crate::worldstate::{self, expand, TaskState};
use crate::write_atomic;

pub const LOG_ENV: &str = "UNIOW_LOG";

#[derive(Debug, Parser)]
#[command(name = "uniow", version, about = "Open-world detection decision layer on region features")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the world, encoder and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Obj,
    Known,
    Unknown,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world as pretrain, train and test scene files.
    Gen,
    /// Calibrate the text encoder; writes encoder.uowe and the task-1 state.uows.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        /// Number of leading dataset categories known in task 1 (default: all).
        #[arg(long)]
        known: Option<usize>,
        /// Start from this checkpoint instead of a fresh encoder.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Train the object wildcard, the current-known embeddings or the unknown wildcard.
    Tune {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Start the next task with additional category names.
    Expand {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        names: Vec<String>,
    },
    /// Write detections.tsv for every scene.
    Infer {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a detection dump; writes report.txt and report.json.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "labeling", required_unless_present = "labeling")]
        state: Option<PathBuf>,
        /// Lines of `<category id> <pk|ck|unknown>`.
        #[arg(long)]
        labeling: Option<PathBuf>,
    },
}

struct Outputs<'a> {
    dir: &'a Path,
    inputs: Vec<PathBuf>,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path, inputs: &[&Path]) -> Self {
        Outputs { dir, inputs: inputs.iter().map(|p| absolute(p)).collect(), files: Vec::new() }
    }

    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((self.dir.join(name), bytes.into()));
    }

    /// Refuses to overwrite any input, then writes every file atomically.
    fn commit(self) -> Result<()> {
        for (path, _) in &self.files {
            if self.inputs.contains(&absolute(path)) {
                return Err(Error::InvalidConfig(format!("output {} would overwrite an input", path.display())));
            }
        }
        std::fs::create_dir_all(self.dir).map_err(|e| Error::io(self.dir, e))?;
        for (path, bytes) in &self.files {
            write_atomic(path, bytes)?;
        }
        Ok(())
    }
}

fn absolute(p: &Path) -> PathBuf {
    match p.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf()).join(p.file_name().unwrap_or_default()),
        None => std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf()),
    }
}

fn log_text(log: &[StepLog]) -> String {
    let mut s = String::from("step\tstage\tloss_known\tloss_unknown\tpseudo_labels\n");
    for l in log {
        s.push_str(&format!("{l}\n"));
    }
    s
}

/// The vocabulary's names must be the dataset's leading category names, so ids agree.
fn check_names(state: &TaskState, data: &Dataset) -> Result<()> {
    for (i, name) in state.known_names().iter().enumerate() {
        match data.category_names.get(i) {
            Some(n) if n == name => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "state category {i} is {name:?} but the scene file has {other:?}"
                )))
            }
        }
    }
    Ok(())
}

fn need_encoder(path: Option<&PathBuf>, stage: &str) -> Result<ToyTextEncoder> {
    let path = path.ok_or_else(|| Error::InvalidConfig(format!("stage {stage} needs --encoder")))?;
    load_checkpoint(path)
}

pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let settings = cfg.settings();
    let out = |extra: &[&Path]| {
        let mut inputs: Vec<&Path> = cli.config.iter().map(PathBuf::as_path).collect();
        inputs.extend_from_slice(extra);
        let mut o = Outputs::new(&cli.out_dir, &inputs);
        o.add("config.toml", cfg.to_toml());
        o
    };
    match &cli.command {
        Command::Gen => {
            let world = generate(&cfg.world)?;
            let (rest, test) = world.split_tail(cfg.split.test);
            let train_len = rest.scenes.len() - cfg.split.pretrain;
            let (pretrain, train) = rest.split_tail(train_len);
            let mut o = out(&[]);
            for (name, ds) in [("pretrain", &pretrain), ("train", &train), ("test", &test)] {
                let (text, features) = scene_file_bytes(ds, &format!("{name}.uowf"))?;
                o.add(&format!("{name}.scenes"), text);
                o.add(&format!("{name}.uowf"), features);
                info!("{name}: {} scenes", ds.scenes.len());
            }
            o.commit()
        }
        Command::Calibrate { data, known, encoder } => {
            let ds = read_scenes(data)?;
            let n = known.unwrap_or(ds.category_names.len());
            if n == 0 || n > ds.category_names.len() {
                return Err(Error::InvalidConfig(format!(
                    "--known {n} must be between 1 and {}",
                    ds.category_names.len()
                )));
            }
            let names: Vec<&str> = ds.category_names[..n].iter().map(String::as_str).collect();
            let enc = match encoder {
                Some(p) => load_checkpoint(p)?,
                None => ToyTextEncoder::new(ds.dim().ok_or(Error::EmptyDataset)?, cfg.encoder.rank, cfg.encoder.seed)?,
            };
            let trained = calibrate(&ds, &enc, &names, &settings)?;
            info!("calibrated on {} scenes, {} steps", ds.scenes.len(), trained.log.len());
            let state = TaskState::initial(&names, &trained.value)?;
            let mut inputs = vec![data.as_path()];
            inputs.extend(encoder.as_deref());
            let mut o = out(&inputs);
            o.add("encoder.uowe", checkpoint_bytes(&trained.value));
            o.add("state.uows", worldstate::state_bytes(&state));
            o.add("calibrate.log", log_text(&trained.log));
            o.commit()
        }
        Command::Tune { stage, data, state, encoder } => {
            let ds = read_scenes(data)?;
            let mut st = worldstate::load(state)?;
            check_names(&st, &ds)?;
            let current = st.vocab.ids_with_status(CategoryStatus::CurrentKnown);
            let view = ds.training_view(|c| current.contains(&c));
            let (log, name) = match stage {
                StageArg::Obj => {
                    let enc = need_encoder(encoder.as_ref(), "obj")?;
                    let t = tune_wildcard_obj(&ds, &enc, &settings)?;
                    st.vocab.wildcard_obj = Some(t.value);
                    (t.log, "tune_obj.log")
                }
                StageArg::Known => {
                    let t = tune_known(&view, &st.vocab, &settings)?;
                    st.vocab = t.value;
                    (t.log, "tune_known.log")
                }
                StageArg::Unknown => {
                    let enc = need_encoder(encoder.as_ref(), "unknown")?;
                    let t = tune_unknown(&view, &st.vocab, &enc, &settings)?;
                    st.vocab = t.value;
                    (t.log, "tune_unknown.log")
                }
            };
            info!("{} steps", log.len());
            let mut inputs = vec![data.as_path(), state.as_path()];
            inputs.extend(encoder.as_deref());
            let mut o = out(&inputs);
            o.add("state.uows", worldstate::state_bytes(&st));
            o.add(name, log_text(&log));
            o.commit()
        }
        Command::Expand { state, encoder, names } => {
            let st = worldstate::load(state)?;
            let enc = load_checkpoint(encoder)?;
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let next = expand(&st, &names, &enc)?;
            info!("task {} with {} categories", next.task_index, next.vocab.len());
            let mut o = out(&[state.as_path(), encoder.as_path()]);
            o.add("state.uows", worldstate::state_bytes(&next));
            o.commit()
        }
        Command::Infer { state, data } => {
            let st = worldstate::load(state)?;
            let ds = read_scenes(data)?;
            if !ds.scenes.is_empty() {
                check_names(&st, &ds)?;
            }
            let dumps = ds
                .scenes
                .iter()
                .map(|s| {
                    Ok(SceneDetections { scene_id: s.id.clone(), detections: detect(s, &st.vocab, &settings.score, &cfg.infer)? })
                })
                .collect::<Result<Vec<_>>>()?;
            info!("{} detections", dumps.iter().map(|d| d.detections.len()).sum::<usize>());
            let mut o = out(&[state.as_path(), data.as_path()]);
            o.add("detections.tsv", detections_text(&dumps));
            o.commit()
        }
        Command::Eval { detections, data, state, labeling } => {
            let ds = read_scenes(data)?;
            let text = std::fs::read_to_string(detections).map_err(|e| Error::io(detections, e))?;
            let dumps = parse_detections(&text)?;
            let labels = match (state, labeling) {
                (Some(p), _) => {
                    let st = worldstate::load(p)?;
                    check_names(&st, &ds)?;
                    TaskLabeling::from_vocab(&st.vocab, ds.category_names.len())
                }
                (None, Some(p)) => TaskLabeling::read(p)?,
                (None, None) => unreachable!("clap requires --state or --labeling"),
            };
            let mut by_scene: std::collections::HashMap<&str, &SceneDetections> =
                dumps.iter().map(|d| (d.scene_id.as_str(), d)).collect();
            let results: Vec<SceneResult> = ds
                .scenes
                .iter()
                .map(|s| SceneResult {
                    detections: by_scene.remove(s.id.as_str()).map(|d| d.detections.clone()).unwrap_or_default(),
                    ground_truth: s.ground_truth.clone(),
                })
                .collect();
            if let Some(id) = by_scene.keys().min() {
                return Err(Error::InvalidConfig(format!("detections reference unknown scene {id:?}")));
            }
            let report = owod_report(&results, &labels, &cfg.eval)?;
            print!("{report}");
            let mut inputs = vec![detections.as_path(), data.as_path()];
            inputs.extend(state.as_deref());
            inputs.extend(labeling.as_deref());
            let mut o = out(&inputs);
            o.add("report.txt", report.to_string());
            o.add("report.json", report.to_json() + "\n");
            o.commit()
        }
    }
}

/// Parses arguments, runs the command and maps errors to a one-line diagnostic.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
