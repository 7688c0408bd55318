//! The `sure` command-line tool: dataset synthesis, training, matching,
//! evaluation and calibration.

pub mod checkpoint;
pub mod manifest;
pub mod pgm;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SureError};
use crate::eval::{evaluate, EvalOptions, Evaluation, MatchSample, PairEval, DEFAULT_THRESHOLDS};
use crate::evidential::{FilterRule, HeadMode};
use crate::geometry::{
    format_correspondences, spearman_rank_corr, Correspondence, CorrespondenceRecord,
};
use crate::model::{MatchOptions, ModelConfig, SureModel, STRIDE};
use crate::train::{append_report, Difficulty, TrainConfig, Trainer};

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use manifest::Manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Everything needed to rebuild and retrain a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| SureError::Parse(format!("config field `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SureError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()
    }

    /// Compact JSON with fields in declaration order.
    pub fn to_canonical_json(&self) -> Result<String> {
        serde_json::to_string(self)
            .map_err(|e| SureError::State(format!("config serialisation: {e}")))
    }

    /// CRC32 of the canonical JSON, as eight hex digits.
    pub fn hash(&self) -> Result<String> {
        Ok(format!(
            "{:08x}",
            crc32fast::hash(self.to_canonical_json()?.as_bytes())
        ))
    }
}

/// Switches for the component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Ablation {
    DirectL2,
    CoordL2,
    CoordKl,
    Evidential,
    NoFusion,
    NoFilter,
}

impl Ablation {
    fn head(self) -> Option<HeadMode> {
        match self {
            Ablation::DirectL2 => Some(HeadMode::DirectL2),
            Ablation::CoordL2 => Some(HeadMode::CoordL2),
            Ablation::CoordKl => Some(HeadMode::CoordKl),
            Ablation::Evidential => Some(HeadMode::Evidential),
            Ablation::NoFusion | Ablation::NoFilter => None,
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Ablation::NoFusion => cfg.backbone.fusion_enabled = false,
            Ablation::NoFilter => cfg.filtering_enabled = false,
            other => cfg.head_mode = other.head().expect("head ablation"),
        }
    }

    /// Whether `cfg` was trained with this switch in effect. Filtering is
    /// inference-only and always compatible.
    fn trained_into(self, cfg: &ModelConfig) -> bool {
        match self {
            Ablation::NoFusion => !cfg.backbone.fusion_enabled,
            Ablation::NoFilter => true,
            other => other.head() == Some(cfg.head_mode),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "sure",
    version,
    about = "Semi-dense matching with evidential uncertainty"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic image pairs and a manifest.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "easy")]
        difficulty: Difficulty,
        #[arg(long)]
        out_dir: PathBuf,
        /// Image side length; defaults to the config's image_size.
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a manifest and write a checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines epoch log; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        ablate: Vec<Ablation>,
        #[command(flatten)]
        common: Common,
    },
    /// Match two PGM images and print correspondences.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        image_a: PathBuf,
        image_b: PathBuf,
        #[arg(long)]
        tau_c: Option<f64>,
        #[arg(long)]
        qa: Option<f64>,
        #[arg(long)]
        qe: Option<f64>,
        #[arg(long)]
        no_filter: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Homography AUC, EPE and uncertainty correlation on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
        thresholds: Vec<f64>,
        #[arg(long)]
        ablate: Vec<Ablation>,
        /// Per-pair CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Timed repetitions per pair; 0 disables timing.
        #[arg(long, default_value_t = 10)]
        timing_runs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Per-match uncertainty and error triples plus their rank correlations.
    Calib {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Per-match CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        top_k: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &SureError) -> i32 {
    match e {
        SureError::Numeric(_) => EXIT_NUMERIC,
        SureError::Io { .. } => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| SureError::io(path, e))
}

fn stdout_err(e: std::io::Error) -> SureError {
    SureError::io("<stdout>", e)
}

/// Runs one parsed command, writing its primary output to `out`.
pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth {
            count,
            difficulty,
            out_dir,
            size,
            common,
        } => {
            let cfg = load_config(&common)?;
            let size = size.unwrap_or(cfg.train.image_size);
            let m = Manifest::synthesize(&out_dir, cfg.train.seed, count, size, difficulty)?;
            writeln!(out, "{}", out_dir.join("manifest.json").display()).map_err(stdout_err)?;
            log::info!("wrote {} pairs", m.pairs.len());
            Ok(())
        }
        Command::Train {
            manifest,
            out: ckpt,
            log: log_path,
            epochs,
            ablate,
            common,
        } => cmd_train(
            &common,
            &manifest,
            &ckpt,
            log_path.as_deref(),
            epochs,
            &ablate,
            out,
        ),
        Command::Match {
            checkpoint,
            image_a,
            image_b,
            tau_c,
            qa,
            qe,
            no_filter,
            out: dest,
            common,
        } => {
            let (model, cfg) = load_checkpoint(&checkpoint, &common)?;
            let mut opts = model.default_options();
            if let Some(t) = tau_c {
                opts.tau_c = t;
            }
            if qa.is_some() || qe.is_some() {
                let (da, de) = match opts.filter.unwrap_or(model.config.filter) {
                    FilterRule::Quantile { q_a, q_e } => (q_a, q_e),
                    FilterRule::Absolute { .. } => match FilterRule::default() {
                        FilterRule::Quantile { q_a, q_e } => (q_a, q_e),
                        FilterRule::Absolute { .. } => unreachable!("default rule is quantile"),
                    },
                };
                opts.filter = Some(FilterRule::Quantile {
                    q_a: qa.unwrap_or(da),
                    q_e: qe.unwrap_or(de),
                });
            }
            if no_filter {
                opts.filter = None;
            }
            let text = cmd_match(&model, &cfg, &image_a, &image_b, &opts)?;
            match dest {
                Some(p) => write_file(&p, text.as_bytes()),
                None => out.write_all(text.as_bytes()).map_err(stdout_err),
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            thresholds,
            ablate,
            out: csv_path,
            timing_runs,
            common,
        } => {
            let (model, cfg) = load_checkpoint(&checkpoint, &common)?;
            let summary = cmd_eval(
                &model,
                &cfg,
                &manifest,
                &thresholds,
                &ablate,
                timing_runs,
                csv_path.as_deref(),
            )?;
            writeln!(out, "{summary}").map_err(stdout_err)
        }
        Command::Calib {
            checkpoint,
            manifest,
            out: csv_path,
            top_k,
            common,
        } => {
            let (model, _) = load_checkpoint(&checkpoint, &common)?;
            let summary = cmd_calib(&model, &manifest, top_k, csv_path.as_deref())?;
            writeln!(out, "{summary}").map_err(stdout_err)
        }
    }
}

/// Loads a checkpoint; a `--config` file may override inference settings.
fn load_checkpoint(path: &Path, common: &Common) -> Result<(SureModel, RunConfig)> {
    let (mut model, mut cfg) = Checkpoint::load(path)?.to_model()?;
    if let Some(p) = &common.config {
        let o = RunConfig::load(p)?;
        model.config.tau_c = o.model.tau_c;
        model.config.filtering_enabled = o.model.filtering_enabled;
        model.config.filter = o.model.filter;
        cfg.model = model.config.clone();
    }
    Ok((model, cfg))
}

fn load_manifest_pairs(path: &Path) -> Result<(Manifest, Vec<crate::train::SyntheticPair>)> {
    let m = Manifest::load(path)?;
    let pairs = m.load_pairs(&manifest::base_dir(path))?;
    Ok((m, pairs))
}

pub fn cmd_train(
    common: &Common,
    manifest_path: &Path,
    ckpt: &Path,
    log_path: Option<&Path>,
    epochs: Option<usize>,
    ablate: &[Ablation],
    out: &mut dyn Write,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    for a in ablate {
        a.apply(&mut cfg.model);
    }
    let (m, pairs) = load_manifest_pairs(manifest_path)?;
    cfg.train.image_size = m.size;
    cfg.validate()?;
    let mut log: Box<dyn Write + '_> = match log_path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| SureError::io(p, e))?),
        None => Box::new(&mut *out),
    };
    let log_name = log_path.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf);
    let model = SureModel::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let result = trainer.fit(&pairs, |r| {
        append_report(&mut log, r).map_err(|e| SureError::io(&log_name, e))
    });
    if let Err(e) = &result {
        let line = serde_json::json!({ "error": e.to_string() });
        let _ = writeln!(log, "{line}");
    }
    result?;
    log.flush().map_err(|e| SureError::io(&log_name, e))?;
    Checkpoint::from_model(&trainer.model, &cfg)?.save(ckpt)
}

fn padded_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(STRIDE) * STRIDE, w.div_ceil(STRIDE) * STRIDE)
}

/// Matches two image files; returns the correspondence file text.
pub fn cmd_match(
    model: &SureModel,
    cfg: &RunConfig,
    path_a: &Path,
    path_b: &Path,
    opts: &MatchOptions,
) -> Result<String> {
    let a = pgm::read(path_a)?;
    let b = pgm::read(path_b)?;
    let dims = |t: &crate::diffcore::Tensor<f32>| (t.shape()[1], t.shape()[2]);
    let ((ha, wa), (hb, wb)) = (dims(&a), dims(&b));
    let (ph, pw) = padded_dims(ha.max(hb), wa.max(wb));
    let a_pad = pgm::pad_replicate(&a, ph, pw)?;
    let b_pad = pgm::pad_replicate(&b, ph, pw)?;
    let outcome = model.match_images_with(&a_pad, &b_pad, opts)?;
    let filter = match opts.filter {
        None => "none".to_string(),
        Some(FilterRule::Quantile { q_a, q_e }) => format!("quantile q_a={q_a} q_e={q_e}"),
        Some(FilterRule::Absolute { tau_a, tau_e }) => {
            format!("absolute tau_a={tau_a} tau_e={tau_e}")
        }
    };
    let header = vec![
        format!("sure correspondences, checkpoint format {FORMAT_VERSION}"),
        format!("config_hash {}", cfg.hash()?),
        format!(
            "image_a {wa}x{ha} pad_right {} pad_bottom {}",
            pw - wa,
            ph - ha
        ),
        format!(
            "image_b {wb}x{hb} pad_right {} pad_bottom {}",
            pw - wb,
            ph - hb
        ),
        format!("tau_c {} filter {filter}", opts.tau_c),
        format!(
            "matches before_filter {} after_filter {}",
            outcome.refined.len(),
            outcome.kept.len()
        ),
        "columns xA yA xB yB confidence u_a u_e".to_string(),
    ];
    let records: Vec<CorrespondenceRecord> = outcome
        .kept
        .iter()
        .map(|m| CorrespondenceRecord {
            corr: Correspondence::new(m.a, m.b, m.conf),
            u_a: m.u_a,
            u_e: m.u_e,
        })
        .collect();
    Ok(format_correspondences(&header, &records))
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    config_hash: String,
    ablation: &'a [Ablation],
    pairs: usize,
    failures: usize,
    thresholds: &'a [f64],
    report: &'a crate::geometry::MetricReport,
    mean_epe_coarse: f64,
    median_match_ms: Option<f64>,
}

/// Evaluates on a manifest; returns the JSON summary and writes the per-pair CSV.
pub fn cmd_eval(
    model: &SureModel,
    cfg: &RunConfig,
    manifest_path: &Path,
    thresholds: &[f64],
    ablate: &[Ablation],
    timing_runs: usize,
    csv_path: Option<&Path>,
) -> Result<String> {
    let mut model = model.clone();
    for a in ablate {
        if !a.trained_into(&model.config) {
            return Err(SureError::invalid(format!(
                "ablation {a:?} changes training; retrain with `sure train --ablate` (checkpoint head {}, fusion {})",
                model.config.head_mode, model.config.backbone.fusion_enabled
            )));
        }
        a.apply(&mut model.config);
    }
    let (_, pairs) = load_manifest_pairs(manifest_path)?;
    let ev = evaluate(
        &model,
        model.default_options(),
        &pairs,
        thresholds,
        EvalOptions {
            timing_runs,
            ..EvalOptions::default()
        },
    )?;
    if let Some(p) = csv_path {
        write_pair_csv(p, &ev.pairs)?;
    }
    summarize_eval(&ev, cfg, ablate, thresholds, timing_runs)
}

fn summarize_eval(
    ev: &Evaluation,
    cfg: &RunConfig,
    ablate: &[Ablation],
    thresholds: &[f64],
    timing_runs: usize,
) -> Result<String> {
    let coarse: Vec<f64> = ev
        .pairs
        .iter()
        .map(|p| p.mean_epe_coarse)
        .filter(|v| v.is_finite())
        .collect();
    let mut times: Vec<f64> = ev.pairs.iter().map(|p| p.match_ms).collect();
    times.sort_by(f64::total_cmp);
    let summary = EvalSummary {
        config_hash: cfg.hash()?,
        ablation: ablate,
        pairs: ev.pairs.len(),
        failures: ev
            .pairs
            .iter()
            .filter(|p| !p.corner_error.is_finite())
            .count(),
        thresholds,
        report: &ev.report,
        mean_epe_coarse: if coarse.is_empty() {
            f64::NAN
        } else {
            coarse.iter().sum::<f64>() / coarse.len() as f64
        },
        median_match_ms: (timing_runs > 0 && !times.is_empty()).then(|| times[times.len() / 2]),
    };
    serde_json::to_string_pretty(&summary)
        .map_err(|e| SureError::State(format!("summary serialisation: {e}")))
}

fn csv_err(path: &Path, e: csv::Error) -> SureError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SureError::io(path, io),
        other => SureError::State(format!("{}: csv: {other:?}", path.display())),
    }
}

/// Writes `rows`, then reads the file back to check it parses.
fn write_csv<R: Serialize + for<'de> Deserialize<'de> + PartialEq>(
    path: &Path,
    rows: &[R],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| SureError::io(path, e))?;
    drop(w);
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let back: Vec<R> = rd
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))?;
    if back.len() != rows.len() {
        return Err(SureError::State(format!(
            "{}: re-read {} of {} rows",
            path.display(),
            back.len(),
            rows.len()
        )));
    }
    Ok(())
}

pub fn write_pair_csv(path: &Path, rows: &[PairEval]) -> Result<()> {
    write_csv(path, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibRow {
    pub pair: usize,
    pub u_a: f64,
    pub u_e: f64,
    pub epe: f64,
    pub kept: bool,
    /// Among the `top_k` largest epistemic uncertainties.
    pub top_uncertainty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UndefinedEntry {
    pub row: usize,
    pub col: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibSummary {
    pub matches: usize,
    pub labels: [String; 3],
    /// Spearman correlations; `None` where undefined.
    pub spearman: [[Option<f64>; 3]; 3],
    pub undefined: Vec<UndefinedEntry>,
    pub top_k: usize,
}

/// Rows and correlation matrix for samples with finite end-point error.
pub fn calibration(samples: &[MatchSample], top_k: usize) -> Result<(Vec<CalibRow>, CalibSummary)> {
    let finite: Vec<&MatchSample> = samples.iter().filter(|s| s.epe.is_finite()).collect();
    let mut order: Vec<usize> = (0..finite.len()).collect();
    order.sort_by(|&x, &y| finite[y].u_e.total_cmp(&finite[x].u_e).then(x.cmp(&y)));
    let mut flagged = vec![false; finite.len()];
    for &k in order.iter().take(top_k) {
        flagged[k] = true;
    }
    let rows: Vec<CalibRow> = finite
        .iter()
        .zip(&flagged)
        .map(|(s, &f)| CalibRow {
            pair: s.pair,
            u_a: s.u_a,
            u_e: s.u_e,
            epe: s.epe,
            kept: s.kept,
            top_uncertainty: f,
        })
        .collect();
    let columns: [Vec<f64>; 3] = [
        rows.iter().map(|r| r.u_a).collect(),
        rows.iter().map(|r| r.u_e).collect(),
        rows.iter().map(|r| r.epe).collect(),
    ];
    let mut spearman = [[None; 3]; 3];
    let mut undefined = Vec::new();
    for (r, row) in spearman.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            match spearman_rank_corr(&columns[r], &columns[c]) {
                Ok(v) => *cell = Some(v),
                Err(e @ (SureError::UndefinedCorrelation(_) | SureError::InvalidArgument(_))) => {
                    undefined.push(UndefinedEntry {
                        row: r,
                        col: c,
                        reason: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
    let summary = CalibSummary {
        matches: rows.len(),
        labels: ["u_a".into(), "u_e".into(), "epe".into()],
        spearman,
        undefined,
        top_k,
    };
    Ok((rows, summary))
}

pub fn cmd_calib(
    model: &SureModel,
    manifest_path: &Path,
    top_k: usize,
    csv_path: Option<&Path>,
) -> Result<String> {
    let (_, pairs) = load_manifest_pairs(manifest_path)?;
    let ev = evaluate(
        model,
        model.default_options(),
        &pairs,
        &DEFAULT_THRESHOLDS,
        EvalOptions::default(),
    )?;
    let (rows, summary) = calibration(&ev.samples, top_k)?;
    if let Some(p) = csv_path {
        write_csv(p, &rows)?;
    }
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| SureError::State(format!("summary serialisation: {e}")))?;
    let back: CalibSummary = serde_json::from_str(&text)
        .map_err(|e| SureError::State(format!("summary re-read: {e}")))?;
    if back.matches != summary.matches {
        return Err(SureError::State(
            "calibration summary failed to re-read".into(),
        ));
    }
    Ok(text)
}
