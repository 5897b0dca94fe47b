use std::path::{Path, PathBuf};
use std::process::ExitCode;

use angiophase::bundle::{list_bundles, read_json, write_json, StudyBundle};
use angiophase::ecg::{annotate, heart_rate, PeakSet};
use angiophase::labeling::{resample_to_10fps, FrameLabelTrack};
use angiophase::phasenet::{train_phasenet, PhaseModel, PredictionTrace};
use angiophase::pipeline::{
    collect_phase_sequences, collect_vessel_pairs, ecg_labels, evaluate_bundle, inclusion_filter, load_bundles,
    parallel_map, predict_bundle, Evaluated, Inclusion, Rejection, RunConfig, RunMode,
};
use angiophase::report::{build_report, load_report, probability_svg, MetricReport};
use angiophase::synth::{gen_dataset, SynthDistribution};
use angiophase::vesselness::{train_vesselness, VesselModel};
use angiophase::{Error, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

const VESSEL_WEIGHTS: &str = "vessel.json";
const PHASE_WEIGHTS: &str = "phase.json";
const TRACE_FILE: &str = "trace.json";
const TIMINGS_FILE: &str = "timings.json";
const INCLUSION_FILE: &str = "inclusion.json";

#[derive(Parser)]
#[command(name = "angiophase", version, about = "ECG-free cardiac phase and end-diastolic frame detection")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write SVG plots next to evaluation reports.
    #[arg(long, global = true)]
    plot: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic study bundles with truth sidecars.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: u64,
        /// JSON sampling ranges; defaults apply to missing fields.
        #[arg(long)]
        distribution: Option<PathBuf>,
    },
    /// Detect R peaks, T peaks and end-of-systole points.
    AnnotateEcg {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive per-frame phase labels from the ECG.
    Label {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the vessel segmenter on centreline annotations.
    TrainVessel {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the phase network on ECG-labelled bundles.
    TrainPhase {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        vessel_weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict phase and end-diastolic frames.
    Predict {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Phase network weight manifest.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        vessel_weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction traces against ECG-derived ground truth.
    Evaluate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory written by `predict`.
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a metrics report as text.
    Report {
        /// metrics.json written by `evaluate`.
        #[arg(long)]
        metrics: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    category: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bundle: Option<&'a str>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (stage, bundle) = match &e {
                Error::Stage { stage, bundle, .. } => (Some(*stage), Some(bundle.as_str())),
                _ => (None, None),
            };
            let report = ErrorReport {
                category: e.category(),
                message: e.to_string(),
                stage,
                bundle,
            };
            eprintln!("{}", serde_json::to_string(&report).expect("error report serializes"));
            ExitCode::FAILURE
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.vessel_train.seed = s;
        cfg.phase_train.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.plot |= cli.plot;
    cfg.validate()?;
    Ok(cfg)
}

fn bundle_dirs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for i in inputs {
        dirs.extend(list_bundles(i)?);
    }
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(dirs)
}

fn bundles(inputs: &[PathBuf], cfg: &RunConfig) -> Result<Vec<StudyBundle>> {
    load_bundles(&bundle_dirs(inputs)?, cfg.threads)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn weights_path(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("no {what} weights given")))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

#[derive(Serialize)]
struct EcgAnnotationFile<'a> {
    fs: f64,
    heart_rate_bpm: Option<f64>,
    #[serde(flatten)]
    peaks: &'a PeakSet,
}

#[derive(Serialize)]
struct LabelFile<'a> {
    track: &'a FrameLabelTrack,
    /// Frames kept at 10 fps and their labels.
    source: Vec<usize>,
    labels: Vec<f64>,
}

#[derive(Serialize)]
struct TrainingSummary<'a> {
    weights: &'a Path,
    samples: usize,
    epoch_losses: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    rejected: Option<&'a [Rejection]>,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = run_config(&cli)?;
    match &cli.command {
        Command::Synth {
            out,
            count,
            distribution,
        } => {
            let dist = match distribution {
                Some(p) => {
                    let dir = p.parent().unwrap_or(Path::new("."));
                    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                    read_json::<SynthDistribution>(dir, name)?
                }
                None => SynthDistribution::default(),
            };
            create_dir(out)?;
            let dirs = gen_dataset(*count, &dist, cfg.seed, out)?;
            print_json(&dirs);
        }
        Command::AnnotateEcg { inputs, out } => {
            for b in bundles(inputs, &cfg)? {
                let id = b.id();
                let ecg = b
                    .ecg
                    .as_ref()
                    .ok_or_else(|| Error::Config("bundle has no ECG".into()).in_stage("annotate-ecg", id))?;
                let ann = annotate(ecg, &cfg.ecg).map_err(|e| e.in_stage("annotate-ecg", id))?;
                let dir = out.join(id);
                create_dir(&dir)?;
                let file = EcgAnnotationFile {
                    fs: ecg.fs,
                    heart_rate_bpm: heart_rate(&ann.peaks.r_peaks, ecg.fs).ok(),
                    peaks: &ann.peaks,
                };
                write_json(&dir, "ecg_annotation.json", &file)?;
            }
        }
        Command::Label { inputs, out } => {
            for b in bundles(inputs, &cfg)? {
                let id = b.id();
                let labels = ecg_labels(&b, &cfg).map_err(|e| e.in_stage("label", id))?;
                let idx: Vec<usize> = labels.track.interval.indices().collect();
                let r = resample_to_10fps(&labels.track, &idx).map_err(|e| e.in_stage("label", id))?;
                let dir = out.join(id);
                create_dir(&dir)?;
                let file = LabelFile {
                    track: &labels.track,
                    source: r.source,
                    labels: r.labels,
                };
                write_json(&dir, "labels.json", &file)?;
            }
        }
        Command::TrainVessel { inputs, out } => {
            let all = bundles(inputs, &cfg)?;
            let pairs = collect_vessel_pairs(&all, &cfg)?;
            let trained = train_vesselness(&pairs, cfg.vessel_arch, &cfg.vessel_train)?;
            create_dir(out)?;
            let path = out.join(VESSEL_WEIGHTS);
            trained.model.save(&path)?;
            print_json(&TrainingSummary {
                weights: &path,
                samples: pairs.len(),
                epoch_losses: &trained.epoch_losses,
                rejected: None,
            });
        }
        Command::TrainPhase {
            inputs,
            vessel_weights,
            out,
        } => {
            let vessel = VesselModel::load(&weights_path(vessel_weights, &cfg.vessel_weights, "vessel")?)?;
            let all = bundles(inputs, &cfg)?;
            let (seqs, rejected) = collect_phase_sequences(&all, &vessel, &cfg)?;
            let trained = train_phasenet(&seqs, cfg.phase_arch, &cfg.phase_train)?;
            create_dir(out)?;
            let path = out.join(PHASE_WEIGHTS);
            trained.model.save(&path)?;
            print_json(&TrainingSummary {
                weights: &path,
                samples: seqs.len(),
                epoch_losses: &trained.epoch_losses,
                rejected: Some(&rejected),
            });
        }
        Command::Predict {
            inputs,
            weights,
            vessel_weights,
            out,
        } => {
            let vessel = VesselModel::load(&weights_path(vessel_weights, &cfg.vessel_weights, "vessel")?)?;
            let phase = PhaseModel::load(&weights_path(weights, &cfg.phase_weights, "phase")?)?;
            let all = bundles(inputs, &cfg)?;
            let results = parallel_map(&all, cfg.threads, |b| predict_bundle(b, &vessel, &phase, &cfg));
            for (b, r) in all.iter().zip(results) {
                let p = r?;
                let inclusion = inclusion_filter(b.frame_count(), &p.trace.interval, None, RunMode::Predict);
                if let Inclusion::Reject(reason) = &inclusion {
                    log::warn!("{} fails the inclusion criteria: {reason}", b.id());
                }
                let dir = out.join(&p.trace.id);
                create_dir(&dir)?;
                write_json(&dir, TRACE_FILE, &p.trace)?;
                write_json(&dir, TIMINGS_FILE, &p.timings)?;
                write_json(&dir, INCLUSION_FILE, &inclusion)?;
            }
        }
        Command::Evaluate { inputs, traces, out } => {
            let all = bundles(inputs, &cfg)?;
            let results = parallel_map(&all, cfg.threads, |b| {
                let trace: PredictionTrace = read_json(&traces.join(b.id()), TRACE_FILE)?;
                evaluate_bundle(b, &trace, &cfg)
            });
            let mut evaluated: Vec<Evaluated> = Vec::new();
            let mut rejected = Vec::new();
            for r in results {
                match r? {
                    Ok(e) => evaluated.push(e),
                    Err(rej) => {
                        log::warn!("excluding {}: {}", rej.id, rej.reason);
                        rejected.push(rej);
                    }
                }
            }
            let report = build_report(&evaluated, rejected, cfg.edf_tolerance)?;
            report.write(out)?;
            if cfg.plot {
                let plots = out.join("plots");
                create_dir(&plots)?;
                for e in &evaluated {
                    let path = plots.join(format!("{}.svg", e.pair.id));
                    std::fs::write(&path, probability_svg(e)).map_err(|err| Error::io(&path, err))?;
                }
            }
        }
        Command::Report { metrics } => print!("{}", render_text(&load_report(metrics)?)),
    }
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}%", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

fn render_text(r: &MetricReport) -> String {
    let mut s = format!(
        "sequences: {} ({} rejected), eligible frames: {}\n",
        r.sequences,
        r.rejected.len(),
        r.eligible_frames
    );
    s += &format!("{:<12} {:>16} {:>10}\n", "measure", "per-angiography", "per-frame");
    let (a, f) = (&r.per_angiography, &r.per_frame);
    for (name, x, y) in [
        ("accuracy", a.accuracy, f.accuracy),
        ("sensitivity", a.sensitivity, f.sensitivity),
        ("specificity", a.specificity, f.specificity),
        ("ppv", a.ppv, f.ppv),
        ("npv", a.npv, f.npv),
    ] {
        s += &format!("{name:<12} {:>16} {:>10}\n", pct(x), pct(y));
    }
    s += &format!(
        "EDF (+-{} frames): precision {} recall {} F1 {}\n",
        r.edf_tolerance,
        pct(Some(r.edf.precision)),
        pct(Some(r.edf.recall)),
        pct(Some(r.edf.f1))
    );
    s += &format!(
        "errors: {} (systole->diastole {}, diastole->systole {})\n",
        r.transitions.errors,
        pct(r.transitions.systole_to_diastole),
        pct(r.transitions.diastole_to_systole)
    );
    s += "heart rate bins:\n";
    for b in r.heart_rate.bins.iter().chain([&r.heart_rate.out_of_range]) {
        s += &format!("  {:<8} n={:<4} accuracy {}\n", b.label, b.count, pct(b.mean_accuracy));
    }
    for rej in &r.rejected {
        s += &format!("rejected {}: {}\n", rej.id, rej.reason);
    }
    s
}
