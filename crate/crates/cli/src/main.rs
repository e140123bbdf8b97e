//! `embedit`: file-in/file-out front end for the embedit library.
//!
//! Exit codes: 0 ok, 2 input error, 3 missing data, 1 internal.
//! Errors are written to stderr as one JSON object.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use embedit::afs::{build_plan, classify_ambiguity, AfsConfig};
use embedit::cqs::{compute_cqs, joint_weight_grid, sweep_weights, CqsConfig};
use embedit::diagnostics::{dominance_ratio, pad_component_similarity, padding_similarity_curve, singular_spectrum};
use embedit::layout::segment;
use embedit::pad::DEFAULT_GAMMA;
use embedit::stm::apply_stm;
use embedit::{io, Error, ModifyParams, SegmentId};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "embedit",
    version,
    about = "Embedding edits, ambiguity plans and CQS scoring on dumped tensors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rescale the target image's embedding and write the modified prompt embedding.
    Modify(ModifyArgs),
    /// Decide whether residual sharing is needed from dumped residual features.
    Classify(ClassifyArgs),
    /// Compute the Consistency Quality Score of a score table.
    Score(ScoreArgs),
    /// Evaluate the score over a grid of (mu, tau) weights.
    Sweep(SweepArgs),
    /// Write singular spectra and padding-similarity CSVs.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct Overrides {
    /// JSON or TOML config file.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Override one config key, `key=value`; the value is read as JSON, else as a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ModifyArgs {
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// 1-based index of the image to express.
    #[arg(long)]
    target: Option<usize>,
    /// Output `.npy`; the report goes next to it with extension `.report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: Overrides,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Directory with `residuals.json` and `res_b*_s*_i*.npy` dumps.
    #[arg(long)]
    residuals: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: Overrides,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    /// CSV with header `mu,tau`; defaults to the joint grid 0.1..=1.0.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: Overrides,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::MissingProbeFeatures(_) | Error::CacheMiss { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn usage(kind: &str, message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            kind: kind.to_string(),
            message: message.into(),
        }
    }

    fn internal(e: Error) -> Self {
        Failure {
            code: 1,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> std::result::Result<&'a T, Failure> {
    value
        .as_ref()
        .ok_or_else(|| Failure::usage("SchemaError", format!("missing required flag --{flag}")))
}

fn warn(message: &str) {
    eprintln!("{}", json!({ "warning": message }));
}

/// Config from `--params` (or all defaults) with `--set` keys patched in.
fn load_with_overrides<T: DeserializeOwned + io::Validate>(o: &Overrides) -> std::result::Result<T, Failure> {
    let mut value = match &o.params {
        Some(path) => io::load_config_value(path)?,
        None => Value::Object(Default::default()),
    };
    let Value::Object(map) = &mut value else {
        return Err(Failure::usage("SchemaError", "config root must be an object"));
    };
    for item in &o.set {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Failure::usage("SchemaError", format!("--set {item:?} is not key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.trim().to_string(), parsed);
    }
    Ok(io::from_value(value)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    io::write_atomic(path, bytes).map_err(Failure::internal)
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    text.into_bytes()
}

fn cmd_modify(a: &ModifyArgs) -> CmdResult {
    let embedding = required(&a.embedding, "embedding")?;
    let manifest = required(&a.manifest, "manifest")?;
    let target = *required(&a.target, "target")?;
    let out = required(&a.out, "out")?;
    let params: ModifyParams = load_with_overrides(&a.config)?;
    let e = io::load_matrix(embedding)?;
    let manifest = io::load_manifest(manifest)?;
    let policy = params.pad_policy();
    if policy.enabled && params.gamma_defaulted() {
        warn(&format!("gamma not set; using {DEFAULT_GAMMA}"));
    }
    let (modified, reports) = apply_stm(&e, &manifest, target, &params.stm(), &policy)?;
    let npy = io::encode_matrix(&modified)?;
    let report = json!({
        "target": target,
        "params": params.stm(),
        "pad_policy": { "gamma": policy.gamma, "enabled": policy.enabled },
        "reports": reports,
    });
    write_file(out, &npy)?;
    write_file(&out.with_extension("report.json"), &to_json(&report))
}

fn cmd_classify(a: &ClassifyArgs) -> CmdResult {
    let dir = required(&a.residuals, "residuals")?;
    let out = required(&a.out, "out")?;
    let cfg: AfsConfig = load_with_overrides(&a.config)?;
    let (index, set) = io::load_residuals(dir)?;
    let decision = classify_ambiguity(&set, index.k, &cfg)?;
    let plan = build_plan(&decision, &cfg);
    write_file(out, &to_json(&json!({ "decision": decision, "plan": plan })))
}

fn cmd_score(a: &ScoreArgs) -> CmdResult {
    let scores = required(&a.scores, "scores")?;
    let out = required(&a.out, "out")?;
    let cfg: CqsConfig = load_with_overrides(&a.config)?;
    let table = io::load_scores(scores)?;
    let breakdown = compute_cqs(&table, &cfg)?;
    write_file(out, &to_json(&breakdown))
}

fn read_grid(path: &Path) -> std::result::Result<Vec<(f64, f64)>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    if header != ["mu", "tau"] {
        return Err(Failure::usage("SchemaError", "grid header must be `mu,tau`"));
    }
    let grid = lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Failure::usage("SchemaError", format!("grid row {}: {e}", i + 1)))?;
            match cells[..] {
                [mu, tau] => Ok((mu, tau)),
                _ => Err(Failure::usage(
                    "SchemaError",
                    format!("grid row {} needs 2 columns", i + 1),
                )),
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if grid.is_empty() {
        return Err(Error::EmptyInput("grid has no rows".into()).into());
    }
    Ok(grid)
}

fn cmd_sweep(a: &SweepArgs) -> CmdResult {
    let scores = required(&a.scores, "scores")?;
    let out = required(&a.out, "out")?;
    let cfg: CqsConfig = load_with_overrides(&a.config)?;
    let grid = match &a.grid {
        Some(path) => read_grid(path)?,
        None => joint_weight_grid(),
    };
    let table = io::load_scores(scores)?;
    let mut csv = String::from("mu,tau,cqs\n");
    for p in sweep_weights(&table, &cfg, &grid)? {
        writeln!(csv, "{},{},{}", p.mu, p.tau, p.cqs).unwrap();
    }
    write_file(out, csv.as_bytes())
}

fn cmd_diagnose(a: &DiagnoseArgs) -> CmdResult {
    let embedding = required(&a.embedding, "embedding")?;
    let manifest = required(&a.manifest, "manifest")?;
    let out = required(&a.out, "out")?;
    let e = io::load_matrix(embedding)?;
    let manifest = io::load_manifest(manifest)?;
    let seg = segment(&e, &manifest)?;

    let mut labelled = vec![(SegmentId::Identity.to_string(), &seg.id_seg)];
    for (i, m) in seg.image_segs.iter().enumerate() {
        labelled.push((SegmentId::Image(i).to_string(), m));
    }
    if !seg.pad_seg.is_empty() {
        labelled.push((SegmentId::Padding.to_string(), &seg.pad_seg));
    }

    // Everything is computed before the first file is written.
    let mut files: Vec<(String, String)> = Vec::new();
    let mut spectrum = String::from("label,component,sigma\n");
    let mut dominance = String::from("label,dominance_ratio\n");
    for (label, m) in &labelled {
        let values = singular_spectrum(m)?;
        for (c, s) in values.iter().enumerate() {
            writeln!(spectrum, "{label},{},{s}", c + 1).unwrap();
        }
        let ratio = dominance_ratio(&values).map_or_else(String::new, |r| r.to_string());
        writeln!(dominance, "{label},{ratio}").unwrap();
    }
    files.push(("spectrum.csv".into(), spectrum));
    files.push(("dominance.csv".into(), dominance));

    if !seg.pad_seg.is_empty() {
        for (i, m) in seg.image_segs.iter().enumerate() {
            let label = SegmentId::Image(i).to_string();
            let mut curve = String::from("n,sim_to_ei,sim_to_pad\n");
            for p in padding_similarity_curve(m, &seg.pad_seg, seg.pad_seg.nrows())? {
                writeln!(curve, "{},{},{}", p.n, p.sim_to_ei, p.sim_to_pad).unwrap();
            }
            files.push((format!("pad_curve_{label}.csv"), curve));
            let mut cosines = String::from("token,cosine\n");
            for (t, c) in pad_component_similarity(&seg.pad_seg, m)?.iter().enumerate() {
                writeln!(cosines, "{t},{c}").unwrap();
            }
            files.push((format!("pad_cosines_{label}.csv"), cosines));
        }
    }

    std::fs::create_dir_all(out).map_err(|e| {
        Failure::internal(Error::Io {
            path: out.clone(),
            source: e,
        })
    })?;
    for (name, text) in files {
        write_file(&out.join(name), text.as_bytes())?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Modify(a) => cmd_modify(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Score(a) => cmd_score(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let message = rendered
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!(
                "{}",
                json!({ "error": "UsageError", "message": message, "exit_code": 2 })
            );
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!(
                "{}",
                json!({ "error": f.kind, "message": f.message, "exit_code": f.code })
            );
            ExitCode::from(f.code)
        }
    }
}
