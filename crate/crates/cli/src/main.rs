//! `ssir`: synthetic pairs, proposal fitting, posterior sampling and reports.
//!
//! Exit codes: 0 on success, 1 when an input or the configuration is invalid,
//! 2 when a computation or an output write fails.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};

use ssir::energy::RegistrationTarget;
use ssir::eval::{analyze_modes, characterize, draw_posterior, fill_spearman};
use ssir::fit::{fit_proposal, initial_proposal, tiny_registration_instance, FitMode, Variant};
use ssir::io::svol::{Header, Kind};
use ssir::io::{
    axial_field_slice, axial_slice, import_raw, read_svol, synth_pair, write_report, write_svol,
    Checkpoint, Container, RunConfig, SvolError, SynthKind,
};
use ssir::tensor_grid::{DisplacementField, LabelVolume, Volume};

const FIXED: &str = "fixed.svol";
const MOVING: &str = "moving.svol";
const LABELS_FIXED: &str = "labels_fixed.svol";
const LABELS_MOVING: &str = "labels_moving.svol";
const Z_TRUE: &str = "z_true.svol";
const CHECKPOINT: &str = "checkpoint.sckp";
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "ssir", version, about = "Structured SIR registration")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration. Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Receives the resolved configuration.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Training objective: variational or sir.
    #[arg(long, global = true)]
    mode: Option<FitMode>,
    /// Proposal family: D, LD, C or LC.
    #[arg(long, global = true)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct PairArgs {
    /// Directory holding fixed.svol and moving.svol (as written by `synth`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fixed: Option<PathBuf>,
    #[arg(long)]
    moving: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image pair, its labels and the true field.
    Synth {
        #[arg(long, default_value = "smooth")]
        kind: SynthKind,
        /// One size for a cube or three comma separated sizes.
        #[arg(long, value_delimiter = ',', default_value = "32")]
        dims: Vec<usize>,
    },
    /// Fit a proposal to one pair; writes a checkpoint and the training trace.
    Fit(PairArgs),
    /// Draw resampled posterior fields from a checkpoint.
    Sample {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-structure calibration report for one or more fitted pairs.
    Metrics {
        /// Pair directory with images and labels; repeat for several pairs.
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        /// Checkpoint for each `--data`, in the same order.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Cluster sampled fields and export one representative per cluster.
    Modes {
        /// Directory of field SVOLs, e.g. the `samples` folder from `sample`.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        clusters: Option<usize>,
    },
    /// Export an axial slice of a volume or field as an 8-bit PGM.
    Slice {
        #[arg(long)]
        input: PathBuf,
        /// Slice index; defaults to the middle slice.
        #[arg(long)]
        z: Option<usize>,
        /// Field channel; defaults to the displacement magnitude.
        #[arg(long)]
        channel: Option<usize>,
    },
    /// Finite-difference check of both training losses on a tiny instance.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        size: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
    /// Wrap a headerless array in an SVOL container.
    Import {
        #[arg(long)]
        raw: PathBuf,
        /// JSON SVOL header describing the array.
        #[arg(long)]
        header: PathBuf,
    },
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

type CliResult<T = ()> = Result<T, Failure>;

fn invalid(e: impl Display) -> Failure {
    Failure::Invalid(anyhow!("{e}"))
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(anyhow!("{e}"))
}

/// Computation errors: bad shapes or settings are the caller's fault, the rest
/// are failures of the run itself.
fn compute(e: ssir::Error) -> Failure {
    match e {
        ssir::Error::DegenerateEnsemble(_) | ssir::Error::Diverged(_) | ssir::Error::Io { .. } => {
            runtime(e)
        }
        _ => invalid(e),
    }
}

fn read_container(path: &Path) -> CliResult<Container> {
    read_svol(path).map_err(|e| match e {
        SvolError::Io { .. } => invalid(e),
        _ => invalid(format!("{}: {e}", path.display())),
    })
}

fn read_volume(path: &Path) -> CliResult<Volume> {
    read_container(path)?
        .to_volume()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn read_labels(path: &Path) -> CliResult<LabelVolume> {
    read_container(path)?
        .to_labels()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn read_field(path: &Path) -> CliResult<DisplacementField> {
    read_container(path)?
        .to_field()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write(path: &Path, container: &Container) -> CliResult {
    write_svol(path, container).map_err(runtime)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

impl PairArgs {
    fn resolve(&self, name: &str, explicit: &Option<PathBuf>) -> CliResult<PathBuf> {
        match (explicit, &self.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(name)),
            (None, None) => Err(invalid(format!("give --data or the path of {name}"))),
        }
    }

    fn load(&self) -> CliResult<(Volume, Volume)> {
        let fixed = read_volume(&self.resolve(FIXED, &self.fixed)?)?;
        let moving = read_volume(&self.resolve(MOVING, &self.moving)?)?;
        Ok((fixed, moving))
    }
}

fn resolve_config(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path).map_err(invalid)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = c.mode {
        cfg.fit.mode = mode;
    }
    if let Some(variant) = c.variant {
        cfg.fit.variant = variant;
    }
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let cfg = resolve_config(&cli.common)?;
    let out = &cli.common.out;
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    cfg.echo_into(out).map_err(runtime)?;

    match &cli.command {
        Command::Synth { kind, dims } => synth(&cfg, out, *kind, dims),
        Command::Fit(pair) => fit(&cfg, out, pair),
        Command::Sample { pair, checkpoint } => sample(&cfg, out, pair, checkpoint),
        Command::Metrics { data, checkpoints } => metrics(&cfg, out, data, checkpoints),
        Command::Modes { samples, clusters } => modes(&cfg, out, samples, *clusters),
        Command::Slice { input, z, channel } => slice(out, input, *z, *channel),
        Command::Gradcheck { size, step } => gradcheck(&cfg, out, *size, *step),
        Command::Import { raw, header } => import(out, raw, header),
    }
}

fn synth(cfg: &RunConfig, out: &Path, kind: SynthKind, dims: &[usize]) -> CliResult {
    let dims = match *dims {
        [n] => [n; 3],
        [x, y, z] => [x, y, z],
        _ => return Err(invalid("--dims takes one or three sizes")),
    };
    let pair = synth_pair(kind, dims, cfg.seed).map_err(invalid)?;
    write(&out.join(FIXED), &Container::from_volume(&pair.fixed))?;
    write(&out.join(MOVING), &Container::from_volume(&pair.moving))?;
    write(&out.join(LABELS_FIXED), &Container::from_labels(&pair.labels_fixed))?;
    write(&out.join(LABELS_MOVING), &Container::from_labels(&pair.labels_moving))?;
    write(&out.join(Z_TRUE), &Container::from_field(&pair.z_true))?;
    for (i, alt) in pair.alternatives.iter().enumerate() {
        write(&out.join(format!("alternative_{i}.svol")), &Container::from_field(alt))?;
    }
    println!(
        "wrote {kind:?} pair {dims:?} with {} structures to {}",
        pair.labels_fixed.structures().len(),
        out.display()
    );
    Ok(())
}

fn fit(cfg: &RunConfig, out: &Path, pair: &PairArgs) -> CliResult {
    let (fixed, moving) = pair.load()?;
    let target = RegistrationTarget::new(&fixed, &moving, &cfg.energy).map_err(invalid)?;
    let mut q = initial_proposal(*fixed.grid(), target.channels(), &cfg.fit, cfg.seed);
    let trace = fit_proposal(&mut q, &target, &cfg.fit, &cfg.sir, cfg.seed, |r| {
        if r.step % 100 == 0 {
            eprintln!(
                "step {:>5}  loss {:.4e}  ess {:.2}  fold {:.4}",
                r.step, r.loss, r.ess, r.fold_mu
            );
        }
    })
    .map_err(compute)?;
    let mu = q.mean_field();
    Checkpoint {
        q,
        temperature: trace.temperature,
    }
    .save(out.join(CHECKPOINT))
    .map_err(runtime)?;
    write_text(&out.join("trace.csv"), &trace.to_csv())?;
    write(&out.join("mu.svol"), &Container::from_field(&mu))?;
    if let Some(last) = trace.records.last() {
        println!("fitted {} steps, final loss {:.6e}", trace.records.len(), last.loss);
    }
    Ok(())
}

fn sample(cfg: &RunConfig, out: &Path, pair: &PairArgs, checkpoint: &Path) -> CliResult {
    let (fixed, moving) = pair.load()?;
    let ck = read_checkpoint(checkpoint)?;
    let target = RegistrationTarget::new(&fixed, &moving, &cfg.energy).map_err(invalid)?;
    let draw = draw_posterior(&ck.q, &target, &ck.temperature, cfg.eval.n_l, cfg.eval.n_k, cfg.seed)
        .map_err(compute)?;
    let dir = out.join("samples");
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut csv = String::from("sample,candidate,weight\n");
    for (k, field) in draw.samples.iter().enumerate() {
        write(&dir.join(format!("sample_{k:03}.svol")), &Container::from_field(field))?;
        csv.push_str(&format!("{k},{},{}\n", draw.resampled[k], draw.sample_weights[k]));
    }
    write_text(&out.join("weights.csv"), &csv)?;
    let mean = DisplacementField::mean_of(&draw.samples).map_err(compute)?;
    write(&out.join("mean.svol"), &Container::from_field(&mean))?;
    println!(
        "{} samples, ESS {:.2}, {} non-finite candidates",
        draw.samples.len(),
        draw.ess,
        draw.nan_count
    );
    Ok(())
}

fn metrics(cfg: &RunConfig, out: &Path, data: &[PathBuf], checkpoints: &[PathBuf]) -> CliResult {
    if data.len() != checkpoints.len() {
        return Err(invalid(format!(
            "{} --data directories but {} --checkpoint files",
            data.len(),
            checkpoints.len()
        )));
    }
    let mut reports = Vec::with_capacity(data.len());
    for (dir, ck) in data.iter().zip(checkpoints) {
        let fixed = read_volume(&dir.join(FIXED))?;
        let moving = read_volume(&dir.join(MOVING))?;
        let labels_fixed = read_labels(&dir.join(LABELS_FIXED))?;
        let labels_moving = read_labels(&dir.join(LABELS_MOVING))?;
        let ck = read_checkpoint(ck)?;
        let target = RegistrationTarget::new(&fixed, &moving, &cfg.energy).map_err(invalid)?;
        let (_, rows) = characterize(
            &ck.q,
            &target,
            &labels_fixed,
            &labels_moving,
            &ck.temperature,
            &cfg.eval,
            cfg.seed,
        )
        .map_err(compute)?;
        reports.push(rows);
    }
    fill_spearman(&mut reports);
    for (i, rows) in reports.iter().enumerate() {
        let name = if reports.len() == 1 {
            "report.csv".to_string()
        } else {
            format!("report_{i}.csv")
        };
        write_report(out.join(&name), rows).map_err(runtime)?;
        let mean = |f: fn(&ssir::eval::CalibrationRow) -> f64| {
            rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64
        };
        println!(
            "{name}: {} structures, mean DSC mu {:.4} zbar {:.4} oracle {:.4}, mean ECE {:.4}",
            rows.len(),
            mean(|r| r.dsc_mu),
            mean(|r| r.dsc_zbar),
            mean(|r| r.dsc_oracle),
            mean(|r| r.ece)
        );
    }
    Ok(())
}

fn modes(cfg: &RunConfig, out: &Path, samples: &Path, clusters: Option<usize>) -> CliResult {
    let mut files: Vec<PathBuf> = fs::read_dir(samples)
        .map_err(|e| invalid(format!("{}: {e}", samples.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "svol"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid(format!("no .svol fields in {}", samples.display())));
    }
    let fields = files.iter().map(|p| read_field(p)).collect::<CliResult<Vec<_>>>()?;
    let vectors: Vec<Vec<f64>> = fields.iter().map(|f| f.as_slice().to_vec()).collect();
    let k = clusters.unwrap_or(cfg.eval.n_clusters);
    let analysis = analyze_modes(&vectors, k, cfg.seed).map_err(compute)?;

    let mut csv = String::from("sample,file,cluster,representative\n");
    for (i, (file, c)) in files.iter().zip(&analysis.assignments).enumerate() {
        let name = file.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
        let rep = analysis.representatives[*c] == i;
        csv.push_str(&format!("{i},{name},{c},{}\n", rep as u8));
    }
    write_text(&out.join("modes.csv"), &csv)?;
    for (c, &r) in analysis.representatives.iter().enumerate() {
        write(&out.join(format!("mode_{c}.svol")), &Container::from_field(&fields[r]))?;
    }
    let explained: f64 = analysis.explained_variance.iter().sum();
    println!(
        "{} clusters over {} samples, {} components explain {:.1}% of the variance",
        analysis.representatives.len(),
        fields.len(),
        analysis.explained_variance.len(),
        100.0 * explained
    );
    Ok(())
}

fn slice(out: &Path, input: &Path, z: Option<usize>, channel: Option<usize>) -> CliResult {
    let container = read_container(input)?;
    let bad = |e: ssir::io::SvolError| invalid(format!("{}: {e}", input.display()));
    let nz = container.header.shape.last().copied().unwrap_or(1);
    let z = z.unwrap_or(nz / 2);
    let image = match container.header.kind {
        Kind::Intensity => axial_slice(&container.to_volume().map_err(bad)?, z),
        Kind::Label => {
            let labels = container.to_labels().map_err(bad)?;
            let vol = Volume::new(*labels.grid(), labels.labels().iter().map(|&l| l as f64).collect())
                .map_err(compute)?;
            axial_slice(&vol, z)
        }
        Kind::Field => axial_field_slice(&container.to_field().map_err(bad)?, z, channel),
    }
    .map_err(invalid)?;
    let stem = input.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    let path = out.join(format!("{stem}_z{z}.pgm"));
    image.save(&path).map_err(runtime)?;
    println!("wrote {}x{} slice to {}", image.width, image.height, path.display());
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out: &Path, size: usize, step: f64) -> CliResult {
    let instance = tiny_registration_instance(size, cfg.seed).map_err(invalid)?;
    let mut csv = String::from("loss,block,checked,max_abs_err,max_rel_err\n");
    let mut worst: f64 = 0.0;
    for (name, sir) in [("sir", true), ("variational", false)] {
        let report = instance.check(sir, step, usize::MAX).map_err(compute)?;
        for b in &report.blocks {
            println!(
                "{name:<12} {:<9} {:>5} params  max rel. err {:.3e}",
                b.name, b.checked, b.max_rel_err
            );
            csv.push_str(&format!(
                "{name},{},{},{},{}\n",
                b.name, b.checked, b.max_abs_err, b.max_rel_err
            ));
        }
        worst = worst.max(report.max_rel_err());
    }
    write_text(&out.join("gradcheck.csv"), &csv)?;
    println!("max rel. err {worst:.3e}");
    if !(worst <= GRADCHECK_TOL) {
        return Err(runtime(format!(
            "gradient check failed: {worst:.3e} exceeds {GRADCHECK_TOL:e}"
        )));
    }
    Ok(())
}

fn import(out: &Path, raw: &Path, header: &Path) -> CliResult {
    let text = fs::read_to_string(header).map_err(|e| invalid(format!("{}: {e}", header.display())))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", header.display())))?;
    let bytes = fs::read(raw).map_err(|e| invalid(format!("{}: {e}", raw.display())))?;
    let container = import_raw(&bytes, header).map_err(|e| invalid(format!("{}: {e}", raw.display())))?;
    let stem = raw.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    let path = out.join(format!("{stem}.svol"));
    write(&path, &container)?;
    println!("wrote {}", path.display());
    Ok(())
}
