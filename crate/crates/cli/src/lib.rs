//! Command-line front end: dataset generation, training, evaluation,
//! inference, gradient checks, FLOP/parameter reports and the scheduler
//! benchmark.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mtscene::config::help_text;
use mtscene::encoder::flops_report;
use mtscene::error::{Error, Result};
use mtscene::instance::{nb1d_weight_counts, param_savings};
use mtscene::io::{atomic_write, load_dataset, read_sample, write_dataset, write_tensor, Manifest};
pub use mtscene::io::generate_dataset;
use mtscene::model::init_params;
use mtscene::scheduler::{simulate_scheduler, SimulationReport};
use mtscene::synth::generate_set;
use mtscene::tensor::Tensor;
use mtscene::train::{evaluate, load_checkpoint, log_text, predict, save_checkpoint, train, with_threads};
use mtscene::{gradsuite, Config};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "mtscene", version, about = "Multi-task RGB-D scene understanding", after_help = help_text())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.iterations=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<Config> {
        let mut raw = match &self.config {
            Some(p) => {
                require_exists(p)?;
                Config::load(p)?.raw().clone()
            }
            None => Config::default().raw().clone(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            raw.set(k.trim(), v.trim())?;
        }
        Config::from_raw(raw)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    #[command(after_help = help_text())]
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Seed of the first scene; scene i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write `checkpoint.mt` and `train_log.csv`.
    #[command(after_help = help_text())]
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; writes `metrics.txt` and `metrics.kv`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one sample directory through a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every op and sub-network.
    #[command(after_help = help_text())]
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOP and parameter tables.
    #[command(after_help = help_text())]
    Report {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input height for FLOP counting (defaults to gen.height).
        #[arg(long)]
        height: Option<usize>,
        /// Input width for FLOP counting (defaults to gen.width).
        #[arg(long)]
        width: Option<usize>,
        /// Write `flops.txt`, `params.txt` and `report.kv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed vs adaptive weighting on the synthetic loss-stream benchmark.
    #[command(name = "bench-scheduler", after_help = help_text())]
    BenchScheduler {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of seeds, 0..seeds.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Write `trace.csv` and `summary.kv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn require_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{} does not exist", p.display())))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|source| Error::Io {
        path: p.to_path_buf(),
        source,
    })
}

pub fn cmd_gen(cfg: &Config, out: &Path, count: usize, seed: u64) -> Result<String> {
    if count == 0 {
        return Err(Error::Invalid("--count must be positive".into()));
    }
    let samples = generate_set(seed, count, &cfg.gen)?;
    let m = write_dataset(out, &Manifest::for_config(cfg), &samples)?;
    Ok(format!("wrote {} samples to {}\n", m.samples.len(), out.display()))
}

pub fn cmd_train(cfg: &Config, data: &Path, out: &Path) -> Result<String> {
    require_exists(data)?;
    let ds = load_dataset(data)?;
    let outcome = train(cfg, &ds)?;
    create_dir(out)?;
    save_checkpoint(&out.join("checkpoint.mt"), cfg, &outcome.params)?;
    atomic_write(&out.join("train_log.csv"), log_text(&outcome.log).as_bytes())?;
    let mut s = String::new();
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        let _ = writeln!(
            s,
            "trained {} iterations on {} samples: total loss {:.6} -> {:.6}",
            outcome.log.len(),
            ds.samples.len(),
            first.total,
            last.total
        );
    }
    let _ = writeln!(s, "checkpoint: {}", out.join("checkpoint.mt").display());
    Ok(s)
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<String> {
    require_exists(checkpoint)?;
    require_exists(data)?;
    let (cfg, params) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    let report = evaluate(&cfg, &params, &ds)?;
    create_dir(out)?;
    let table = report.to_table();
    atomic_write(&out.join("metrics.txt"), table.as_bytes())?;
    atomic_write(&out.join("metrics.kv"), report.to_key_values().as_bytes())?;
    Ok(table)
}

pub fn cmd_infer(checkpoint: &Path, sample: &Path, out: &Path) -> Result<String> {
    require_exists(checkpoint)?;
    require_exists(sample)?;
    let (cfg, params) = load_checkpoint(checkpoint)?;
    let s = read_sample(sample)?;
    let pred = with_threads(cfg.train.threads, || predict(&cfg, &params, std::slice::from_ref(&s)))??
        .pop()
        .ok_or_else(|| Error::Invalid("no prediction produced".into()))?;
    create_dir(out)?;
    let grid = |g: &mtscene::Grid<u32>| Tensor::new(&[g.height, g.width], g.data.iter().map(|&v| v as f32).collect());
    write_tensor(&out.join("semantic.mt"), &grid(&pred.semantic)?)?;
    write_tensor(&out.join("category.mt"), &grid(&pred.panoptic.category)?)?;
    write_tensor(&out.join("instance.mt"), &grid(&pred.panoptic.instance)?)?;
    let mut table = String::from("instance,category,degrees\n");
    for id in pred.panoptic.instance_ids() {
        let cat = pred
            .panoptic
            .instance
            .data
            .iter()
            .position(|&i| i == id)
            .map(|p| pred.panoptic.category.data[p])
            .unwrap_or(cfg.losses.ignore_id);
        let deg = match pred.panoptic.orientations.get(&id).copied().flatten() {
            Some(d) => format!("{d:.4}"),
            None => "undefined".into(),
        };
        let _ = writeln!(table, "{id},{cat},{deg}");
    }
    atomic_write(&out.join("orientations.csv"), table.as_bytes())?;
    atomic_write(&out.join("scene.txt"), format!("{}\n", pred.scene).as_bytes())?;
    Ok(format!(
        "{} instances, scene class {}\n{table}",
        pred.panoptic.instance_ids().len(),
        pred.scene
    ))
}

pub fn cmd_gradcheck(cfg: &Config, out: Option<&Path>) -> Result<(String, bool)> {
    let rows = with_threads(cfg.train.threads, || gradsuite::run_all(&cfg.gradcheck, &cfg.model))??;
    let table = gradsuite::table(&rows, cfg.gradcheck.tolerance);
    if let Some(p) = out {
        atomic_write(p, table.as_bytes())?;
    }
    Ok((table, rows.iter().all(|r| r.passed)))
}

/// FLOP table, parameter table and machine-readable summary.
pub fn report_text(cfg: &Config, height: usize, width: usize) -> Result<(String, String, String)> {
    let fr = flops_report(&cfg.model.encoder, height, width)?;
    let w = fr.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
    let mut flops = format!("encoder MACs for a {height}x{width} input\n");
    let _ = writeln!(flops, "{:<w$}  {:<9}  {:>9}  {:>12}  {:>12}", "layer", "kind", "out", "macs", "full_3x3");
    for r in &fr.rows {
        let full = r.full_equivalent.map(|f| f.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            flops,
            "{:<w$}  {:<9}  {:>9}  {:>12}  {:>12}",
            r.layer,
            r.kind,
            format!("{}x{}", r.out_h, r.out_w),
            r.macs,
            full
        );
    }
    let (partial, full) = fr.partial_vs_full();
    let _ = writeln!(flops, "total MACs: {}", fr.total());
    let _ = writeln!(flops, "partial conv MACs: {partial}, full conv MACs: {full}, ratio {}", ratio_text(partial, full));

    let store = init_params::<f32>(&cfg.model, 0)?;
    let mut params = String::from("trainable parameters\n");
    for prefix in ["encoder.", "semantic.", "instance.", "scene."] {
        let _ = writeln!(params, "{:<10} {:>10}", prefix.trim_end_matches('.'), store.count(prefix));
    }
    let _ = writeln!(params, "{:<10} {:>10}", "total", store.count(""));
    let shapes: Vec<(&str, &[usize])> = store.iter().map(|(n, _, t)| (n, t.shape())).collect();
    let (fact, full_nb) = nb1d_weight_counts(shapes);
    let _ = writeln!(params, "non-bottleneck-1D conv weights: factorized {fact}, full 3x3 equivalent {full_nb}, ratio {}", ratio_text(fact, full_nb));
    let _ = writeln!(params, "2/k savings formula at k=3: {:.6}", param_savings(1, 3, 1)?);

    let mut kv = String::new();
    let _ = writeln!(kv, "flops.height={height}");
    let _ = writeln!(kv, "flops.width={width}");
    let _ = writeln!(kv, "flops.total_macs={}", fr.total());
    let _ = writeln!(kv, "flops.partial_macs={partial}");
    let _ = writeln!(kv, "flops.full_macs={full}");
    let _ = writeln!(kv, "flops.partial_ratio={}", ratio_value(partial, full));
    let _ = writeln!(kv, "params.total={}", store.count(""));
    let _ = writeln!(kv, "params.nb1d_factorized={fact}");
    let _ = writeln!(kv, "params.nb1d_full={full_nb}");
    let _ = writeln!(kv, "params.nb1d_ratio={}", ratio_value(fact, full_nb));
    Ok((flops, params, kv))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn ratio_text(a: u64, b: u64) -> String {
    if b == 0 {
        return "undefined".into();
    }
    let g = gcd(a, b).max(1);
    format!("{}/{} = {}", a / g, b / g, ratio_value(a, b))
}

fn ratio_value(a: u64, b: u64) -> String {
    if b == 0 {
        "undefined".into()
    } else {
        format!("{:.6}", a as f64 / b as f64)
    }
}

pub fn cmd_report(cfg: &Config, height: Option<usize>, width: Option<usize>, out: Option<&Path>) -> Result<String> {
    let (h, w) = (height.unwrap_or(cfg.gen.height), width.unwrap_or(cfg.gen.width));
    let (flops, params, kv) = report_text(cfg, h, w)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        atomic_write(&dir.join("flops.txt"), flops.as_bytes())?;
        atomic_write(&dir.join("params.txt"), params.as_bytes())?;
        atomic_write(&dir.join("report.kv"), kv.as_bytes())?;
    }
    Ok(format!("{flops}\n{params}\n{kv}"))
}

pub fn bench_text(r: &SimulationReport) -> (String, String) {
    let mut csv = String::from("epoch,fixed_mean,fixed_var,adaptive_mean,adaptive_var\n");
    for e in 0..r.fixed.trace.len() {
        let _ = writeln!(
            csv,
            "{e},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.fixed.trace[e], r.fixed.variance[e], r.adaptive.trace[e], r.adaptive.variance[e]
        );
    }
    let mut kv = String::new();
    let _ = writeln!(kv, "seeds={}", r.seeds.len());
    for m in [&r.fixed, &r.adaptive] {
        let _ = writeln!(kv, "{}.final_mean={:.9e}", m.mode, m.trace.last().copied().unwrap_or(f64::NAN));
        let _ = writeln!(kv, "{}.late_variance={:.9e}", m.mode, m.late_variance());
        let _ = writeln!(kv, "{}.min_weight={:.6}", m.mode, m.min_weight);
    }
    let _ = writeln!(kv, "adaptive_not_worse={}", r.adaptive.late_variance() <= r.fixed.late_variance());
    (csv, kv)
}

pub fn cmd_bench_scheduler(cfg: &Config, seeds: u64, out: Option<&Path>) -> Result<String> {
    if seeds == 0 {
        return Err(Error::Invalid("--seeds must be positive".into()));
    }
    let ids: Vec<u64> = (0..seeds).collect();
    let r = simulate_scheduler(&cfg.bench, &cfg.scheduler, &ids)?;
    let (csv, kv) = bench_text(&r);
    if let Some(dir) = out {
        create_dir(dir)?;
        atomic_write(&dir.join("trace.csv"), csv.as_bytes())?;
        atomic_write(&dir.join("summary.kv"), kv.as_bytes())?;
    }
    let mut s = String::from("epoch  fixed_mean  fixed_var  adaptive_mean  adaptive_var\n");
    let n = r.fixed.trace.len();
    let step = (n / 10).max(1);
    for e in (0..n).step_by(step).chain(std::iter::once(n - 1)) {
        let _ = writeln!(
            s,
            "{e:>5}  {:>10.5}  {:>9.3e}  {:>13.5}  {:>12.3e}",
            r.fixed.trace[e], r.fixed.variance[e], r.adaptive.trace[e], r.adaptive.variance[e]
        );
    }
    s.push_str(&kv);
    Ok(s)
}

fn dispatch(cli: Cli) -> Result<(String, i32)> {
    let ok = |s: String| Ok((s, EXIT_OK));
    match cli.command {
        Command::Gen { config, out, count, seed } => ok(cmd_gen(&config.load()?, &out, count, seed)?),
        Command::Train { config, data, out, seed } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                let mut raw = cfg.raw().clone();
                raw.set("train.seed", &s.to_string())?;
                cfg = Config::from_raw(raw)?;
            }
            ok(cmd_train(&cfg, &data, &out)?)
        }
        Command::Eval { checkpoint, data, out } => ok(cmd_eval(&checkpoint, &data, &out)?),
        Command::Infer { checkpoint, sample, out } => ok(cmd_infer(&checkpoint, &sample, &out)?),
        Command::Gradcheck { config, out } => {
            let (table, passed) = cmd_gradcheck(&config.load()?, out.as_deref())?;
            Ok((table, if passed { EXIT_OK } else { EXIT_RUNTIME }))
        }
        Command::Report { config, height, width, out } => ok(cmd_report(&config.load()?, height, width, out.as_deref())?),
        Command::BenchScheduler { config, seeds, out } => ok(cmd_bench_scheduler(&config.load()?, seeds, out.as_deref())?),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code. Normal output goes to `stdout`, errors to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli) {
        Ok((text, code)) => {
            let _ = stdout.write_all(text.as_bytes());
            if code != EXIT_OK {
                let _ = writeln!(stderr, "error: gradient check failed");
            }
            code
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
