//! `qpinn`: train, ablate, analyze quantization, count costs and evaluate
//! checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qpinn::network::{self, PreparedNetwork};
use qpinn::pde;
use qpinn::perfmodel;
use qpinn::smx;
use qpinn::trainer::{self, AblationRow, TrainConfig};
use qpinn::{Error, RngStream};
use serde_json::{json, Map, Value};

const OUTPUT_ROOT_ENV: &str = "QPINN_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "qpinn", version, about = "Quantized tensor-train PINN experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its run directory.
    Train(ConfigArgs),
    /// Run the method comparison matrix and emit a CSV table.
    Ablate(AblateArgs),
    /// Compare the analytic flip probability with Monte Carlo.
    Quantcheck(QuantArgs),
    /// Print the cost report of a configuration as JSON.
    Cost(ConfigArgs),
    /// Metrics of a saved run's checkpoint.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the file's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path overrides, e.g. `--iterations 0 --stein.samples 64`;
    /// `--out`, `--rows` and `--rank` are also accepted here.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Comma-separated rows (default: all, or the file's `ablation.rows`).
    #[arg(long, value_delimiter = ',')]
    rows: Vec<String>,
    /// TT rank of the low-rank rows.
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args)]
struct QuantArgs {
    #[arg(long, default_value_t = 8)]
    bits: u8,
    #[arg(long, default_value_t = 0.01, allow_negative_numbers = true)]
    sigma: f64,
    /// Value range `lo,hi` defining the step `(hi − lo)/(2^b − 1)`.
    #[arg(long, default_value = "-1,1", allow_hyphen_values = true)]
    range: String,
    #[arg(long, default_value_t = 1_000_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding `config.json` and `checkpoint.qpnn`.
    #[arg(long)]
    run: PathBuf,
}

/// Experiment file: a training configuration plus `output_dir` and an
/// optional `ablation` selector.
struct Experiment {
    train: TrainConfig,
    output_dir: Option<PathBuf>,
    rows: Option<Vec<AblationRow>>,
    rank: Option<usize>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), Error> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        if k.is_empty() {
            return Err(config_err(format!("bad override key `{path}`")));
        }
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn apply_overrides(root: &mut Value, args: &[String]) -> Result<(), Error> {
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| config_err(format!("override `{flag}` must start with --")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| config_err(format!("override `{flag}` needs a value")))?;
                (key, v.clone())
            }
        };
        match key {
            "out" => set_path(root, "output_dir", Value::String(raw))?,
            "rows" => {
                let rows = raw.split(',').map(|r| Value::String(r.trim().to_string())).collect();
                set_path(root, "ablation.rows", Value::Array(rows))?
            }
            "rank" => set_path(root, "ablation.rank", serde_json::from_str(&raw).unwrap_or(Value::String(raw)))?,
            _ => set_path(root, key, serde_json::from_str(&raw).unwrap_or(Value::String(raw)))?,
        }
    }
    Ok(())
}

fn load_experiment(args: &ConfigArgs) -> Result<Experiment, Error> {
    let text = fs::read_to_string(&args.config)?;
    let mut root: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", args.config.display())))?;
    apply_overrides(&mut root, &args.overrides)?;
    let obj = root
        .as_object_mut()
        .ok_or_else(|| config_err("experiment file must be a JSON object"))?;
    let output_dir = match obj.remove("output_dir") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => return Err(config_err(format!("output_dir must be a string, got {other}"))),
    };
    let (mut rows, mut rank) = (None, None);
    if let Some(ab) = obj.remove("ablation") {
        let mut ab = match ab {
            Value::Object(m) => m,
            other => return Err(config_err(format!("ablation must be an object, got {other}"))),
        };
        if let Some(r) = ab.remove("rows") {
            rows = Some(serde_json::from_value(r).map_err(|e| config_err(format!("ablation.rows: {e}")))?);
        }
        if let Some(r) = ab.remove("rank") {
            rank = Some(serde_json::from_value(r).map_err(|e| config_err(format!("ablation.rank: {e}")))?);
        }
        if let Some(k) = ab.keys().next() {
            return Err(config_err(format!("unknown ablation key `{k}`")));
        }
    }
    let train: TrainConfig = serde_json::from_value(root).map_err(|e| config_err(e.to_string()))?;
    train.validate()?;
    Ok(Experiment {
        train,
        output_dir: args.out.clone().or(output_dir),
        rows,
        rank,
    })
}

fn output_dir(exp: &Experiment, default_name: String) -> PathBuf {
    if let Some(d) = &exp.output_dir {
        return d.clone();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(default_name)
}

fn cache_dir(out: &Path) -> PathBuf {
    out.join("reference_cache")
}

fn print_row(m: &pde::MetricsRow) {
    eprintln!(
        "iter {:>5}  loss {:.4e}  mse {:.4e}  l1 {:.4e}  l2 {:.4e}",
        m.iteration, m.loss_total, m.mse, m.l1_rel, m.l2_rel
    );
}

fn cmd_train(args: &ConfigArgs) -> Result<(), Error> {
    let exp = load_experiment(args)?;
    let cfg = &exp.train;
    let out = output_dir(&exp, format!("{}_seed{}", cfg.problem.name(), cfg.seed));
    let record = trainer::train(cfg, Some(&cache_dir(&out)), print_row)?;
    record.write(&out)?;
    let m = record.final_metrics();
    println!(
        "final iteration={} mse={:e} l1_rel={:e} l2_rel={:e} dir={}",
        m.iteration,
        m.mse,
        m.l1_rel,
        m.l2_rel,
        out.display()
    );
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), Error> {
    let exp = load_experiment(&args.base)?;
    let rows = if !args.rows.is_empty() {
        args.rows
            .iter()
            .map(|s| AblationRow::parse(s.trim()).ok_or_else(|| config_err(format!("unknown ablation row `{s}`"))))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        exp.rows.clone().unwrap_or_else(|| AblationRow::ALL.to_vec())
    };
    let rank = args.rank.or(exp.rank).unwrap_or(16);
    if rank == 0 {
        return Err(config_err("ablation rank must be positive"));
    }
    for r in &rows {
        if let Some(c) = r.configure(&exp.train, rank) {
            c.validate()?;
        }
    }
    let base = &exp.train;
    let out = output_dir(&exp, format!("ablation_{}_seed{}", base.problem.name(), base.seed));
    let results = trainer::run_ablation(base, &rows, rank, Some(&cache_dir(&out)), |row, m| {
        eprint!("{:<22}", row.name());
        print_row(m);
    })?;
    fs::create_dir_all(&out)?;
    for r in &results {
        if let Some(rec) = &r.record {
            rec.write(&out.join(r.row.name()))?;
        }
    }
    let csv = trainer::ablation_csv(base, &results);
    fs::write(out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn parse_range(s: &str) -> Result<(f64, f64), Error> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| config_err(format!("range must be `lo,hi`, got `{s}`")))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| config_err(format!("range bound `{v}`: {e}")));
    let (lo, hi) = (parse(a)?, parse(b)?);
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(config_err(format!("range must satisfy lo < hi, got {lo},{hi}")));
    }
    Ok((lo, hi))
}

fn cmd_quantcheck(args: &QuantArgs) -> Result<(), Error> {
    let spec = smx::QuantSpec::new(args.bits)?;
    let (lo, hi) = parse_range(&args.range)?;
    let s = (hi - lo) / ((1u64 << spec.bit_width()) - 1) as f64;
    let quadrature = smx::flip_probability(s, args.sigma)?;
    let mut rng = RngStream::new(args.seed, 0);
    let mc = smx::simulate_flip_rate(s, args.sigma, args.trials, &mut rng)?;
    let requant = smx::simulate_requantization_rate(s, args.sigma, args.trials, &mut rng)?;
    let out = json!({
        "bits": args.bits,
        "sigma": args.sigma,
        "range": [lo, hi],
        "step": s,
        "trials": args.trials,
        "seed": args.seed,
        "quadrature": quadrature,
        "monte_carlo": mc,
        "gap": (mc - quadrature).abs(),
        "requantization_rate": requant,
    });
    println!("{out}");
    Ok(())
}

fn cmd_cost(args: &ConfigArgs) -> Result<(), Error> {
    let exp = load_experiment(args)?;
    print!("{}", trainer::cost_json(&perfmodel::count_costs(&exp.train)?)?);
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let text = fs::read_to_string(args.run.join("config.json"))?;
    let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))?;
    cfg.validate()?;
    let bytes = fs::read(args.run.join("checkpoint.qpnn"))?;
    let (net_cfg, params) = network::read_checkpoint(&mut bytes.as_slice())?;
    if net_cfg != cfg.network {
        return Err(config_err("checkpoint network does not match config.json"));
    }
    let problem = cfg.problem_def();
    let eval = problem.eval_set(cfg.eval_seed, Some(&cache_dir(&args.run)))?;
    let net = PreparedNetwork::new(&net_cfg, &params, cfg.precision.as_ref())?;
    let m = pde::evaluate_metrics(&net, &eval)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite { .. } => 3,
        Error::Io(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Quantcheck(a) => cmd_quantcheck(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
