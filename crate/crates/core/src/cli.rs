//! Command-line front end: train | eval | count-params | op-count | grad-check.
//!
//! Exit codes: 0 success, 1 check failure, 2 invalid input, 3 training
//! divergence. Every subcommand writes only inside its output directory.

use crate::capsule::{head_op_count, head_param_count, HeadKind};
use crate::checkpoint::{load_weights, training_checkpoint, Checkpoint, WeightSource};
use crate::config::{DataSection, ExperimentConfig};
use crate::data::{load_idx, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Optimizer;
use crate::trainer::{evaluate, train, MetricsRow, TrainOptions};
use crate::verify;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "hvcnet",
    about = "CNN training engine with vector-capsule classification heads",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model and write metrics.csv, a checkpoint, and the resolved config.
    Train(TrainArgs),
    /// Evaluate checkpoint weights on the test split.
    Eval(EvalArgs),
    /// Print per-layer and total trainable parameter counts.
    CountParams(CountArgs),
    /// Print multiply/add counts for the configured head and its matrix baselines.
    OpCount(OpCountArgs),
    /// Check every op kind's gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigOverrides {
    /// Path to a key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Optimizer preset O1..O4.
    #[arg(long)]
    optimizer: Option<String>,
    /// Head kind: fc | hvc | matrix-full | matrix-square.
    #[arg(long)]
    head: Option<String>,
    /// Capsule reshaping method: a | b | c.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    capsule_dim: Option<usize>,
    #[arg(long)]
    capsule_dim_out: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigOverrides {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut pairs: BTreeMap<String, String> = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                ExperimentConfig::parse_pairs(&text)?
            }
            None => BTreeMap::new(),
        };
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.insert(k.to_string(), v);
            }
        };
        set("train.seed", self.seed.map(|v| v.to_string()));
        set("train.epochs", self.epochs.map(|v| v.to_string()));
        set("train.batch-size", self.batch_size.map(|v| v.to_string()));
        set("optimizer.preset", self.optimizer.clone());
        set("model.head", self.head.clone());
        set("model.method", self.method.clone());
        set("model.capsule-dim", self.capsule_dim.map(|v| v.to_string()));
        set(
            "model.capsule-dim-out",
            self.capsule_dim_out.map(|v| v.to_string()),
        );
        set("model.classes", self.classes.map(|v| v.to_string()));
        set(
            "output.dir",
            self.out.as_ref().map(|p| p.display().to_string()),
        );
        ExperimentConfig::from_pairs(&pairs)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which weight set to evaluate: raw | ema.
    #[arg(long, default_value = "ema")]
    weights: String,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Input sample shape as HxWxC (default: 299x299x3 for the full stem,
    /// 28x28x1 for the tiny stem).
    #[arg(long)]
    input: Option<String>,
    /// Comma-separated class counts to sweep, e.g. 10,101,1000.
    #[arg(long)]
    classes_sweep: Option<String>,
    /// Count only the head for an explicit capsule geometry.
    #[arg(long)]
    head_only: bool,
    /// Capsule count j (head-only mode).
    #[arg(long)]
    j: Option<usize>,
}

#[derive(Args, Debug)]
struct OpCountArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    #[arg(long)]
    input: Option<String>,
    /// Capsule count j (overrides the configured model geometry).
    #[arg(long)]
    j: Option<usize>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Corrupt one op's backward pass, e.g. "mul" or "mul:1.01";
    /// used to prove the checker detects bad gradients.
    #[arg(long)]
    inject_fault: Option<String>,
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Train(args) => cmd_train(&args),
        Cmd::Eval(args) => cmd_eval(&args),
        Cmd::CountParams(args) => cmd_count_params(&args),
        Cmd::OpCount(args) => cmd_op_count(&args),
        Cmd::GradCheck(args) => cmd_grad_check(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence(_) => 3,
                _ => 2,
            }
        }
    }
}

fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &config.data {
        DataSection::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
        )),
        DataSection::Synth {
            classes,
            per_class,
            test_per_class,
            size,
        } => {
            // Disjoint generator seeds for the two splits.
            let train_seed = config.train.seed;
            let test_seed = config.train.seed ^ 0x7e57_5eed;
            Ok((
                synth_dataset(*classes, *per_class, *size, *size, train_seed)?,
                synth_dataset(*classes, *test_per_class, *size, *size, test_seed)?,
            ))
        }
    }
}

pub fn format_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,test_acc_ema,test_acc_raw,lr,wall_seconds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.8},{:.3}\n",
            r.epoch, r.train_loss, r.train_acc, r.test_acc_ema, r.test_acc_raw, r.lr, r.wall_seconds
        ));
    }
    s
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let config = args.overrides.build()?;
    if config.model.classes < 2 {
        return Err(Error::config("training requires model.classes >= 2"));
    }
    let (train_ds, test_ds) = load_datasets(&config)?;
    if train_ds.classes != config.model.classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model.classes is {}",
            train_ds.classes, config.model.classes
        )));
    }
    let (h, w, c) = train_ds.sample_shape();
    let spec = config.model_spec((h, w, c));
    spec.head_geometry()?; // fail fast on head/stem mismatches
    let opt_cfg = config.resolve_optimizer()?;

    let out_dir = &config.output.dir;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.resolved"), config.serialize())?;

    let mut model = Model::<f32>::new(spec, config.train.seed)?;
    let opts = TrainOptions {
        epochs: config.train.epochs,
        batch_size: config.train.batch_size,
        seed: config.train.seed,
        label_smoothing: config.train.label_smoothing,
        augment: config.augment,
        timing: config.output.timing,
        verbose: !args.quiet,
        ..Default::default()
    };
    let outcome = train(&mut model, &opt_cfg, &train_ds, &test_ds, &opts)?;

    fs::write(out_dir.join("metrics.csv"), format_metrics_csv(&outcome.metrics))?;
    let optimizer = Optimizer::<f32>::new(opt_cfg, &model.param_shapes());
    training_checkpoint(&model, &outcome.ema, &optimizer).save(&out_dir.join("checkpoint.bin"))?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "trained {} epochs: test_acc(ema) {:.4}, test_acc(raw) {:.4}",
            outcome.metrics.len(),
            last.test_acc_ema,
            last.test_acc_raw
        );
    } else {
        println!("trained 0 epochs");
    }
    Ok(0)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let config = args.overrides.build()?;
    let source = match args.weights.as_str() {
        "raw" => WeightSource::Raw,
        "ema" => WeightSource::Ema,
        other => return Err(Error::config(format!("unknown weight set '{other}'"))),
    };
    let (_, test_ds) = load_datasets(&config)?;
    let spec = config.model_spec(test_ds.sample_shape());
    let mut model = Model::<f32>::new(spec, config.train.seed)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    load_weights(&mut model, &ckpt, source)?;
    let acc = evaluate(&model, &test_ds, config.train.batch_size)?;
    println!("accuracy({}) = {acc:.6}", args.weights);
    Ok(0)
}

fn parse_input_shape(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    let parse = |p: &str| {
        p.parse::<usize>()
            .map_err(|_| Error::config(format!("bad input shape '{s}'")))
    };
    match parts.as_slice() {
        [h] => Ok((parse(h)?, parse(h)?, 1)),
        [h, w] => Ok((parse(h)?, parse(w)?, 1)),
        [h, w, c] => Ok((parse(h)?, parse(w)?, parse(c)?)),
        _ => Err(Error::config(format!("bad input shape '{s}'"))),
    }
}

fn default_input(config: &ExperimentConfig) -> (usize, usize, usize) {
    match config.model.stem {
        crate::model::StemKind::Full => (299, 299, 3),
        crate::model::StemKind::Tiny => (28, 28, 1),
    }
}

fn round_millions(count: u64) -> f64 {
    (count as f64 / 1e6 * 10.0).round() / 10.0
}

fn cmd_count_params(args: &CountArgs) -> Result<i32> {
    let config = args.overrides.build()?;
    if args.head_only {
        let j = args
            .j
            .ok_or_else(|| Error::config("--head-only requires --j"))?;
        let n_in = config.model.capsule_dim;
        let n_out = match config.model.head {
            HeadKind::MatrixFull => config.model.capsule_dim_out,
            _ => n_in,
        };
        let y = config.model.classes;
        let count = head_param_count(config.model.head, j, n_in, n_out, y);
        println!(
            "head {} j={j} n_in={n_in} n_out={n_out} classes={y}: {count} parameters",
            config.model.head.name()
        );
        return Ok(0);
    }

    let input = match &args.input {
        Some(s) => parse_input_shape(s)?,
        None => default_input(&config),
    };
    let class_counts: Vec<usize> = match &args.classes_sweep {
        Some(s) => s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("bad class count '{p}'")))
            })
            .collect::<Result<_>>()?,
        None => vec![config.model.classes],
    };

    for (i, &classes) in class_counts.iter().enumerate() {
        let mut spec = config.model_spec(input);
        spec.classes = classes;
        if i == 0 {
            println!("stem {} on {}x{}x{}:", spec.stem.name(), input.0, input.1, input.2);
            for (name, (h, w, c)) in spec.shape_chain()? {
                println!("  {name:<24} -> {h}x{w}x{c}");
            }
        }
        println!("classes = {classes}");
        let mut total = 0u64;
        for def in spec.param_layout()? {
            let count: usize = def.shape.iter().product();
            total += count as u64;
            println!("  {:<28} {:?} = {count}", def.name, def.shape);
        }
        println!("  total trainable parameters = {total} (~{:.1}M)", round_millions(total));
    }
    Ok(0)
}

fn cmd_op_count(args: &OpCountArgs) -> Result<i32> {
    let config = args.overrides.build()?;
    let (j, n_in, n_out, y) = if let Some(j) = args.j {
        let n_in = config.model.capsule_dim;
        let n_out = if config.model.capsule_dim_out > 0 {
            config.model.capsule_dim_out
        } else {
            n_in
        };
        (j, n_in, n_out, config.model.classes)
    } else {
        let input = match &args.input {
            Some(s) => parse_input_shape(s)?,
            None => default_input(&config),
        };
        let mut spec = config.model_spec(input);
        if spec.head.kind == HeadKind::Fc {
            // The baseline head has no per-pair transform; report for the
            // capsule kinds at the same geometry.
            spec.head.kind = HeadKind::Hvc;
        }
        let g = spec.head_geometry()?;
        (g.j, g.n_in, g.n_out, spec.classes)
    };

    println!("head operation counts for j={j}, n_in={n_in}, n_out={n_out}, classes={y}");
    println!(
        "{:<14} {:>12} {:>12} {:>16} {:>16} {:>14}",
        "kind", "mul/pair", "add/pair", "mul total", "add-in-pair tot", "cross-caps add"
    );
    for kind in [HeadKind::Hvc, HeadKind::MatrixFull, HeadKind::MatrixSquare] {
        let (eff_in, eff_out) = match kind {
            // The square baseline needs a perfect square; the HVC/full
            // dimensions pass through unchanged.
            HeadKind::MatrixSquare if int_sqrt(n_in).is_none() => {
                println!("{:<14} (skipped: {n_in} is not a perfect square)", kind.name());
                continue;
            }
            _ => (n_in, n_out),
        };
        let oc = head_op_count(kind, j, eff_in, eff_out, y)?;
        println!(
            "{:<14} {:>12} {:>12} {:>16} {:>16} {:>14}",
            kind.name(),
            oc.per_pair_multiplies,
            oc.per_pair_additions,
            oc.total_multiplies,
            oc.total_additions_within_pairs,
            oc.cross_capsule_additions
        );
    }
    Ok(0)
}

fn int_sqrt(n: usize) -> Option<usize> {
    let k = (n as f64).sqrt().round() as usize;
    (k * k == n).then_some(k)
}

fn cmd_grad_check(args: &GradCheckArgs) -> Result<i32> {
    let fault = match &args.inject_fault {
        None => None,
        Some(s) => {
            let (op, factor) = match s.split_once(':') {
                Some((op, f)) => (
                    op,
                    f.parse::<f64>()
                        .map_err(|_| Error::config(format!("bad fault factor in '{s}'")))?,
                ),
                None => (s.as_str(), 1.01),
            };
            Some((op, factor))
        }
    };
    let fault_ref = fault.as_ref().map(|(op, f)| (*op, *f));
    let reports = verify::run_all(args.seed, fault_ref)?;
    let mut failures = 0;
    for r in &reports {
        println!(
            "{:<14} worst rel error {:>12.3e}  {}",
            r.name,
            r.worst_error,
            if r.pass { "PASS" } else { "FAIL" }
        );
        if !r.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        eprintln!("{failures} op kind(s) failed the gradient check");
        Ok(1)
    } else {
        Ok(0)
    }
}

/// Entry point for `main`: parses `std::env::args()`.
pub fn main_entry() -> i32 {
    run(std::env::args())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_config(dir: &std::path::Path, body: &str) -> PathBuf {
        let p = dir.join("exp.conf");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn train_writes_csv_checkpoint_and_resolved_config() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run1");
        let cfg = write_config(
            dir.path(),
            "data.source=synth\ndata.synth-classes=2\ndata.synth-per-class=12\n\
             data.synth-test-per-class=6\ndata.synth-size=16\n\
             model.classes=2\ntrain.epochs=1\ntrain.batch-size=4\noutput.timing=fixed\n",
        );
        let code = run([
            "hvcnet",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--quiet",
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2); // header + one epoch
        assert_eq!(
            lines[0],
            "epoch,train_loss,train_acc,test_acc_ema,test_acc_raw,lr,wall_seconds"
        );
        // Rows are epoch-ordered with no gaps.
        for (i, row) in lines[1..].iter().enumerate() {
            assert_eq!(row.split(',').next().unwrap(), i.to_string());
        }
        assert!(out.join("checkpoint.bin").exists());
        // Resolved config round-trips to the same config.
        let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
        let reparsed = ExperimentConfig::parse(&resolved).unwrap();
        assert_eq!(reparsed.serialize(), resolved);
    }

    #[test]
    fn train_is_byte_deterministic_with_fixed_timing() {
        let dir = tempdir().unwrap();
        let cfg = write_config(
            dir.path(),
            "data.source=synth\ndata.synth-classes=2\ndata.synth-per-class=12\n\
             data.synth-test-per-class=6\ndata.synth-size=16\n\
             model.classes=2\ntrain.epochs=2\ntrain.batch-size=4\ntrain.seed=5\n\
             output.timing=fixed\n",
        );
        let mut outputs = Vec::new();
        for name in ["a", "b"] {
            let out = dir.path().join(name);
            let code = run([
                "hvcnet",
                "train",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--quiet",
            ]);
            assert_eq!(code, 0);
            outputs.push(fs::read(out.join("metrics.csv")).unwrap());
        }
        assert_eq!(outputs[0], outputs[1]);
    }

    #[test]
    fn missing_dataset_path_exits_2() {
        let dir = tempdir().unwrap();
        let cfg = write_config(dir.path(), "data.source=idx\n");
        let code = run(["hvcnet", "train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, 2);
    }

    #[test]
    fn unknown_config_key_exits_2() {
        let dir = tempdir().unwrap();
        let cfg = write_config(dir.path(), "model.width=3\n");
        let code = run(["hvcnet", "train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, 2);
    }

    #[test]
    fn eval_matches_training_accuracy() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = write_config(
            dir.path(),
            "data.source=synth\ndata.synth-classes=2\ndata.synth-per-class=12\n\
             data.synth-test-per-class=6\ndata.synth-size=16\n\
             model.classes=2\ntrain.epochs=1\ntrain.batch-size=4\ntrain.seed=3\n\
             output.timing=fixed\n",
        );
        assert_eq!(
            run([
                "hvcnet",
                "train",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--quiet",
            ]),
            0
        );
        let ckpt = out.join("checkpoint.bin");
        assert_eq!(
            run([
                "hvcnet",
                "eval",
                "--config",
                cfg.to_str().unwrap(),
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--weights",
                "raw",
            ]),
            0
        );
    }

    #[test]
    fn count_params_head_only_accepts_single_class() {
        let code = run([
            "hvcnet",
            "count-params",
            "--head-only",
            "--j",
            "1152",
            "--head",
            "matrix-full",
            "--capsule-dim",
            "8",
            "--capsule-dim-out",
            "16",
            "--classes",
            "1",
        ]);
        assert_eq!(code, 0);
    }

    #[test]
    fn train_rejects_single_class() {
        let dir = tempdir().unwrap();
        let cfg = write_config(dir.path(), "model.classes=1\n");
        assert_eq!(run(["hvcnet", "train", "--config", cfg.to_str().unwrap()]), 2);
    }

    #[test]
    fn grad_check_passes_clean_and_fails_faulted() {
        assert_eq!(run(["hvcnet", "grad-check", "--seed", "3"]), 0);
        assert_eq!(
            run(["hvcnet", "grad-check", "--seed", "3", "--inject-fault", "mul"]),
            1
        );
    }

    #[test]
    fn divergence_exits_3() {
        // An absurd learning rate with a vanishing epsilon blows the
        // parameters up; the first non-finite value must abort with exit 3.
        let dir = tempdir().unwrap();
        let cfg = write_config(
            dir.path(),
            "data.source=synth\ndata.synth-classes=2\ndata.synth-per-class=12\n\
             data.synth-test-per-class=6\ndata.synth-size=16\n\
             model.classes=2\ntrain.epochs=3\ntrain.batch-size=4\n\
             optimizer.algorithm=rmsprop\noptimizer.epsilon=1e-300\noptimizer.eta0=1e30\n",
        );
        let out = dir.path().join("boom");
        let code = run([
            "hvcnet",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--quiet",
        ]);
        assert_eq!(code, 3);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["hvcnet", "--help"]), 0);
    }

    #[test]
    fn bad_flag_exits_two() {
        assert_eq!(run(["hvcnet", "train", "--bogus"]), 2);
    }
}
