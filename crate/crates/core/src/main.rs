//! Command-line driver for the verification suite.
//!
//! Subcommands: `verify` (kernel and model equivalence checks), `cost`
//! (analytic decode memory sweep), `align` (train/infer path diffs under
//! emulated precision), `rl` (clipped surrogate estimator gap on a batch).
//!
//! Exit codes: 0 on success, 1 when a verification check fails, 2 for
//! usage or configuration errors. Output for a fixed set of flags and seed
//! is byte-for-byte deterministic.

use clap::{Args, Parser, Subcommand};
use linattn::alignment::{precision_sweep, run_paths_and_diff, Execution, PathSpec};
use linattn::cost_model::{cost_sweep_csv, reference_specs};
use linattn::hybrid_model::{
    model_decode_step, model_prefill, random_embeddings, ModelConfig, ModelParams, ModelState,
    PrecisionPolicy,
};
use linattn::linear_attention::{
    attn_chunked_prefill, attn_quadratic_oracle, attn_recurrent_sequence, finite_check_gradients,
    LinearAttnState,
};
use linattn::numerics::Matrix;
use linattn::rl_objective::{
    disparity_fraction, estimator_gap, parse_batch_csv, ppo_recompute_objective,
    ppo_rollout_objective,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "linattn", about = "hybrid linear attention verification suite")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Path to a key=value model config; defaults to the built-in shape.
    #[arg(long)]
    config: Option<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelArgs {
    fn load(&self) -> linattn::Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => ModelConfig::from_key_values(&std::fs::read_to_string(path)?)?,
            None => ModelConfig::desk_default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run kernel and full-model equivalence checks.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        /// Random equivalence instances per kernel check.
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Also sweep chunk sizes 1..=N on one fixed instance, printing one
        /// line per chunk size.
        #[arg(long)]
        chunk_sweep: Option<usize>,
    },
    /// Emit the analytic decode memory-access sweep as CSV.
    Cost {
        #[arg(long, default_value_t = 16)]
        n_heads: usize,
        #[arg(long, default_value_t = 4)]
        n_kv_heads: usize,
        #[arg(long, default_value_t = 64)]
        d_head: usize,
        #[arg(long, default_value_t = 40)]
        n_layers: usize,
        /// Bytes per cached element.
        #[arg(long, default_value_t = 2)]
        bytes: usize,
        /// Comma-separated sequence lengths.
        #[arg(long, default_value = "0,1024,4096,16384,65536")]
        seq_lens: String,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<String>,
    },
    /// Diff prefill vs decode activations across precision stages.
    Align {
        #[command(flatten)]
        model: ModelArgs,
        /// Sequence length to run.
        #[arg(long, default_value_t = 32)]
        tokens: usize,
        /// Probability-ratio alarm threshold.
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        /// Write the combined per-module diff CSV here.
        #[arg(long)]
        out: Option<String>,
    },
    /// Evaluate both clipped surrogate estimators on a batch CSV.
    Rl {
        /// Batch file: token_id,lp_rollout,lp_train_old,lp_train_new,advantage.
        #[arg(long)]
        batch: String,
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        /// Probability-ratio threshold for the disparity fraction.
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        /// Write the per-token estimator comparison as CSV here.
        #[arg(long)]
        out: Option<String>,
    },
}

fn write_or_print(out: &Option<String>, content: &str) -> linattn::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, content)?;
            println!("wrote {path}");
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn parse_seq_lens(s: &str) -> linattn::Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim().parse::<usize>().map_err(|e| linattn::Error::Parse {
                line: 1,
                msg: format!("seq_lens {p:?}: {e}"),
            })
        })
        .collect()
}

/// One line per chunk size on a fixed random instance: the deviation of the
/// chunked prefill from the quadratic oracle must not depend on chunking.
fn chunk_sweep_lines(cfg: &ModelConfig, n: usize) -> linattn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 2);
    let d = cfg.gqa.d_head;
    let lambda = cfg.decay.rate(cfg.decay.n_heads() - 1);
    let mk = |rng: &mut ChaCha8Rng| Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
    let q = mk(&mut rng);
    let k = mk(&mut rng);
    let v = mk(&mut rng);
    let oracle = attn_quadratic_oracle(&q, &k, &v, lambda)?;
    for chunk in 1..=n {
        let (out, _) = attn_chunked_prefill(&q, &k, &v, lambda, chunk, &LinearAttnState::new(d))?;
        println!(
            "chunk_sweep chunk={chunk} max_abs_diff={:.3e}",
            oracle.max_abs_diff(&out)
        );
    }
    Ok(())
}

/// Returns the number of failed checks.
fn run_verify(cfg: &ModelConfig, instances: usize) -> linattn::Result<usize> {
    let mut failures = 0;
    let mut check = |name: &str, ok: bool, detail: String| {
        if ok {
            println!("PASS {name} {detail}");
        } else {
            println!("FAIL {name} {detail}");
            failures += 1;
        }
    };

    // kernel equivalence: recurrent vs quadratic oracle
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.gen_range(1..=24);
        let d = [2usize, 4, 8][rng.gen_range(0..3)];
        let lambda = rng.gen_range(0.0..=1.0);
        let mk = |rng: &mut ChaCha8Rng| Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let q = mk(&mut rng);
        let k = mk(&mut rng);
        let v = mk(&mut rng);
        let oracle = attn_quadratic_oracle(&q, &k, &v, lambda)?;
        let (rec, _) = attn_recurrent_sequence(&q, &k, &v, lambda, &LinearAttnState::new(d))?;
        worst = worst.max(oracle.max_abs_diff(&rec));
    }
    check(
        "recurrent_vs_oracle",
        worst < 1e-10,
        format!("max_abs_diff={worst:.3e} over {instances} instances"),
    );

    // gradient spot check against finite differences
    let grad_worst = finite_check_gradients(cfg.seed ^ 1, instances.min(10))?;
    check(
        "analytic_gradients",
        grad_worst < 1e-5,
        format!("max_rel_err={grad_worst:.3e}"),
    );

    // full model: prefill vs decode
    let params = ModelParams::init(cfg)?;
    let x = random_embeddings(16, cfg.d_model, cfg.seed);
    let policy = PrecisionPolicy::exact();
    let (pre, _) = model_prefill(&x, cfg, &params, &policy, None)?;
    let mut state = ModelState::new(cfg);
    let mut worst_model = 0.0f64;
    for t in 0..x.rows() {
        let o = model_decode_step(x.row(t), cfg, &params, &mut state, &policy, None)?;
        for (j, val) in o.iter().enumerate() {
            worst_model = worst_model.max((pre.get(t, j) - val).abs());
        }
    }
    check(
        "model_prefill_vs_decode",
        worst_model < 1e-10,
        format!("max_abs_diff={worst_model:.3e}"),
    );

    // exact paths through the alignment harness must show zero disparity
    let report = run_paths_and_diff(
        &x,
        cfg,
        &params,
        &PathSpec::exact(Execution::Prefill),
        &PathSpec::exact(Execution::Decode),
        0.8,
    )?;
    check(
        "alignment_exact_paths",
        report.disparity.frac_exceed == 0.0 && report.logit_diff.max_abs < 1e-10,
        format!("logit_max_diff={:.3e}", report.logit_diff.max_abs),
    );

    Ok(failures)
}

fn run(cli: Cli) -> linattn::Result<ExitCode> {
    match cli.command {
        Command::Verify {
            model,
            instances,
            chunk_sweep,
        } => {
            let cfg = model.load()?;
            if let Some(n) = chunk_sweep {
                chunk_sweep_lines(&cfg, n)?;
            }
            let failures = run_verify(&cfg, instances)?;
            if failures == 0 {
                println!("verify: all checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("verify: {failures} check(s) failed");
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Cost {
            n_heads,
            n_kv_heads,
            d_head,
            n_layers,
            bytes,
            seq_lens,
            out,
        } => {
            let lens = parse_seq_lens(&seq_lens)?;
            let specs = reference_specs(n_heads, n_kv_heads, d_head, n_layers, bytes);
            let csv = cost_sweep_csv(&specs, &lens)?;
            write_or_print(&out, &csv)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Align {
            model,
            tokens,
            threshold,
            out,
        } => {
            let cfg = model.load()?;
            let params = ModelParams::init(&cfg)?;
            let x = random_embeddings(tokens, cfg.d_model, cfg.seed);
            let reports = precision_sweep(&x, &cfg, &params, threshold)?;
            let mut csv = String::from("stage,layer,module,max_abs_diff,mean_abs_diff\n");
            for report in &reports {
                println!(
                    "stage {} vs {}: logit_max_diff={:.3e} max_abs_dp={:.6} frac_exceed_{:.2}={:.4}",
                    report.path_a,
                    report.path_b,
                    report.logit_diff.max_abs,
                    report.disparity.max_diff,
                    threshold,
                    report.disparity.frac_exceed
                );
                for (layer, tag, d) in &report.module_diffs {
                    csv.push_str(&format!(
                        "{},{},{},{:.17e},{:.17e}\n",
                        report.path_b,
                        layer,
                        tag.name(),
                        d.max_abs,
                        d.mean_abs
                    ));
                }
            }
            if let Some(path) = &out {
                std::fs::write(path, &csv)?;
                println!("wrote {path}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Rl {
            batch,
            epsilon,
            threshold,
            out,
        } => {
            let text = std::fs::read_to_string(&batch)?;
            let batch = parse_batch_csv(&text, epsilon)?;
            let a = ppo_rollout_objective(&batch);
            let b = ppo_recompute_objective(&batch);
            let gap = estimator_gap(&batch)?;
            println!(
                "rollout_mean={:.12e} recompute_mean={:.12e} mean_gap={:.3e}",
                a.mean, b.mean, gap.mean_gap
            );
            println!(
                "max_token_gap={:.3e} mean_token_gap={:.3e} clip_flip_fraction={:.4} skipped={}/{}",
                gap.max_abs,
                gap.mean_abs,
                gap.clip_flip_fraction,
                a.skipped.max(b.skipped),
                batch.tokens.len()
            );
            println!(
                "disparity_fraction_exceeding_{threshold}={:.6}",
                disparity_fraction(&batch, threshold)?
            );
            if let Some(path) = &out {
                let mut csv =
                    String::from("index,token_id,surrogate_rollout,surrogate_recompute,gap\n");
                for (i, (t, g)) in batch.tokens.iter().zip(&gap.per_token).enumerate() {
                    csv.push_str(&format!(
                        "{i},{},{:.17e},{:.17e},{g:.17e}\n",
                        t.token_id, a.surrogates[i], b.surrogates[i]
                    ));
                }
                std::fs::write(path, &csv)?;
                println!("wrote {path}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
