use anyhow::bail;
use clap::Args;
use serde_json::json;

use rhythmid::encoder::grad_check_encoder;
use rhythmid::tensor::gradcheck::run_op_suite;

#[derive(Args)]
pub struct GradcheckArgs {
    /// Number of random seeds per check.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Maximum acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

pub fn run(args: GradcheckArgs) -> anyhow::Result<String> {
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let mut worst_overall = 0.0f64;
    let mut failures = Vec::new();

    for (name, err) in run_op_suite(&seeds)? {
        println!("op {name}: max_rel_err {err:.3e}");
        if err > args.tolerance {
            failures.push(name.to_string());
        }
        worst_overall = worst_overall.max(err);
    }

    let mut encoder_worst = 0.0f64;
    for &seed in &seeds {
        encoder_worst = encoder_worst.max(grad_check_encoder(seed)?);
    }
    println!("op encoder_2layer: max_rel_err {encoder_worst:.3e}");
    if encoder_worst > args.tolerance {
        failures.push("encoder_2layer".to_string());
    }
    worst_overall = worst_overall.max(encoder_worst);

    if !failures.is_empty() {
        bail!(
            "gradient checks above tolerance {}: {}",
            args.tolerance,
            failures.join(", ")
        );
    }
    Ok(json!({
        "command": "gradcheck",
        "seeds": args.seeds,
        "tolerance": args.tolerance,
        "worst": worst_overall,
        "ok": true,
    })
    .to_string())
}
