//! Trains and scores one synthetic experiment.
//!
//! ```text
//! cargo run --release -p jcrnn --example synthetic -- [config.json]
//! ```

use std::time::Instant;

use jcrnn::parallel::Execution;
use jcrnn::pipeline::{run_synthetic, RunConfig};

fn main() -> jcrnn::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => RunConfig::default(),
    };
    let started = Instant::now();
    let exp = run_synthetic(&cfg, Execution::Parallel)?;
    for e in &exp.trained.log.entries {
        println!(
            "epoch {:3} ce {:.4} reg {:.4} lambda {:.2} {:.2}s",
            e.epoch, e.ce_loss, e.reg_loss, e.lambda, e.seconds
        );
    }
    for (name, r) in [("joint", &exp.report), ("stage1", &exp.stage1_report)] {
        let best = r
            .forecast_start
            .iter()
            .filter(|p| p.precision >= 0.5)
            .map(|p| p.recall)
            .fold(0.0, f64::max);
        println!(
            "{name}: f1 {:.3} sl {:.3} el {:.3} action_f1 {:.3} best start-forecast recall at precision>=0.5: {:.3}",
            r.average_f1, r.sl_score, r.el_score, r.action_f1.f1, best
        );
    }
    println!("total {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
