use std::time::Instant;

use hmrn_core::gradcheck::{self, GradcheckConfig, Preset};
use hmrn_core::metrics::ReportFormat;

use crate::fail::{validation, CliResult, Failure};

pub fn run(preset: &str, seed: u64, corrupt: Option<String>, format: ReportFormat, timing: bool) -> CliResult {
    let preset: Preset = preset.parse().map_err(|e| validation(anyhow::anyhow!("{e}")))?;
    let cfg = GradcheckConfig {
        preset,
        seed,
        corrupt,
        ..Default::default()
    };
    let start = Instant::now();
    let report = gradcheck::run(&cfg)?;
    match format {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?),
        ReportFormat::Csv => {
            println!("layer,worst_rel_err,worst_at,checked,skipped_kinks,passed");
            for l in &report.layers {
                println!("{},{:e},{},{},{},{}", l.layer, l.worst_rel_err, l.worst_at, l.checked, l.skipped_kinks, l.passed);
            }
        }
        ReportFormat::Text => {
            for l in &report.layers {
                println!(
                    "{:<13} {}  worst rel err {:.3e} at {}  ({} checked, {} skipped at kinks)",
                    l.layer,
                    if l.passed { "PASS" } else { "FAIL" },
                    l.worst_rel_err,
                    l.worst_at,
                    l.checked,
                    l.skipped_kinks
                );
            }
            println!(
                "{} (worst {:.3e}, tolerance {:.0e})",
                if report.passed() { "gradcheck passed" } else { "gradcheck FAILED" },
                report.worst(),
                report.tolerance
            );
        }
    }
    if timing {
        eprintln!("gradcheck took {:.2} s", start.elapsed().as_secs_f64());
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.layers.iter().filter(|l| !l.passed).map(|l| l.layer.as_str()).collect();
        Err(Failure::check(anyhow::anyhow!("gradient check failed for: {}", failed.join(", "))))
    }
}
