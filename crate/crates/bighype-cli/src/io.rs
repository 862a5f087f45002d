//! File emission: atomic writes, the trace CSV, and the run summary JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use bighype::outer::{RunTrace, Schedules};

/// Write via a temp file + rename so interrupted runs never leave torn files.
pub fn atomic_write(path: &Path, contents: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Deterministic float formatting: plain decimal for moderate magnitudes,
/// exponent form otherwise. Shortest round-trip digits either way.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-4..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn trace_csv(trace: &RunTrace) -> String {
    let mut out = String::from("k,phi_e,grad_norm,inner_iters,eq_bound,sens_bound,x_step_norm,wall_ms\n");
    for r in &trace.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.k,
            fmt_f64(r.phi_e),
            fmt_f64(r.grad_norm),
            r.inner_iterations,
            fmt_f64(r.eq_bound),
            fmt_f64(r.sens_bound),
            fmt_f64(r.x_step_norm),
            fmt_f64(r.wall_ms),
        ));
    }
    out
}

pub fn summary_json(
    trace: &RunTrace,
    variant: bighype::Variant,
    schedules: &Schedules,
    preset: Option<&str>,
    seed: Option<u64>,
    rel_tol: f64,
    max_outer: usize,
) -> String {
    let summary = &trace.summary;
    let value = serde_json::json!({
        "schema": 1,
        "variant": variant.to_string(),
        "termination": summary.termination.as_str(),
        "final_x": summary.final_x,
        "final_phi_e": summary.final_phi_e,
        "outer_iterations": summary.outer_iterations,
        "total_inner_iterations": summary.total_inner_iterations,
        "constants": {
            "mu": summary.constants.mu,
            "l_f": summary.constants.l_f,
            "gamma": summary.constants.gamma,
            "eta": summary.constants.eta,
        },
        "schedules": {
            "alpha": schedules.alpha.to_string(),
            "beta": schedules.beta.to_string(),
            "sigma_y": schedules.sigma_y.to_string(),
            "sigma_s": schedules.sigma_s.to_string(),
        },
        "preset": preset,
        "seed": seed,
        "rel_tol": rel_tol,
        "max_outer": max_outer,
        "degenerate_freezes": summary.degenerate_freezes,
        "warmstart_warnings": summary.warmstart_warnings,
    });
    serde_json::to_string_pretty(&value).expect("summary serialization cannot fail")
}
