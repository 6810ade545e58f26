//! wasm-bindgen entry points for the static demo page in `www/`.
//!
//! Every function takes a scenario string (`"ou-rotation omega=2"`) and returns JSON,
//! so the page needs no generated TypeScript bindings.

use sdeinv::quadrature::QuadratureSpec;
use sdeinv::resolvent::invariance_probe_chi;
use sdeinv::simulator::{marginal_bins, simulate, InitialLaw, SimConfig};
use sdeinv::{load_scenario, Scenario};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Cap on the work one call may request from the page.
const MAX_PATHS: usize = 20_000;

fn scenario(spec: &str) -> Result<Scenario, JsError> {
    load_scenario(spec).map_err(|e| JsError::new(&e.to_string()))
}

fn js<E: std::fmt::Display>(e: E) -> JsError {
    JsError::new(&e.to_string())
}

fn config(s: &Scenario, paths: usize, horizon: f64, seed: u64) -> SimConfig {
    let initial = match (&s.envelope, s.normalization) {
        (Some(env), Some(_)) => InitialLaw::Stationary(*env),
        _ => InitialLaw::Point(vec![1.0; s.dim()]),
    };
    SimConfig::new(s.simulation.dt.max(1e-3), horizon, paths.clamp(1, MAX_PATHS), seed, initial)
}

/// `{times, paths: [[x_1 at each time]], exploded}` for a few paths, recorded every 0.01.
#[wasm_bindgen]
pub fn simulate_paths(spec: &str, paths: usize, horizon: f64, seed: u64) -> Result<String, JsError> {
    let s = scenario(spec)?;
    let mut cfg = config(&s, paths.min(50), horizon, seed);
    let n = cfg.n_steps().map_err(js)?;
    let every = ((0.01 / cfg.dt).round() as usize).max(1);
    cfg = cfg.with_record_every((1..=every).rev().find(|k| n % k == 0).unwrap_or(1));
    let ens = simulate(&s.coefficients, &cfg).map_err(js)?;
    let xs: Vec<Vec<f64>> = (0..ens.n_paths()).map(|p| (0..ens.n_times()).map(|k| ens.state(p, k)[0]).collect()).collect();
    Ok(json!({ "times": ens.times, "paths": xs, "exploded": ens.summary().exploded }).to_string())
}

/// Histogram of `x_1` at the horizon next to the normalized invariant marginal.
#[wasm_bindgen]
pub fn invariance_histogram(spec: &str, paths: usize, horizon: f64, seed: u64) -> Result<String, JsError> {
    let s = scenario(spec)?;
    let z = s.normalization.ok_or_else(|| JsError::new("this scenario has no finite invariant measure"))?;
    let cfg = config(&s, paths, horizon, seed).recording_only_at_end();
    let ens = simulate(&s.coefficients, &cfg).map_err(js)?;
    let (lo, hi, bins) = (&s.simulation.histogram_lo, &s.simulation.histogram_hi, s.simulation.bins);
    let expected = marginal_bins(&s.coefficients, z, 0, lo, hi, bins, &QuadratureSpec::for_histograms(s.dim())).map_err(js)?;
    let xs = ens.coordinate(ens.n_times() - 1, 0);
    let width = (hi[0] - lo[0]) / bins as f64;
    let mut empirical = vec![0.0; bins];
    for x in &xs {
        let b = ((x - lo[0]) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            empirical[b as usize] += 1.0 / xs.len() as f64;
        }
    }
    let tv = 0.5 * empirical.iter().zip(&expected).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(json!({ "lo": lo[0], "hi": hi[0], "empirical": empirical, "expected": expected, "tv": tv }).to_string())
}

/// Window norms of `1 - alpha G'_alpha 1` on the scenario's nested boxes (at most `boxes`).
#[wasm_bindgen]
pub fn chi_profile(spec: &str, boxes: usize, killing: f64) -> Result<String, JsError> {
    let s = scenario(spec)?;
    let family = s.nested_boxes(Some(boxes.max(2))).map_err(js)?;
    let small = &family[0];
    let (lo, hi): (Vec<f64>, Vec<f64>) = small.lo.iter().zip(&small.hi).map(|(a, b)| (0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b)).unzip();
    let chi = invariance_probe_chi(&s.coefficients, &family, s.resolvent.alpha, &lo, &hi, killing).map_err(js)?;
    let widths: Vec<f64> = s.resolvent.half_widths.iter().take(family.len()).copied().collect();
    Ok(json!({ "half_widths": widths, "window_norms": chi.window_norms, "alpha": chi.alpha }).to_string())
}
