//! Built-in scenarios and config loading.
//!
//! A scenario is either named inline, `"singular-rotation d=2 alpha=1.0"`, or read
//! from a TOML file:
//!
//! ```toml
//! [scenario]
//! name = "singular-rotation"
//!
//! [params]
//! d = 2
//! alpha = 1.0
//! beta = 0.1
//! ```
//!
//! Unknown tables, keys and parameters are rejected with their line and column.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coefficients::{density_from_drift_1d, CoefficientSet};
use crate::error::{Error, Result};
use crate::field::{MatrixField, ScalarField, SingularSet, VectorField};
use crate::quadrature::QuadratureSpec;
use crate::report::ReportEntry;
use crate::resolvent::GridSpec;
use crate::simulator::Envelope;
use crate::validators::{gamma, TailRange, TestFunctionBattery, ValidationPlan};

/// One tunable parameter of a built-in scenario.
#[derive(Clone, Copy, Debug)]
pub struct ParamInfo {
    pub name: &'static str,
    pub default: f64,
    pub integer: bool,
    pub doc: &'static str,
}

/// Registry entry.
#[derive(Clone, Copy, Debug)]
pub struct ScenarioInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub negative_control: bool,
    pub params: &'static [ParamInfo],
}

const fn p(name: &'static str, default: f64, integer: bool, doc: &'static str) -> ParamInfo {
    ParamInfo { name, default, integer, doc }
}

const REGISTRY: &[ScenarioInfo] = &[
    ScenarioInfo {
        name: "ou-gauss",
        summary: "A = id, B = 0, rho = exp(-|x|^2), psi = 1: the Ornstein-Uhlenbeck process with drift -x",
        negative_control: false,
        params: &[p("d", 2.0, true, "dimension")],
    },
    ScenarioInfo {
        name: "ou-rotation",
        summary: "Gaussian rho with the constant stream C = [[0, omega], [-omega, 0]]: OU plus a rotation, same invariant law",
        negative_control: false,
        params: &[p("omega", 1.0, false, "rotation strength")],
    },
    ScenarioInfo {
        name: "singular-rotation",
        summary: "rho = exp(-|x|^2), psi = phi / |x|^alpha, stream c_1d = -c_d1 = 2 + cos(|x|^-beta): degenerate noise and a singular rotating drift at the origin",
        negative_control: false,
        params: &[
            p("d", 2.0, true, "dimension (>= 2)"),
            p("alpha", 1.0, false, "singularity exponent of psi, 0 <= alpha < d"),
            p("beta", 0.1, false, "oscillation exponent of the stream"),
            p("phi", 1.0, false, "constant positive factor of psi"),
        ],
    },
    ScenarioInfo {
        name: "drift-1d",
        summary: "one-dimensional density built from the drift g(y) = -2y / (1 + y^2) with a = psi = 1, giving rho = (1 + x^2)^-2",
        negative_control: false,
        params: &[],
    },
    ScenarioInfo {
        name: "broken-drift",
        summary: "negative control: OU coefficients with B = strength * x, which is not divergence free",
        negative_control: true,
        params: &[p("d", 2.0, true, "dimension"), p("strength", 1.0, false, "size of the outward field")],
    },
    ScenarioInfo {
        name: "superlinear-outward",
        summary: "negative control: OU coefficients with B chosen so that G(x) = x |x|^2",
        negative_control: true,
        params: &[p("d", 2.0, true, "dimension")],
    },
];

pub fn registry() -> &'static [ScenarioInfo] {
    REGISTRY
}

/// Grid family for the resolvent experiments: nested boxes
/// `[-w + offset, w + offset]^d` sharing the step `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolventDefaults {
    pub h: f64,
    pub half_widths: Vec<f64>,
    pub offset: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimDefaults {
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    /// Box of the marginal histograms.
    pub histogram_lo: Vec<f64>,
    pub histogram_hi: Vec<f64>,
    pub bins: usize,
}

/// A fully constructed scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub description: String,
    pub negative_control: bool,
    pub coefficients: CoefficientSet,
    /// `Z = int psi rho dx` when finite and known.
    pub normalization: Option<f64>,
    pub envelope: Option<Envelope>,
    pub battery_spread: f64,
    pub lyapunov: TailRange,
    pub growth: TailRange,
    pub divfree_growth: Option<TailRange>,
    pub annulus: Option<(f64, usize)>,
    pub normalization_box: Option<(Vec<f64>, Vec<f64>)>,
    pub resolvent: ResolventDefaults,
    pub simulation: SimDefaults,
    /// Advisory findings made while building the scenario.
    pub advisories: Vec<ReportEntry>,
}

impl Scenario {
    pub fn dim(&self) -> usize {
        self.coefficients.dim()
    }

    pub fn battery(&self) -> TestFunctionBattery {
        TestFunctionBattery::standard(self.dim(), self.battery_spread)
    }

    pub fn validation_plan(&self) -> ValidationPlan {
        let d = self.dim();
        ValidationPlan {
            battery: self.battery(),
            quadrature: QuadratureSpec::for_dim(d),
            ellipticity_box: (vec![-3.0; d], vec![3.0; d]),
            lyapunov: self.lyapunov,
            growth: self.growth,
            divfree_growth: self.divfree_growth,
            normalization_box: self.normalization_box.clone(),
            normalization: self.normalization,
            annulus: self.annulus,
            advisories: self.advisories.clone(),
        }
    }

    /// The first `count` nested boxes of the resolvent family (all when `None`).
    pub fn nested_boxes(&self, count: Option<usize>) -> Result<Vec<GridSpec>> {
        let r = &self.resolvent;
        let d = self.dim();
        let take = count.unwrap_or(r.half_widths.len()).min(r.half_widths.len());
        r.half_widths[..take].iter().map(|w| GridSpec::with_step(vec![-w + r.offset; d], vec![w + r.offset; d], r.h)).collect()
    }

    /// Resolved parameters as `k=v` text, in a form `load_scenario` accepts.
    pub fn spec_string(&self) -> String {
        let mut s = self.name.clone();
        for (k, v) in &self.params {
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }
}

/// A parameter value with where it came from (1-based line and column).
#[derive(Clone, Debug)]
struct Located {
    value: f64,
    line: usize,
    column: usize,
}

fn parse_error(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::ConfigParse { line, column, message: message.into() }
}

/// Loads a scenario from `"name k=v ..."` or from a TOML file path.
pub fn load_scenario(name_or_path: &str) -> Result<Scenario> {
    let trimmed = name_or_path.trim();
    let path = Path::new(trimmed);
    if trimmed.ends_with(".toml") || (path.is_file() && !trimmed.contains(char::is_whitespace)) {
        let text = std::fs::read_to_string(path)?;
        return load_scenario_toml(&text);
    }
    let mut tokens = trimmed.split_whitespace();
    let name = tokens.next().ok_or_else(|| parse_error(1, 1, "empty scenario specification"))?;
    let info = lookup(name)?;
    let mut params = BTreeMap::new();
    let mut offset = name.len();
    for tok in tokens {
        let column = trimmed[offset..].find(tok).map(|i| offset + i + 1).unwrap_or(1);
        offset = column - 1 + tok.len();
        let (k, v) = tok.split_once('=').ok_or_else(|| parse_error(1, column, format!("expected key=value, found `{tok}`")))?;
        let value: f64 = v.parse().map_err(|_| parse_error(1, column + k.len() + 1, format!("`{v}` is not a number")))?;
        if params.insert(k.to_string(), Located { value, line: 1, column }).is_some() {
            return Err(parse_error(1, column, format!("parameter `{k}` given twice")));
        }
    }
    build(info, params)
}

/// Parses the TOML form (see the module docs).
pub fn load_scenario_toml(text: &str) -> Result<Scenario> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e.span().map(|s| line_col(text, s.start)).unwrap_or((1, 1));
        parse_error(line, column, e.message().to_string())
    })?;
    for key in table.keys() {
        if key != "scenario" && key != "params" {
            let (l, c) = locate(text, None, key);
            return Err(parse_error(l, c, format!("unknown table `{key}` (expected [scenario] and [params])")));
        }
    }
    let scenario = table.get("scenario").and_then(|v| v.as_table()).ok_or_else(|| parse_error(1, 1, "missing [scenario] table"))?;
    for key in scenario.keys() {
        if key != "name" {
            let (l, c) = locate(text, Some("scenario"), key);
            return Err(parse_error(l, c, format!("unknown key `{key}` in [scenario]")));
        }
    }
    let name = scenario.get("name").and_then(|v| v.as_str()).ok_or_else(|| {
        let (l, c) = locate(text, Some("scenario"), "name");
        parse_error(l, c, "[scenario] needs a string `name`")
    })?;
    let info = lookup(name)?;
    let mut params = BTreeMap::new();
    if let Some(tbl) = table.get("params") {
        let tbl = tbl.as_table().ok_or_else(|| parse_error(1, 1, "`params` must be a table"))?;
        for (k, v) in tbl {
            let (line, column) = locate(text, Some("params"), k);
            let value = match v {
                toml::Value::Integer(i) => *i as f64,
                toml::Value::Float(f) => *f,
                _ => return Err(parse_error(line, column, format!("parameter `{k}` must be a number"))),
            };
            params.insert(k.clone(), Located { value, line, column });
        }
    }
    build(info, params)
}

fn line_col(text: &str, byte: usize) -> (usize, usize) {
    let before = &text[..byte.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map(|s| s.chars().count()).unwrap_or(0) + 1;
    (line, column)
}

/// Line and column of `key` (inside `[section]` when given).
fn locate(text: &str, section: Option<&str>, key: &str) -> (usize, usize) {
    let mut current: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim_start();
        let indent = line.len() - t.len();
        if let Some(rest) = t.strip_prefix('[') {
            let name = rest.split(']').next().unwrap_or("").trim().to_string();
            if section.is_none() && name == key {
                return (i + 1, indent + 2);
            }
            current = Some(name);
            continue;
        }
        let in_section = match section {
            Some(s) => current.as_deref() == Some(s),
            None => current.is_none(),
        };
        if in_section {
            if let Some(rest) = t.strip_prefix(key) {
                let rest = rest.trim_start();
                if rest.starts_with('=') || rest.starts_with('.') {
                    return (i + 1, indent + 1);
                }
            }
        }
    }
    (1, 1)
}

fn lookup(name: &str) -> Result<&'static ScenarioInfo> {
    REGISTRY.iter().find(|s| s.name == name).ok_or_else(|| Error::UnknownScenario(name.to_string()))
}

/// Resolved parameters with their source positions for error messages.
struct Params {
    values: BTreeMap<String, f64>,
    at: BTreeMap<String, (usize, usize)>,
}

impl Params {
    fn get(&self, k: &str) -> f64 {
        self.values[k]
    }

    fn fail(&self, k: &str, message: impl Into<String>) -> Error {
        let (l, c) = self.at.get(k).copied().unwrap_or((1, 1));
        parse_error(l, c, message)
    }
}

fn resolve(info: &ScenarioInfo, given: BTreeMap<String, Located>) -> Result<Params> {
    let mut values = BTreeMap::new();
    let mut at = BTreeMap::new();
    for p in info.params {
        values.insert(p.name.to_string(), p.default);
    }
    for (k, loc) in given {
        let Some(pi) = info.params.iter().find(|p| p.name == k) else {
            let known: Vec<&str> = info.params.iter().map(|p| p.name).collect();
            return Err(parse_error(
                loc.line,
                loc.column,
                format!("unknown parameter `{k}` for {} (known: {})", info.name, known.join(", ")),
            ));
        };
        if !loc.value.is_finite() || (pi.integer && loc.value.fract() != 0.0) {
            return Err(parse_error(
                loc.line,
                loc.column,
                format!("parameter `{k}` must be a finite {}", if pi.integer { "integer" } else { "number" }),
            ));
        }
        values.insert(k.clone(), loc.value);
        at.insert(k, (loc.line, loc.column));
    }
    Ok(Params { values, at })
}

fn build(info: &ScenarioInfo, given: BTreeMap<String, Located>) -> Result<Scenario> {
    let params = resolve(info, given)?;
    match info.name {
        "ou-gauss" => ou_gauss(info, &params),
        "ou-rotation" => ou_rotation(info, &params),
        "singular-rotation" => singular_rotation(info, &params),
        "drift-1d" => drift_1d(info, &params),
        "broken-drift" => broken_drift(info, &params),
        "superlinear-outward" => superlinear_outward(info, &params),
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn gaussian(d: usize) -> ScalarField {
    ScalarField::new(d, |x| (-norm2(x)).exp())
        .with_grad(|x, g| {
            let e = (-norm2(x)).exp();
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = -2.0 * xi * e;
            }
        })
        .with_log_grad(|x, g| {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = -2.0 * xi;
            }
        })
}

fn dimension(params: &Params, min: usize) -> Result<usize> {
    let d = params.get("d");
    if d < min as f64 || d > 8.0 {
        return Err(params.fail("d", format!("d must lie in {min}..=8")));
    }
    Ok(d as usize)
}

/// Shared skeleton for the Gaussian-density scenarios.
fn gaussian_scenario(info: &ScenarioInfo, params: &Params, cs: CoefficientSet) -> Scenario {
    let d = cs.dim();
    let s = 0.5f64.sqrt();
    let (widths, h) = match d {
        1 => (vec![1.0, 2.0, 3.0, 4.0], 1.0 / 64.0),
        2 => (vec![1.0, 2.0, 3.0, 4.0], 0.0625),
        _ => (vec![1.0, 2.0], 0.25),
    };
    Scenario {
        name: info.name.to_string(),
        params: params.values.clone(),
        description: info.summary.to_string(),
        negative_control: info.negative_control,
        coefficients: cs,
        normalization: Some(PI.powf(d as f64 / 2.0)),
        envelope: Some(Envelope::Gaussian { scale: s, radial_power: 0.0, bound: 1.0 }),
        battery_spread: 1.5,
        lyapunov: TailRange::new(1.0, 2.0),
        growth: TailRange::new(1.0, 2.0),
        divfree_growth: None,
        annulus: None,
        normalization_box: Some((vec![-6.0; d], vec![6.0; d])),
        resolvent: ResolventDefaults { h, half_widths: widths, offset: 0.0, alpha: 1.0 },
        simulation: SimDefaults {
            dt: 1e-3,
            horizon: 1.0,
            paths: 10_000,
            histogram_lo: vec![-3.0; d],
            histogram_hi: vec![3.0; d],
            bins: 40,
        },
        advisories: Vec::new(),
    }
}

fn ou_coefficients(d: usize) -> Result<CoefficientSet> {
    CoefficientSet::new(gaussian(d), ScalarField::constant(d, 1.0), MatrixField::identity(d), VectorField::zero(d))
}

fn ou_gauss(info: &ScenarioInfo, params: &Params) -> Result<Scenario> {
    let d = dimension(params, 1)?;
    Ok(gaussian_scenario(info, params, ou_coefficients(d)?))
}

fn ou_rotation(info: &ScenarioInfo, params: &Params) -> Result<Scenario> {
    let w = params.get("omega");
    let c = MatrixField::constant(2, &[0.0, w, -w, 0.0])?;
    let cs = CoefficientSet::with_stream(gaussian(2), ScalarField::constant(2, 1.0), MatrixField::identity(2), c)?;
    let mut s = gaussian_scenario(info, params, cs);
    s.divfree_growth = Some(TailRange::new(1.0 + w, 2.0));
    Ok(s)
}

/// `c_1d = v`, `c_d1 = -v` with `v = 2 + cos(|x|^-beta)` and its analytic divergence.
fn singular_stream(d: usize, beta: f64) -> MatrixField {
    let c = MatrixField::new(d, false, move |x, out| {
        out.fill(0.0);
        let v = 2.0 + norm2(x).sqrt().powf(-beta).cos();
        out[d - 1] = v;
        out[(d - 1) * d] = -v;
    });
    // (div C)_1 = -d_d v, (div C)_d = d_1 v, grad v = beta sin(r^-beta) r^(-beta-2) x
    let div = VectorField::new(d, move |x, out| {
        out.fill(0.0);
        let r = norm2(x).sqrt();
        let k = beta * r.powf(-beta).sin() * r.powf(-beta - 2.0);
        out[0] = -k * x[d - 1];
        out[d - 1] = k * x[0];
    })
    .with_singular(SingularSet::origin(d));
    c.with_divergence(div).with_singular(SingularSet::origin(d))
}

/// Closed form of the drift of the singular-rotation scenario:
/// `G = (r^alpha / phi) (-x + [(beta/2) sin(r^-beta) r^(-beta-2) - v] (-x_d, 0, .., 0, x_1))`.
pub fn singular_rotation_drift(x: &[f64], alpha: f64, beta: f64, phi: f64) -> Vec<f64> {
    let d = x.len();
    let r = norm2(x).sqrt();
    let v = 2.0 + r.powf(-beta).cos();
    let k = 0.5 * beta * r.powf(-beta).sin() * r.powf(-beta - 2.0) - v;
    let s = r.powf(alpha) / phi;
    let mut g: Vec<f64> = x.iter().map(|xi| -s * xi).collect();
    g[0] += s * k * (-x[d - 1]);
    g[d - 1] += s * k * x[0];
    g
}

fn singular_rotation(info: &ScenarioInfo, params: &Params) -> Result<Scenario> {
    let d = dimension(params, 2)?;
    let alpha = params.get("alpha");
    let beta = params.get("beta");
    let phi = params.get("phi");
    if !(0.0..d as f64).contains(&alpha) {
        return Err(params.fail("alpha", "alpha must satisfy 0 ≤ α < d"));
    }
    if !(phi > 0.0) {
        return Err(params.fail("phi", "phi must be positive"));
    }
    let origin = SingularSet::origin(d);
    let psi = ScalarField::new(d, move |x| phi * norm2(x).sqrt().powf(-alpha)).with_singular(origin.clone());
    let cs = CoefficientSet::with_stream(gaussian(d), psi, MatrixField::identity(d), singular_stream(d, beta))?;
    let z = phi * 2.0 * PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0) * 0.5 * gamma((d as f64 - alpha) / 2.0);
    let mut advisories = Vec::new();
    if 2.0 * (beta + 1.0) >= d as f64 {
        advisories.push(ReportEntry::warning(
            "beta-condition",
            2.0 * (beta + 1.0),
            d as f64,
            format!("2(beta + 1) = {} is not below d = {d}; the construction then lacks the stated Sobolev regularity of the stream, so results are exploratory", 2.0 * (beta + 1.0)),
        ));
    }
    let h = if d == 2 { 0.0625 } else { 0.25 };
    let widths = if d == 2 { vec![1.0, 2.0, 3.0, 4.0] } else { vec![1.0, 2.0] };
    Ok(Scenario {
        name: info.name.to_string(),
        params: params.values.clone(),
        description: info.summary.to_string(),
        negative_control: false,
        coefficients: cs,
        normalization: Some(z),
        envelope: Some(Envelope::Gaussian { scale: 0.5f64.sqrt(), radial_power: alpha, bound: phi }),
        battery_spread: 1.5,
        lyapunov: TailRange::new(1.0, 2.0),
        growth: TailRange::new(1.0, 2.0),
        divfree_growth: Some(TailRange::new(1.0 / phi, 2.0)),
        annulus: Some((1.0, 5)),
        normalization_box: Some((vec![-6.0; d], vec![6.0; d])),
        // offset by h/3 so that no node, midpoint or corner of the stencil hits the origin
        resolvent: ResolventDefaults { h, half_widths: widths, offset: h / 3.0, alpha: 1.0 },
        simulation: SimDefaults {
            dt: 1e-4,
            horizon: 1.0,
            paths: 10_000,
            histogram_lo: vec![-3.0; d],
            histogram_hi: vec![3.0; d],
            bins: 40,
        },
        advisories,
    })
}

fn drift_1d(info: &ScenarioInfo, params: &Params) -> Result<Scenario> {
    let one = ScalarField::constant(1, 1.0).with_grad(|_, o| o[0] = 0.0);
    let g_hat = ScalarField::new(1, |x| -2.0 * x[0] / (1.0 + x[0] * x[0]));
    let rho = density_from_drift_1d(one.clone(), one.clone(), g_hat);
    let cs = CoefficientSet::new(rho, one, MatrixField::identity(1), VectorField::zero(1))?;
    Ok(Scenario {
        name: info.name.to_string(),
        params: params.values.clone(),
        description: info.summary.to_string(),
        negative_control: false,
        coefficients: cs,
        normalization: Some(PI / 2.0),
        envelope: Some(Envelope::Cauchy { scale: 1.0, bound: 1.0 }),
        battery_spread: 2.0,
        lyapunov: TailRange::new(1.0, 2.0),
        growth: TailRange::new(1.0, 2.0),
        divfree_growth: None,
        annulus: None,
        normalization_box: Some((vec![-20.0], vec![20.0])),
        resolvent: ResolventDefaults { h: 1.0 / 32.0, half_widths: vec![2.0, 4.0, 8.0, 16.0], offset: 0.0, alpha: 1.0 },
        simulation: SimDefaults { dt: 1e-3, horizon: 1.0, paths: 10_000, histogram_lo: vec![-5.0], histogram_hi: vec![5.0], bins: 40 },
        advisories: Vec::new(),
    })
}

fn broken_drift(info: &ScenarioInfo, params: &Params) -> Result<Scenario> {
    let d = dimension(params, 1)?;
    let k = params.get("strength");
    let cs = ou_coefficients(d)?.with_b(VectorField::new(d, move |x, o| {
        for (oi, xi) in o.iter_mut().zip(x) {
            *oi = k * xi;
        }
    }));
    Ok(gaussian_scenario(info, params, cs))
}

fn superlinear_outward(info: &ScenarioInfo, params: &Params) -> Result<Scenario> {
    let d = dimension(params, 1)?;
    // beta = -x, so B = x |x|^2 + x gives G = x |x|^2
    let cs = ou_coefficients(d)?.with_b(VectorField::new(d, |x, o| {
        let r2 = norm2(x);
        for (oi, xi) in o.iter_mut().zip(x) {
            *oi = xi * r2 + xi;
        }
    }));
    let mut s = gaussian_scenario(info, params, cs);
    s.lyapunov = TailRange::new(0.5, 2.0);
    s.growth = TailRange::new(0.5, 2.0);
    Ok(s)
}
