use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "sdeinv", version, about = "Validate, discretize and simulate SDEs with a prescribed invariant measure")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the validator battery (integral identities, ellipticity, growth conditions)
    Validate(Common),
    /// Grid resolvents on nested boxes: structure checks, duality, invariance probe
    Resolvent {
        #[command(flatten)]
        common: Common,
        /// Resolvent parameter (scenario default when omitted)
        #[arg(long)]
        alpha: Option<f64>,
        /// Number of nested boxes to use, smallest first (all when omitted)
        #[arg(long)]
        boxes: Option<usize>,
    },
    /// Euler-Maruyama ensembles and statistical tests
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
        /// Tests to run; repeat the flag for several (default: invariance and martingale)
        #[arg(long = "test", value_enum)]
        tests: Vec<TestKind>,
    },
    /// Consolidate the reports referenced by one or more run manifests
    Report {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long, env = "SDEINV_OUT_DIR", default_value = "sdeinv-out")]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Scenario name, optionally followed by key=value parameters
    #[arg(value_name = "SCENARIO")]
    pub positional: Vec<String>,
    /// Same as the positional form, as one string: "singular-rotation alpha=0.5"
    #[arg(long, conflicts_with = "positional")]
    pub scenario: Option<String>,
    /// TOML scenario file
    #[arg(long, conflicts_with_all = ["positional", "scenario"])]
    pub config: Option<PathBuf>,
    /// Root of the output tree
    #[arg(long, env = "SDEINV_OUT_DIR", default_value = "sdeinv-out")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multiplies every judged tolerance
    #[arg(long, default_value_t = 1.0)]
    pub tolerance_scale: f64,
}

impl Common {
    /// The scenario as accepted by `load_scenario`.
    pub fn scenario_spec(&self) -> Option<String> {
        if let Some(c) = &self.config {
            return Some(c.display().to_string());
        }
        if let Some(s) = &self.scenario {
            return Some(s.clone());
        }
        (!self.positional.is_empty()).then(|| self.positional.join(" "))
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestKind {
    /// Marginal histograms at the horizon against the normalized measure
    Invariance,
    /// Mean of the martingale M^u at three checkpoints
    Martingale,
    /// Realized quadratic variation of M^u against its compensator
    Qv,
    /// Time-reversed forward ensemble against the dual ensemble
    Reversal,
}

impl TestKind {
    pub fn name(self) -> &'static str {
        match self {
            TestKind::Invariance => "invariance",
            TestKind::Martingale => "martingale",
            TestKind::Qv => "qv",
            TestKind::Reversal => "reversal",
        }
    }
}
