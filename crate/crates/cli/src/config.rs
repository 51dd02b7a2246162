use std::fmt;
use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use netprice::data::{ColumnMap, PipelineParams};
use netprice::mechanism::{InpParams, Variant};
use netprice::PhantomCurve;
use serde::{Deserialize, Serialize};

/// Invalid invocation or configuration; the process exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Stationary,
    Nonstationary,
    SweepPhi,
    Example,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum EconomySource {
    Example1,
    Example2,
    Random {
        n: usize,
        /// Falls back to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_imbalance")]
        imbalance: f64,
    },
    /// An economy document written by an earlier run or fit.
    File { path: PathBuf },
    Dataset {
        path: PathBuf,
        #[serde(default)]
        pipeline: PipelineParams,
        #[serde(default)]
        columns: ColumnMap,
    },
}

fn default_imbalance() -> f64 {
    0.5
}

impl EconomySource {
    fn is_synthetic(&self) -> bool {
        matches!(self, Self::Example1 | Self::Example2 | Self::Random { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// 1-based free coordinate that is swept; the others stay at zero.
    pub location: usize,
    pub from: f64,
    pub to: f64,
    pub points: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { location: 1, from: 0.0, to: 40.0, points: 81 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub economy: EconomySource,
    pub variants: Vec<Variant>,
    pub params: InpParams,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub fail_fast: bool,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    /// Length of a synthetic nonstationary run.
    pub weeks: usize,
    /// Log-scale spread of weekly demand in synthetic nonstationary runs.
    pub week_spread: f64,
    pub sweep: SweepSpec,
    /// Overrides the source's phantom curve on every pair.
    pub phantom: Option<PhantomCurve>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Example,
            economy: EconomySource::Example1,
            variants: vec![Variant::Inp],
            params: InpParams::default(),
            out: None,
            seed: 0,
            fail_fast: false,
            jobs: 0,
            weeks: 12,
            week_spread: 0.1,
            sweep: SweepSpec::default(),
            phantom: None,
        }
    }
}

impl ExperimentConfig {
    pub fn out_dir(&self) -> &PathBuf {
        self.out.as_ref().expect("validated")
    }

    fn validate(&self) -> Result<()> {
        let out = self.out.as_ref().ok_or_else(|| usage("no output directory given (--out)"))?;
        if !out.is_dir() {
            return Err(usage(format!("output directory {} does not exist", out.display())));
        }
        self.params.validate().map_err(|e| usage(e.to_string()))?;
        if self.variants.is_empty() {
            return Err(usage("no mechanism variant selected"));
        }
        for v in &self.variants {
            if let Variant::Simple { gamma } = v {
                if !(*gamma > 0.0) {
                    return Err(usage(format!("simple variant needs gamma > 0, got {gamma}")));
                }
            }
        }
        if self.mode == Mode::Example && !self.economy.is_synthetic() {
            return Err(usage("example mode needs example1, example2 or a random economy"));
        }
        match &self.economy {
            EconomySource::Random { n, imbalance, .. } => {
                if *n < 2 || !(0.0..1.0).contains(imbalance) {
                    return Err(usage(format!("random economy needs n >= 2 and imbalance in [0, 1), got {n}, {imbalance}")));
                }
            }
            EconomySource::File { path } | EconomySource::Dataset { path, .. } => {
                if !path.is_file() {
                    return Err(usage(format!("input file {} does not exist", path.display())));
                }
            }
            _ => {}
        }
        if self.mode == Mode::Nonstationary && self.weeks < 1 {
            return Err(usage("weeks must be at least 1"));
        }
        if self.mode == Mode::SweepPhi && (self.sweep.points < 2 || self.sweep.location < 1) {
            return Err(usage("sweep needs at least 2 points and a location >= 1"));
        }
        if self.week_spread < 0.0 {
            return Err(usage("week_spread must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// example1, example2, random:N[:IMBALANCE] or file:PATH.
    #[arg(long)]
    economy: Option<String>,
    /// inp, pure-newton, gradient-descent or simple[:GAMMA]; repeatable.
    #[arg(long, value_delimiter = ',')]
    variant: Vec<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Maximum number of mechanism steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Stop once f falls to this level.
    #[arg(long)]
    f_tol: Option<f64>,
    /// Existing directory for the artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trip CSV; replaces the economy source.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Abort on the first clearing failure instead of backtracking.
    #[arg(long)]
    fail_fast: bool,
    #[arg(long)]
    jobs: Option<usize>,
}

pub fn parse_variant(s: &str) -> Result<Variant> {
    let (name, arg) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
    let variant = match (name, arg) {
        ("inp", None) => Variant::Inp,
        ("pure-newton", None) => Variant::PureNewton,
        ("gradient-descent", None) => Variant::GradientDescent,
        ("simple", None) => Variant::Simple { gamma: 0.01 },
        ("simple", Some(g)) => {
            Variant::Simple { gamma: g.parse().map_err(|_| usage(format!("bad gamma in variant {s:?}")))? }
        }
        _ => return Err(usage(format!("unknown variant {s:?}"))),
    };
    Ok(variant)
}

pub fn parse_economy(s: &str) -> Result<EconomySource> {
    let bad = || usage(format!("unknown economy {s:?}"));
    if let Some(path) = s.strip_prefix("file:") {
        return Ok(EconomySource::File { path: path.into() });
    }
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["example1"] => Ok(EconomySource::Example1),
        ["example2"] => Ok(EconomySource::Example2),
        ["random", n, rest @ ..] if rest.len() <= 1 => Ok(EconomySource::Random {
            n: n.parse().map_err(|_| bad())?,
            seed: None,
            imbalance: rest.first().map_or(Ok(default_imbalance()), |v| v.parse()).map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

pub fn variant_label(v: &Variant) -> String {
    match v {
        Variant::Inp => "inp".into(),
        Variant::PureNewton => "pure-newton".into(),
        Variant::GradientDescent => "gradient-descent".into(),
        Variant::Simple { gamma } => format!("simple-{gamma}"),
    }
}

impl RunArgs {
    pub fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(s) = &self.economy {
            cfg.economy = parse_economy(s)?;
        }
        if let Some(path) = self.dataset {
            cfg.economy = match cfg.economy {
                EconomySource::Dataset { pipeline, columns, .. } => EconomySource::Dataset { path, pipeline, columns },
                _ => EconomySource::Dataset { path, pipeline: PipelineParams::default(), columns: ColumnMap::default() },
            };
        }
        if !self.variant.is_empty() {
            cfg.variants = self.variant.iter().map(|s| parse_variant(s)).collect::<Result<_>>()?;
        }
        let p = &mut cfg.params;
        p.tau = self.tau.unwrap_or(p.tau);
        p.beta = self.beta.unwrap_or(p.beta);
        p.sigma = self.sigma.unwrap_or(p.sigma);
        p.max_steps = self.steps.unwrap_or(p.max_steps);
        p.f_tol = self.f_tol.or(p.f_tol);
        cfg.out = self.out.or(cfg.out);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.fail_fast |= self.fail_fast;
        cfg.jobs = self.jobs.unwrap_or(cfg.jobs);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_strings() {
        assert_eq!(parse_variant("inp").unwrap(), Variant::Inp);
        assert_eq!(parse_variant("simple:0.5").unwrap(), Variant::Simple { gamma: 0.5 });
        assert!(parse_variant("newton").is_err());
        assert_eq!(variant_label(&Variant::Simple { gamma: 0.5 }), "simple-0.5");
    }

    #[test]
    fn economy_strings() {
        assert_eq!(parse_economy("random:10").unwrap(), EconomySource::Random { n: 10, seed: None, imbalance: 0.5 });
        assert_eq!(parse_economy("random:10:0.2").unwrap(), EconomySource::Random { n: 10, seed: None, imbalance: 0.2 });
        assert_eq!(parse_economy("file:a:b.json").unwrap(), EconomySource::File { path: "a:b.json".into() });
        assert!(parse_economy("random").is_err());
        assert!(parse_economy("example3").is_err());
    }

    #[test]
    fn config_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"mode":"sweep-phi","economy":{"source":"random","n":5},"params":{"tau":2}}"#).unwrap();
        assert_eq!(cfg.mode, Mode::SweepPhi);
        assert_eq!(cfg.params.tau, 2.0);
        assert_eq!(cfg.params.beta, 0.5);
        assert_eq!(cfg.variants, vec![Variant::Inp]);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus":1}"#).is_err());
    }
}
