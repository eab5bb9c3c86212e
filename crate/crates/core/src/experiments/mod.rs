//! Config-driven experiment runners with CSV and SVG output.

pub mod figure1;
pub mod properties;
pub mod report;
pub mod topic;
pub mod train;
pub mod vmf;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discrete_prob::{suff_cbs, suff_ils, suff_vfs, DiscreteJoint, Statistic, VfsMode};
use crate::error::{Error, Result};
use crate::fdivergence::FGenerator;

pub use figure1::{run_figure1, Figure1Config};
pub use properties::{run_equivalence, EquivalenceConfig, PropertyOutcome};
pub use report::{ResultRow, CSV_HEADER};
pub use topic::{run_topic, TopicConfig};
pub use vmf::{run_vmf, VmfConfig};

/// Sufficiency of one joint and statistic, the config form of the `suff` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuffConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub joint: JointFile,
    #[serde(default = "default_generator")]
    pub f: FGenerator,
    #[serde(default)]
    pub form: SuffForm,
}

fn default_generator() -> FGenerator {
    FGenerator::Kl
}

/// `{"p": [[...]], "statistic": [...]}`; a missing statistic means the
/// constant map, whose sufficiency gap is the full f-mutual information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointFile {
    pub p: Vec<Vec<f64>>,
    #[serde(default)]
    pub statistic: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuffForm {
    Ils,
    Vfs,
    Cbs,
    #[default]
    All,
}

impl std::str::FromStr for SuffForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ils" => Ok(SuffForm::Ils),
            "vfs" => Ok(SuffForm::Vfs),
            "cbs" => Ok(SuffForm::Cbs),
            "all" => Ok(SuffForm::All),
            other => Err(Error::Config(format!(
                "unknown form '{other}' (expected ils, vfs, cbs or all)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Figure1(Figure1Config),
    Topic(TopicConfig),
    Vmf(VmfConfig),
    Equivalence(EquivalenceConfig),
    Suff(SuffConfig),
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if value.get("seed").is_none() {
            return config_error("missing field `seed`");
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ExperimentConfig::Figure1(_) => "figure1",
            ExperimentConfig::Topic(_) => "topic",
            ExperimentConfig::Vmf(_) => "vmf",
            ExperimentConfig::Equivalence(_) => "equivalence",
            ExperimentConfig::Suff(_) => "suff",
        }
    }

    pub fn out_dir(&self) -> Option<&PathBuf> {
        match self {
            ExperimentConfig::Figure1(c) => c.out_dir.as_ref(),
            ExperimentConfig::Topic(c) => c.out_dir.as_ref(),
            ExperimentConfig::Vmf(c) => c.out_dir.as_ref(),
            ExperimentConfig::Equivalence(c) => c.out_dir.as_ref(),
            ExperimentConfig::Suff(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentConfig::Figure1(c) => c.validate(),
            ExperimentConfig::Topic(c) => c.validate(),
            ExperimentConfig::Vmf(c) => c.validate(),
            ExperimentConfig::Equivalence(c) => c.validate(),
            ExperimentConfig::Suff(c) => {
                if c.joint.p.is_empty() {
                    return config_error("joint table is empty");
                }
                Ok(())
            }
        }
    }
}

impl JointFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn joint(&self) -> Result<DiscreteJoint<f64>> {
        DiscreteJoint::from_rows(&self.p).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn statistic(&self) -> Result<Statistic> {
        let nx = self.p.len();
        match &self.statistic {
            None => Ok(Statistic::constant(nx)),
            Some(map) if map.len() == nx => Ok(Statistic::from_map(map.clone())),
            Some(map) => config_error(format!("statistic has {} entries for {nx} rows", map.len())),
        }
    }
}

/// Requested sufficiency forms in the order ILS, VFS, CBS, with the largest
/// pairwise disagreement when more than one was computed.
#[derive(Clone, Debug, PartialEq)]
pub struct SuffOutput {
    pub values: Vec<(&'static str, f64)>,
    pub disagreement: Option<f64>,
}

/// Forms further apart than this are reported as disagreeing.
pub const SUFF_AGREEMENT_TOL: f64 = 1e-10;

pub fn run_suff(file: &JointFile, gen: FGenerator, form: SuffForm) -> Result<SuffOutput> {
    let joint = file.joint()?;
    let stat = file.statistic()?;
    let mut values = Vec::new();
    if matches!(form, SuffForm::Ils | SuffForm::All) {
        values.push(("ils", suff_ils(&joint, &stat, gen)?));
    }
    if matches!(form, SuffForm::Vfs | SuffForm::All) {
        values.push(("vfs", suff_vfs(&joint, &stat, gen, VfsMode::ClosedForm)?));
    }
    if matches!(form, SuffForm::Cbs | SuffForm::All) {
        values.push(("cbs", suff_cbs(&joint, &stat, gen)?));
    }
    let disagreement = (values.len() > 1).then(|| {
        let lo = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let hi = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    });
    Ok(SuffOutput { values, disagreement })
}

/// Mean ± SD plot of the headline metric of a runner, if it has one.
pub fn plot(tag: &str, rows: &[ResultRow]) -> Option<String> {
    let (metric, title, x, keep): (&str, &str, &str, fn(&str) -> bool) = match tag {
        "figure1" => ("excess_risk", "Excess risk of linear heads", "m", |_| true),
        "topic" => ("score_suff_proxy", "Score-sufficiency proxy", "n", |m| m == "chisq"),
        "vmf" => ("excess_proxy", "Held-out InfoNCE excess", "n", |m| m == "trained"),
        _ => return None,
    };
    let kept: Vec<ResultRow> = rows.iter().filter(|r| keep(&r.method)).cloned().collect();
    Some(report::svg_plot(title, x, metric, &report::summarize(&kept, metric)))
}

pub(crate) fn config_error<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn require_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return config_error(format!("{name} must be at least 1"));
    }
    Ok(())
}

pub(crate) fn require_grid(name: &str, v: &[usize]) -> Result<()> {
    if v.is_empty() || v.contains(&0) {
        return config_error(format!("{name} must be a nonempty list of positive sizes"));
    }
    Ok(())
}

pub(crate) fn require_real(name: &str, v: f64, positive: bool) -> Result<()> {
    let ok = v.is_finite() && if positive { v > 0.0 } else { v >= 0.0 };
    if !ok {
        return config_error(format!("{name} must be finite and {}", if positive { "positive" } else { "nonnegative" }));
    }
    Ok(())
}
