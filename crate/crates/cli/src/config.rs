//! Top-level config file layout: optional sections, one per subcommand.
//! A single file can carry a scenario, a portrait spec, comparison
//! settings, and a sweep spec side by side; each subcommand reads the
//! section it needs and ignores the rest.

use anyhow::{bail, Context, Result};
use pmsm_observer::analysis::{PortraitConfig, SweepConfig};
use pmsm_observer::scenario::{Scenario, VariantSelector};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Comparison settings: which estimator variants run on the `[scenario]`
/// section and the relative-error threshold for settling times.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub variants: Vec<VariantSelector>,
    pub threshold: f64,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            variants: vec![
                VariantSelector::Continuous,
                VariantSelector::Hybrid,
                VariantSelector::HybridIdentifier,
            ],
            threshold: 0.05,
        }
    }
}

/// Sweep settings: the sampled-initial-condition sweep plus the `ε` list
/// (empty list: `{ε₀, ε₀/3, ε₀/10}` from the reference gain set).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    #[serde(flatten)]
    pub config: SweepConfig,
    pub epsilon_list: Vec<f64>,
}

impl SweepSection {
    pub fn epsilon_list(&self) -> Vec<f64> {
        if self.epsilon_list.is_empty() {
            let eps0 = pmsm_observer::ObserverGains::reference().epsilon(&self.config.machine);
            vec![eps0, eps0 / 3.0, eps0 / 10.0]
        } else {
            self.epsilon_list.clone()
        }
    }
}

/// The whole config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: Option<Scenario>,
    pub portrait: Option<PortraitConfig>,
    pub compare: Option<CompareSection>,
    pub sweep: Option<SweepSection>,
}

impl ConfigFile {
    /// Parse a config file; a missing path yields the built-in defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let cfg: ConfigFile = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                Ok(cfg)
            }
        }
    }

    pub fn scenario_or_default(&self) -> Scenario {
        self.scenario.clone().unwrap_or_default()
    }

    pub fn portrait_or_default(&self) -> PortraitConfig {
        self.portrait.clone().unwrap_or_default()
    }

    pub fn compare_or_default(&self) -> CompareSection {
        self.compare.clone().unwrap_or_default()
    }

    pub fn sweep_or_default(&self) -> SweepSection {
        self.sweep.clone().unwrap_or_default()
    }
}

/// Resolve a compare section against the scenario: every listed variant
/// must be a full closed-loop estimator sharing the scenario's gains.
pub fn validate_compare(section: &CompareSection) -> Result<()> {
    if section.variants.is_empty() {
        bail!("compare: variants list is empty");
    }
    for v in &section.variants {
        if v.closed_loop().is_none() {
            bail!(
                "compare: variant '{}' is a reduced system; comparisons run the \
                 full closed-loop estimators (continuous | hybrid | hybrid-identifier)",
                v.label()
            );
        }
    }
    if !(section.threshold > 0.0 && section.threshold < 1.0) {
        bail!(
            "compare: threshold must be a relative error in (0, 1), got {}",
            section.threshold
        );
    }
    Ok(())
}
