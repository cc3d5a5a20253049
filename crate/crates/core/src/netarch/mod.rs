//! The U-shaped multi-domain network: configuration, domain registry,
//! parameter layout, forward pass and parameter accounting.
//!
//! Parameters are partitioned by name. Names starting with `shared/` form
//! the universally shared set; names starting with `domain/<id>/` belong to
//! one domain. Which local parameter lands where depends on [`Mode`]:
//!
//! | parameter                          | independent | shared | universal |
//! |------------------------------------|-------------|--------|-----------|
//! | input layer, output + deep-supervision heads | domain | domain | domain |
//! | stride-1 3³ convolution            | domain      | shared | adapter: channel-wise per domain, pointwise shared |
//! | downsampling, upsampling, shortcuts | domain     | shared | shared    |
//! | normalization affines              | domain      | shared | domain    |

mod checkpoint;
mod layout;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{container_precision, read_container, write_container, Container, TensorEntry, CHECKPOINT_MAGIC};
pub use layout::{closed_form_count, sites, Scope, Site, SiteKind};
pub use model::{Binding, ModelState, ParamSet};

/// Upper bound on channels at any level.
pub const CHANNEL_CAP: usize = 320;

/// How parameters are shared across domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One standard network per domain; nothing shared.
    Independent,
    /// One standard network for all domains; only input layers and heads
    /// are per domain.
    Shared,
    /// Stride-1 3³ convolutions become domain adapters.
    Universal,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Independent, Mode::Shared, Mode::Universal];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Independent => "independent",
            Mode::Shared => "shared",
            Mode::Universal => "universal",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Mode::Independent),
            "shared" => Ok(Mode::Shared),
            "universal" => Ok(Mode::Universal),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-domain metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    /// Imaging modalities (input channels).
    pub modalities: usize,
    /// Segmentation classes including background.
    pub classes: usize,
    /// Millimetres per voxel, depth/height/width.
    pub median_spacing: [f64; 3],
    pub patch_shape: [usize; 3],
    /// Downsampling count used when this domain gets its own network.
    pub levels: usize,
    /// Optional display names for classes `1..classes`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains('/') {
            return Err(Error::Config(format!("invalid domain id `{}`", self.id)));
        }
        if self.modalities == 0 {
            return Err(Error::Config(format!("domain `{}`: modalities must be >= 1", self.id)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "domain `{}`: classes must be >= 2 (background included)",
                self.id
            )));
        }
        if self.median_spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("domain `{}`: spacing must be positive", self.id)));
        }
        check_patch(&self.id, self.patch_shape, self.levels)
    }

    /// Name of foreground class `c` (1-based).
    pub fn class_name(&self, c: usize) -> String {
        self.class_names
            .get(c.wrapping_sub(1))
            .cloned()
            .unwrap_or_else(|| format!("class{c}"))
    }
}

pub(crate) fn check_patch(id: &str, patch: [usize; 3], levels: usize) -> Result<()> {
    let unit = 1usize << levels;
    for (axis, &e) in ["depth", "height", "width"].iter().zip(&patch) {
        if e < unit || e % unit != 0 {
            return Err(Error::Config(format!(
                "domain `{id}`: patch {axis} {e} does not support {levels} halvings (needs a multiple of {unit})"
            )));
        }
    }
    Ok(())
}

/// Channel counts doubling from `base`, capped at [`CHANNEL_CAP`]. The
/// result has `levels + 1` entries; the last one is the bottleneck width.
pub fn doubling_channels(base: usize, levels: usize) -> Vec<usize> {
    (0..=levels).map(|i| (base << i.min(20)).min(CHANNEL_CAP)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "NetworkConfigFile")]
pub struct NetworkConfig {
    pub base_filters: usize,
    pub levels: usize,
    pub mode: Mode,
    /// Channels of encoder levels `0..levels` followed by the bottleneck.
    /// Doubling from `base_filters` when omitted in a config file.
    pub channel_progression: Vec<usize>,
    pub deep_supervision_levels: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::new(Mode::Universal, 16, 5)
    }
}

/// On-disk form: every field optional, with the channel progression
/// derived from the width and depth actually given.
#[derive(Deserialize)]
#[serde(default)]
struct NetworkConfigFile {
    base_filters: usize,
    levels: usize,
    mode: Mode,
    channel_progression: Option<Vec<usize>>,
    deep_supervision_levels: usize,
    leaky_slope: f64,
    norm_eps: f64,
    seed: u64,
}

impl Default for NetworkConfigFile {
    fn default() -> Self {
        let d = NetworkConfig::default();
        NetworkConfigFile {
            base_filters: d.base_filters,
            levels: d.levels,
            mode: d.mode,
            channel_progression: None,
            deep_supervision_levels: d.deep_supervision_levels,
            leaky_slope: d.leaky_slope,
            norm_eps: d.norm_eps,
            seed: d.seed,
        }
    }
}

impl From<NetworkConfigFile> for NetworkConfig {
    fn from(f: NetworkConfigFile) -> Self {
        NetworkConfig {
            channel_progression: f
                .channel_progression
                .unwrap_or_else(|| doubling_channels(f.base_filters, f.levels)),
            base_filters: f.base_filters,
            levels: f.levels,
            mode: f.mode,
            deep_supervision_levels: f.deep_supervision_levels,
            leaky_slope: f.leaky_slope,
            norm_eps: f.norm_eps,
            seed: f.seed,
        }
    }
}

impl NetworkConfig {
    pub fn new(mode: Mode, base_filters: usize, levels: usize) -> Self {
        NetworkConfig {
            base_filters,
            levels,
            mode,
            channel_progression: doubling_channels(base_filters, levels),
            deep_supervision_levels: 3,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
            seed: 0,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be >= 1".into()));
        }
        if self.channel_progression.len() != self.levels + 1 {
            return Err(Error::Config(format!(
                "channel_progression needs {} entries (levels + bottleneck), got {}",
                self.levels + 1,
                self.channel_progression.len()
            )));
        }
        if self.channel_progression[0] != self.base_filters {
            return Err(Error::Config("channel_progression[0] must equal base_filters".into()));
        }
        if self.channel_progression.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.deep_supervision_levels == 0 {
            return Err(Error::Config("deep_supervision_levels must be >= 1".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Channel layout used for `domain`. Independent networks follow the
    /// domain's own level count.
    pub fn channels_for(&self, domain: &DomainSpec) -> Vec<usize> {
        if self.mode == Mode::Independent && domain.levels != self.levels {
            doubling_channels(self.base_filters, domain.levels)
        } else {
            self.channel_progression.clone()
        }
    }
}
