//! Site enumeration: every weight-bearing location in the network, its
//! channel geometry, and which partition its parameters belong to.

use serde::{Deserialize, Serialize};

use super::{DomainSpec, Mode, NetworkConfig};
use crate::error::{Error, Result};
use crate::ops::TAPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteKind {
    /// Per-domain 3³ input convolution.
    Input,
    /// Stride-1 3³ convolution inside a residual block; an adapter site in
    /// universal mode.
    Conv,
    /// Stride-2 3³ downsampling convolution.
    Down,
    /// 1×1×1 projection on a residual shortcut.
    Shortcut,
    /// Stride-2 2³ transposed convolution.
    Up,
    /// 1×1×1 convolution to class logits.
    Head,
    /// Affine gain and bias of an instance normalization.
    Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Site {
    pub name: String,
    pub kind: SiteKind,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Owner {
    Shared,
    Domain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    He { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamDesc {
    pub local: String,
    pub shape: Vec<usize>,
    pub owner: Owner,
    pub init: Init,
}

fn site(name: impl Into<String>, kind: SiteKind, cin: usize, cout: usize) -> Site {
    Site {
        name: name.into(),
        kind,
        cin,
        cout,
    }
}

fn block(sites: &mut Vec<Site>, name: &str, cin: usize, cout: usize, project: bool) {
    sites.push(site(format!("{name}/conv1"), SiteKind::Conv, cin, cout));
    sites.push(site(format!("{name}/norm1"), SiteKind::Norm, cout, cout));
    sites.push(site(format!("{name}/conv2"), SiteKind::Conv, cout, cout));
    sites.push(site(format!("{name}/norm2"), SiteKind::Norm, cout, cout));
    if project && cin != cout {
        sites.push(site(format!("{name}/shortcut"), SiteKind::Shortcut, cin, cout));
    }
}

/// Sites of one domain's network, in forward order.
///
/// `channels` holds the widths of encoder levels followed by the bottleneck.
/// Downsampling keeps the channel count; each level's first convolution
/// widens it, with a 1×1×1 projection on that block's shortcut. Decoder
/// blocks reduce the concatenated skip input back to the level width and use
/// the upsampled tensor as their shortcut.
pub fn sites(channels: &[usize], modalities: usize, classes: usize, ds_levels: usize) -> Vec<Site> {
    let levels = channels.len() - 1;
    let mut out = Vec::new();
    out.push(site("input/conv", SiteKind::Input, modalities, channels[0]));
    out.push(site("input/norm", SiteKind::Norm, channels[0], channels[0]));
    for i in 0..levels {
        let cin = if i == 0 { channels[0] } else { channels[i - 1] };
        block(&mut out, &format!("enc{i}"), cin, channels[i], true);
        out.push(site(format!("enc{i}/down"), SiteKind::Down, channels[i], channels[i]));
        out.push(site(
            format!("enc{i}/down_norm"),
            SiteKind::Norm,
            channels[i],
            channels[i],
        ));
    }
    block(&mut out, "bottleneck", channels[levels - 1], channels[levels], true);
    for i in (0..levels).rev() {
        out.push(site(format!("dec{i}/up"), SiteKind::Up, channels[i + 1], channels[i]));
        out.push(site(
            format!("dec{i}/up_norm"),
            SiteKind::Norm,
            channels[i],
            channels[i],
        ));
        block(&mut out, &format!("dec{i}"), 2 * channels[i], channels[i], false);
    }
    for i in 0..ds_levels.min(levels) {
        out.push(site(format!("head{i}"), SiteKind::Head, channels[i], classes));
    }
    out
}

pub(crate) fn domain_sites(config: &NetworkConfig, domain: &DomainSpec) -> Vec<Site> {
    sites(
        &config.channels_for(domain),
        domain.modalities,
        domain.classes,
        config.deep_supervision_levels,
    )
}

/// Parameters a site carries under `mode`.
pub(crate) fn params_of(site: &Site, mode: Mode) -> Vec<ParamDesc> {
    let shared_unless_independent = if mode == Mode::Independent {
        Owner::Domain
    } else {
        Owner::Shared
    };
    let p = |suffix: &str, shape: Vec<usize>, owner, init| ParamDesc {
        local: format!("{}/{suffix}", site.name),
        shape,
        owner,
        init,
    };
    let (cin, cout) = (site.cin, site.cout);
    match site.kind {
        SiteKind::Input => vec![p(
            "weight",
            vec![cout, cin, 3, 3, 3],
            Owner::Domain,
            Init::He { fan_in: TAPS * cin },
        )],
        SiteKind::Conv if mode == Mode::Universal => vec![
            p(
                "channelwise",
                vec![cin, 3, 3, 3],
                Owner::Domain,
                Init::He { fan_in: TAPS },
            ),
            p("pointwise", vec![cout, cin], Owner::Shared, Init::He { fan_in: cin }),
        ],
        SiteKind::Conv | SiteKind::Down => vec![p(
            "weight",
            vec![cout, cin, 3, 3, 3],
            shared_unless_independent,
            Init::He { fan_in: TAPS * cin },
        )],
        SiteKind::Shortcut => vec![p(
            "weight",
            vec![cout, cin],
            shared_unless_independent,
            Init::He { fan_in: cin },
        )],
        SiteKind::Up => vec![p(
            "weight",
            vec![cin, cout, 2, 2, 2],
            shared_unless_independent,
            Init::He { fan_in: cin },
        )],
        SiteKind::Head => vec![p("weight", vec![cout, cin], Owner::Domain, Init::He { fan_in: cin })],
        SiteKind::Norm => {
            let owner = if site.name.starts_with("input/") {
                Owner::Domain
            } else {
                match mode {
                    Mode::Shared => Owner::Shared,
                    Mode::Independent | Mode::Universal => Owner::Domain,
                }
            };
            vec![
                p("gain", vec![cout], owner, Init::Ones),
                p("bias", vec![cout], owner, Init::Zeros),
            ]
        }
    }
}

/// What a parameter count covers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Convolution weights only: input layer, heads and normalization
    /// affines are excluded since they are never shared.
    Comparable,
    Total,
    /// Everything owned by one domain.
    DomainAdded(String),
}

/// Whether a site counts toward the comparable scope.
pub(crate) fn is_comparable(kind: SiteKind) -> bool {
    !matches!(kind, SiteKind::Input | SiteKind::Head | SiteKind::Norm)
}

/// Weight count of a site holding one standard filter bank.
fn standard_site_count(site: &Site) -> u64 {
    let (c, c2) = (site.cin as u64, site.cout as u64);
    match site.kind {
        SiteKind::Input | SiteKind::Conv | SiteKind::Down => 27 * c * c2,
        SiteKind::Shortcut | SiteKind::Head => c * c2,
        SiteKind::Up => 8 * c * c2,
        SiteKind::Norm => 2 * c2,
    }
}

/// Parameter count from site formulas alone, without allocating tensors.
///
/// A standard 3³ site holds `27·C·C′` weights; an adapter site shared by `T`
/// domains holds `27·C·T + C·C′`.
pub fn closed_form_count(config: &NetworkConfig, domains: &[DomainSpec], scope: &Scope) -> Result<u64> {
    let t = domains.len() as u64;
    let wanted = |kind: SiteKind| match scope {
        Scope::Comparable => is_comparable(kind),
        _ => true,
    };
    if let Scope::DomainAdded(id) = scope {
        let d = domains
            .iter()
            .find(|d| &d.id == id)
            .ok_or_else(|| Error::UnknownDomain(id.clone()))?;
        let mut n = 0;
        for s in domain_sites(config, d) {
            n += match (config.mode, s.kind) {
                (Mode::Independent, _) => standard_site_count(&s),
                (_, SiteKind::Input | SiteKind::Head) => standard_site_count(&s),
                (_, SiteKind::Norm) if s.name.starts_with("input/") => standard_site_count(&s),
                (Mode::Universal, SiteKind::Norm) => standard_site_count(&s),
                (Mode::Universal, SiteKind::Conv) => 27 * s.cin as u64,
                _ => 0,
            };
        }
        return Ok(n);
    }
    let first = domains
        .first()
        .ok_or_else(|| Error::Config("at least one domain is required".into()))?;
    let mut total = 0;
    match config.mode {
        Mode::Independent => {
            for d in domains {
                total += domain_sites(config, d)
                    .iter()
                    .filter(|s| wanted(s.kind))
                    .map(standard_site_count)
                    .sum::<u64>();
            }
        }
        Mode::Shared | Mode::Universal => {
            // the body is common; only per-domain sites are repeated
            for s in domain_sites(config, first) {
                if !wanted(s.kind) {
                    continue;
                }
                let per_domain = matches!(s.kind, SiteKind::Input | SiteKind::Head)
                    || (s.kind == SiteKind::Norm && s.name.starts_with("input/"));
                total += if per_domain {
                    0
                } else if config.mode == Mode::Universal && s.kind == SiteKind::Conv {
                    27 * s.cin as u64 * t + (s.cin * s.cout) as u64
                } else if config.mode == Mode::Universal && s.kind == SiteKind::Norm {
                    t * standard_site_count(&s)
                } else {
                    standard_site_count(&s)
                };
            }
            if !matches!(scope, Scope::Comparable) {
                for d in domains {
                    total += domain_sites(config, d)
                        .iter()
                        .filter(|s| {
                            matches!(s.kind, SiteKind::Input | SiteKind::Head)
                                || (s.kind == SiteKind::Norm && s.name.starts_with("input/"))
                        })
                        .map(standard_site_count)
                        .sum::<u64>();
                }
            }
        }
    }
    Ok(total)
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scope::Comparable => f.write_str("comparable"),
            Scope::Total => f.write_str("total"),
            Scope::DomainAdded(id) => write!(f, "per-domain-added:{id}"),
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "comparable" => Ok(Scope::Comparable),
            "total" => Ok(Scope::Total),
            other => match other.strip_prefix("per-domain-added:") {
                Some(id) => Ok(Scope::DomainAdded(id.to_string())),
                None => Err(Error::Config(format!(
                    "unknown scope `{other}` (expected comparable, total or per-domain-added:<id>)"
                ))),
            },
        }
    }
}
