use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::layout::{self, Init, Owner, ParamDesc, Scope, SiteKind};
use super::{check_patch, DomainSpec, Mode, NetworkConfig};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{Padding, Stride};
use crate::real::{lit, Real};
use crate::seed;
use crate::tensor::Tensor;

/// Named parameter tensors, keyed by local name (e.g. `enc0/conv1/pointwise`).
pub type ParamSet<T> = BTreeMap<String, Tensor<T>>;

/// Parameters placed on a tape by one forward pass, keyed by full name.
pub type Binding = BTreeMap<String, Var>;

/// Full network parameter store, partitioned into shared and per-domain sets.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    config: NetworkConfig,
    domains: Vec<DomainSpec>,
    shared: ParamSet<T>,
    domain_params: BTreeMap<String, ParamSet<T>>,
    frozen: BTreeSet<String>,
}

pub(crate) fn full_name(owner: Owner, domain: &str, local: &str) -> String {
    match owner {
        Owner::Shared => format!("shared/{local}"),
        Owner::Domain => format!("domain/{domain}/{local}"),
    }
}

/// Splits a full parameter name into (domain id or `None` for shared, local name).
pub(crate) fn split_name(name: &str) -> Option<(Option<&str>, &str)> {
    if let Some(local) = name.strip_prefix("shared/") {
        return Some((None, local));
    }
    let rest = name.strip_prefix("domain/")?;
    let (id, local) = rest.split_once('/')?;
    Some((Some(id), local))
}

fn init_tensor<T: Real>(desc: &ParamDesc, seed_value: u64, full: &str) -> Tensor<T> {
    match desc.init {
        Init::Ones => Tensor::full(&desc.shape, T::one()),
        Init::Zeros => Tensor::zeros(&desc.shape),
        Init::He { fan_in } => {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let mut rng = seed::rng(seed::derive(seed_value, full));
            Tensor::from_fn(&desc.shape, |_| lit(normal.sample(&mut rng)))
        }
    }
}

impl<T: Real> ModelState<T> {
    /// Builds and initializes the network for `domains`.
    pub fn build(config: NetworkConfig, domains: &[DomainSpec]) -> Result<Self> {
        config.validate()?;
        if domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        let mut seen = BTreeSet::new();
        for d in domains {
            d.validate()?;
            if !seen.insert(d.id.as_str()) {
                return Err(Error::DuplicateDomain(d.id.clone()));
            }
        }
        let mut model = ModelState {
            config,
            domains: Vec::new(),
            shared: ParamSet::new(),
            domain_params: BTreeMap::new(),
            frozen: BTreeSet::new(),
        };
        for d in domains {
            model.check_domain_geometry(d)?;
            model.allocate(d, true);
            model.domains.push(d.clone());
        }
        Ok(model)
    }

    fn check_domain_geometry(&self, d: &DomainSpec) -> Result<()> {
        match self.config.mode {
            Mode::Independent => check_patch(&d.id, d.patch_shape, d.levels),
            Mode::Shared | Mode::Universal => {
                check_patch(&d.id, d.patch_shape, self.config.levels)?;
                if let Some(first) = self.domains.first() {
                    if first.patch_shape != d.patch_shape {
                        return Err(Error::Config(format!(
                            "domain `{}` patch {:?} differs from common patch {:?}",
                            d.id, d.patch_shape, first.patch_shape
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Allocates `d`'s parameters; shared ones only when `with_shared`.
    fn allocate(&mut self, d: &DomainSpec, with_shared: bool) -> usize {
        let mut added = 0;
        let mode = self.config.mode;
        let seed_value = self.config.seed;
        for site in layout::domain_sites(&self.config, d) {
            for desc in layout::params_of(&site, mode) {
                let full = full_name(desc.owner, &d.id, &desc.local);
                match desc.owner {
                    Owner::Shared => {
                        if with_shared && !self.shared.contains_key(&desc.local) {
                            let t = init_tensor(&desc, seed_value, &full);
                            self.shared.insert(desc.local, t);
                        }
                    }
                    Owner::Domain => {
                        let t = init_tensor(&desc, seed_value, &full);
                        added += t.len();
                        self.domain_params
                            .entry(d.id.clone())
                            .or_default()
                            .insert(desc.local, t);
                    }
                }
            }
        }
        added
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn domains(&self) -> &[DomainSpec] {
        &self.domains
    }

    pub fn domain(&self, id: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    pub fn shared_params(&self) -> &ParamSet<T> {
        &self.shared
    }

    pub fn domain_params(&self, id: &str) -> Option<&ParamSet<T>> {
        self.domain_params.get(id)
    }

    /// Every parameter with its full name, shared first, then by domain.
    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        let shared = self.shared.iter().map(|(k, v)| (format!("shared/{k}"), v));
        let domains = self
            .domain_params
            .iter()
            .flat_map(|(id, set)| set.iter().map(move |(k, v)| (format!("domain/{id}/{k}"), v)));
        shared.chain(domains)
    }

    pub fn param(&self, full: &str) -> Option<&Tensor<T>> {
        match split_name(full)? {
            (None, local) => self.shared.get(local),
            (Some(id), local) => self.domain_params.get(id)?.get(local),
        }
    }

    pub fn param_mut(&mut self, full: &str) -> Option<&mut Tensor<T>> {
        match split_name(full)? {
            (None, local) => self.shared.get_mut(local),
            (Some(id), local) => self.domain_params.get_mut(id)?.get_mut(local),
        }
    }

    /// Visits every parameter mutably with its full name.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (k, v) in self.shared.iter_mut() {
            f(&format!("shared/{k}"), v);
        }
        for (id, set) in self.domain_params.iter_mut() {
            for (k, v) in set.iter_mut() {
                f(&format!("domain/{id}/{k}"), v);
            }
        }
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn freeze(&mut self, full: impl Into<String>) {
        self.frozen.insert(full.into());
    }

    /// Marks the whole shared partition as frozen.
    pub fn freeze_shared(&mut self) {
        let names: Vec<String> = self.shared.keys().map(|k| format!("shared/{k}")).collect();
        self.frozen.extend(names);
    }

    /// Reassembles a model from stored parts (used by checkpoint loading).
    pub fn from_parts(
        config: NetworkConfig,
        domains: Vec<DomainSpec>,
        params: BTreeMap<String, Tensor<T>>,
        frozen: BTreeSet<String>,
    ) -> Result<Self> {
        let mut model = ModelState {
            config,
            domains: Vec::new(),
            shared: ParamSet::new(),
            domain_params: BTreeMap::new(),
            frozen,
        };
        model.config.validate()?;
        for d in &domains {
            d.validate()?;
            model.check_domain_geometry(d)?;
            model.domains.push(d.clone());
        }
        let expected = ModelState::<T>::expected_shapes(&model.config, &domains);
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "load",
                    name.clone(),
                    format!("{:?} vs {shape:?}", t.shape()),
                ));
            }
        }
        for name in params.keys() {
            if !expected.contains_key(name) {
                return Err(Error::Config(format!("unexpected parameter `{name}`")));
            }
        }
        for (name, t) in params {
            match split_name(&name) {
                Some((None, local)) => {
                    model.shared.insert(local.to_string(), t);
                }
                Some((Some(id), local)) => {
                    let (id, local) = (id.to_string(), local.to_string());
                    model.domain_params.entry(id).or_default().insert(local, t);
                }
                None => return Err(Error::Config(format!("malformed parameter name `{name}`"))),
            }
        }
        Ok(model)
    }

    fn expected_shapes(config: &NetworkConfig, domains: &[DomainSpec]) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        for d in domains {
            for site in layout::domain_sites(config, d) {
                for desc in layout::params_of(&site, config.mode) {
                    out.insert(full_name(desc.owner, &d.id, &desc.local), desc.shape);
                }
            }
        }
        out
    }

    /// Registers a new domain on a trained shared or universal model.
    ///
    /// Allocates the domain's own parameters, leaves every shared tensor
    /// untouched and marks the shared partition frozen. Returns the number of
    /// parameter elements added.
    pub fn add_domain(&mut self, spec: DomainSpec) -> Result<usize> {
        if self.config.mode == Mode::Independent {
            return Err(Error::Config(
                "add_domain needs a shared or universal model; train a new independent model instead".into(),
            ));
        }
        spec.validate()?;
        if self.domains.iter().any(|d| d.id == spec.id) {
            return Err(Error::DuplicateDomain(spec.id));
        }
        self.check_domain_geometry(&spec)?;
        let added = self.allocate(&spec, false);
        self.domains.push(spec);
        self.freeze_shared();
        Ok(added)
    }

    /// Exact parameter count by enumerating tensor elements.
    pub fn count_parameters(&self, scope: &Scope) -> Result<u64> {
        let mut kinds: BTreeMap<String, SiteKind> = BTreeMap::new();
        for d in &self.domains {
            for site in layout::domain_sites(&self.config, d) {
                for desc in layout::params_of(&site, self.config.mode) {
                    kinds.insert(full_name(desc.owner, &d.id, &desc.local), site.kind);
                }
            }
        }
        let mut total = 0u64;
        match scope {
            Scope::DomainAdded(id) => {
                let set = self
                    .domain_params
                    .get(id)
                    .ok_or_else(|| Error::UnknownDomain(id.clone()))?;
                total = set.values().map(|t| t.len() as u64).sum();
            }
            Scope::Total | Scope::Comparable => {
                for (name, t) in self.named_params() {
                    let kind = kinds[&name];
                    if matches!(scope, Scope::Total) || layout::is_comparable(kind) {
                        total += t.len() as u64;
                    }
                }
            }
        }
        Ok(total)
    }

    /// Elements in normalization affines, reported apart from weights.
    pub fn norm_parameter_count(&self) -> u64 {
        self.named_params()
            .filter(|(n, _)| n.ends_with("/gain") || n.ends_with("/bias"))
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    /// SHA-256 over the shared partition (names, shapes, little-endian payload).
    pub fn shared_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.shared {
            h.update(k.as_bytes());
            h.update([0u8]);
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.len() * T::BYTES);
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Moves gradients from a tape's parameter leaves into the model.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, binding: &Binding) {
        for (name, &var) in binding {
            if let Some(g) = tape.grad(var) {
                if let Some(p) = self.param_mut(name) {
                    p.accumulate_grad(g);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param_mut(|_, p| p.zero_grad());
    }

    /// Records the forward pass for one patch on `tape` and returns the
    /// logits together with the parameters it bound.
    pub fn forward(&self, tape: &mut Tape<T>, domain_id: &str, patch: Var) -> Result<(Var, Binding)> {
        let domain = self.domain(domain_id)?;
        let shape = tape.value(patch).shape().to_vec();
        let &[c, d, h, w] = shape.as_slice() else {
            return Err(Error::shape(
                "forward",
                "rank",
                format!("expected C×D×H×W patch, got {shape:?}"),
            ));
        };
        if c != domain.modalities {
            return Err(Error::shape(
                "forward",
                "channels",
                format!("domain `{domain_id}` expects {} modalities, got {c}", domain.modalities),
            ));
        }
        let channels = self.config.channels_for(domain);
        let levels = channels.len() - 1;
        check_patch(domain_id, [d, h, w], levels).map_err(|_| {
            Error::shape(
                "forward",
                "spatial",
                format!("extents {:?} must be multiples of {}", [d, h, w], 1usize << levels),
            )
        })?;
        let mut ctx = Ctx {
            model: self,
            tape,
            domain: domain_id,
            binding: Binding::new(),
            slope: lit(self.config.leaky_slope),
            eps: lit(self.config.norm_eps),
        };
        let logits = ctx.network(patch, levels)?;
        Ok((logits, ctx.binding))
    }

    /// Logits for one patch without keeping the tape.
    pub fn predict(&self, domain_id: &str, patch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.input(patch.clone());
        let (logits, _) = self.forward(&mut tape, domain_id, x)?;
        Ok(tape.value(logits).clone())
    }
}

struct Ctx<'a, T: Real> {
    model: &'a ModelState<T>,
    tape: &'a mut Tape<T>,
    domain: &'a str,
    binding: Binding,
    slope: T,
    eps: T,
}

impl<T: Real> Ctx<'_, T> {
    fn has(&self, local: &str) -> bool {
        self.lookup(local).is_some()
    }

    fn lookup(&self, local: &str) -> Option<(String, &Tensor<T>)> {
        if let Some(t) = self.model.domain_params.get(self.domain).and_then(|s| s.get(local)) {
            return Some((full_name(Owner::Domain, self.domain, local), t));
        }
        self.model
            .shared
            .get(local)
            .map(|t| (full_name(Owner::Shared, self.domain, local), t))
    }

    fn p(&mut self, local: &str) -> Result<Var> {
        let (full, t) = self
            .lookup(local)
            .ok_or_else(|| Error::Config(format!("parameter `{local}` missing for domain `{}`", self.domain)))?;
        if let Some(&v) = self.binding.get(&full) {
            return Ok(v);
        }
        let v = self.tape.param(t.clone());
        self.binding.insert(full, v);
        Ok(v)
    }

    /// Stride-1 3³ site: standard bank or channel-wise + pointwise adapter.
    fn conv_site(&mut self, name: &str, x: Var) -> Result<Var> {
        if self.model.config.mode == Mode::Universal {
            let dw = self.p(&format!("{name}/channelwise"))?;
            let pw = self.p(&format!("{name}/pointwise"))?;
            let h = self.tape.channelwise_conv3d(x, dw)?;
            self.tape.pointwise_conv3d(h, pw)
        } else {
            let w = self.p(&format!("{name}/weight"))?;
            self.tape.conv3d(x, w, Stride::One, Padding::Same)
        }
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{name}/gain"))?;
        let b = self.p(&format!("{name}/bias"))?;
        self.tape.instance_norm(x, g, b, self.eps)
    }

    fn act(&mut self, x: Var) -> Var {
        self.tape.leaky_relu(x, self.slope)
    }

    fn residual_block(&mut self, name: &str, x: Var, shortcut: Option<Var>) -> Result<Var> {
        let h = self.conv_site(&format!("{name}/conv1"), x)?;
        let h = self.norm(&format!("{name}/norm1"), h)?;
        let h = self.act(h);
        let h = self.conv_site(&format!("{name}/conv2"), h)?;
        let h = self.norm(&format!("{name}/norm2"), h)?;
        let proj = format!("{name}/shortcut/weight");
        let sc = match shortcut {
            Some(s) => s,
            None if self.has(&proj) => {
                let w = self.p(&proj)?;
                self.tape.pointwise_conv3d(x, w)?
            }
            None => x,
        };
        let sum = self.tape.add(h, sc)?;
        Ok(self.act(sum))
    }

    fn network(&mut self, patch: Var, levels: usize) -> Result<Var> {
        let w = self.p("input/conv/weight")?;
        let x = self.tape.conv3d(patch, w, Stride::One, Padding::Same)?;
        let x = self.norm("input/norm", x)?;
        let mut x = self.act(x);

        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            x = self.residual_block(&format!("enc{i}"), x, None)?;
            skips.push(x);
            let w = self.p(&format!("enc{i}/down/weight"))?;
            x = self.tape.conv3d(x, w, Stride::Two, Padding::Same)?;
            x = self.norm(&format!("enc{i}/down_norm"), x)?;
            x = self.act(x);
        }
        x = self.residual_block("bottleneck", x, None)?;

        let mut decoded = vec![x; levels];
        for i in (0..levels).rev() {
            let w = self.p(&format!("dec{i}/up/weight"))?;
            let up = self.tape.transposed_conv3d(x, w)?;
            let up = self.norm(&format!("dec{i}/up_norm"), up)?;
            let up = self.act(up);
            let cat = self.tape.concat(&[up, skips[i]], 0)?;
            x = self.residual_block(&format!("dec{i}"), cat, Some(up))?;
            decoded[i] = x;
        }

        // deep supervision: coarse maps are upsampled and summed into finer ones
        let heads = self.model.config.deep_supervision_levels.min(levels);
        let mut acc: Option<Var> = None;
        for i in (0..heads).rev() {
            let w = self.p(&format!("head{i}/weight"))?;
            let h = self.tape.pointwise_conv3d(decoded[i], w)?;
            acc = Some(match acc {
                None => h,
                Some(coarse) => {
                    let up = self.tape.upsample2(coarse)?;
                    self.tape.add(up, h)?
                }
            });
        }
        Ok(acc.expect("at least one head"))
    }
}
