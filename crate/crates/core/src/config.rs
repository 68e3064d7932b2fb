//! Run configuration: `key = value` text with `#` comments and command-line overrides.

use crate::episodes::{DomainSpec, EpisodeSpec, FamilyKind, ShapeFamily};
use crate::error::{Error, Result};
use crate::gape::FusionMode;
use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Components,
    Bins,
    Fusion,
    Grid,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Self::Components => "components",
            Self::Bins => "bins",
            Self::Fusion => "fusion",
            Self::Grid => "grid",
        }
    }
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Self::Components),
            "bins" => Ok(Self::Bins),
            "fusion" => Ok(Self::Fusion),
            "grid" => Ok(Self::Grid),
            other => Err(Error::Config(format!("unknown sweep {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub bins: usize,
    pub grid: usize,
    pub tau_occ: f64,
    pub channels: usize,
    pub mlp_hidden: usize,
    pub mlp_bias: bool,
    pub image_size: usize,
    pub shots: usize,

    pub lambda_dist: f64,
    pub lambda_geo: f64,
    pub alpha: f64,
    pub align_loss: bool,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub episodes: usize,
    pub checkpoint_every: usize,
    pub heldout_episodes: usize,

    pub enrichment: bool,
    pub osb_loss: bool,
    pub position_embedding: bool,
    pub fusion: FusionMode,
    pub masked_expectation: bool,
    pub bg_enrich: bool,
    pub query_reweight: bool,
    pub tau_gate: f64,

    pub train_families: Vec<FamilyKind>,
    pub eval_families: Vec<FamilyKind>,
    pub source_domain: String,
    pub target_domain: String,
    pub eval_domain: String,
    pub eval_episodes: usize,
    pub prior_episodes: usize,
    pub sweep: Sweep,
    pub export_maps: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            grid: 8,
            tau_occ: 0.05,
            channels: 32,
            mlp_hidden: 16,
            mlp_bias: true,
            image_size: 64,
            shots: 1,
            lambda_dist: 1.0,
            lambda_geo: 0.3,
            alpha: 20.0,
            align_loss: true,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 0.95,
            decay_every: 1000,
            episodes: 4000,
            checkpoint_every: 500,
            heldout_episodes: 64,
            enrichment: true,
            osb_loss: true,
            position_embedding: false,
            fusion: FusionMode::Additive,
            masked_expectation: false,
            bg_enrich: false,
            query_reweight: false,
            tau_gate: 1.0,
            train_families: FamilyKind::ALL.to_vec(),
            eval_families: FamilyKind::ALL.to_vec(),
            source_domain: "source".into(),
            target_domain: "target".into(),
            eval_domain: "target".into(),
            eval_episodes: 200,
            prior_episodes: 500,
            sweep: Sweep::Components,
            export_maps: false,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_families(key: &str, v: &str) -> Result<Vec<FamilyKind>> {
    let fams = v
        .split(',')
        .map(|s| s.trim().parse::<FamilyKind>())
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Config(format!("{key}: {e}")))?;
    if fams.is_empty() {
        return Err(Error::Config(format!("{key}: empty family list")));
    }
    Ok(fams)
}

fn join_families(f: &[FamilyKind]) -> String {
    f.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "bins" => self.bins = parse_num(key, v)?,
            "grid" => self.grid = parse_num(key, v)?,
            "tau_occ" => self.tau_occ = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "mlp_hidden" => self.mlp_hidden = parse_num(key, v)?,
            "mlp_bias" => self.mlp_bias = parse_bool(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "shots" => self.shots = parse_num(key, v)?,
            "lambda_dist" => self.lambda_dist = parse_num(key, v)?,
            "lambda_geo" => self.lambda_geo = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "align_loss" => self.align_loss = parse_bool(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "lr_decay" => self.lr_decay = parse_num(key, v)?,
            "decay_every" => self.decay_every = parse_num(key, v)?,
            "episodes" => self.episodes = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "heldout_episodes" => self.heldout_episodes = parse_num(key, v)?,
            "enrichment" => self.enrichment = parse_bool(key, v)?,
            "osb_loss" => self.osb_loss = parse_bool(key, v)?,
            "position_embedding" => self.position_embedding = parse_bool(key, v)?,
            "fusion" => self.fusion = v.parse()?,
            "masked_expectation" => self.masked_expectation = parse_bool(key, v)?,
            "bg_enrich" => self.bg_enrich = parse_bool(key, v)?,
            "query_reweight" => self.query_reweight = parse_bool(key, v)?,
            "tau_gate" => self.tau_gate = parse_num(key, v)?,
            "train_families" => self.train_families = parse_families(key, v)?,
            "eval_families" => self.eval_families = parse_families(key, v)?,
            "source_domain" => self.source_domain = v.to_string(),
            "target_domain" => self.target_domain = v.to_string(),
            "eval_domain" => self.eval_domain = v.to_string(),
            "eval_episodes" => self.eval_episodes = parse_num(key, v)?,
            "prior_episodes" => self.prior_episodes = parse_num(key, v)?,
            "sweep" => self.sweep = v.parse()?,
            "export_maps" => self.export_maps = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.bins < 2 {
            return fail("bins must be >= 2");
        }
        if self.channels < 2 || self.mlp_hidden == 0 || self.shots == 0 {
            return fail("channels >= 2, mlp_hidden >= 1 and shots >= 1 are required");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) || self.image_size > 1024 {
            return fail("image_size must be a positive multiple of 4 up to 1024");
        }
        if self.grid == 0 || self.grid > self.image_size / 4 {
            return fail("grid must be between 1 and the feature-map side");
        }
        if !(0.0..=1.0).contains(&self.tau_occ) {
            return fail("tau_occ must lie in [0, 1]");
        }
        let nonneg = [self.lambda_dist, self.lambda_geo, self.weight_decay];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return fail("lambda_dist, lambda_geo and weight_decay must be finite and >= 0");
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) || !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("alpha and lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("momentum must lie in [0, 1) and lr_decay in (0, 1]");
        }
        if self.decay_every == 0 || self.checkpoint_every == 0 {
            return fail("decay_every and checkpoint_every must be positive");
        }
        if !(self.tau_gate > 0.0) {
            return fail("tau_gate must be > 0");
        }
        for d in [&self.source_domain, &self.target_domain, &self.eval_domain] {
            DomainSpec::by_name(d)?;
        }
        Ok(())
    }

    /// Effective configuration, one `key=value` per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        put("bins", self.bins.to_string());
        put("grid", self.grid.to_string());
        put("tau_occ", self.tau_occ.to_string());
        put("channels", self.channels.to_string());
        put("mlp_hidden", self.mlp_hidden.to_string());
        put("mlp_bias", self.mlp_bias.to_string());
        put("image_size", self.image_size.to_string());
        put("shots", self.shots.to_string());
        put("lambda_dist", self.lambda_dist.to_string());
        put("lambda_geo", self.lambda_geo.to_string());
        put("alpha", self.alpha.to_string());
        put("align_loss", self.align_loss.to_string());
        put("lr", self.lr.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("lr_decay", self.lr_decay.to_string());
        put("decay_every", self.decay_every.to_string());
        put("episodes", self.episodes.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("heldout_episodes", self.heldout_episodes.to_string());
        put("enrichment", self.enrichment.to_string());
        put("osb_loss", self.osb_loss.to_string());
        put("position_embedding", self.position_embedding.to_string());
        put("fusion", self.fusion.to_string());
        put("masked_expectation", self.masked_expectation.to_string());
        put("bg_enrich", self.bg_enrich.to_string());
        put("query_reweight", self.query_reweight.to_string());
        put("tau_gate", self.tau_gate.to_string());
        put("train_families", join_families(&self.train_families));
        put("eval_families", join_families(&self.eval_families));
        put("source_domain", self.source_domain.clone());
        put("target_domain", self.target_domain.clone());
        put("eval_domain", self.eval_domain.clone());
        put("eval_episodes", self.eval_episodes.to_string());
        put("prior_episodes", self.prior_episodes.to_string());
        put("sweep", self.sweep.name().to_string());
        put("export_maps", self.export_maps.to_string());
        s
    }

    /// Episode sampler settings. Eval episodes render in `eval_domain`.
    pub fn episode_spec(&self) -> Result<EpisodeSpec> {
        Ok(EpisodeSpec {
            image_size: self.image_size,
            shots: self.shots,
            train_families: self.train_families.iter().map(|&k| ShapeFamily::preset_for(k, self.image_size)).collect(),
            eval_families: self.eval_families.iter().map(|&k| ShapeFamily::preset_for(k, self.image_size)).collect(),
            source: DomainSpec::by_name(&self.source_domain)?,
            target: DomainSpec::by_name(&self.eval_domain)?,
            feature_stride: 4,
            grid: self.grid,
            tau_occ: self.tau_occ,
        })
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
