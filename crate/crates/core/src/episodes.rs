//! Synthetic few-shot episodes.
//!
//! Shapes come from three families (compact ellipses, rings, irregular blobs)
//! and are rendered under a [`DomainSpec`] that changes appearance only.
//! Every episode is a pure function of its seed.

use crate::error::{Error, Result};
use crate::geometry::pgm::Greymap;
use crate::geometry::{downsample_mask, BinaryMask};
use crate::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub const MAX_SHAPE_REJECTIONS: usize = 100;
pub const MAX_EPISODE_RESAMPLES: usize = 20;
pub const MIN_FOREGROUND: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FamilyKind {
    CompactEllipse,
    Annulus,
    IrregularBlob,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 3] = [Self::CompactEllipse, Self::Annulus, Self::IrregularBlob];

    pub fn name(self) -> &'static str {
        match self {
            Self::CompactEllipse => "compact_ellipse",
            Self::Annulus => "annulus",
            Self::IrregularBlob => "irregular_blob",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape family {s:?}")))
    }
}

/// Shape family with its size and shape ranges, all in pixels at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeFamily {
    pub kind: FamilyKind,
    /// Radius range: semi-major axis, outer ring radius, or base blob radius.
    pub radius: (f64, f64),
    /// Ellipse eccentricity range in `[0, 1)`.
    pub eccentricity: (f64, f64),
    /// Ring wall thickness: thin-wall range and thickened-segment range.
    pub thin_wall: (f64, f64),
    pub thick_wall: (f64, f64),
    /// Maximum relative amplitude of each blob harmonic.
    pub harmonic_amp: f64,
}

impl ShapeFamily {
    pub fn preset(kind: FamilyKind) -> Self {
        let base = Self {
            kind,
            radius: (12.0, 20.0),
            eccentricity: (0.0, 0.6),
            thin_wall: (2.0, 3.0),
            thick_wall: (7.0, 10.0),
            harmonic_amp: 0.18,
        };
        match kind {
            FamilyKind::CompactEllipse => base,
            FamilyKind::Annulus => Self {
                radius: (16.0, 24.0),
                ..base
            },
            FamilyKind::IrregularBlob => Self {
                radius: (12.0, 18.0),
                ..base
            },
        }
    }

    /// Preset with lengths scaled from the 64 px reference to `size`.
    pub fn preset_for(kind: FamilyKind, size: usize) -> Self {
        let f = size as f64 / 64.0;
        let scale = |(lo, hi): (f64, f64), min: f64| ((lo * f).max(min), (hi * f).max(min));
        let p = Self::preset(kind);
        Self {
            radius: scale(p.radius, 2.0),
            thin_wall: scale(p.thin_wall, 1.0),
            thick_wall: scale(p.thick_wall, 1.0),
            ..p
        }
    }

    /// A disc family: zero eccentricity and a fixed radius.
    pub fn disc(radius: f64) -> Self {
        Self {
            radius: (radius, radius),
            eccentricity: (0.0, 0.0),
            ..Self::preset(FamilyKind::CompactEllipse)
        }
    }

    fn validate(&self, size: usize) -> Result<()> {
        let ok_range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let bad = |what: &str| Err(Error::Config(format!("{}: invalid {what}", self.kind)));
        if !ok_range(self.radius) || self.radius.0 < 2.0 {
            return bad("radius range");
        }
        if 2.0 * self.radius.1 + 4.0 > size as f64 {
            return bad("radius range for the image size");
        }
        if !ok_range(self.eccentricity) || self.eccentricity.0 < 0.0 || self.eccentricity.1 >= 1.0 {
            return bad("eccentricity range");
        }
        if !ok_range(self.thin_wall) || !ok_range(self.thick_wall) || self.thin_wall.0 < 1.0 {
            return bad("wall thickness range");
        }
        if !(0.0..0.5).contains(&self.harmonic_amp) {
            return bad("harmonic amplitude");
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn polar_mask(size: usize, cy: f64, cx: f64, inside: impl Fn(f64, f64) -> bool) -> BinaryMask {
    BinaryMask::from_fn(size, size, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        inside(dy.hypot(dx), dy.atan2(dx))
    })
}

fn draw_ellipse(fam: &ShapeFamily, size: usize, rng: &mut impl Rng) -> BinaryMask {
    let a = draw(rng, fam.radius);
    let e = draw(rng, fam.eccentricity);
    let b = a * (1.0 - e * e).sqrt();
    let phi = if e > 0.0 { rng.gen_range(0.0..PI) } else { 0.0 };
    let (cy, cx) = centre(size, a, rng);
    let (s, c) = phi.sin_cos();
    BinaryMask::from_fn(size, size, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    })
}

/// Thin ring whose wall swells to a thick segment around a random angle.
fn draw_annulus(fam: &ShapeFamily, size: usize, rng: &mut impl Rng) -> BinaryMask {
    let r_out = draw(rng, fam.radius);
    let t_min = draw(rng, fam.thin_wall);
    let t_max = draw(rng, fam.thick_wall).max(t_min);
    let theta0 = rng.gen_range(-PI..PI);
    let (cy, cx) = centre(size, r_out, rng);
    polar_mask(size, cy, cx, |r, th| {
        let bump = (0.5 * (1.0 + (th - theta0).cos())).powi(8);
        let t = t_min + (t_max - t_min) * bump;
        r <= r_out && r > r_out - t
    })
}

fn draw_blob(fam: &ShapeFamily, size: usize, rng: &mut impl Rng) -> BinaryMask {
    let r0 = draw(rng, fam.radius);
    let harmonics: Vec<(f64, f64, f64)> = (2..=5)
        .map(|j| (j as f64, rng.gen_range(0.0..=fam.harmonic_amp), rng.gen_range(-PI..PI)))
        .collect();
    let r_max = r0 * (1.0 + fam.harmonic_amp * harmonics.len() as f64);
    let (cy, cx) = centre(size, r_max.min(size as f64 / 2.0 - 2.0), rng);
    polar_mask(size, cy, cx, |r, th| {
        let wobble: f64 = harmonics.iter().map(|&(j, a, p)| a * (j * th + p).cos()).sum();
        r <= r0 * (1.0 + wobble)
    })
}

fn centre(size: usize, extent: f64, rng: &mut impl Rng) -> (f64, f64) {
    let mid = (size as f64 - 1.0) / 2.0;
    let slack = (mid - extent - 1.5).max(0.0);
    let jitter = |rng: &mut dyn rand::RngCore| {
        if slack > 0.0 {
            rng.gen_range(-slack..slack)
        } else {
            0.0
        }
    };
    (mid + jitter(rng), mid + jitter(rng))
}

/// Number of 4-connected components of pixels equal to `value`.
pub fn components(mask: &BinaryMask, value: bool) -> usize {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.bits()[start] != value {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && mask.bits()[j] == value {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
    }
    count
}

fn has_margin(mask: &BinaryMask) -> bool {
    let (h, w) = (mask.height(), mask.width());
    (0..w).all(|x| !mask.get(0, x) && !mask.get(h - 1, x))
        && (0..h).all(|y| !mask.get(y, 0) && !mask.get(y, w - 1))
}

fn acceptable(kind: FamilyKind, mask: &BinaryMask) -> bool {
    if mask.count() < MIN_FOREGROUND || !has_margin(mask) || components(mask, true) != 1 {
        return false;
    }
    // The outer background touches the border, so a single hole means two background components.
    let bg = components(mask, false);
    match kind {
        FamilyKind::Annulus => bg == 2,
        _ => bg == 1,
    }
}

/// Draws a mask satisfying the family invariants, rejecting up to 100 candidates.
pub fn sample_shape(fam: &ShapeFamily, size: usize, rng: &mut impl Rng) -> Result<BinaryMask> {
    fam.validate(size)?;
    for _ in 0..MAX_SHAPE_REJECTIONS {
        let m = match fam.kind {
            FamilyKind::CompactEllipse => draw_ellipse(fam, size, rng),
            FamilyKind::Annulus => draw_annulus(fam, size, rng),
            FamilyKind::IrregularBlob => draw_blob(fam, size, rng),
        };
        if acceptable(fam.kind, &m) {
            return Ok(m);
        }
    }
    Err(Error::Generation(format!(
        "{}: {MAX_SHAPE_REJECTIONS} consecutive shape rejections",
        fam.kind
    )))
}

/// Imaging conditions. Only intensities depend on the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: String,
    pub fg_mean: f64,
    pub fg_std: f64,
    pub bg_mean: f64,
    pub bg_std: f64,
    pub noise_amp: f64,
    /// Box-blur radius applied to white noise.
    pub noise_corr: usize,
    pub gamma: f64,
    pub invert: bool,
}

impl DomainSpec {
    pub fn source() -> Self {
        Self {
            id: "source".into(),
            fg_mean: 0.7,
            fg_std: 0.05,
            bg_mean: 0.3,
            bg_std: 0.05,
            noise_amp: 0.06,
            noise_corr: 1,
            gamma: 1.0,
            invert: false,
        }
    }

    pub fn target() -> Self {
        Self {
            id: "target".into(),
            fg_mean: 0.45,
            fg_std: 0.08,
            bg_mean: 0.7,
            bg_std: 0.08,
            noise_amp: 0.12,
            noise_corr: 2,
            gamma: 0.6,
            invert: false,
        }
    }

    pub fn inverted(&self) -> Self {
        Self {
            id: format!("{}_inv", self.id),
            invert: !self.invert,
            ..self.clone()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "source" => Ok(Self::source()),
            "target" => Ok(Self::target()),
            "source_inv" => Ok(Self::source().inverted()),
            "target_inv" => Ok(Self::target().inverted()),
            other => Err(Error::Config(format!("unknown domain {other:?}"))),
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.fg_mean, self.fg_std, self.bg_mean, self.bg_std, self.noise_amp, self.gamma];
        if finite.iter().any(|v| !v.is_finite())
            || self.fg_std < 0.0
            || self.bg_std < 0.0
            || self.noise_amp < 0.0
            || self.gamma <= 0.0
        {
            return Err(Error::Config(format!("domain {}: invalid parameters", self.id)));
        }
        Ok(())
    }
}

fn box_blur(data: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return data.to_vec();
    }
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let norm = (2 * r + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| data[y * w + clamp(x as isize + d, w)])
                .sum();
            tmp[y * w + x] = s / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| tmp[clamp(y as isize + d, h) * w + x])
                .sum();
            out[y * w + x] = s / norm;
        }
    }
    out
}

/// Renders a mask to a `1×H×W` image in `[0, 1]`.
///
/// Random draws do not depend on the domain, so one seed gives matched
/// images across domains.
pub fn render(mask: &BinaryMask, domain: &DomainSpec, rng: &mut impl Rng) -> Result<Tensor> {
    domain.validate()?;
    let (h, w) = (mask.height(), mask.width());
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z_fg: f64 = std_normal.sample(rng);
    let z_bg: f64 = std_normal.sample(rng);
    let fg = domain.fg_mean + domain.fg_std * z_fg;
    let bg = domain.bg_mean + domain.bg_std * z_bg;
    let white: Vec<f64> = (0..h * w).map(|_| std_normal.sample(rng)).collect();
    // A (2r+1)² box average shrinks unit-variance noise by a factor 2r+1.
    let gain = domain.noise_amp * (2 * domain.noise_corr + 1) as f64;
    let noise = box_blur(&white, h, w, domain.noise_corr);
    let data = mask
        .bits()
        .iter()
        .zip(noise)
        .map(|(&m, n)| {
            let v = (if m { fg } else { bg }) + gain * n;
            let v = v.clamp(0.0, 1.0).powf(domain.gamma);
            if domain.invert {
                1.0 - v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(&[1, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Eval => "eval",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "eval" => Ok(Self::Eval),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Shot {
    pub image: Tensor,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub support: Vec<Shot>,
    pub query: Shot,
    pub family: FamilyKind,
    pub domain: String,
    pub split: Split,
    pub seed: u64,
}

/// Everything needed to draw episodes.
#[derive(Clone, Debug)]
pub struct EpisodeSpec {
    pub image_size: usize,
    pub shots: usize,
    pub train_families: Vec<ShapeFamily>,
    pub eval_families: Vec<ShapeFamily>,
    pub source: DomainSpec,
    pub target: DomainSpec,
    /// Feature-map downsampling and grid used to reject supports with no active cell.
    pub feature_stride: usize,
    pub grid: usize,
    pub tau_occ: f64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        let all: Vec<ShapeFamily> = FamilyKind::ALL.into_iter().map(ShapeFamily::preset).collect();
        Self {
            image_size: 64,
            shots: 1,
            train_families: all.clone(),
            eval_families: all,
            source: DomainSpec::source(),
            target: DomainSpec::target(),
            feature_stride: 4,
            grid: 8,
            tau_occ: 0.05,
        }
    }
}

impl EpisodeSpec {
    fn families(&self, split: Split) -> &[ShapeFamily] {
        match split {
            Split::Train => &self.train_families,
            Split::Eval => &self.eval_families,
        }
    }

    fn domain(&self, split: Split) -> &DomainSpec {
        match split {
            Split::Train => &self.source,
            Split::Eval => &self.target,
        }
    }

    /// True when the support mask has at least one active grid cell with
    /// both foreground and background present at feature resolution.
    pub fn usable_support(&self, mask: &BinaryMask) -> bool {
        let f = self.image_size / self.feature_stride;
        let Ok(small) = downsample_mask(mask, f, f) else {
            return false;
        };
        if small.is_empty() || small.count() == f * f {
            return false;
        }
        let Ok(grid) = crate::gape::GridSpec::new(self.grid, self.tau_occ, f, f) else {
            return false;
        };
        grid.cells().iter().any(|c| {
            let n = (c.y0..c.y1)
                .flat_map(|y| (c.x0..c.x1).map(move |x| (y, x)))
                .filter(|&(y, x)| small.get(y, x))
                .count();
            n > 0 && n as f64 / c.area() as f64 >= self.tau_occ
        })
    }
}

/// Mixes a stream id and index into a master seed (splitmix64 finaliser).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws one episode. Train episodes render in the source domain, eval
/// episodes in the target domain; support and query share a family.
pub fn sample_episode(spec: &EpisodeSpec, split: Split, seed: u64) -> Result<Episode> {
    let families = spec.families(split);
    if families.is_empty() || spec.shots == 0 {
        return Err(Error::Config("episodes need at least one family and one shot".into()));
    }
    let domain = spec.domain(split);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fam = &families[rng.gen_range(0..families.len())];
    let size = spec.image_size;
    let mut support = Vec::with_capacity(spec.shots);
    for _ in 0..spec.shots {
        let mut attempts = 0;
        let mask = loop {
            let m = sample_shape(fam, size, &mut rng)?;
            if spec.usable_support(&m) {
                break m;
            }
            attempts += 1;
            if attempts >= MAX_EPISODE_RESAMPLES {
                return Err(Error::Generation(format!(
                    "{}: no usable support after {MAX_EPISODE_RESAMPLES} draws",
                    fam.kind
                )));
            }
        };
        let image = render(&mask, domain, &mut rng)?;
        support.push(Shot { image, mask });
    }
    let qmask = sample_shape(fam, size, &mut rng)?;
    let qimage = render(&qmask, domain, &mut rng)?;
    Ok(Episode {
        support,
        query: Shot {
            image: qimage,
            mask: qmask,
        },
        family: fam.kind,
        domain: domain.id.clone(),
        split,
        seed,
    })
}

/// One record of an episode dump manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub family: FamilyKind,
    pub domain: String,
    pub split: String,
    pub shots: usize,
}

impl ManifestEntry {
    fn to_text(&self) -> String {
        format!(
            "index={}\nseed={}\nfamily={}\ndomain={}\nsplit={}\nshots={}\n",
            self.index, self.seed, self.family, self.domain, self.split, self.shots
        )
    }
}

const MANIFEST_KEYS: [&str; 6] = ["index", "seed", "family", "domain", "split", "shots"];

/// Parses a manifest: `key=value` records separated by blank lines; `#` starts a comment line.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut fields: Vec<(String, String)> = Vec::new();
    let lines = text.lines().map(str::trim).chain(std::iter::once(""));
    for (n, line) in lines.enumerate() {
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            if !fields.is_empty() {
                out.push(manifest_record(&fields)?);
                fields.clear();
            }
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !MANIFEST_KEYS.contains(&k) {
            return Err(Error::Format(format!("manifest line {}: unknown key {k:?}", n + 1)));
        }
        if fields.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Format(format!("manifest line {}: duplicate key {k:?}", n + 1)));
        }
        fields.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn manifest_record(fields: &[(String, String)]) -> Result<ManifestEntry> {
    let get = |key: &str| {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("manifest record missing {key:?}")))
    };
    let num = |key: &str| -> Result<u64> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("manifest {key} is not an unsigned integer")))
    };
    let split = get("split")?;
    split
        .parse::<Split>()
        .map_err(|_| Error::Format(format!("manifest split {split:?} invalid")))?;
    let family = get("family")?;
    Ok(ManifestEntry {
        index: usize::try_from(num("index")?).map_err(|_| Error::Format("index overflow".into()))?,
        seed: num("seed")?,
        family: family
            .parse()
            .map_err(|_| Error::Format(format!("manifest family {family:?} invalid")))?,
        domain: get("domain")?.to_string(),
        split: split.to_string(),
        shots: usize::try_from(num("shots")?).map_err(|_| Error::Format("shots overflow".into()))?,
    })
}

/// Writes each episode as PGM image/mask pairs plus a shared `manifest.txt`.
pub fn dump_episodes(dir: &Path, episodes: &[Episode]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, ep) in episodes.iter().enumerate() {
        let save = |name: String, shot: &Shot| -> Result<()> {
            Greymap::from_unit(shot.mask.width(), shot.mask.height(), shot.image.data())?
                .write(dir.join(format!("{name}.pgm")))?;
            Greymap::from_mask(&shot.mask).write(dir.join(format!("{name}_mask.pgm")))
        };
        for (s, shot) in ep.support.iter().enumerate() {
            save(format!("ep{i:04}_support{s}"), shot)?;
        }
        save(format!("ep{i:04}_query"), &ep.query)?;
        if i > 0 {
            manifest.push('\n');
        }
        manifest.push_str(
            &ManifestEntry {
                index: i,
                seed: ep.seed,
                family: ep.family,
                domain: ep.domain.clone(),
                split: ep.split.name().into(),
                shots: ep.support.len(),
            }
            .to_text(),
        );
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{bin_histogram, bin_map};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn disc_has_every_bin() {
        let fam = ShapeFamily::disc(14.0);
        let m = sample_shape(&fam, 64, &mut rng(1)).unwrap();
        let h = bin_histogram(&bin_map(&m, 10).unwrap()).unwrap();
        assert!(h.iter().all(|&p| p > 0.0), "{h:?}");
    }

    #[test]
    fn annulus_mass_near_boundary() {
        let fam = ShapeFamily::preset(FamilyKind::Annulus);
        let mut r = rng(2);
        for _ in 0..50 {
            let m = sample_shape(&fam, 64, &mut r).unwrap();
            let h = bin_histogram(&bin_map(&m, 10).unwrap()).unwrap();
            let low: f64 = h[..5].iter().sum();
            assert!(low >= 0.8, "{h:?}");
        }
    }

    #[test]
    fn same_seed_same_shape() {
        for kind in FamilyKind::ALL {
            let fam = ShapeFamily::preset(kind);
            let a = sample_shape(&fam, 64, &mut rng(5)).unwrap();
            let b = sample_shape(&fam, 64, &mut rng(5)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn impossible_family_reports_generation_error() {
        let fam = ShapeFamily {
            radius: (2.0, 2.0),
            ..ShapeFamily::preset(FamilyKind::Annulus)
        };
        // a ring of radius 2 with a wall of at least 2 px has no hole
        assert!(matches!(sample_shape(&fam, 64, &mut rng(0)), Err(Error::Generation(_))));
        let too_big = ShapeFamily::disc(40.0);
        assert!(matches!(sample_shape(&too_big, 64, &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_render_is_two_level() {
        let m = sample_shape(&ShapeFamily::disc(10.0), 32, &mut rng(3)).unwrap();
        let d = DomainSpec {
            fg_std: 0.0,
            bg_std: 0.0,
            noise_amp: 0.0,
            ..DomainSpec::source()
        };
        let img = render(&m, &d, &mut rng(4)).unwrap();
        for (&v, &b) in img.data().iter().zip(m.bits()) {
            assert_eq!(v, if b { 0.7 } else { 0.3 });
        }
    }

    #[test]
    fn inversion_and_determinism() {
        let m = sample_shape(&ShapeFamily::preset(FamilyKind::IrregularBlob), 64, &mut rng(3)).unwrap();
        for d in [DomainSpec::source(), DomainSpec::target()] {
            let a = render(&m, &d, &mut rng(8)).unwrap();
            let again = render(&m, &d, &mut rng(8)).unwrap();
            assert_eq!(a, again);
            let inv = render(&m, &d.inverted(), &mut rng(8)).unwrap();
            for (x, y) in a.data().iter().zip(inv.data()) {
                assert_eq!(*y, 1.0 - x);
            }
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn episode_protocol() {
        let spec = EpisodeSpec::default();
        let tr = sample_episode(&spec, Split::Train, 11).unwrap();
        assert_eq!(tr.domain, "source");
        assert_eq!(tr.support.len(), 1);
        let ev = sample_episode(&spec, Split::Eval, 11).unwrap();
        assert_eq!(ev.domain, "target");

        let disjoint = EpisodeSpec {
            train_families: vec![ShapeFamily::preset(FamilyKind::CompactEllipse)],
            eval_families: vec![ShapeFamily::preset(FamilyKind::Annulus)],
            ..EpisodeSpec::default()
        };
        for s in 0..10 {
            assert_eq!(sample_episode(&disjoint, Split::Eval, s).unwrap().family, FamilyKind::Annulus);
        }
        let a = sample_episode(&spec, Split::Train, 99).unwrap();
        let b = sample_episode(&spec, Split::Train, 99).unwrap();
        assert_eq!(a.query.image, b.query.image);
        assert_eq!(a.support[0].mask, b.support[0].mask);
    }

    #[test]
    fn manifest_round_trip() {
        let entries = vec![
            ManifestEntry {
                index: 0,
                seed: 42,
                family: FamilyKind::Annulus,
                domain: "target".into(),
                split: "eval".into(),
                shots: 1,
            },
            ManifestEntry {
                index: 1,
                seed: 7,
                family: FamilyKind::IrregularBlob,
                domain: "source".into(),
                split: "train".into(),
                shots: 2,
            },
        ];
        let text = entries.iter().map(|e| e.to_text()).collect::<Vec<_>>().join("\n");
        assert_eq!(parse_manifest(&text).unwrap(), entries);
        assert!(parse_manifest("index=0\nseed=1\n").is_err());
        assert!(parse_manifest("bogus=1").is_err());
        assert!(parse_manifest("seed=1\nseed=2").is_err());
        assert_eq!(parse_manifest("# nothing\n\n").unwrap(), vec![]);
    }

    #[test]
    fn dump_writes_manifest_and_images() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EpisodeSpec::default();
        let eps: Vec<Episode> = (0..2).map(|s| sample_episode(&spec, Split::Eval, s).unwrap()).collect();
        dump_episodes(dir.path(), &eps).unwrap();
        let m = parse_manifest(&std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].seed, 1);
        let mask = Greymap::read(dir.path().join("ep0001_query_mask.pgm")).unwrap().to_mask();
        assert_eq!(mask, eps[1].query.mask);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn shapes_satisfy_family_invariants(seed in any::<u64>(), k in 0usize..3) {
            let kind = FamilyKind::ALL[k];
            let m = sample_shape(&ShapeFamily::preset(kind), 64, &mut rng(seed)).unwrap();
            prop_assert!(m.count() >= MIN_FOREGROUND);
            prop_assert!(has_margin(&m));
            prop_assert_eq!(components(&m, true), 1);
            prop_assert_eq!(components(&m, false), if kind == FamilyKind::Annulus { 2 } else { 1 });
        }

        #[test]
        fn masks_do_not_depend_on_domain(seed in any::<u64>()) {
            let a = EpisodeSpec::default();
            let b = EpisodeSpec { target: DomainSpec::source().inverted(), ..EpisodeSpec::default() };
            let ea = sample_episode(&a, Split::Eval, seed).unwrap();
            let eb = sample_episode(&b, Split::Eval, seed).unwrap();
            prop_assert_eq!(ea.query.mask, eb.query.mask);
            prop_assert_eq!(&ea.support[0].mask, &eb.support[0].mask);
        }
    }
}
