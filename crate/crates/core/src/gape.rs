//! Geometry-aware prototype enrichment.
//!
//! Support features are split into a `G×G` grid. Each cell with enough
//! foreground yields a masked-average prototype; its expected bin level
//! (from the shape branch) is mapped through a small MLP to an offset that
//! is fused into the prototype. Background prototypes are pooled per cell
//! against the complement mask and left untouched by default.

use crate::error::{shape_err, Error, Result};
use crate::geometry::{edt, BinaryMask};
use crate::numerics::{Graph, Tensor, Var};
use crate::osb::BinPrediction;
use crate::params::{uniform, Binding, ParamId, ParamStore};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

/// Range of the uniform near-zero initialisation of the offset MLP.
pub const MLP_INIT_BOUND: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub id: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Cell {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

/// `G×G` partition of an `h×w` feature map; the last row/column of cells absorbs remainders.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub side: usize,
    pub tau_occ: f64,
    pub height: usize,
    pub width: usize,
}

impl GridSpec {
    pub fn new(side: usize, tau_occ: f64, height: usize, width: usize) -> Result<Self> {
        if side == 0 || side > height || side > width {
            return Err(Error::Config(format!(
                "grid side {side} does not fit a {height}x{width} feature map"
            )));
        }
        if !(0.0..=1.0).contains(&tau_occ) {
            return Err(Error::Config(format!("tau_occ {tau_occ} outside [0, 1]")));
        }
        Ok(Self {
            side,
            tau_occ,
            height,
            width,
        })
    }

    pub fn cells(&self) -> Vec<Cell> {
        let (sy, sx) = (self.height / self.side, self.width / self.side);
        let mut cells = Vec::with_capacity(self.side * self.side);
        for i in 0..self.side {
            for j in 0..self.side {
                let y1 = if i + 1 == self.side { self.height } else { (i + 1) * sy };
                let x1 = if j + 1 == self.side { self.width } else { (j + 1) * sx };
                cells.push(Cell {
                    id: i * self.side + j,
                    y0: i * sy,
                    y1,
                    x0: j * sx,
                    x1,
                });
            }
        }
        cells
    }

    pub fn region(&self, cell: &Cell) -> Vec<bool> {
        (0..self.height * self.width)
            .map(|i| cell.contains(i / self.width, i % self.width))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FgPrototype {
    pub cell: usize,
    pub raw: Var,
    pub enriched: Var,
    /// Expected bin level `d̄_i`, once computed.
    pub mean_bin: Option<f64>,
    pub embedding: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BgPrototype {
    pub cell: usize,
    pub proto: Var,
}

#[derive(Clone, Debug, Default)]
pub struct PrototypeSet {
    pub fg: Vec<FgPrototype>,
    pub bg: Vec<BgPrototype>,
}

impl PrototypeSet {
    pub fn n_fg(&self) -> usize {
        self.fg.len()
    }

    pub fn fg_enriched(&self) -> Vec<Var> {
        self.fg.iter().map(|p| p.enriched).collect()
    }

    pub fn fg_raw(&self) -> Vec<Var> {
        self.fg.iter().map(|p| p.raw).collect()
    }

    pub fn bg_protos(&self) -> Vec<Var> {
        self.bg.iter().map(|p| p.proto).collect()
    }

    /// Union of prototype slots across support shots.
    pub fn extend(&mut self, other: PrototypeSet) {
        self.fg.extend(other.fg);
        self.bg.extend(other.bg);
    }
}

/// Masked-average prototypes per grid cell for foreground and background.
pub fn pool_prototypes(g: &mut Graph, feat: Var, mask: &BinaryMask, grid: &GridSpec) -> Result<PrototypeSet> {
    let fs = g.shape(feat).to_vec();
    if fs.len() != 3 || fs[1] != mask.height() || fs[2] != mask.width() {
        return shape_err(format!(
            "features {fs:?} vs mask {}x{}",
            mask.height(),
            mask.width()
        ));
    }
    if grid.height != mask.height() || grid.width != mask.width() {
        return shape_err("grid and mask resolutions differ");
    }
    let mut set = PrototypeSet::default();
    for cell in grid.cells() {
        let region = grid.region(&cell);
        let fg_bits: Vec<bool> = region.iter().zip(mask.bits()).map(|(&r, &m)| r && m).collect();
        let bg_bits: Vec<bool> = region.iter().zip(mask.bits()).map(|(&r, &m)| r && !m).collect();
        let n_fg = fg_bits.iter().filter(|&&b| b).count();
        let area = cell.area() as f64;
        let occ = n_fg as f64 / area;
        if n_fg > 0 && occ >= grid.tau_occ {
            let raw = g.masked_mean(feat, &fg_bits)?;
            set.fg.push(FgPrototype {
                cell: cell.id,
                raw,
                enriched: raw,
                mean_bin: None,
                embedding: None,
            });
        }
        let n_bg = cell.area() - n_fg;
        if n_bg > 0 && n_bg as f64 / area >= grid.tau_occ {
            let proto = g.masked_mean(feat, &bg_bits)?;
            set.bg.push(BgPrototype {
                cell: cell.id,
                proto,
            });
        }
    }
    if set.fg.is_empty() {
        return Err(Error::DegenerateSupport(
            "no grid cell meets the foreground occupancy threshold".into(),
        ));
    }
    Ok(set)
}

/// Per-pixel expected bin `Σ_k k·p̂_k(x)` as a `[1×h×w]` variable.
pub fn expected_bin_map(g: &mut Graph, pred: &BinPrediction) -> Result<Var> {
    let plane = pred.height * pred.width;
    let weights: Vec<f64> = (0..pred.bins)
        .flat_map(|k| std::iter::repeat_n(k as f64, plane))
        .collect();
    let weighted = g.mul_const(pred.probs, &weights)?;
    let summed = g.sum_axis(weighted, 0)?;
    g.reshape(summed, &[1, pred.height, pred.width])
}

/// `d̄_i`: mean expected bin over a region, as a 1-vector.
pub fn expected_bin(g: &mut Graph, expected_map: Var, region: &[bool]) -> Result<Var> {
    g.masked_mean(expected_map, region)
}

/// Two-layer MLP `ℝ → ℝ^C`: `W2 · relu(W1 · x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct GapeMlpParams {
    pub w1: ParamId,
    pub b1: Option<ParamId>,
    pub w2: ParamId,
    pub b2: Option<ParamId>,
    pub hidden: usize,
    pub channels: usize,
}

impl GapeMlpParams {
    /// Weights uniform in `[-1e-4, 1e-4]`; biases (when enabled) start at zero.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        channels: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w1 = store.add(format!("{prefix}.w1"), uniform(&[hidden, 1], MLP_INIT_BOUND, rng));
        let b1 = with_bias.then(|| store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])));
        let w2 = store.add(
            format!("{prefix}.w2"),
            uniform(&[channels, hidden], MLP_INIT_BOUND, rng),
        );
        let b2 = with_bias.then(|| store.add(format!("{prefix}.b2"), Tensor::zeros(&[channels])));
        Self {
            w1,
            b1,
            w2,
            b2,
            hidden,
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let mut h = g.matvec(b[self.w1], x)?;
        if let Some(b1) = self.b1 {
            h = g.add(h, b[b1])?;
        }
        let h = g.relu(h);
        let mut e = g.matvec(b[self.w2], h)?;
        if let Some(b2) = self.b2 {
            e = g.add(e, b[b2])?;
        }
        Ok(e)
    }
}

/// `e = φ(d̄ / (K−1))`.
pub fn geometric_embedding(
    g: &mut Graph,
    b: &Binding,
    d_bar: Var,
    bins: usize,
    mlp: &GapeMlpParams,
) -> Result<Var> {
    if bins < 2 {
        return Err(Error::Config(format!("bin count must be >= 2, got {bins}")));
    }
    let x = g.scale(d_bar, 1.0 / (bins - 1) as f64);
    mlp.forward(g, b, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Additive,
    ConcatProj,
    ScaleGate,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Self::Additive),
            "concat_proj" => Ok(Self::ConcatProj),
            "scale_gate" => Ok(Self::ScaleGate),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Additive => "additive",
            Self::ConcatProj => "concat_proj",
            Self::ScaleGate => "scale_gate",
        })
    }
}

/// `2C → C` projection used by [`FusionMode::ConcatProj`].
#[derive(Clone, Debug)]
pub struct ProjParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ProjParams {
    /// Glorot-uniform weight, zero bias.
    pub fn init(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (3 * channels) as f64).sqrt();
        Self {
            weight: store.add("gape.proj.weight", uniform(&[channels, 2 * channels], bound, rng)),
            bias: store.add("gape.proj.bias", Tensor::zeros(&[channels])),
        }
    }
}

pub fn fuse(
    g: &mut Graph,
    b: &Binding,
    proto: Var,
    e: Var,
    mode: FusionMode,
    proj: Option<&ProjParams>,
) -> Result<Var> {
    match mode {
        FusionMode::Additive => g.add(proto, e),
        FusionMode::ScaleGate => {
            let sp = g.softplus(e);
            let gate = g.affine(sp, 1.0, 1.0);
            g.mul(proto, gate)
        }
        FusionMode::ConcatProj => {
            let proj = proj.ok_or_else(|| {
                Error::Config("concat_proj fusion needs projection parameters".into())
            })?;
            let cat = g.concat(&[proto, e])?;
            let y = g.matvec(b[proj.weight], cat)?;
            g.add(y, b[proj.bias])
        }
    }
}

/// Options for [`enrich`].
#[derive(Clone, Copy, Debug)]
pub struct EnrichOptions<'a> {
    pub mode: FusionMode,
    pub proj: Option<&'a ProjParams>,
    /// When set, `d̄_i` averages only over foreground pixels of the cell.
    pub masked_expectation: Option<&'a BinaryMask>,
}

/// Fills `mean_bin` for every foreground slot and returns the `d̄_i` variables.
pub fn annotate_mean_bins(
    g: &mut Graph,
    protos: &mut PrototypeSet,
    pred: &BinPrediction,
    grid: &GridSpec,
    masked_expectation: Option<&BinaryMask>,
) -> Result<Vec<Var>> {
    if grid.height != pred.height || grid.width != pred.width {
        return shape_err("grid and bin prediction resolutions differ");
    }
    let emap = expected_bin_map(g, pred)?;
    let cells = grid.cells();
    let mut out = Vec::with_capacity(protos.fg.len());
    for slot in &mut protos.fg {
        let cell = &cells[slot.cell];
        let mut region = grid.region(cell);
        if let Some(mask) = masked_expectation {
            region.iter_mut().zip(mask.bits()).for_each(|(r, &m)| *r = *r && m);
        }
        let d = expected_bin(g, emap, &region)?;
        slot.mean_bin = Some(g.value(d).item());
        out.push(d);
    }
    Ok(out)
}

/// Computes `d̄_i`, `e_i` and the fused prototype for every foreground slot.
pub fn enrich(
    g: &mut Graph,
    b: &Binding,
    protos: &mut PrototypeSet,
    pred: &BinPrediction,
    grid: &GridSpec,
    mlp: &GapeMlpParams,
    opts: EnrichOptions<'_>,
) -> Result<()> {
    let d_bars = annotate_mean_bins(g, protos, pred, grid, opts.masked_expectation)?;
    for (slot, d) in protos.fg.iter_mut().zip(d_bars) {
        let e = geometric_embedding(g, b, d, pred.bins, mlp)?;
        slot.embedding = Some(e);
        slot.enriched = fuse(g, b, slot.raw, e, opts.mode, opts.proj)?;
    }
    Ok(())
}

/// Adds an offset to every background prototype from the cell-mean normalised
/// distance to the nearest foreground pixel.
pub fn enrich_background_variant(
    g: &mut Graph,
    b: &Binding,
    protos: &mut PrototypeSet,
    mask: &BinaryMask,
    grid: &GridSpec,
    mlp_bg: &GapeMlpParams,
) -> Result<()> {
    if protos.bg.is_empty() {
        return Err(Error::DegenerateSupport("no background prototypes to enrich".into()));
    }
    let inv = mask.complement();
    let field = edt(&inv)?;
    let max = field.values().iter().copied().fold(0.0, f64::max);
    let cells = grid.cells();
    for slot in &mut protos.bg {
        let cell = &cells[slot.cell];
        let (mut sum, mut n) = (0.0, 0usize);
        for y in cell.y0..cell.y1 {
            for x in cell.x0..cell.x1 {
                if !mask.get(y, x) {
                    sum += field.get(y, x);
                    n += 1;
                }
            }
        }
        let level = if n == 0 || max == 0.0 { 0.0 } else { sum / n as f64 / max };
        let x = g.constant(Tensor::from_vec(vec![level]));
        let e = mlp_bg.forward(g, b, x)?;
        slot.proto = g.add(slot.proto, e)?;
    }
    Ok(())
}
