//! Episodic training, evaluation and ablation sweeps.

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Sweep};
use crate::encoder::{encode, EncoderParams};
use crate::episodes::{derive_seed, sample_episode, Episode, EpisodeSpec, Split};
use crate::error::{Error, Result};
use crate::gape::{
    annotate_mean_bins, enrich, enrich_background_variant, pool_prototypes, EnrichOptions, FusionMode,
    GapeMlpParams, GridSpec, PrototypeSet, ProjParams,
};
use crate::geometry::pgm::Greymap;
use crate::geometry::{bin_histogram, bin_map, downsample_mask, pooled_bin_map, BinMap, BinaryMask};
use crate::matcher::{align_loss, classify, query_reweight, seg_loss, total_loss, LossBundle, ScoreMaps};
use crate::metrics::{bhattacharyya, dsc, paired_delta, records_csv, EvalRecord, Stats};
use crate::numerics::{Graph, Tensor, Var};
use crate::osb::{bin_mae, loss_osb, predict_bins, BinPrediction, OsbParams};
use crate::params::{uniform, Binding, ParamId, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Sinusoidal channels of the position code.
pub const PE_CHANNELS: usize = 8;

// Seed streams derived from the master seed.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_HELDOUT: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_RETRY: u64 = 4;

/// Learned `1×1` projection of a fixed 2-D sinusoidal code.
#[derive(Clone, Debug)]
pub struct PeParams {
    pub proj: ParamId,
}

/// Fixed code `[P×h×w]`: sin/cos of each axis at two frequencies.
pub fn sinusoid_code(h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; PE_CHANNELS * plane];
    let mut ch = 0;
    for freq in [1.0, 2.0] {
        for axis in 0..2 {
            for i in 0..plane {
                let (pos, n) = if axis == 0 { (i / w, h) } else { (i % w, w) };
                let phase = std::f64::consts::PI * freq * (pos as f64 + 0.5) / n as f64;
                data[ch * plane + i] = phase.sin();
                data[(ch + 1) * plane + i] = phase.cos();
            }
            ch += 2;
        }
    }
    Tensor::new(&[PE_CHANNELS, h, w], data).expect("sized")
}

pub fn position_embedding_variant(g: &mut Graph, b: &Binding, pe: &PeParams, feat: Var) -> Result<Var> {
    let s = g.shape(feat).to_vec();
    let code = g.constant(sinusoid_code(s[1], s[2]));
    let offset = g.conv2d(code, b[pe.proj], 1, 0)?;
    g.add(feat, offset)
}

/// All model parameters. Every component is allocated whatever the flags, so
/// ablation cells share one checkpoint layout and one initialisation.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub osb: OsbParams,
    pub mlp: GapeMlpParams,
    pub proj: ProjParams,
    pub bg_mlp: GapeMlpParams,
    pub pe: PeParams,
}

impl Model {
    pub fn new(cfg: &RunConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT, 0));
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let encoder = EncoderParams::init(&mut store, c, &mut rng);
        let osb = OsbParams::init(&mut store, c, cfg.bins, &mut rng);
        let mlp = GapeMlpParams::init(&mut store, "gape.mlp", cfg.mlp_hidden, c, cfg.mlp_bias, &mut rng);
        let proj = ProjParams::init(&mut store, c, &mut rng);
        let bg_mlp = GapeMlpParams::init(&mut store, "gape.bg_mlp", cfg.mlp_hidden, c, cfg.mlp_bias, &mut rng);
        let pe = PeParams {
            proj: store.add(
                "pe.proj.weight",
                uniform(&[c, PE_CHANNELS, 1, 1], crate::gape::MLP_INIT_BOUND, &mut rng),
            ),
        };
        Self {
            store,
            encoder,
            osb,
            mlp,
            proj,
            bg_mlp,
            pe,
        }
    }

    /// Checkpoint whose metadata is the effective config plus run counters.
    pub fn to_checkpoint(&self, cfg: &RunConfig, episode: usize, seed: u64) -> Checkpoint {
        let mut meta: Vec<(String, String)> = cfg
            .to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        meta.push(("run.episode".into(), episode.to_string()));
        meta.push(("run.seed".into(), seed.to_string()));
        Checkpoint {
            meta,
            tensors: self.store.to_named(),
        }
    }

    /// Rebuilds the config and model stored in a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Self)> {
        let mut cfg = RunConfig::default();
        for (k, v) in ck.meta.iter().filter(|(k, _)| !k.starts_with("run.")) {
            cfg.set(k, v)
                .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        }
        cfg.validate()
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let mut model = Self::new(&cfg, 0);
        model.store.load(&ck.tensors)?;
        Ok((cfg, model))
    }
}

/// Graph handles produced by one episode forward pass.
pub struct EpisodeTrace {
    pub losses: LossBundle,
    pub scores: ScoreMaps,
    pub protos: PrototypeSet,
    /// Bin prediction and feature-resolution ground truth for the first support shot.
    pub support_bins: Option<(BinPrediction, BinMap)>,
    pub align_active: bool,
}

/// Finite loss values of one episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub seg: f64,
    pub align: f64,
    pub osb: f64,
    pub total: f64,
}

impl LossValues {
    fn read(g: &Graph, l: &LossBundle) -> Self {
        Self {
            seg: g.value(l.seg).item(),
            align: g.value(l.align).item(),
            osb: g.value(l.osb).item(),
            total: g.value(l.total).item(),
        }
    }

    fn is_finite(&self) -> bool {
        [self.seg, self.align, self.osb, self.total].iter().all(|v| v.is_finite())
    }
}

fn feature_side(cfg: &RunConfig) -> usize {
    cfg.image_size / EncoderParams::STRIDE
}

fn image_var(g: &mut Graph, t: &Tensor) -> Var {
    g.constant(t.clone())
}

/// Forward pass: encode, shape branch, pooling and enrichment, matching and losses.
///
/// `want_bins` forces the shape branch to run on the support even when no
/// loss or enrichment needs it (used for evaluation records).
pub fn forward_episode(
    g: &mut Graph,
    b: &Binding,
    model: &Model,
    cfg: &RunConfig,
    ep: &Episode,
    want_bins: bool,
) -> Result<EpisodeTrace> {
    let f = feature_side(cfg);
    let grid = GridSpec::new(cfg.grid, cfg.tau_occ, f, f)?;
    let needs_bins = cfg.enrichment || cfg.osb_loss || cfg.query_reweight || want_bins;

    let q_img = image_var(g, &ep.query.image);
    let feat_q = encode(g, b, &model.encoder, q_img)?;
    let q_small = downsample_mask(&ep.query.mask, f, f)?;

    let mut protos = PrototypeSet::default();
    let mut support_bins = None;
    let mut osb_terms = Vec::new();
    let mut first_support = None;
    for shot in &ep.support {
        let img = image_var(g, &shot.image);
        let feat_s = encode(g, b, &model.encoder, img)?;
        let small = downsample_mask(&shot.mask, f, f)?;
        let pooled_feat = if cfg.position_embedding {
            position_embedding_variant(g, b, &model.pe, feat_s)?
        } else {
            feat_s
        };
        let mut set = pool_prototypes(g, pooled_feat, &small, &grid)?;
        if needs_bins {
            let pred = predict_bins(g, b, &model.osb, feat_s)?;
            let gt = pooled_bin_map(&shot.mask, f, f, cfg.bins)?;
            let masked = cfg.masked_expectation.then_some(&small);
            if cfg.enrichment {
                let opts = EnrichOptions {
                    mode: cfg.fusion,
                    proj: (cfg.fusion == FusionMode::ConcatProj).then_some(&model.proj),
                    masked_expectation: masked,
                };
                enrich(g, b, &mut set, &pred, &grid, &model.mlp, opts)?;
            } else if cfg.query_reweight {
                annotate_mean_bins(g, &mut set, &pred, &grid, masked)?;
            }
            if cfg.osb_loss {
                osb_terms.push(loss_osb(g, &pred, &gt, cfg.lambda_dist)?);
            }
            if support_bins.is_none() {
                support_bins = Some((pred, gt));
            }
        }
        if cfg.bg_enrich {
            enrich_background_variant(g, b, &mut set, &small, &grid, &model.bg_mlp)?;
        }
        protos.extend(set);
        if first_support.is_none() {
            first_support = Some((feat_s, small));
        }
    }

    let scores = if cfg.query_reweight {
        let pred_q = predict_bins(g, b, &model.osb, feat_q)?;
        query_reweight(g, feat_q, &protos, &pred_q, cfg.tau_gate)?
    } else {
        classify(g, feat_q, &protos)?
    };
    let seg = seg_loss(g, &scores, &q_small, cfg.alpha)?;

    let (feat_s, mask_s) = first_support.ok_or_else(|| Error::Contract("episode has no support".into()))?;
    let align = if cfg.align_loss {
        align_loss(g, feat_s, &mask_s, feat_q, &scores.mask, &grid, cfg.alpha)?
    } else {
        None
    };
    let align_active = align.is_some();
    let align = match align {
        Some(v) => v,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let osb = match osb_terms.len() {
        0 => g.constant(Tensor::scalar(0.0)),
        1 => osb_terms[0],
        n => {
            let mut acc = osb_terms[0];
            for &t in &osb_terms[1..] {
                acc = g.add(acc, t)?;
            }
            g.scale(acc, 1.0 / n as f64)
        }
    };
    let losses = total_loss(g, seg, align, osb, cfg.lambda_geo)?;
    Ok(EpisodeTrace {
        losses,
        scores,
        protos,
        support_bins,
        align_active,
    })
}

/// Nearest-neighbour upsampling of a feature-resolution mask.
pub fn upsample_mask(mask: &BinaryMask, factor: usize) -> BinaryMask {
    BinaryMask::from_fn(mask.height() * factor, mask.width() * factor, |y, x| {
        mask.get(y / factor, x / factor)
    })
}

fn gt_histogram(mask: &BinaryMask, k: usize) -> Result<Vec<f64>> {
    bin_histogram(&bin_map(mask, k)?)
}

fn make_record(
    g: &Graph,
    trace: &EpisodeTrace,
    ep: &Episode,
    cfg: &RunConfig,
    name: &str,
) -> Result<EvalRecord> {
    let pred = upsample_mask(&trace.scores.mask, EncoderParams::STRIDE);
    let d = dsc(&pred, &ep.query.mask)?;
    let mae = match &trace.support_bins {
        Some((p, gt)) => bin_mae(p, gt)?,
        None => return Err(Error::State("evaluation needs the support bin prediction".into())),
    };
    let _ = g;
    let bc = bhattacharyya(
        &gt_histogram(&ep.support[0].mask, cfg.bins)?,
        &gt_histogram(&ep.query.mask, cfg.bins)?,
    )?;
    Ok(EvalRecord {
        config: name.to_string(),
        seed: ep.seed,
        family: ep.family.to_string(),
        domain: ep.domain.clone(),
        dsc: d,
        bin_mae: mae,
        bc,
    })
}

/// Forward, backward and record for one episode; parameters are not updated.
pub fn run_episode(
    model: &Model,
    cfg: &RunConfig,
    ep: &Episode,
    name: &str,
) -> Result<(LossValues, EvalRecord, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let b = model.store.bind(&mut g);
    let trace = forward_episode(&mut g, &b, model, cfg, ep, true)?;
    let losses = LossValues::read(&g, &trace.losses);
    let record = make_record(&g, &trace, ep, cfg, name)?;
    g.backward(trace.losses.total)?;
    Ok((losses, record, b.grads(&g)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub lr: f64,
    pub episode: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, cfg: &RunConfig) -> Self {
        Self {
            velocity: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            lr: cfg.lr,
            episode: 0,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            lr_decay: cfg.lr_decay,
            decay_every: cfg.decay_every,
        }
    }
}

/// `v ← μv + (g + wd·θ)`, `θ ← θ − lr·v`; the rate decays after every `decay_every` steps.
pub fn sgd_step(store: &mut ParamStore, grads: &[Vec<f64>], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} buffers for {} parameters",
            grads.len(),
            state.velocity.len(),
            store.len()
        )));
    }
    for ((theta, grad), v) in store.tensors_mut().zip(grads).zip(&mut state.velocity) {
        if grad.len() != theta.numel() || v.len() != theta.numel() {
            return Err(Error::Contract("gradient size does not match parameter".into()));
        }
        for ((t, &gr), vi) in theta.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
            *vi = state.momentum * *vi + (gr + state.weight_decay * *t);
            *t -= state.lr * *vi;
        }
    }
    state.episode += 1;
    if state.episode.is_multiple_of(state.decay_every) {
        state.lr *= state.lr_decay;
    }
    Ok(())
}

/// Draws the episode for `(stream, index)`, retrying with derived seeds while
/// the forward pass reports a degenerate support.
fn episode_with_retry<T>(
    spec: &EpisodeSpec,
    split: Split,
    seed: u64,
    mut run: impl FnMut(&Episode) -> Result<T>,
) -> Result<(Episode, T)> {
    let mut last = None;
    for attempt in 0..crate::episodes::MAX_EPISODE_RESAMPLES as u64 {
        let s = if attempt == 0 { seed } else { derive_seed(seed, STREAM_RETRY, attempt) };
        let ep = sample_episode(spec, split, s)?;
        match run(&ep) {
            Ok(v) => return Ok((ep, v)),
            Err(e @ (Error::DegenerateSupport(_) | Error::EmptyRegion(_))) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(format!(
        "episode seed {seed}: resample budget exhausted ({})",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub losses: LossValues,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "episode,l_seg,l_align,l_osb,total,lr";
pub const HELDOUT_HEADER: &str = "episode,heldout_bin_mae";

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    /// `(episode, held-out bin MAE)` at every checkpoint.
    pub heldout: Vec<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Mean support bin MAE over fixed held-out source-domain episodes.
pub fn heldout_bin_mae(model: &Model, cfg: &RunConfig, seed: u64) -> Result<f64> {
    let spec = cfg.episode_spec()?;
    let mut g = Graph::new();
    let b = model.store.bind_frozen(&mut g);
    let n = cfg.heldout_episodes.max(1);
    let mut total = 0.0;
    for i in 0..n {
        let ep_seed = derive_seed(seed, STREAM_HELDOUT, i as u64);
        let ep = sample_episode(&spec, Split::Train, ep_seed)?;
        let shot = &ep.support[0];
        let f = feature_side(cfg);
        let img = g.constant(shot.image.clone());
        let feat = encode(&mut g, &b, &model.encoder, img)?;
        let pred = predict_bins(&mut g, &b, &model.osb, feat)?;
        total += bin_mae(&pred, &pooled_bin_map(&shot.mask, f, f, cfg.bins)?)?;
    }
    Ok(total / n as f64)
}

fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let l = r.losses;
        writeln!(s, "{},{},{},{},{},{}", r.episode, l.seg, l.align, l.osb, l.total, r.lr).expect("string write");
    }
    s
}

fn heldout_csv(rows: &[(usize, f64)]) -> String {
    let mut s = format!("{HELDOUT_HEADER}\n");
    for (e, m) in rows {
        writeln!(s, "{e},{m}").expect("string write");
    }
    s
}

/// Trains from scratch. With `run_dir`, writes `ck_<episode>.gprt` every
/// `checkpoint_every` episodes (and at 0 and the end), `log.csv` and `heldout.csv`.
pub fn train(cfg: &RunConfig, seed: u64, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.episode_spec()?;
    let mut model = Model::new(cfg, seed);
    let mut opt = OptimizerState::new(&model.store, cfg);
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut heldout = Vec::new();
    let mut checkpoints = Vec::new();
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut checkpoint = |model: &Model, episode: usize, heldout: &mut Vec<(usize, f64)>| -> Result<()> {
        heldout.push((episode, heldout_bin_mae(model, cfg, seed)?));
        if let Some(dir) = run_dir {
            let path = dir.join(format!("ck_{episode}.gprt"));
            model.to_checkpoint(cfg, episode, seed).save(&path)?;
            checkpoints.push(path);
        }
        Ok(())
    };
    checkpoint(&model, 0, &mut heldout)?;
    for i in 0..cfg.episodes {
        let lr = opt.lr;
        let ep_seed = derive_seed(seed, STREAM_TRAIN, i as u64);
        let (_, (losses, grads)) = episode_with_retry(&spec, Split::Train, ep_seed, |ep| {
            let mut g = Graph::new();
            let b = model.store.bind(&mut g);
            let trace = forward_episode(&mut g, &b, &model, cfg, ep, false)?;
            let losses = LossValues::read(&g, &trace.losses);
            g.backward(trace.losses.total)?;
            Ok((losses, b.grads(&g)))
        })?;
        if !losses.is_finite() {
            return Err(Error::State(format!("non-finite loss at episode {i}: {losses:?}")));
        }
        sgd_step(&mut model.store, &grads, &mut opt)?;
        log.push(LogRow {
            episode: i + 1,
            losses,
            lr,
        });
        let done = i + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.episodes {
            checkpoint(&model, done, &mut heldout)?;
        }
    }
    if let Some(dir) = run_dir {
        std::fs::write(dir.join("log.csv"), log_csv(&log))?;
        std::fs::write(dir.join("heldout.csv"), heldout_csv(&heldout))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        heldout,
        checkpoints,
    })
}

fn export_maps(dir: &Path, i: usize, ep: &Episode, trace: &EpisodeTrace, cfg: &RunConfig) -> Result<()> {
    let shot = &ep.support[0];
    let (w, h) = (shot.mask.width(), shot.mask.height());
    Greymap::from_unit(w, h, shot.image.data())?.write(dir.join(format!("ep{i:04}_support.pgm")))?;
    Greymap::from_mask(&shot.mask).write(dir.join(format!("ep{i:04}_support_mask.pgm")))?;
    Greymap::from_unit(w, h, ep.query.image.data())?.write(dir.join(format!("ep{i:04}_query.pgm")))?;
    Greymap::from_mask(&ep.query.mask).write(dir.join(format!("ep{i:04}_query_mask.pgm")))?;
    if let Some((pred, gt)) = &trace.support_bins {
        let f = feature_side(cfg);
        Greymap::from_u8(f, f, &gt.to_grey())?.write(dir.join(format!("ep{i:04}_gt_bins.pgm")))?;
        let masked = pred.hard.iter().zip(gt.bins()).map(|(&z, &t)| if t >= 0 { z as i32 } else { -1 });
        let hard = BinMap::new(f, f, cfg.bins, masked.collect())?;
        Greymap::from_u8(f, f, &hard.to_grey())?.write(dir.join(format!("ep{i:04}_pred_bins.pgm")))?;
    }
    Greymap::from_mask(&upsample_mask(&trace.scores.mask, EncoderParams::STRIDE))
        .write(dir.join(format!("ep{i:04}_pred_mask.pgm")))?;
    Ok(())
}

/// Runs `n` evaluation episodes (hard-argmax predictions, no updates).
///
/// Episode seeds depend only on `seed`, so different models see the same episodes.
pub fn evaluate(
    model: &Model,
    cfg: &RunConfig,
    seed: u64,
    n: usize,
    name: &str,
    export_dir: Option<&Path>,
) -> Result<Vec<EvalRecord>> {
    let spec = cfg.episode_spec()?;
    if let Some(d) = export_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let ep_seed = derive_seed(seed, STREAM_EVAL, i as u64);
        let (_, rec) = episode_with_retry(&spec, Split::Eval, ep_seed, |ep| {
            let mut g = Graph::new();
            let b = model.store.bind_frozen(&mut g);
            let trace = forward_episode(&mut g, &b, model, cfg, ep, true)?;
            if let Some(d) = export_dir {
                export_maps(d, i, ep, &trace, cfg)?;
            }
            make_record(&g, &trace, ep, cfg, name)
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// One configuration of an ablation sweep.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub name: String,
    pub cfg: RunConfig,
}

/// The cells of a sweep. The first cell is the reference for paired deltas.
pub fn ablation_cells(base: &RunConfig, sweep: Sweep) -> Vec<AblationCell> {
    let cell = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        AblationCell {
            name: name.to_string(),
            cfg,
        }
    };
    let components = |c: &mut RunConfig, pe: bool, geo: bool, osb: bool| {
        c.position_embedding = pe;
        c.enrichment = geo;
        c.osb_loss = osb;
    };
    match sweep {
        Sweep::Components => vec![
            cell("baseline", &|c| components(c, false, false, false)),
            cell("+PE", &|c| components(c, true, false, false)),
            cell("+Geo-E", &|c| components(c, false, true, false)),
            cell("+OSB-L", &|c| components(c, false, false, true)),
            cell("full", &|c| components(c, false, true, true)),
        ],
        Sweep::Bins => [5, 10, 15, 20]
            .into_iter()
            .map(|k| cell(&format!("K={k}"), &|c| c.bins = k))
            .collect(),
        Sweep::Fusion => [FusionMode::Additive, FusionMode::ConcatProj, FusionMode::ScaleGate]
            .into_iter()
            .map(|m| cell(&m.to_string(), &|c| c.fusion = m))
            .collect(),
        Sweep::Grid => [2, 4, 8, 16]
            .into_iter()
            .filter(|&gs| gs <= base.image_size / EncoderParams::STRIDE)
            .map(|gs| cell(&format!("G={gs}"), &|c| c.grid = gs))
            .collect(),
    }
}

pub struct CellResult {
    pub name: String,
    pub outcome: std::result::Result<Vec<EvalRecord>, String>,
}

pub const COMPARISON_HEADER: &str = "config,status,n,mean_dsc,median_dsc,std_dsc,paired_delta_dsc";

/// Trains and evaluates every cell with the same seed; up to `jobs` cells run at once.
/// A failing cell is reported in its status and does not stop the others.
pub fn run_ablation(cells: &[AblationCell], seed: u64, jobs: usize, out_dir: Option<&Path>) -> Vec<CellResult> {
    let run_cell = |cell: &AblationCell| -> std::result::Result<Vec<EvalRecord>, String> {
        let dir = out_dir.map(|d| d.join(sanitize(&cell.name)));
        let outcome = train(&cell.cfg, seed, dir.as_deref()).map_err(|e| e.to_string())?;
        let recs = evaluate(&outcome.model, &cell.cfg, seed, cell.cfg.eval_episodes, &cell.name, None)
            .map_err(|e| e.to_string())?;
        if let Some(d) = &dir {
            std::fs::write(d.join("records.csv"), records_csv(&recs)).map_err(|e| e.to_string())?;
        }
        Ok(recs)
    };
    let jobs = jobs.max(1);
    let mut results: Vec<Option<CellResult>> = cells.iter().map(|_| None).collect();
    for (chunk_idx, chunk) in cells.chunks(jobs).enumerate() {
        let outs: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|c| s.spawn(|| run_cell(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err("cell panicked".to_string())))
                .collect()
        });
        for (j, outcome) in outs.into_iter().enumerate() {
            let i = chunk_idx * jobs + j;
            results[i] = Some(CellResult {
                name: cells[i].name.clone(),
                outcome,
            });
        }
    }
    results.into_iter().map(|r| r.expect("every cell ran")).collect()
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// Comparison table with paired DSC deltas against the first successful cell.
pub fn comparison_csv(results: &[CellResult]) -> String {
    let all: Vec<EvalRecord> = results
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .flatten()
        .cloned()
        .collect();
    let reference = results.iter().find(|r| r.outcome.is_ok()).map(|r| r.name.clone());
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in results {
        match &r.outcome {
            Ok(recs) if !recs.is_empty() => {
                let d: Vec<f64> = recs.iter().map(|x| x.dsc).collect();
                let st = Stats::of(&d).expect("nonempty");
                let delta = reference
                    .as_deref()
                    .and_then(|b| paired_delta(&all, &r.name, b).ok())
                    .map(|(_, m)| m.to_string())
                    .unwrap_or_default();
                writeln!(s, "{},ok,{},{},{},{},{}", r.name, st.n, st.mean, st.median, st.std, delta)
                    .expect("string write");
            }
            Ok(_) => writeln!(s, "{},ok,0,,,,", r.name).expect("string write"),
            Err(e) => writeln!(s, "{},failed: {},0,,,,", r.name, e.replace(',', ";")).expect("string write"),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.image_size = 32;
        c.channels = 4;
        c.grid = 4;
        c.bins = 3;
        c.mlp_hidden = 3;
        c.heldout_episodes = 2;
        c
    }

    fn tiny_episode(cfg: &RunConfig, seed: u64) -> Episode {
        let mut spec = cfg.episode_spec().unwrap();
        for f in spec.train_families.iter_mut().chain(spec.eval_families.iter_mut()) {
            *f = crate::episodes::ShapeFamily::disc(9.0);
        }
        sample_episode(&spec, Split::Train, seed).unwrap()
    }

    #[test]
    fn sgd_hand_step() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::from_vec(vec![1.0]));
        let mut cfg = RunConfig::default();
        cfg.lr = 0.1;
        cfg.weight_decay = 0.0;
        let mut st = OptimizerState::new(&store, &cfg);
        sgd_step(&mut store, &[vec![1.0]], &mut st).unwrap();
        assert!((store.iter().next().unwrap().1.data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(st.velocity[0], vec![1.0]);
        assert!(sgd_step(&mut store, &[], &mut st).is_err());
    }

    #[test]
    fn zero_grad_decays_velocity_only() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::from_vec(vec![2.0]));
        let mut cfg = RunConfig::default();
        cfg.weight_decay = 0.0;
        let mut st = OptimizerState::new(&store, &cfg);
        st.velocity[0][0] = 1.0;
        let before = store.iter().next().unwrap().1.data()[0];
        sgd_step(&mut store, &[vec![0.0]], &mut st).unwrap();
        assert!((st.velocity[0][0] - 0.9).abs() < 1e-15);
        let after = store.iter().next().unwrap().1.data()[0];
        assert!((before - after - cfg.lr * 0.9).abs() < 1e-15);

        st.velocity[0][0] = 0.0;
        let mut store2 = store.clone();
        *store2.get_mut(store2.find("theta").unwrap()) = Tensor::from_vec(vec![3.0]);
        sgd_step(&mut store2, &[vec![0.0]], &mut st).unwrap();
        assert_eq!(store2.iter().next().unwrap().1.data()[0], 3.0);
    }

    #[test]
    fn weight_decay_shrinks_geometrically() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::from_vec(vec![1.0]));
        let mut cfg = RunConfig::default();
        cfg.momentum = 0.0;
        cfg.lr = 0.1;
        cfg.weight_decay = 0.5;
        let mut st = OptimizerState::new(&store, &cfg);
        for step in 1..=5 {
            sgd_step(&mut store, &[vec![0.0]], &mut st).unwrap();
            let v = store.iter().next().unwrap().1.data()[0];
            assert!((v - 0.95f64.powi(step)).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_decays_at_boundaries() {
        let store = ParamStore::new();
        let cfg = RunConfig::default();
        let mut st = OptimizerState::new(&store, &cfg);
        let mut empty = ParamStore::new();
        for _ in 0..999 {
            sgd_step(&mut empty, &[], &mut st).unwrap();
        }
        assert_eq!(st.lr, 1e-3);
        sgd_step(&mut empty, &[], &mut st).unwrap();
        assert!((st.lr - 0.95e-3).abs() < 1e-18);
    }

    #[test]
    fn baseline_total_is_seg_plus_align() {
        let mut cfg = tiny_cfg();
        cfg.enrichment = false;
        cfg.osb_loss = false;
        let model = Model::new(&cfg, 1);
        let ep = tiny_episode(&cfg, 3);
        let (l, _, _) = run_episode(&model, &cfg, &ep, "x").unwrap();
        assert_eq!(l.osb, 0.0);
        assert_eq!(l.total, l.seg + l.align);
    }

    #[test]
    fn zero_lambda_geo_gives_osb_no_gradient_from_its_loss() {
        let mut cfg = tiny_cfg();
        cfg.enrichment = false;
        cfg.lambda_geo = 0.0;
        let model = Model::new(&cfg, 1);
        let ep = tiny_episode(&cfg, 4);
        let (_, _, grads) = run_episode(&model, &cfg, &ep, "x").unwrap();
        for (name, grad) in model.store.iter().map(|(n, _)| n).zip(&grads) {
            if name.starts_with("osb.") {
                assert!(grad.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn run_episode_is_deterministic() {
        let cfg = tiny_cfg();
        let model = Model::new(&cfg, 1);
        let ep = tiny_episode(&cfg, 5);
        let a = run_episode(&model, &cfg, &ep, "x").unwrap();
        let b = run_episode(&model, &cfg, &ep, "x").unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn align_gradient_reaches_encoder() {
        let mut cfg = tiny_cfg();
        cfg.enrichment = false;
        cfg.osb_loss = false;
        let model = Model::new(&cfg, 2);
        let ep = tiny_episode(&cfg, 6);
        let mut g = Graph::new();
        let b = model.store.bind(&mut g);
        let trace = forward_episode(&mut g, &b, &model, &cfg, &ep, false).unwrap();
        assert!(trace.align_active);
        g.backward(trace.losses.align).unwrap();
        let grads = b.grads(&g);
        let hit = model
            .store
            .iter()
            .zip(&grads)
            .any(|((n, _), gr)| n.starts_with("encoder.") && n.ends_with("weight") && gr.iter().any(|&v| v != 0.0));
        assert!(hit);
    }

    #[test]
    fn position_code_and_projection() {
        let code = sinusoid_code(4, 4);
        let plane = 16;
        let at = |i: usize| (0..PE_CHANNELS).map(|c| code.data()[c * plane + i]).collect::<Vec<_>>();
        for i in 0..plane {
            for j in (i + 1)..plane {
                assert_ne!(at(i), at(j));
            }
        }
        let mut store = ParamStore::new();
        let id = store.add("pe.proj.weight", Tensor::zeros(&[2, PE_CHANNELS, 1, 1]));
        let pe = PeParams { proj: id };
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let f = g.constant(Tensor::full(&[2, 4, 4], 0.5));
        let out = position_embedding_variant(&mut g, &b, &pe, f).unwrap();
        assert_eq!(g.value(out), g.value(f));
    }

    #[test]
    fn zero_episodes_gives_initial_checkpoint_only() {
        let mut cfg = tiny_cfg();
        cfg.episodes = 0;
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, 3, Some(dir.path())).unwrap();
        assert_eq!(out.checkpoints, vec![dir.path().join("ck_0.gprt")]);
        let ck = Checkpoint::load(&out.checkpoints[0]).unwrap();
        let (c2, m2) = Model::from_checkpoint(&ck).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(m2.store, out.model.store);
    }

    #[test]
    fn seeds_change_the_result() {
        let mut cfg = tiny_cfg();
        cfg.episodes = 3;
        let a = train(&cfg, 1, None).unwrap();
        let b = train(&cfg, 1, None).unwrap();
        let c = train(&cfg, 2, None).unwrap();
        assert_eq!(a.model.store, b.model.store);
        assert_ne!(a.model.store, c.model.store);
    }

    #[test]
    fn component_cells() {
        let cells = ablation_cells(&RunConfig::default(), Sweep::Components);
        let names: Vec<_> = cells.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["baseline", "+PE", "+Geo-E", "+OSB-L", "full"]);
        assert!(cells[1].cfg.position_embedding && !cells[1].cfg.enrichment);
        assert!(cells[4].cfg.enrichment && cells[4].cfg.osb_loss && !cells[4].cfg.position_embedding);
        assert_eq!(ablation_cells(&RunConfig::default(), Sweep::Bins).len(), 4);
        assert_eq!(ablation_cells(&RunConfig::default(), Sweep::Fusion).len(), 3);
    }
}
