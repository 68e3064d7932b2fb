//! Command-line driver.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime abort.

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::episodes::{derive_seed, dump_episodes, sample_episode, EpisodeSpec, FamilyKind, ShapeFamily, Split};
use crate::error::{Error, Result};
use crate::geometry::{bin_histogram, bin_map};
use crate::metrics::{aggregate, bhattacharyya, records_csv, Stats};
use crate::trainer::{ablation_cells, comparison_csv, evaluate, run_ablation, train, Model};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "geoproto", version, about = "Geometry-aware few-shot prototype segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,
    /// Concurrent ablation cells.
    #[arg(long, default_value_t = 1, global = true)]
    pub jobs: usize,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs", global = true)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from scratch.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on fresh episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Rendering domain of the evaluation episodes.
        #[arg(long)]
        domain: Option<String>,
        /// Write support, bin maps and predicted masks as PGM.
        #[arg(long)]
        export_maps: bool,
    },
    /// Train and evaluate every cell of a sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Bin histograms and support-query Bhattacharyya coefficients per shape family.
    ValidatePrior {
        #[command(flatten)]
        common: Common,
    },
    /// Dump sampled episodes as PGM files with a manifest.
    ExportEpisodes {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        episodes: usize,
        #[arg(long, default_value = "eval")]
        split: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Train { .. } => "train",
            Self::Eval { .. } => "eval",
            Self::Ablate { .. } => "ablate",
            Self::ValidatePrior { .. } => "validate-prior",
            Self::ExportEpisodes { .. } => "export-episodes",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Self::Train { common }
            | Self::Eval { common, .. }
            | Self::Ablate { common }
            | Self::ValidatePrior { common }
            | Self::ExportEpisodes { common, .. } => common,
        }
    }
}

/// Loads the config file (if any) and applies `--set` overrides in order.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &common.set {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `<out>/<command>_<UTC timestamp>_<seed>`, with a numeric suffix if taken.
pub fn make_run_dir(out: &Path, command: &str, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = out.join(format!("{command}_{stamp}_{seed}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}_{n}", base.display()));
        n += 1;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("geoproto {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

/// Runs a parsed command and returns its run directory.
pub fn execute(cmd: &Command) -> Result<PathBuf> {
    let common = cmd.common();
    let mut cfg = load_config(common)?;
    let seed = common.seed;
    match cmd {
        Command::Train { .. } => {
            let dir = make_run_dir(&common.out, cmd.name(), seed)?;
            std::fs::write(dir.join("config.txt"), cfg.to_text())?;
            train(&cfg, seed, Some(&dir))?;
            Ok(dir)
        }
        Command::Eval {
            ckpt,
            episodes,
            domain,
            export_maps,
            ..
        } => {
            let path = resolve_checkpoint(ckpt)?;
            let ck = Checkpoint::load(&path).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
                other => other,
            })?;
            let (trained, model) = Model::from_checkpoint(&ck)?;
            // The architecture comes from the checkpoint; evaluation keys from the command line.
            let mut eval_cfg = trained;
            eval_cfg.eval_episodes = episodes.unwrap_or(cfg.eval_episodes);
            eval_cfg.eval_domain = domain.clone().unwrap_or(cfg.eval_domain.clone());
            eval_cfg.eval_families = cfg.eval_families.clone();
            eval_cfg.export_maps = *export_maps || cfg.export_maps;
            eval_cfg.validate()?;
            cfg = eval_cfg;
            let dir = make_run_dir(&common.out, cmd.name(), seed)?;
            std::fs::write(dir.join("config.txt"), cfg.to_text())?;
            let maps = cfg.export_maps.then(|| dir.join("maps"));
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            let recs = evaluate(&model, &cfg, seed, cfg.eval_episodes, &name, maps.as_deref())?;
            std::fs::write(dir.join("records.csv"), records_csv(&recs))?;
            if !recs.is_empty() {
                std::fs::write(dir.join("summary.csv"), aggregate(&recs)?.to_csv())?;
            }
            Ok(dir)
        }
        Command::Ablate { .. } => {
            let dir = make_run_dir(&common.out, cmd.name(), seed)?;
            std::fs::write(dir.join("config.txt"), cfg.to_text())?;
            let cells = ablation_cells(&cfg, cfg.sweep);
            let results = run_ablation(&cells, seed, common.jobs, Some(&dir));
            std::fs::write(dir.join("comparison.csv"), comparison_csv(&results))?;
            let failed: Vec<&str> = results
                .iter()
                .filter(|r| r.outcome.is_err())
                .map(|r| r.name.as_str())
                .collect();
            if !failed.is_empty() {
                return Err(Error::Generation(format!("cells failed: {}", failed.join(", "))));
            }
            Ok(dir)
        }
        Command::ValidatePrior { .. } => {
            let dir = make_run_dir(&common.out, cmd.name(), seed)?;
            std::fs::write(dir.join("config.txt"), cfg.to_text())?;
            let report = validate_prior(&cfg, seed)?;
            report.write(&dir)?;
            Ok(dir)
        }
        Command::ExportEpisodes { episodes, split, .. } => {
            let split: Split = split.parse()?;
            let dir = make_run_dir(&common.out, cmd.name(), seed)?;
            std::fs::write(dir.join("config.txt"), cfg.to_text())?;
            let spec = cfg.episode_spec()?;
            let eps = (0..*episodes)
                .map(|i| sample_episode(&spec, split, derive_seed(seed, 5, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            dump_episodes(&dir.join("episodes"), &eps)?;
            Ok(dir)
        }
    }
}

/// Accepts `run/ck_4000` as well as `run/ck_4000.gprt`.
fn resolve_checkpoint(p: &Path) -> Result<PathBuf> {
    if p.is_file() {
        return Ok(p.to_path_buf());
    }
    let with_ext = p.with_extension("gprt");
    if with_ext.is_file() {
        return Ok(with_ext);
    }
    Err(Error::Config(format!("checkpoint {} not found", p.display())))
}

/// Per-family geometry statistics over intra-domain episodes.
#[derive(Clone, Debug)]
pub struct FamilyPrior {
    pub family: FamilyKind,
    /// Mean support bin histogram.
    pub histogram: Vec<f64>,
    /// Support-query BC per episode.
    pub within_bc: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PriorReport {
    pub bins: usize,
    pub families: Vec<FamilyPrior>,
    /// BC between supports of one family and queries of another, episode-aligned.
    pub cross_bc: Vec<f64>,
}

impl PriorReport {
    pub fn within_median(&self) -> Result<f64> {
        let all: Vec<f64> = self.families.iter().flat_map(|f| f.within_bc.iter().copied()).collect();
        Ok(Stats::of(&all)?.median)
    }

    pub fn cross_median(&self) -> Result<f64> {
        Ok(Stats::of(&self.cross_bc)?.median)
    }

    pub fn family(&self, kind: FamilyKind) -> Option<&FamilyPrior> {
        self.families.iter().find(|f| f.family == kind)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut hist = String::from("family,bin,mass\n");
        for f in &self.families {
            for (k, m) in f.histogram.iter().enumerate() {
                writeln!(hist, "{},{k},{m}", f.family).expect("string write");
            }
            std::fs::write(dir.join(format!("hist_{}.svg", f.family)), bar_chart_svg(&f.family.to_string(), &f.histogram))?;
        }
        std::fs::write(dir.join("prior_histograms.csv"), hist)?;
        let mut bc = String::from("group,n,mean,median,std\n");
        for (name, vals) in self
            .families
            .iter()
            .map(|f| (format!("within:{}", f.family), &f.within_bc))
            .chain(std::iter::once(("cross".to_string(), &self.cross_bc)))
        {
            let s = Stats::of(vals)?;
            writeln!(bc, "{name},{},{},{},{}", s.n, s.mean, s.median, s.std).expect("string write");
        }
        std::fs::write(dir.join("prior_bc.csv"), bc)?;
        Ok(())
    }
}

/// Samples `prior_episodes` source-domain episodes per evaluation family and
/// compares ground-truth bin histograms at image resolution.
pub fn validate_prior(cfg: &RunConfig, seed: u64) -> Result<PriorReport> {
    let k = cfg.bins;
    let n = cfg.prior_episodes;
    let mut per_family = Vec::new();
    for (fi, &kind) in cfg.eval_families.iter().enumerate() {
        let spec = EpisodeSpec {
            train_families: vec![ShapeFamily::preset_for(kind, cfg.image_size)],
            ..cfg.episode_spec()?
        };
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let ep = sample_episode(&spec, Split::Train, derive_seed(seed, 6 + fi as u64, i as u64))?;
            let s = bin_histogram(&bin_map(&ep.support[0].mask, k)?)?;
            let q = bin_histogram(&bin_map(&ep.query.mask, k)?)?;
            pairs.push((s, q));
        }
        per_family.push((kind, pairs));
    }
    let mut families = Vec::new();
    for (kind, pairs) in &per_family {
        let mut mean = vec![0.0; k];
        for (s, _) in pairs {
            mean.iter_mut().zip(s).for_each(|(m, v)| *m += v / pairs.len() as f64);
        }
        let within_bc = pairs
            .iter()
            .map(|(s, q)| bhattacharyya(s, q))
            .collect::<Result<Vec<_>>>()?;
        families.push(FamilyPrior {
            family: *kind,
            histogram: mean,
            within_bc,
        });
    }
    let mut cross_bc = Vec::new();
    for (a, (_, pa)) in per_family.iter().enumerate() {
        for (b, (_, pb)) in per_family.iter().enumerate() {
            if a != b {
                for ((s, _), (_, q)) in pa.iter().zip(pb) {
                    cross_bc.push(bhattacharyya(s, q)?);
                }
            }
        }
    }
    if cross_bc.is_empty() {
        return Err(Error::Config("validate-prior needs at least two families".into()));
    }
    Ok(PriorReport {
        bins: k,
        families,
        cross_bc,
    })
}

/// Minimal SVG bar chart of a histogram.
pub fn bar_chart_svg(title: &str, values: &[f64]) -> String {
    let (w, h, pad) = (400.0, 240.0, 30.0);
    let max = values.iter().copied().fold(0.0, f64::max).max(1e-12);
    let bw = (w - 2.0 * pad) / values.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <text x=\"{pad}\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n"
    );
    for (i, v) in values.iter().enumerate() {
        let bh = (h - 2.0 * pad) * v / max;
        let x = pad + i as f64 * bw;
        let y = h - pad - bh;
        writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"#4a7ab5\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{i}</text>",
            bw * 0.9,
            x + bw * 0.45,
            h - pad + 12.0
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}
