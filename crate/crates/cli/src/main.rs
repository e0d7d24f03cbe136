use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use fsad::config::{ConfigError, RunConfig};
use fsad::features::{
    build_inference_manifest, build_manifest_for_type, read_feature_file, write_feature_file,
    EpisodeManifest, FeatureSet, Setting,
};
use fsad::ide::{Checkpoint, IdeConfig};
use fsad::metrics::{evaluate, task_difficulty, EvalSample, ProConfig};
use fsad::scoring::{project, Ablation, Model, ReferenceContext, ScoreMap};
use fsad::synth::{generate_world, SynthWorldSpec};
use fsad::trainer::{self, TrainError};

mod export;

/// Few-shot anomaly detection on pre-extracted patch features.
///
/// Settings live in a TOML run config (`--config`); omitted keys take the
/// defaults: epochs 20, batch 16, L1 4, L2 1, 500 queries per epoch,
/// k 12, r 4, alpha 0.8, M 45, lambda1 1.0, lambda2 0.8, base lr 1e-3 with
/// 2 warm-up epochs from 1e-5 and cosine decay to 1%, 8 heads, dropout 0.1,
/// residuals on, positional encoding on keys, per-head attention scale,
/// bilinear upsampling, NVE on, PRO cap 0.3.
///
/// Exit status: 0 success, 2 configuration error, 3 data error.
#[derive(Parser)]
#[command(name = "fsad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Episodic training; writes a checkpoint and a loss trace.
    Train(TrainArgs),
    /// Scores every query of a manifest against its fixed references.
    Score(ScoreArgs),
    /// Image and pixel metrics for a directory of score maps.
    Eval(EvalArgs),
    /// Draws the fixed reference selection for a dataset.
    Manifest(ManifestArgs),
    /// Writes a synthetic world as feature files.
    Generate(GenerateArgs),
    /// Dumps residual, denoised and projected deviations per query patch.
    ExportDeviations(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training feature file.
    #[arg(long)]
    features: PathBuf,
    /// Run config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed` [config default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Loss trace [default: <out>.trace.tsv].
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Overrides `train.epochs` [config default: 20].
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `train.queries_per_epoch` [config default: 500].
    #[arg(long)]
    queries_per_epoch: Option<usize>,
    /// Reuse one query draw for every epoch instead of resampling.
    #[arg(long)]
    fixed_query_set: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Needed unless scoring without the encoder.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory for score maps and `scores.tsv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder on raw residuals, no denoising.
    #[arg(long, conflicts_with_all = ["matching_only", "nve_only"])]
    ablate_nve: bool,
    /// Raw nearest-neighbour matching against normal and abnormal references.
    #[arg(long, conflicts_with = "nve_only")]
    matching_only: bool,
    /// Denoised deviations matched against abnormal references, no encoder.
    #[arg(long)]
    nve_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `score`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides the manifest's setting.
    #[arg(long)]
    setting: Option<Setting>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `manifest.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `manifest.setting` [config default: general].
    #[arg(long)]
    setting: Option<Setting>,
    /// Anomaly type of the abnormal references [default: drawn at random].
    #[arg(long = "type")]
    anomaly_type: Option<String>,
    /// Dataset id recorded in the manifest [default: feature file stem].
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// World spec (TOML); omitted keys take the built-in defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
}

type Outcome<T> = std::result::Result<T, Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn data_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Manifest(a) => cmd_manifest(a),
        Command::Generate(a) => cmd_generate(a),
        Command::ExportDeviations(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("data error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load_config(path: Option<&Path>) -> Outcome<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::read(p).map_err(|e| match e {
            ConfigError::Io { .. } => data_err(e),
            other => config_err(anyhow!(other).context(format!("in {}", p.display()))),
        }),
    }
}

fn load_features(path: &Path) -> Outcome<FeatureSet> {
    read_feature_file(path)
        .map_err(data_err)
}

fn load_manifest(path: &Path) -> Outcome<EpisodeManifest> {
    EpisodeManifest::read(path)
        .map_err(data_err)
}

/// Encoder dimensions come from the checkpoint, behaviour switches from the
/// config.
fn load_model(path: &Path, cfg: &RunConfig) -> Outcome<Model> {
    let ckpt = Checkpoint::read(path)
        .map_err(data_err)?;
    let config = IdeConfig {
        channels: ckpt.params.channels(),
        tokens: ckpt.params.tokens_count(),
        hidden: ckpt.params.hidden(),
        heads: ckpt.heads,
        ..cfg.train.ide
    };
    config.validate().map_err(config_err)?;
    Ok(Model {
        config,
        params: ckpt.params,
    })
}

fn create_dir(dir: &Path) -> Outcome<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(data_err)
}

fn write_text(path: &Path, text: &str) -> Outcome<()> {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data_err)
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) => config_err(e),
        other => data_err(other),
    }
}

fn cmd_train(a: TrainArgs) -> Outcome<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(q) = a.queries_per_epoch {
        cfg.train.queries_per_epoch = q;
    }
    cfg.train.fixed_query_set |= a.fixed_query_set;
    cfg.train.validate().map_err(config_err)?;
    let pool = load_features(&a.features)?;
    if pool.channels() != cfg.train.ide.channels {
        return Err(config_err(anyhow!(
            "features have C={} but train.ide.channels = {}",
            pool.channels(),
            cfg.train.ide.channels
        )));
    }
    let out = trainer::train(&pool, &cfg.train).map_err(train_failure)?;
    out.checkpoint
        .write(&a.out)
        .map_err(data_err)?;
    let trace = a.trace.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".trace.tsv");
        p.into()
    });
    write_text(&trace, &trainer::trace_tsv(&out.trace))?;
    let means = trainer::epoch_means(&out.trace);
    if let (Some(first), Some(last)) = (means.first(), means.last()) {
        println!("trained {} steps; mean loss {first:.4} -> {last:.4}", out.trace.len());
    }
    Ok(())
}

fn map_name(id: usize) -> String {
    format!("q{id:06}.idsm")
}

fn cmd_score(a: ScoreArgs) -> Outcome<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.ablate_nve {
        cfg.score.ablation = Ablation::IdeOnly;
    } else if a.matching_only {
        cfg.score.ablation = Ablation::MatchingOnly;
    } else if a.nve_only {
        cfg.score.ablation = Ablation::NveOnly;
    }
    let dataset = load_features(&a.features)?;
    let manifest = load_manifest(&a.manifest)?;
    let model = match (&a.ckpt, cfg.score.ablation.uses_encoder()) {
        (Some(p), true) => Some(load_model(p, &cfg)?),
        (None, true) => {
            return Err(config_err(anyhow!(
                "ablation {:?} needs --ckpt",
                cfg.score.ablation
            )))
        }
        (_, false) => None,
    };
    if let Some(m) = &model {
        if m.config.channels != dataset.channels() {
            return Err(data_err(anyhow!(
                "checkpoint expects C={}, features have C={}",
                m.config.channels,
                dataset.channels()
            )));
        }
    }
    let maps = trainer::infer(&dataset, &manifest, model.as_ref(), &cfg.train.nve, &cfg.score)
        .map_err(data_err)?;
    create_dir(&a.out)?;
    let mut table = String::from("id\tlabel\tanomaly_type\timage_score\n");
    for (id, map) in &maps {
        let path = a.out.join(map_name(*id));
        map.write(&path).map_err(data_err)?;
        table.push_str(&format!(
            "{id}\t{}\t{}\t{:.8}\n",
            dataset.label(*id).as_u8(),
            dataset.anomaly_type(*id),
            map.image_score
        ));
    }
    write_text(&a.out.join("scores.tsv"), &table)?;
    println!("scored {} queries into {}", maps.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Outcome<()> {
    let dataset = load_features(&a.features)?;
    let mut manifest = load_manifest(&a.manifest)?;
    if let Some(s) = a.setting {
        manifest = manifest.with_setting(s);
    }
    let ids = manifest.query_ids(&dataset).map_err(data_err)?;
    let mut maps = Vec::with_capacity(ids.len());
    for &id in &ids {
        let path = a.scores.join(map_name(id));
        let map = ScoreMap::read(&path).map_err(data_err)?;
        if map.grid != dataset.grid() {
            return Err(data_err(anyhow!(
                "{} has grid {}, features have {}",
                path.display(),
                map.grid,
                dataset.grid()
            )));
        }
        maps.push(map);
    }
    let samples: Vec<EvalSample<'_>> = ids
        .iter()
        .zip(&maps)
        .map(|(&id, m)| EvalSample {
            label: dataset.label(id).is_abnormal(),
            image_score: m.image_score as f64,
            pixel_scores: &m.pixel_map,
            height: m.height,
            width: m.width,
            patch_mask: dataset.mask(id),
            grid: m.grid,
        })
        .collect();
    let mut report = evaluate(&samples, &ProConfig::default());

    let refs = manifest.references(&dataset).map_err(data_err)?;
    let masked_rows = |img: usize| -> Vec<&[f32]> {
        let c = dataset.channels();
        let feats = dataset.image(img);
        (0..dataset.n_patches())
            .filter(|&p| dataset.mask(img)[p])
            .map(|p| &feats[p * c..(p + 1) * c])
            .collect()
    };
    let ref_rows: Vec<&[f32]> = refs
        .abnormal_ids
        .iter()
        .flat_map(|&i| masked_rows(i))
        .collect();
    let test_rows: Vec<&[f32]> = ids
        .iter()
        .filter(|&&i| dataset.label(i).is_abnormal())
        .flat_map(|&i| masked_rows(i))
        .collect();
    report.task_difficulty = task_difficulty(&ref_rows, &test_rows);

    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn cmd_manifest(a: ManifestArgs) -> Outcome<()> {
    let cfg = load_config(a.config.as_deref())?;
    let dataset = load_features(&a.features)?;
    let opts = cfg.manifest;
    let seed = a.seed.unwrap_or(opts.seed);
    let setting = a.setting.unwrap_or(opts.setting);
    let id = a.dataset.unwrap_or_else(|| {
        a.features
            .file_stem()
            .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
    });
    let shape = opts.shape();
    let manifest = match &a.anomaly_type {
        Some(t) => build_manifest_for_type(&dataset, &id, &shape, seed, setting, t),
        None => build_inference_manifest(&dataset, &id, &shape, seed, setting),
    }
    .map_err(data_err)?;
    manifest
        .write(&a.out)
        .map_err(data_err)?;
    println!(
        "{} normal + {} abnormal references of type {:?}",
        manifest.normal_ids().len(),
        manifest.abnormal_ids().len(),
        manifest.anomaly_type()
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Outcome<()> {
    let mut spec = match &a.spec {
        None => SynthWorldSpec::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading spec {}", p.display()))
                .map_err(data_err)?;
            SynthWorldSpec::from_toml(&text)
                .with_context(|| format!("parsing spec {}", p.display()))
                .map_err(config_err)?
        }
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let world = generate_world(&spec).map_err(config_err)?;
    create_dir(&a.out)?;
    for (name, set) in [("train.idfs", &world.train), ("test.idfs", &world.test)] {
        let path = a.out.join(name);
        write_feature_file(&path, set).map_err(data_err)?;
    }
    let rows: Vec<String> = world
        .directions
        .iter()
        .map(|d| d.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>().join("\t"))
        .collect();
    write_text(&a.out.join("directions.tsv"), &(rows.join("\n") + "\n"))?;
    let mut run = RunConfig::default();
    run.train.ide = IdeConfig {
        tokens: spec.directions,
        ..IdeConfig::with_channels(spec.channels)
    };
    write_text(&a.out.join("run.toml"), &run.to_toml())?;
    println!(
        "wrote {} train and {} test images to {}",
        world.train.len(),
        world.test.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Outcome<()> {
    let cfg = load_config(a.config.as_deref())?;
    let dataset = load_features(&a.features)?;
    let manifest = load_manifest(&a.manifest)?;
    let model = load_model(&a.ckpt, &cfg)?;
    if model.config.channels != dataset.channels() {
        return Err(data_err(anyhow!(
            "checkpoint expects C={}, features have C={}",
            model.config.channels,
            dataset.channels()
        )));
    }
    let mut score = cfg.score;
    if !score.ablation.uses_encoder() {
        score.ablation = Ablation::Full;
    }
    let refs = manifest.references(&dataset).map_err(data_err)?;
    let ctx = ReferenceContext::build(&refs, Some(&model), &cfg.train.nve, &score).map_err(data_err)?;
    let tokens = ctx.tokens().expect("encoder scoring mode").to_vec();
    let ids = manifest.query_ids(&dataset).map_err(data_err)?;
    let mut rows = Vec::new();
    for &id in &ids {
        let field = ctx.deviations(&dataset.image_tensor(id)).map_err(data_err)?;
        for p in 0..dataset.n_patches() {
            let den: Vec<f64> = field.denoised.row(p).iter().map(|&v| v as f64).collect();
            let proj: Vec<f32> = project(&den, &tokens).into_iter().map(|v| v as f32).collect();
            rows.push(export::Row {
                image: id as u32,
                patch: p as u32,
                residual: field.residuals.row(p).to_vec(),
                denoised: field.denoised.row(p).to_vec(),
                projected: proj,
            });
        }
    }
    let bytes = export::encode(dataset.channels(), &rows);
    std::fs::write(&a.out, bytes)
        .with_context(|| format!("writing {}", a.out.display()))
        .map_err(data_err)?;
    println!("exported {} patch rows", rows.len());
    Ok(())
}
