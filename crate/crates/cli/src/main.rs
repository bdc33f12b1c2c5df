mod output;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use povt_core::boxes::BBox;
use povt_core::checkpoint::Checkpoint;
use povt_core::codec::{Codec, CodecConfig, CodecTrainer};
use povt_core::data::{gen_dataset, read_dataset, write_dataset, GenOptions, VideoSample};
use povt_core::harness::{count_flops, evaluate_best_of_s, mean_over_frames, psnr, EvalConfig, FlopMode};
use povt_core::model::{ModelConfig, Prior};
use povt_core::sample::{generate, load_bundle, Edit, SamplingConfig};
use povt_core::train::{dataset_nll, prepare_video, PriorTrainer, TrainConfig};

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

/// Schema version of the JSON summaries printed by the training commands.
const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "povt", version, about = "Object-centric video transformer toolkit")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with optional `model`, `codec`, `train` and `data` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bouncing-shapes dataset.
    GenData(GenDataArgs),
    /// Train the frame codec on every frame of a dataset.
    TrainCodec(TrainCodecArgs),
    /// Train the prior against a frozen codec.
    TrainPrior(TrainPriorArgs),
    /// Roll out a video from a conditioning prefix.
    Sample(SampleArgs),
    /// Roll out with one box forced to a new position.
    Edit(EditArgs),
    /// Analytic FLOP report as JSON.
    Flops(FlopsArgs),
    /// Best-of-S evaluation against a test set.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    frames: usize,
    /// Objects per video (the maximum when --min-objects is given).
    #[arg(long)]
    objects: usize,
    /// Draw object counts uniformly from [min-objects, objects].
    #[arg(long)]
    min_objects: Option<usize>,
    #[arg(long)]
    bg_drift: bool,
}

#[derive(Args)]
struct TrainCodecArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// CSV training log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct TrainPriorArgs {
    #[arg(long)]
    data: PathBuf,
    /// Codec checkpoint; it is frozen and bundled into the output.
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.steps` from the config.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    /// Save the checkpoint every N steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    save_every: usize,
}

#[derive(Args)]
struct SampleArgs {
    /// Prior checkpoint (bundles the codec).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    horizon: usize,
    #[arg(long, default_value_t = 1)]
    cond_frames: usize,
    #[arg(long, default_value_t = 1)]
    cond_boxes: usize,
    /// 0 samples greedily.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    topk: Option<usize>,
    /// Forced box as `T:K:x,y,w,h` (or `T:K:absent`); repeatable.
    #[arg(long = "edit", value_parser = parse_edit)]
    edits: Vec<Edit>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    sample: SampleArgs,
    /// Frame index of the forced box.
    #[arg(long)]
    at: usize,
    /// Object slot.
    #[arg(long)]
    object: usize,
    /// `x,y,w,h` in normalized coordinates, or `absent`.
    #[arg(long = "box", value_parser = parse_coords)]
    bbox: BBox,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, default_value = "povt")]
    mode: FlopMode,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Start from the full-size model instead of the desk default.
    #[arg(long)]
    full_size: bool,
    /// Also report 3× the forward cost as a training estimate.
    #[arg(long)]
    train_estimate: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Rollouts per video.
    #[arg(long = "S", visible_alias = "samples", default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    cond_frames: usize,
    #[arg(long, default_value_t = 1)]
    cond_boxes: usize,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: Option<serde_json::Value>,
    codec: Option<serde_json::Value>,
    train: Option<serde_json::Value>,
    data: Option<serde_json::Value>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?)
            }
        }
    }

    /// Section `v` decoded over the type's defaults.
    fn section<T: for<'de> Deserialize<'de> + Default>(v: &Option<serde_json::Value>) -> CliResult<T> {
        Ok(match v {
            None => T::default(),
            Some(v) => serde_json::from_value(v.clone())?,
        })
    }
}

fn parse_coords(s: &str) -> Result<BBox, String> {
    if s.eq_ignore_ascii_case("absent") {
        return Ok(BBox::ABSENT);
    }
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != 4 {
        return Err(format!("expected x,y,w,h, got {s:?}"));
    }
    let b = BBox::present(v[0], v[1], v[2], v[3]);
    b.validate().map_err(|e| e.to_string())?;
    Ok(b)
}

fn parse_edit(s: &str) -> Result<Edit, String> {
    let mut it = s.splitn(3, ':');
    let (Some(at), Some(object), Some(coords)) = (it.next(), it.next(), it.next()) else {
        return Err(format!("expected T:K:x,y,w,h, got {s:?}"));
    };
    Ok(Edit {
        at: at.parse().map_err(|e| format!("time {at:?}: {e}"))?,
        object: object.parse().map_err(|e| format!("object {object:?}: {e}"))?,
        bbox: parse_coords(coords)?,
    })
}

fn sampling(temperature: f64, topk: Option<usize>) -> CliResult<SamplingConfig> {
    if !(temperature >= 0.0) {
        return Err(format!("temperature must be >= 0, got {temperature}").into());
    }
    if topk == Some(0) {
        return Err("--topk must be positive".into());
    }
    Ok(SamplingConfig {
        temperature,
        top_k: topk,
    })
}

fn load_data(path: &Path) -> CliResult<Vec<VideoSample>> {
    let (_, videos) = read_dataset(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(videos)
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn open_log(path: Option<&Path>) -> CliResult<Option<BufWriter<File>>> {
    Ok(match path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    })
}

fn gen_data(cli: &Cli, cfg: &FileConfig, a: &GenDataArgs) -> CliResult {
    let mut opts: GenOptions = FileConfig::section(&cfg.data)?;
    opts.bg_drift |= a.bg_drift;
    let lo = a.min_objects.unwrap_or(a.objects);
    let videos = gen_dataset(cli.seed, a.n, a.frames, lo..=a.objects, &opts)?;
    let header = write_dataset(&a.out, &videos)?;
    eprintln!("wrote {} videos of {} frames to {}", header.count, header.frames, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct CodecSummary {
    schema_version: u32,
    steps: usize,
    frames: usize,
    recon: f64,
    psnr: f64,
}

fn train_codec(cli: &Cli, cfg: &FileConfig, a: &TrainCodecArgs) -> CliResult {
    let ccfg: CodecConfig = FileConfig::section(&cfg.codec)?;
    let frames: Vec<_> = load_data(&a.data)?.into_iter().flat_map(|v| v.frames).collect();
    let mut tr = CodecTrainer::new(Codec::new(ccfg, cli.seed)?, cli.seed);
    let mut log = open_log(a.log.as_deref())?;
    let last = tr.run(&frames, a.steps, a.batch, log.as_mut().map(|w| w as &mut dyn Write), a.log_every)?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    tr.codec.to_checkpoint()?.save(&a.out)?;
    let recon = tr.codec.reconstruct(&frames)?;
    let summary = CodecSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        steps: tr.steps(),
        frames: frames.len(),
        recon: last.recon,
        psnr: mean_over_frames(&recon, &frames, psnr)?,
    };
    write_json(None, &summary)
}

#[derive(Serialize)]
struct PriorSummary {
    schema_version: u32,
    steps: usize,
    videos: usize,
    params: usize,
    nll: f64,
}

fn train_prior(cli: &Cli, cfg: &FileConfig, a: &TrainPriorArgs) -> CliResult {
    let codec = Codec::from_checkpoint(&load_ckpt(&a.codec)?)?;
    let mut mcfg: ModelConfig = FileConfig::section(&cfg.model)?;
    // The latent grid, vocabulary and channels always follow the codec.
    mcfg.latent_h = codec.cfg.latent_size;
    mcfg.latent_w = codec.cfg.latent_size;
    mcfg.vocab_z = codec.cfg.codebook_size;
    mcfg.channels = codec.cfg.channels;
    let mut tcfg: TrainConfig = FileConfig::section(&cfg.train)?;
    tcfg.seed = cli.seed;
    if let Some(s) = a.steps {
        tcfg.steps = s;
    }
    let videos = load_data(&a.data)?;
    let prepared = videos
        .iter()
        .map(|v| prepare_video(&codec, v, mcfg.k))
        .collect::<Result<Vec<_>, _>>()?;
    let prior = Prior::new(mcfg, cli.seed)?;
    let mut tr = PriorTrainer::new(prior, tcfg)?;
    let mut log = open_log(a.log.as_deref())?;
    let total = tr.cfg.steps;
    let chunk = if a.save_every == 0 { total.max(1) } else { a.save_every };
    while tr.steps() < total {
        let n = chunk.min(total - tr.steps());
        tr.run(&prepared, n, log.as_mut().map(|w| w as &mut dyn Write), a.log_every)?;
        if tr.steps() < total {
            tr.to_checkpoint(&codec)?.save(&a.out)?;
            tr.last_good = Some(a.out.clone());
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    tr.to_checkpoint(&codec)?.save(&a.out)?;
    let summary = PriorSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        steps: tr.steps(),
        videos: prepared.len(),
        params: tr.prior.params.num_scalars(),
        nll: dataset_nll(&tr.prior, &prepared)?.per_token(),
    };
    write_json(None, &summary)
}

fn sample(cli: &Cli, a: &SampleArgs, extra: Option<Edit>) -> CliResult {
    let (prior, codec) = load_bundle(&load_ckpt(&a.ckpt)?)?;
    let videos = load_data(&a.data)?;
    let video = videos
        .get(a.index)
        .ok_or_else(|| format!("index {} out of range for {} videos", a.index, videos.len()))?;
    let mut edits = a.edits.clone();
    edits.extend(extra);
    let g = generate(
        &prior,
        &codec,
        video,
        a.cond_frames,
        a.cond_boxes,
        a.horizon,
        &edits,
        sampling(a.temperature, a.topk)?,
        cli.seed,
    )?;
    fs::create_dir_all(&a.out)?;
    for (t, (f, o)) in g.frames.iter().zip(&g.overlays).enumerate() {
        output::write_ppm(&a.out.join(format!("frame_{t:03}.ppm")), f)?;
        output::write_ppm(&a.out.join(format!("overlay_{t:03}.ppm")), o)?;
    }
    let tracks = output::TrackFile::new(&g, cli.seed, a.index, a.cond_frames, a.cond_boxes, &edits);
    write_json(Some(&a.out.join("tracks.json")), &tracks)?;
    eprintln!("wrote {} frames to {}", g.frames.len(), a.out.display());
    Ok(())
}

fn flops(cfg: &FileConfig, a: &FlopsArgs) -> CliResult {
    let mcfg: ModelConfig = if a.full_size {
        let mut base = serde_json::to_value(ModelConfig::full_size())?;
        if let (Some(over), Some(obj)) = (cfg.model.as_ref().and_then(|v| v.as_object()), base.as_object_mut()) {
            for (k, v) in over {
                obj.insert(k.clone(), v.clone());
            }
        }
        serde_json::from_value(base)?
    } else {
        FileConfig::section(&cfg.model)?
    };
    let report = count_flops(&mcfg, a.mode, a.frames, a.train_estimate)?;
    write_json(a.out.as_deref(), &report)
}

fn eval(cli: &Cli, a: &EvalArgs) -> CliResult {
    let (prior, codec) = load_bundle(&load_ckpt(&a.ckpt)?)?;
    let videos = load_data(&a.data)?;
    let cfg = EvalConfig {
        samples: a.samples,
        cond_frames: a.cond_frames,
        cond_boxes: a.cond_boxes,
        horizon: a.horizon,
        sampling: sampling(a.temperature, a.topk)?,
        seed: cli.seed,
    };
    let report = evaluate_best_of_s(&prior, &codec, &videos, &cfg)?;
    write_json(Some(&a.out), &report)?;
    eprintln!(
        "psnr {:.3} dB, ssim {:.4}, nll {:.4} nats/token over {} videos",
        report.psnr, report.ssim, report.nll, report.videos
    );
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match &cli.cmd {
        Command::GenData(a) => gen_data(cli, &cfg, a),
        Command::TrainCodec(a) => train_codec(cli, &cfg, a),
        Command::TrainPrior(a) => train_prior(cli, &cfg, a),
        Command::Sample(a) => sample(cli, a, None),
        Command::Edit(a) => sample(
            cli,
            &a.sample,
            Some(Edit {
                at: a.at,
                object: a.object,
                bbox: a.bbox,
            }),
        ),
        Command::Flops(a) => flops(&cfg, a),
        Command::Eval(a) => eval(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
