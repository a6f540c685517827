//! Subcommands. Each writes its text-line report to `out`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vnsc::config::{KeyValues, ModelConfig, Scenario};
use vnsc::dsp::{add_noise, read_wav, ssnr, write_wav, SAMPLE_RATE};
use vnsc::training::{
    configs_from_kv, load_checkpoint, load_model, make_toy_dataset_with, save_checkpoint, train_epoch, LossReport,
    OptimizerState, ToyConfig, TrainConfig, Utterance,
};
use vnsc::vision::LipClip;
use vnsc::{Model, Result, VnscError};

use crate::bitstream::{mode_supported, BitstreamHeader, EncodedBitstream, HEADER_BYTES};

#[derive(Debug, Parser)]
#[command(name = "vnsc", version, about = "Vision-integrated neural speech codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a 48 kHz WAV file into a bitstream.
    Encode(EncodeArgs),
    /// Decode a bitstream into a 48 kHz WAV file.
    Decode(DecodeArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Report SSNR and MSE of a degraded or encoded-decoded signal.
    Eval(EvalArgs),
    /// Write an untrained checkpoint.
    Init(InitArgs),
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    s.parse::<Scenario>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Lip video (`VNSCLIPS`), required in VA mode.
    #[arg(long)]
    pub lips: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    /// audio, va or vua; defaults to the model's scenario.
    #[arg(long, value_parser = parse_scenario)]
    pub mode: Option<Scenario>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key=value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `toy` or a directory of `<name>.wav` files with `<name>.lips` clips.
    #[arg(long)]
    pub data: String,
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Scenario,
    /// Checkpoint directory, rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total epochs, overriding the configuration.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Utterances in the toy corpus.
    #[arg(long, default_value_t = 8)]
    pub toy_utts: usize,
    /// Seconds per toy utterance.
    #[arg(long, default_value_t = 1.0)]
    pub toy_duration: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Clean reference.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Degraded signal compared with `--ref`.
    #[arg(long)]
    pub deg: Option<PathBuf>,
    /// Checkpoint for an encode-decode round trip of `--in`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub lips: Option<PathBuf>,
    #[arg(long, value_parser = parse_scenario)]
    pub mode: Option<Scenario>,
    /// Add white noise at this SNR before encoding.
    #[arg(long)]
    pub noise_snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Scenario,
    /// Optional `key=value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::Encode(a) => encode(&a, out),
        Command::Decode(a) => decode(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Init(a) => init(&a, out),
    }
}

fn resolve_mode(model: &Model, mode: Option<Scenario>) -> Result<Scenario> {
    let mode = mode.unwrap_or(model.cfg.scenario);
    if !mode_supported(model.cfg.scenario, mode) {
        return Err(VnscError::Usage(format!(
            "{mode} mode is not available with a {} model",
            model.cfg.scenario
        )));
    }
    Ok(mode)
}

fn read_lips(mode: Scenario, lips: Option<&Path>) -> Result<Option<LipClip>> {
    match (mode, lips) {
        (Scenario::Va, Some(p)) => Ok(Some(LipClip::load(p)?)),
        (Scenario::Va, None) => Err(VnscError::Usage("VA mode requires --lips".into())),
        (_, Some(_)) => Err(VnscError::Usage(format!("{mode} mode does not take --lips"))),
        (_, None) => Ok(None),
    }
}

/// Encodes `samples` with `model` in `mode`.
pub fn encode_samples(model: &Model, mode: Scenario, samples: &[f32], lips: Option<&LipClip>) -> Result<EncodedBitstream> {
    if !mode_supported(model.cfg.scenario, mode) {
        return Err(VnscError::Usage(format!(
            "{mode} mode is not available with a {} model",
            model.cfg.scenario
        )));
    }
    // A VUA model encodes from speech alone, so its audio-only codes are
    // the VUA codes.
    let enc = model.encode_waveform(samples, lips)?;
    let header = BitstreamHeader::for_model(&model.cfg, mode, enc.n_latent_frames)?;
    EncodedBitstream::new(header, enc.indices)
}

/// Decodes `stream` after checking it against the model configuration.
pub fn decode_stream(model: &Model, stream: &EncodedBitstream) -> Result<Vec<f32>> {
    stream.header.check_model(&model.cfg)?;
    model.decode_waveform(&stream.indices)
}

fn encode(a: &EncodeArgs, out: &mut impl Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let mode = resolve_mode(&model, a.mode)?;
    let lips = read_lips(mode, a.lips.as_deref())?;
    let samples = read_wav(&a.input)?;
    let stream = encode_samples(&model, mode, &samples, lips.as_ref())?;
    stream.save(&a.out)?;
    let bits = stream.header.payload_bits();
    let seconds = samples.len() as f64 / SAMPLE_RATE as f64;
    writeln!(
        out,
        "mode={mode} latent_frames={} payload_bits={bits} header_bytes={HEADER_BYTES} duration_s={seconds:.3} bitrate_bps={:.1}",
        stream.header.n_latent_frames,
        bits as f64 / seconds.max(f64::MIN_POSITIVE)
    )?;
    Ok(())
}

fn decode(a: &DecodeArgs, out: &mut impl Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let stream = EncodedBitstream::load(&a.input)?;
    let samples = decode_stream(&model, &stream)?;
    write_wav(&a.out, &samples)?;
    writeln!(out, "mode={} samples={}", stream.header.mode, samples.len())?;
    Ok(())
}

fn read_config_file(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::parse(&std::fs::read_to_string(p)?),
        None => Ok(KeyValues::default()),
    }
}

fn configs(scenario: Scenario, file: Option<&Path>, seed: Option<u64>) -> Result<(ModelConfig, TrainConfig)> {
    let mut kv = read_config_file(file)?;
    if let Some(s) = kv.get("scenario") {
        if s.parse::<Scenario>()? != scenario {
            return Err(VnscError::Usage(format!(
                "config file scenario `{s}` contradicts --scenario {scenario}"
            )));
        }
    }
    kv.set("scenario", scenario);
    if let Some(seed) = seed {
        kv.set("seed", seed);
    }
    configs_from_kv(&kv)
}

fn load_dataset(data: &str, cfg: &ModelConfig, train: &TrainConfig, a: &TrainArgs) -> Result<Vec<Utterance>> {
    if data == "toy" {
        let toy = ToyConfig {
            image_size: cfg.vision.image_size,
            ..ToyConfig::default()
        };
        return Ok(make_toy_dataset_with(train.seed, a.toy_utts, a.toy_duration, &toy));
    }
    let dir = Path::new(data);
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "wav"))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(VnscError::Format(format!("no .wav files in `{}`", dir.display())));
    }
    wavs.iter()
        .map(|w| {
            let samples = read_wav(w)?;
            let lips_path = w.with_extension("lips");
            let lips = if lips_path.exists() {
                LipClip::load(&lips_path)?
            } else if cfg.scenario.uses_vision() {
                return Err(VnscError::Format(format!("missing lip clip `{}`", lips_path.display())));
            } else {
                LipClip {
                    fps_num: 1,
                    fps_den: 1,
                    frames: vnsc_tensor::Tensor::zeros(&[1, 1, 1]),
                }
            };
            Ok(Utterance { samples, lips })
        })
        .collect()
}

fn train(a: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let (mut model, mut opt, mut cfg) = match &a.resume {
        Some(dir) => {
            let (model, opt, cfg) = load_checkpoint(dir)?;
            if model.cfg.scenario != a.scenario {
                return Err(VnscError::Usage(format!(
                    "checkpoint is a {} model, --scenario is {}",
                    model.cfg.scenario, a.scenario
                )));
            }
            (model, opt, cfg)
        }
        None => {
            let (model_cfg, cfg) = configs(a.scenario, a.config.as_deref(), a.seed)?;
            let model = Model::new(model_cfg, cfg.seed)?;
            (model, OptimizerState::new(cfg.optimizer), cfg)
        }
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let data = load_dataset(&a.data, &model.cfg, &cfg, a)?;
    while (opt.epoch as usize) < cfg.epochs {
        let epoch = opt.epoch;
        let reports = train_epoch(&mut model, &mut opt, &cfg, &data, |_, _| {})?;
        let mean = LossReport::mean(&reports);
        writeln!(out, "epoch={} step={} lr={:.6e} {mean}", epoch + 1, opt.step, opt.learning_rate())?;
        save_checkpoint(&a.out, &model, &opt, &cfg)?;
    }
    if cfg.epochs == 0 || !a.out.join(vnsc::training::PARAMS_FILE).exists() {
        save_checkpoint(&a.out, &model, &opt, &cfg)?;
    }
    Ok(())
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len()).max(1);
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n as f64
}

fn eval(a: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let (clean, degraded) = match (&a.reference, &a.deg, &a.model, &a.input) {
        (Some(r), Some(d), None, None) => (read_wav(r)?, read_wav(d)?),
        (_, None, Some(m), Some(i)) => {
            let model = load_model(m)?;
            let mode = resolve_mode(&model, a.mode)?;
            let lips = read_lips(mode, a.lips.as_deref())?;
            let clean = match &a.reference {
                Some(r) => read_wav(r)?,
                None => read_wav(i)?,
            };
            let input = read_wav(i)?;
            let input = match a.noise_snr {
                Some(snr) => add_noise(&input, snr, a.seed)?,
                None => input,
            };
            let stream = encode_samples(&model, mode, &input, lips.as_ref())?;
            (clean, decode_stream(&model, &stream)?)
        }
        _ => {
            return Err(VnscError::Usage(
                "give either --ref and --deg, or --model and --in".into(),
            ))
        }
    };
    // Decoded signals are padded to whole latent frames; compare the overlap.
    let n = clean.len().min(degraded.len());
    writeln!(
        out,
        "ssnr_db={:.4} mse={:.6e} samples={n}",
        ssnr(&clean[..n], &degraded[..n]),
        mse(&clean[..n], &degraded[..n])
    )?;
    Ok(())
}

fn init(a: &InitArgs, out: &mut impl Write) -> Result<()> {
    let (model_cfg, cfg) = configs(a.scenario, a.config.as_deref(), Some(a.seed))?;
    let model = Model::new(model_cfg, a.seed)?;
    let opt = OptimizerState::new(cfg.optimizer);
    save_checkpoint(&a.out, &model, &opt, &cfg)?;
    writeln!(out, "scenario={} parameters={}", a.scenario, model.params.scalar_count())?;
    Ok(())
}
