use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mbtf_core::dsp::wav::{read_wav, read_wav_any_rate, write_wav, WavEncoding, NATIVE_RATE};
use mbtf_core::ipe::{trained_lambda, trained_stats, SpeakerEmbedding, SpeakerEncoder, ToySpeakerEncoder};
use mbtf_core::model::{default_chunk_frames, EnhanceMode, Enhancer};
use mbtf_core::nn::weights::OPTIM_PREFIX;
use mbtf_core::nn::{DType, ModelWeights};
use mbtf_core::simulate::{build_test_set, regenerate, Sources, TestSetKind};
use mbtf_core::training::{si_snr, toy_ipe_items, toy_sve_items, train_toy, Stage, TrainConfig, LOSS_LOG_HEADER};
use mbtf_core::{Error, MbtfConfig, Mbtfnet};

use crate::args::{Cli, Command, DTypeArg, EnhanceArgs, EvaluateArgs, InspectArgs, LambdaArg, Mode, SimulateArgs, StageArg, TrainArgs};
use crate::CliError;

/// SI-SNR values are reported up to this cap so identical signals give a finite number.
pub const SI_SNR_CAP_DB: f64 = 80.0;

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Enhance(a) => enhance(a),
        Command::Simulate(a) => simulate(a),
        Command::TrainToy(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn load_model(path: &Path) -> Result<(Mbtfnet, ModelWeights), CliError> {
    let loaded = ModelWeights::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Mbtfnet::from_weights(&loaded).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn is_wav(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn enhance(a: EnhanceArgs) -> Result<(), CliError> {
    let mode = match (a.mode, &a.enroll) {
        (None, Some(_)) | (Some(Mode::Pe), Some(_)) => Mode::Pe,
        (Some(Mode::Pe), None) => return Err(CliError::usage("--mode pe needs --enroll")),
        (Some(m), Some(_)) => return Err(CliError::usage(format!("--enroll selects pe mode and conflicts with --mode {m:?}"))),
        (Some(m), None) => m,
        (None, None) => Mode::SveIpe,
    };
    if mode != Mode::SveIpe && (a.lambda.is_some() || a.chunk_secs.is_some()) {
        return Err(CliError::usage("--lambda and --chunk-secs apply to sve+ipe mode only"));
    }
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(CliError::usage(format!("--alpha must lie in [0, 1], got {}", a.alpha)));
    }
    let (model, ws) = load_model(&a.weights)?;
    let audio = read_wav(&a.input, NATIVE_RATE, a.resample)?;
    let enh = Enhancer::new(&model, &ws)?;
    let mut sem = ToySpeakerEncoder::new();
    let em = match mode {
        Mode::Sve => EnhanceMode::Sve,
        Mode::SveIpe => {
            let lambda = match a.lambda.unwrap_or(LambdaArg::Trained) {
                LambdaArg::Value(v) => v,
                LambdaArg::Trained => trained_lambda(&ws)?.ok_or_else(|| {
                    CliError::data(format!("{} carries no trained lambda; pass --lambda", a.weights.display()))
                })?,
            };
            let spf = model.cfg.hop * model.cfg.num_bands;
            let chunk_frames = match a.chunk_secs {
                None => default_chunk_frames(model.cfg.hop, model.cfg.num_bands),
                Some(s) if s > 0.0 && s.is_finite() => ((s * NATIVE_RATE as f64) / spf as f64).ceil() as usize,
                Some(s) => return Err(CliError::usage(format!("--chunk-secs must be positive, got {s}"))),
            };
            EnhanceMode::Ipe { lambda, alpha: a.alpha, chunk_frames }
        }
        Mode::Pe => {
            let path = a.enroll.as_ref().expect("pe mode has an enrollment");
            let embedding = if is_wav(path) {
                sem.embed(&read_wav(path, NATIVE_RATE, a.resample)?)?
            } else {
                SpeakerEmbedding::load(path)?
            };
            EnhanceMode::Pe { embedding }
        }
    };
    let out = enh.enhance(&audio, &em, &mut sem)?;
    if a.verbose {
        if let EnhanceMode::Ipe { lambda, .. } = em {
            println!("lambda\t{lambda}");
        }
        println!("start_frame\tframes\tmean_score\tupdated");
        for c in &out.chunks {
            let tag = if c.accepted {
                "yes"
            } else if c.too_short {
                "short"
            } else {
                "no"
            };
            println!("{}\t{}\t{:.6}\t{tag}", c.start_frame, c.frames, c.mean_score);
        }
    }
    write_wav(&a.output, &out.audio, WavEncoding::Float32)?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let kind: TestSetKind = a.kind.parse()?;
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let sources = Sources::load(&a.vocals, a.accomps.as_deref(), a.noises.as_deref())?;
    let rows = match &a.regenerate {
        // a manifest that does not reproduce is bad input, not a fault of this program
        Some(manifest) => regenerate(manifest, &sources, &a.out).map_err(|e| match e {
            Error::State(m) => CliError::data(m),
            e => e.into(),
        })?,
        None => build_test_set(kind, &sources, a.count, a.seed, &a.out)?,
    };
    println!("{} items written to {}", rows.len(), a.out.display());
    Ok(())
}

fn read_model_config(path: &Path) -> Result<MbtfConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut cfg = MbtfConfig::toy();
    for (i, line) in text.lines().flat_map(|l| l.split(';')).map(str::trim).enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("{} entry {}: expected key=value", path.display(), i + 1)))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let stage = match a.stage {
        StageArg::Sve => Stage::Sve,
        StageArg::Ipe => Stage::Ipe,
    };
    let (model, start) = match (stage, &a.sve_weights, &a.model_config) {
        (Stage::Ipe, None, _) => return Err(Error::Config("the ipe stage needs --sve-weights".into()).into()),
        (_, Some(_), Some(_)) => {
            return Err(CliError::usage("--model-config conflicts with --sve-weights, which fix the topology"));
        }
        (_, Some(p), None) => {
            let (m, ws) = load_model(p)?;
            (m, Some(ws))
        }
        (_, None, cfg) => {
            let cfg = cfg.as_deref().map(read_model_config).transpose()?.unwrap_or_else(MbtfConfig::toy);
            (Mbtfnet::init(&cfg, a.seed)?.0, None)
        }
    };
    let items = match stage {
        Stage::Sve => toy_sve_items(a.items.unwrap_or(4), a.secs.unwrap_or(0.25), a.seed)?,
        Stage::Ipe => toy_ipe_items(a.items.unwrap_or(8), a.secs.unwrap_or(0.5), a.seed)?,
    };
    let tc = TrainConfig {
        steps: a.steps,
        seed: a.seed,
        eval_every: a.eval_every,
        target_gain_db: a.target_gain_db,
        ..TrainConfig::toy()
    };

    let mut log = match &a.loss_log {
        Some(p) => {
            let mut w = BufWriter::new(fs::File::create(p)?);
            writeln!(w, "{LOSS_LOG_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let mut log_err: Option<std::io::Error> = None;
    let outcome = train_toy(stage, &model, start, &items, &tc, |r| {
        if let (Some(w), None) = (log.as_mut(), &log_err) {
            if let Err(e) = writeln!(w, "{}", r.to_line()) {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }

    let dtype = match a.dtype {
        DTypeArg::F32 => DType::F32,
        DTypeArg::F64 => DType::F64,
    };
    outcome.checkpoint()?.save(&a.out, dtype)?;
    println!("stage\t{stage}\nsteps\t{}", outcome.steps_run);
    if let Some(e) = outcome.evals.last() {
        println!("baseline_si_snr_db\t{:.3}\noutput_si_snr_db\t{:.3}", e.baseline_db, e.output_db);
    }
    if let (Some(l), Some(s)) = (outcome.lambda_t, outcome.stats) {
        println!("lambda_t\t{l:.6}\nsnr_mean\t{:.6}\nsnr_std\t{:.6}", s.mean, s.std);
    }
    Ok(())
}

fn wav_names(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        if path.is_file() && is_wav(&path) {
            names.insert(path.file_name().expect("file").to_string_lossy().into_owned());
        }
    }
    Ok(names)
}

/// Per-item SI-SNR in dB (capped) for every file name present in both directories.
pub fn score_dirs(est: &Path, reference: &Path) -> Result<Vec<(String, f64)>, CliError> {
    let (e, r) = (wav_names(est)?, wav_names(reference)?);
    let common: Vec<&String> = e.intersection(&r).collect();
    if common.is_empty() {
        return Err(CliError::data(format!(
            "no WAV file names in common between {} and {}",
            est.display(),
            reference.display()
        )));
    }
    common
        .into_iter()
        .map(|name| {
            let x = read_wav_any_rate(est.join(name))?;
            let y = read_wav_any_rate(reference.join(name))?;
            if x.sample_rate() != y.sample_rate() || x.len() != y.len() {
                return Err(CliError::data(format!(
                    "{name}: estimate has {} samples at {} Hz, reference {} at {} Hz",
                    x.len(),
                    x.sample_rate(),
                    y.len(),
                    y.sample_rate()
                )));
            }
            Ok((name.clone(), si_snr(x.samples(), y.samples())?.min(SI_SNR_CAP_DB)))
        })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let rows = score_dirs(&a.est, &a.reference)?;
    let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:>9}", "item", "SI-SNR dB");
    for (name, v) in &rows {
        println!("{name:<width$}  {v:>9.3}");
    }
    println!("{:<width$}  {mean:>9.3}", "mean");
    if let Some(p) = &a.tsv {
        let mut w = BufWriter::new(fs::File::create(p)?);
        writeln!(w, "item\tsi_snr_db")?;
        for (name, v) in &rows {
            writeln!(w, "{name}\t{v:?}")?;
        }
        writeln!(w, "mean\t{mean:?}")?;
        w.flush()?;
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<(), CliError> {
    let path: &PathBuf = &a.weights;
    let ws = ModelWeights::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let cfg = MbtfConfig::from_topology(ws.topology()).map_err(|e| CliError::data(e.to_string()))?;
    let (sve, ipe) = Mbtfnet::param_counts(&ws);
    let optim = ws.ids().filter(|&id| ws.name(id).starts_with(OPTIM_PREFIX)).count();
    println!("topology\t{}", cfg.to_topology());
    println!("causal\t{}", cfg.causal);
    println!("tensors\t{}", ws.len() - optim);
    println!("optimizer_tensors\t{optim}");
    println!("sve_params\t{sve}\nipe_params\t{ipe}\ntotal_params\t{}", sve + ipe);
    for (k, v) in ws.metadata() {
        println!("{k}\t{v}");
    }
    if let Some(s) = trained_stats(&ws)? {
        println!("cleanliness_stats\tmean {:.6} std {:.6}", s.mean, s.std);
    }
    Ok(())
}
