use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use semitts::ablate::{format_table, run_ablation, AblationInputs};
use semitts::audio::{read_wav, synthetic_waveforms, write_wav};
use semitts::checkpoint::{load_model, CONFIG_FILE};
use semitts::config::{Config, SAMPLE_RATE};
use semitts::corpus::{
    generate_synthetic_corpus, load_corpus, read_manifest, resolve, sha256, write_corpus, write_manifest, LatentCache,
    ManifestRecord, SyntheticCorpusSpec, Utterance,
};
use semitts::dump::dump_hiddens;
use semitts::eval::{evaluate, EvalSettings};
use semitts::infer::{generate, Prompt, StopReason, SynthSettings};
use semitts::parallel::Exec;
use semitts::tensor::Tensor;
use semitts::train::{Trainer, FINAL_DIR};
use semitts::vae::{load_vae, Vae, VaeTrainer};
use semitts::{Error, Result};
use serde_json::json;

use crate::*;

pub fn run(cli: &Cli) -> Result<()> {
    let home = &cli.home;
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(home, a),
        Command::TrainVae(a) => train_vae(home, a),
        Command::EncodeLatents(a) => encode_latents(home, a),
        Command::VaeRoundtrip(a) => vae_roundtrip(home, a),
        Command::Synth(a) => synth(home, a),
        Command::Eval(a) => eval(home, a),
        Command::Ablate(a) => ablate(home, a),
        Command::DumpHiddens(a) => dump(home, a),
    }
}

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::NotFound(path.to_path_buf()))
    }
}

/// A run directory resolves to its `final` checkpoint.
fn checkpoint_dir(given: Option<&PathBuf>, home: &Path, default: &str) -> Result<PathBuf> {
    let p = given.cloned().unwrap_or_else(|| home.join(default));
    if p.join(CONFIG_FILE).exists() {
        Ok(p)
    } else if p.join(FINAL_DIR).join(CONFIG_FILE).exists() {
        Ok(p.join(FINAL_DIR))
    } else {
        Err(Error::NotFound(p.join(CONFIG_FILE)))
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(require(p)?),
        None => Ok(Config::default()),
    }
}

fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let spec = SyntheticCorpusSpec {
        num_utterances: a.num,
        text_length_range: (a.min_len, a.max_len),
        mapping_seed: a.mapping_seed,
        text_seed: a.text_seed,
        latent_pattern: a.pattern.into(),
        frames_per_token: a.frames_per_token,
        ..SyntheticCorpusSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, a.latent_dim)?;
    let manifest = write_corpus(&a.out, &corpus)?;
    let mut summary = json!({ "manifest": manifest, "utterances": corpus.len() });
    if a.heldout > 0 {
        let held = generate_synthetic_corpus(&spec.heldout(a.heldout), a.latent_dim)?;
        summary["heldout_manifest"] = json!(write_corpus(&a.out.join("heldout"), &held)?);
    }
    if a.waveforms > 0 {
        let samples = (a.waveform_seconds * SAMPLE_RATE as f64).round() as usize;
        let wav_dir = a.out.join("wavs");
        fs::create_dir_all(&wav_dir)?;
        let mut records = Vec::with_capacity(a.waveforms);
        for (i, clip) in synthetic_waveforms(a.waveforms, samples, a.waveform_seed)
            .iter()
            .enumerate()
        {
            let id = format!("clip{i:04}");
            let rel = format!("wavs/{id}.wav");
            write_wav(&a.out.join(&rel), clip)?;
            records.push(ManifestRecord {
                id: id.clone(),
                text: id,
                latent_path: None,
                wav_path: Some(rel),
                label: None,
            });
        }
        let wm = a.out.join("wav_manifest.jsonl");
        write_manifest(&wm, &records)?;
        summary["wav_manifest"] = json!(wm);
    }
    print_json(summary);
    Ok(())
}

fn train(home: &Path, a: &TrainArgs) -> Result<()> {
    let mut config = load_config(a.config.as_ref())?;
    if let Some(v) = &a.variant {
        config.train.ablation_variant = v.parse().map_err(|msg| Error::ConfigInvalid {
            key: "variant".into(),
            msg,
        })?;
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    let corpus = load_corpus(require(&a.corpus)?)?;
    if let Some(d) = corpus.first().map(|u| u.frames.cols()) {
        if d != config.model.latent_dim {
            info!(
                "latent_dim {} taken from the corpus (config said {})",
                d, config.model.latent_dim
            );
            config.model.latent_dim = d;
        }
    }
    config.validate()?;
    let out = a.out.clone().unwrap_or_else(|| home.join("lm"));
    let exec = Exec::default_mode();
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::resume(dir, &config, &corpus, exec)?,
        None => Trainer::new(&config, &corpus, exec)?,
    };
    info!(
        "training {} utterances for {} steps from step {} ({} parameters)",
        corpus.len(),
        trainer.total_steps(),
        trainer.state.step,
        trainer.model.params.num_scalars()
    );
    let every = a.log_every.max(1);
    let mut last = None;
    let final_dir = trainer.run(&out, a.until, |m| {
        if m.step % every == 0 {
            info!(
                "step {} lr {:.3e} flow {:.4} stop {:.4} acc {:.3} |g| {:.3}",
                m.step, m.lr, m.flow_loss, m.stop_loss, m.stop_accuracy, m.grad_norm
            );
        }
        last = Some(m.record());
    })?;
    print_json(json!({ "checkpoint": final_dir, "steps": trainer.state.step, "last": last }));
    Ok(())
}

fn read_wav_manifest(manifest: &Path) -> Result<Vec<(ManifestRecord, PathBuf)>> {
    read_manifest(require(manifest)?)?
        .into_iter()
        .map(|r| {
            let rel = r.wav_path.clone().ok_or_else(|| Error::MissingField {
                record: r.id.clone(),
                field: "wav_path".into(),
            })?;
            let path = resolve(manifest, &rel);
            Ok((r, path))
        })
        .collect()
}

fn train_vae(home: &Path, a: &TrainVaeArgs) -> Result<()> {
    let mut config = load_config(a.config.as_ref())?;
    if let Some(s) = a.steps {
        config.vae.steps = s;
    }
    let clips = read_wav_manifest(&a.wavs)?
        .iter()
        .map(|(_, p)| read_wav(p))
        .collect::<Result<Vec<_>>>()?;
    let out = a.out.clone().unwrap_or_else(|| home.join("vae"));
    let mut trainer = VaeTrainer::new(&config, clips, Exec::default_mode())?;
    info!(
        "training the VAE for {} steps (kl weight {})",
        config.vae.steps, config.vae.kl_weight
    );
    let every = a.log_every.max(1);
    let mut last = None;
    let dir = trainer.run(&out, |m| {
        if m.step % every == 0 {
            info!(
                "vae step {} mel {:.4} kl {:.3} |g| {:.3}",
                m.step, m.mel_loss, m.kl_loss, m.grad_norm
            );
        }
        last = Some(m.clone());
    })?;
    print_json(json!({ "checkpoint": dir, "steps": trainer.step, "last": last }));
    Ok(())
}

fn encode_latents(home: &Path, a: &EncodeLatentsArgs) -> Result<()> {
    let vae = load_vae(&checkpoint_dir(a.vae.as_ref(), home, "vae")?)?;
    let lat_dir = a.out.join("latents");
    fs::create_dir_all(&lat_dir)?;
    let mut records = Vec::new();
    for (rec, path) in read_wav_manifest(&a.manifest)? {
        let bytes = fs::read(&path)?;
        let frames = vae.encode_mean(&read_wav(&path)?)?;
        let rel = format!("latents/{}.lat", rec.id);
        LatentCache {
            source_hash: sha256(&bytes),
            frames,
        }
        .write(&a.out.join(&rel))?;
        records.push(ManifestRecord {
            latent_path: Some(rel),
            wav_path: Some(fs::canonicalize(&path)?.display().to_string()),
            ..rec
        });
    }
    let manifest = a.out.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    print_json(json!({ "manifest": manifest, "utterances": records.len(), "latent_dim": vae.latent_dim }));
    Ok(())
}

fn vae_roundtrip(home: &Path, a: &VaeRoundtripArgs) -> Result<()> {
    let vae = load_vae(&checkpoint_dir(a.vae.as_ref(), home, "vae")?)?;
    let x = read_wav(require(&a.input)?)?;
    let (latents, y) = match a.chunk_frames {
        None => {
            let z = vae.encode_mean(&x)?;
            let y = vae.decode(&z)?;
            (z, y)
        }
        Some(k) => stream_roundtrip(&vae, &x, k)?,
    };
    write_wav(&a.out, &y)?;
    print_json(json!({
        "frames": latents.rows(),
        "samples": y.len(),
        "mel_distance": vae.mel_distance(&x, &y),
    }));
    Ok(())
}

fn stream_roundtrip(vae: &Vae, x: &[f32], chunk_frames: usize) -> Result<(Tensor, Vec<f32>)> {
    if chunk_frames == 0 {
        return Err(Error::Config("chunk_frames must be at least 1".into()));
    }
    let hop = vae.hop();
    let usable = x.len() / hop * hop;
    if usable == 0 {
        return Err(Error::TooShort { len: x.len(), min: hop });
    }
    let mut enc = vae.stream_encoder();
    let mut dec = vae.stream_decoder();
    let mut frames = Vec::new();
    let mut y = Vec::with_capacity(usable);
    for chunk in x[..usable].chunks(chunk_frames * hop) {
        let z = enc.push(chunk)?;
        y.extend(dec.push(&z)?);
        frames.push(z);
    }
    let refs: Vec<&Tensor> = frames.iter().collect();
    Ok((Tensor::concat_rows(&refs), y))
}

fn synth(home: &Path, a: &SynthArgs) -> Result<()> {
    let model = load_model(&checkpoint_dir(a.checkpoint.as_ref(), home, "lm")?)?;
    let vae = load_vae(&checkpoint_dir(a.vae.as_ref(), home, "vae")?)?;
    if vae.latent_dim != model.config.latent_dim {
        return Err(Error::Mismatch(format!(
            "LM expects {}-dim latents, VAE produces {}",
            model.config.latent_dim, vae.latent_dim
        )));
    }
    let prompt = match (&a.prompt_audio, &a.prompt_text) {
        (Some(wav), Some(text)) => {
            let latents = vae.encode_mean(&read_wav(require(wav)?)?)?;
            let p = model.patch_size();
            if latents.rows() < p {
                return Err(Error::TooShort {
                    len: latents.rows() * vae.hop(),
                    min: p * vae.hop(),
                });
            }
            Some(Prompt {
                text: text.clone(),
                latents,
            })
        }
        _ => None,
    };
    let settings = SynthSettings {
        steps: a.steps,
        cfg_scale: a.cfg,
        seed: a.seed,
        max_patches: a.max_patches,
        use_stop: true,
    };
    let g = generate(&model, &a.text, prompt.as_ref(), settings)?;
    if g.patches == 0 {
        warn!("no patches generated; writing an empty waveform");
    }
    let samples = vae.decode(&g.latents)?;
    write_wav(&a.out, &samples)?;
    print_json(json!({
        "out": a.out,
        "patches": g.patches,
        "samples": samples.len(),
        "stop_reason": match g.stop_reason {
            StopReason::StopHead => "stop_head",
            StopReason::MaxPatches => "max_length",
        },
        "prompt_patches": prompt.as_ref().map_or(0, |p| p.latents.rows() / model.patch_size()),
    }));
    Ok(())
}

fn eval(home: &Path, a: &EvalArgs) -> Result<()> {
    let model = load_model(&checkpoint_dir(a.checkpoint.as_ref(), home, "lm")?)?;
    let corpus = load_corpus(require(&a.corpus)?)?;
    let settings = EvalSettings {
        steps: a.steps,
        cfg_scale: a.cfg,
        seed: a.seed,
        flow_draws: a.draws,
        generate: !a.no_generate,
        exec: Exec::default_mode(),
    };
    let report = evaluate(&model, &corpus, &settings)?;
    let table = report.to_table();
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("eval.json"), serde_json::to_vec_pretty(&report)?)?;
        fs::write(out.join("eval.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn load_optional_corpus(path: Option<&PathBuf>) -> Result<Vec<Utterance>> {
    path.map_or_else(|| Ok(Vec::new()), |p| load_corpus(require(p)?))
}

fn ablate(home: &Path, a: &AblateArgs) -> Result<()> {
    let config = load_config(a.config.as_ref())?;
    let corpus = load_corpus(require(&a.corpus)?)?;
    let heldout = load_optional_corpus(a.heldout.as_ref())?;
    let out = a.out.clone().unwrap_or_else(|| home.join("ablate"));
    let inputs = AblationInputs {
        base: &config,
        corpus: &corpus,
        heldout: &heldout,
        eval: EvalSettings {
            steps: a.steps,
            seed: a.seed,
            ..EvalSettings::default()
        },
        exec: Exec::default_mode(),
    };
    let rows = run_ablation(&inputs, &a.variants, &out, |r| {
        if r.ok {
            info!("{}: done{}", r.name, if r.cached { " (cached)" } else { "" });
        } else {
            warn!("{}: failed: {}", r.name, r.error.as_deref().unwrap_or(""));
        }
    })?;
    print!("{}", format_table(&rows));
    Ok(())
}

fn dump(home: &Path, a: &DumpArgs) -> Result<()> {
    let model = load_model(&checkpoint_dir(a.checkpoint.as_ref(), home, "lm")?)?;
    let corpus = load_corpus(require(&a.manifest)?)?;
    let records = dump_hiddens(&model, &corpus, &a.out)?;
    print_json(json!({ "out": a.out, "utterances": records.len() }));
    Ok(())
}
