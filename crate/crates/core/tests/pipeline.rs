use proptest::prelude::*;
use semitts::ablate::run_ablation;
use semitts::ablate::AblationInputs;
use semitts::audio::synthetic_waveforms;
use semitts::checkpoint::{load_model, read_archive};
use semitts::config::{Config, ModelConfig};
use semitts::corpus::{generate_synthetic_corpus, load_corpus, write_corpus, SyntheticCorpusSpec, Utterance};
use semitts::dump::{dump_hiddens, DUMP_INDEX};
use semitts::eval::{evaluate, EvalSettings};
use semitts::infer::{generate, Prompt, StopReason, SynthSettings};
use semitts::parallel::Exec;
use semitts::tensor::Tensor;
use semitts::train::{Trainer, FINAL_DIR};
use semitts::vae::{load_vae, save_vae, Vae, VaeTrainer};
use semitts::Error;

fn tiny() -> Config {
    let mut c = Config {
        model: ModelConfig {
            model_dim: 32,
            heads: 2,
            ffn_dim: 64,
            tslm_layers: 1,
            ralm_layers: 1,
            locenc_layers: 1,
            locdit_layers: 1,
            fsq_dim: 8,
            stop_hidden: 32,
            ..ModelConfig::default()
        },
        ..Config::default()
    };
    c.train.warmup_steps = 2;
    c.train.stable_steps = 4;
    c.train.decay_steps = 2;
    c.train.batch_patches = 32;
    c.train.checkpoint_every = 0;
    c.vae.channels = vec![4, 8, 8, 8, 8];
    c.vae.batch = 2;
    c.vae.segment_frames = 4;
    c
}

fn small_corpus(n: usize) -> Vec<Utterance> {
    let spec = SyntheticCorpusSpec {
        num_utterances: n,
        ..SyntheticCorpusSpec::default()
    };
    generate_synthetic_corpus(&spec, 16).unwrap()
}

fn trained(config: &Config, corpus: &[Utterance]) -> Trainer {
    let mut t = Trainer::new(config, corpus, Exec::default_mode()).unwrap();
    while !t.is_done() {
        t.step().unwrap();
    }
    t
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(5);
    let manifest = write_corpus(dir.path(), &corpus).unwrap();
    assert_eq!(load_corpus(&manifest).unwrap(), corpus);
}

#[test]
fn saved_model_generates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(6);
    let mut t = Trainer::new(&tiny(), &corpus, Exec::default_mode()).unwrap();
    let final_dir = t.run(dir.path(), None, |_| {}).unwrap();
    assert_eq!(final_dir, dir.path().join(FINAL_DIR));
    let loaded = load_model(&final_dir).unwrap();
    let settings = SynthSettings {
        steps: 3,
        max_patches: Some(5),
        use_stop: false,
        ..SynthSettings::default()
    };
    let a = generate(&t.model, "abc", None, settings).unwrap();
    let b = generate(&loaded, "abc", None, settings).unwrap();
    assert_eq!(a.latents, b.latents);
    assert_eq!(a.patches, 5);
    assert_eq!(a.stop_reason, StopReason::MaxPatches);
}

#[test]
fn resume_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(4);
    let mut t = Trainer::new(&tiny(), &corpus, Exec::default_mode()).unwrap();
    t.step().unwrap();
    t.save(dir.path()).unwrap();
    let mut other = tiny();
    other.train.peak_lr *= 2.0;
    match Trainer::resume(dir.path(), &other, &corpus, Exec::default_mode()) {
        Err(Error::Mismatch(msg)) => assert!(msg.contains("peak_lr"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("resume accepted a changed config"),
    }
}

#[test]
fn prompt_patches_are_not_emitted() {
    let corpus = small_corpus(4);
    let t = trained(&tiny(), &corpus);
    let prompt = Prompt {
        text: corpus[0].text.clone(),
        latents: corpus[0].frames.slice_rows(0, 4),
    };
    let settings = SynthSettings {
        steps: 2,
        max_patches: Some(3),
        use_stop: false,
        ..SynthSettings::default()
    };
    let g = generate(&t.model, "xyz", Some(&prompt), settings).unwrap();
    assert_eq!(g.patches, 3);
    assert_eq!(g.latents.rows(), 3 * t.model.patch_size());
    let bad = Prompt {
        text: "a".into(),
        latents: Tensor::zeros(4, 7),
    };
    assert!(generate(&t.model, "xyz", Some(&bad), settings).is_err());
}

#[test]
fn eval_aggregates_follow_the_rows() {
    let corpus = small_corpus(5);
    let t = trained(&tiny(), &corpus);
    let settings = EvalSettings {
        steps: 2,
        flow_draws: 2,
        ..EvalSettings::default()
    };
    let r = evaluate(&t.model, &corpus, &settings).unwrap();
    assert_eq!(r.utterances.len(), 5);
    let frames: usize = r.utterances.iter().map(|u| u.frames).sum();
    let flow: f64 = r.utterances.iter().map(|u| u.flow_loss * u.frames as f64).sum::<f64>() / frames as f64;
    assert!((flow - r.flow_loss).abs() < 1e-12);
    let patches: usize = r.utterances.iter().map(|u| u.target_patches).sum();
    let correct: usize = r.utterances.iter().map(|u| u.stop_correct).sum();
    assert_eq!(r.stop_accuracy, correct as f64 / patches as f64);
    assert!(r.generation_mse.unwrap().is_finite());

    let sequential = evaluate(
        &t.model,
        &corpus,
        &EvalSettings {
            exec: Exec::Sequential,
            ..settings
        },
    )
    .unwrap();
    assert_eq!(sequential.flow_loss.to_bits(), r.flow_loss.to_bits());
    assert_eq!(sequential.generation_mse, r.generation_mse);
}

#[test]
fn dumped_hiddens_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(3);
    let config = tiny();
    let t = trained(&config, &corpus);
    let records = dump_hiddens(&t.model, &corpus, dir.path()).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(
        std::fs::read_to_string(dir.path().join(DUMP_INDEX))
            .unwrap()
            .lines()
            .count(),
        3
    );
    let lattice = t.model.backbone.fsq.lattice();
    for (rec, u) in records.iter().zip(&corpus) {
        assert_eq!(rec.patches, u.num_patches(2));
        let entries = read_archive(&dir.path().join(&rec.file)).unwrap();
        let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["skeleton_up", "residual", "pre_q", "lattice_vec"]);
        let lv = &entries[3].1;
        assert_eq!((lv.rows(), lv.cols()), (rec.patches, config.model.fsq_dim));
        assert!(lattice.contains(lv.data(), 1e-9));
    }
}

#[test]
fn ablation_rows_are_cached_by_config() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(4);
    let config = tiny();
    let inputs = AblationInputs {
        base: &config,
        corpus: &corpus,
        heldout: &[],
        eval: EvalSettings {
            steps: 2,
            flow_draws: 1,
            ..EvalSettings::default()
        },
        exec: Exec::default_mode(),
    };
    let names = vec!["none".to_string(), "skeleton_only".to_string(), "d4".to_string()];
    let first = run_ablation(&inputs, &names, dir.path(), |_| {}).unwrap();
    assert!(first.iter().all(|r| r.ok && !r.cached));
    assert_eq!(first[2].fsq_dim, 4);
    assert!(first[0].heldout_generation_mse.is_none());
    let second = run_ablation(&inputs, &names[1..], dir.path(), |_| {}).unwrap();
    assert!(second.iter().all(|r| r.cached));
    assert_eq!(second[0].flow_loss, first[1].flow_loss);
    assert!(matches!(
        run_ablation(&inputs, &["d3x".to_string()], dir.path(), |_| {}),
        Err(Error::ConfigInvalid { .. })
    ));
}

#[test]
fn vae_checkpoint_round_trip_and_training_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny();
    config.vae.steps = 4;
    let clips = synthetic_waveforms(3, 4 * 640, 1);
    let mut trainer = VaeTrainer::new(&config, clips.clone(), Exec::default_mode()).unwrap();
    let mut seen = Vec::new();
    let out = trainer.run(dir.path(), |m| seen.push(m.clone())).unwrap();
    assert_eq!(seen.len(), 4);
    assert!(seen.iter().all(|m| m.mel_loss.is_finite() && m.grad_norm > 0.0));
    let vae = load_vae(&out).unwrap();
    let z = vae.encode_mean(&clips[0]).unwrap();
    assert_eq!(z.rows(), 4);

    let fresh = Vae::new(&config.vae, 16).unwrap();
    let again = dir.path().join("copy");
    save_vae(&again, &config, &fresh).unwrap();
    let back = load_vae(&again).unwrap();
    assert_eq!(back.decode(&z).unwrap(), fresh.decode(&z).unwrap());
    assert!(VaeTrainer::new(&config, Vec::new(), Exec::default_mode()).is_err());
}

fn vae() -> &'static Vae {
    use std::sync::OnceLock;
    static VAE: OnceLock<Vae> = OnceLock::new();
    VAE.get_or_init(|| Vae::new(&tiny().vae, 4).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frame_count_is_floor_of_hop(extra in 0usize..640, frames in 1usize..6) {
        let v = vae();
        let x = vec![0.1f32; frames * 640 + extra];
        prop_assert_eq!(v.encode_mean(&x).unwrap().rows(), frames);
        prop_assert_eq!(v.decode(&Tensor::zeros(frames, 4)).unwrap().len(), frames * 640);
    }

    #[test]
    fn streaming_matches_any_chunking(chunks in proptest::collection::vec(1usize..4, 1..6), seed in 0u64..1000) {
        let v = vae();
        let total: usize = chunks.iter().sum();
        let x = synthetic_waveforms(1, total * 640, seed).remove(0);
        let full = v.encode_mean(&x).unwrap();
        let mut enc = v.stream_encoder();
        let mut at = 0;
        for k in chunks {
            let z = enc.push(&x[at * 640..(at + k) * 640]).unwrap();
            prop_assert_eq!(z, full.slice_rows(at, k));
            at += k;
        }
    }
}
