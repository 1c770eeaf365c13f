use revoicer_core::corpus::{render_clean, CorpusConfig};
use revoicer_core::dsp::MelConfig;
use revoicer_vc::convert::{convert_waveform, RenderOptions};
use revoicer_vc::model::{FeatureConfig, ModelConfig};
use revoicer_vc::tensor::Tensor;
use revoicer_vc::train::{extract_features, train, windowed_mean, TrainConfig, TrainItem};
use revoicer_vc::Error;

const MELS: usize = 20;

fn features() -> FeatureConfig {
    FeatureConfig {
        mel: MelConfig {
            n_mels: MELS,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn small_config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seed,
        crop_frames: 24,
        reseed_every: 250,
        model: ModelConfig {
            n_mels: MELS,
            encoder_channels: [24; 4],
            code_dim: 8,
            codes: 32,
            speaker_dim: 4,
            decoder_channels: 24,
            decoder_blocks: 2,
            ..Default::default()
        },
        adam: revoicer_vc::adam::AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Four synthetic speakers with `per_speaker` utterances each.
fn dataset(per_speaker: usize) -> (Vec<String>, Vec<TrainItem>) {
    let cc = CorpusConfig {
        duration_s: [1.0, 1.4],
        ..Default::default()
    };
    let mut items = vec![];
    for (si, s) in cc.speakers.iter().enumerate() {
        for i in 0..per_speaker {
            let w = render_clean(&cc, s, 500 + i as u64).unwrap();
            items.push(TrainItem {
                speaker: si,
                mel: extract_features(&w, &features()).unwrap().frames,
            });
        }
    }
    (cc.speakers.iter().map(|s| s.id.clone()).collect(), items)
}

#[test]
fn windowed_loss_at_5k_is_below_loss_at_500() {
    let (speakers, items) = dataset(10);
    let out = train(speakers, &items, features(), &small_config(5000, 1)).unwrap();
    let early = windowed_mean(&out.curve, 500, 500).unwrap();
    let late = windowed_mean(&out.curve, 5000, 500).unwrap();
    assert!(late < early, "loss window at 5k {late} vs at 500 {early}");
    assert!(out.curve.iter().all(|r| r.total.is_finite() && r.commit >= 0.0));
}

#[test]
fn same_seed_gives_identical_curves() {
    let (speakers, items) = dataset(10);
    let a = train(speakers.clone(), &items, features(), &small_config(120, 9)).unwrap();
    let b = train(speakers.clone(), &items, features(), &small_config(120, 9)).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.model, b.model);
    let c = train(speakers, &items, features(), &small_config(120, 10)).unwrap();
    assert_ne!(a.curve, c.curve);
}

#[test]
fn zero_beta_reports_commitment_without_optimizing_it() {
    let (speakers, items) = dataset(10);
    let mut cfg = small_config(60, 3);
    cfg.beta = 0.0;
    let out = train(speakers, &items, features(), &cfg).unwrap();
    for r in &out.curve {
        assert!(r.commit > 0.0 && r.commit.is_finite());
        assert_eq!(r.total, r.recon);
    }

    // gradients are affine in beta; the commitment part reaches the encoder only
    let m = &out.model;
    let x = Tensor::new(vec![2, 16, MELS], (0..2 * 16 * MELS).map(|i| ((i * 7 % 13) as f64 - 6.0) / 4.0).collect()).unwrap();
    let grads = |beta: f64| {
        let mut f = m.forward_train(&x, &[0, 1], beta, true).unwrap();
        f.graph.backward(f.loss).unwrap();
        f.graph.param_grads(&m.params)
    };
    let (g0, g1, g2) = (grads(0.0), grads(1.0), grads(2.0));
    let mut encoder_diff = 0.0f64;
    for (i, (_, name, _)) in m.params.iter().enumerate() {
        for ((a, b), c) in g0[i].iter().zip(&g1[i]).zip(&g2[i]) {
            assert!(((c - b) - (b - a)).abs() <= 1e-9 * (1.0 + c.abs()), "{name}");
            if name.starts_with("enc") {
                encoder_diff = encoder_diff.max((b - a).abs());
            } else {
                assert_eq!(a, b, "commitment gradient leaked into {name}");
            }
        }
    }
    assert!(encoder_diff > 0.0);
}

#[test]
fn too_few_speakers_or_utterances_rejected() {
    let (speakers, items) = dataset(10);
    let one: Vec<TrainItem> = items.iter().filter(|it| it.speaker == 0).cloned().collect();
    let e = train(speakers[..1].to_vec(), &one, features(), &small_config(5, 0)).unwrap_err();
    assert!(matches!(e, Error::Data(_)), "{e}");
    let mut short = items.clone();
    short.remove(0);
    let e = train(speakers, &short, features(), &small_config(5, 0)).unwrap_err();
    assert!(e.to_string().contains("9 training utterance"), "{e}");
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let (speakers, mut items) = dataset(10);
    let mut cfg = small_config(50, 0);
    cfg.adam.lr = 1e200;
    let e = train(speakers.clone(), &items, features(), &cfg).unwrap_err();
    assert!(e.to_string().contains("non-finite"), "{e}");

    items[3].mel[[5, 2]] = f64::NAN;
    let e = train(speakers, &items, features(), &small_config(5, 0)).unwrap_err();
    assert!(e.to_string().contains("non-finite"), "{e}");
}

#[test]
fn conversion_is_deterministic_and_keeps_length() {
    let (speakers, items) = dataset(10);
    let out = train(speakers, &items, features(), &small_config(100, 4)).unwrap();
    let cc = CorpusConfig::default();
    let src = render_clean(&cc, &cc.speakers[0], 77).unwrap();
    let opts = RenderOptions {
        griffin_lim_iters: 10,
        ..Default::default()
    };
    let a = convert_waveform(&out.model, &src, "spk2", &opts).unwrap();
    let b = convert_waveform(&out.model, &src, "spk2", &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), src.len());
    assert!(a.samples.iter().all(|v| v.is_finite()));
    let e = convert_waveform(&out.model, &src, "nobody", &opts).unwrap_err();
    assert!(matches!(e, Error::UnknownSpeaker(_)));
}
