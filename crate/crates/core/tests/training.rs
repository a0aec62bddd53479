use causaltad::config::RunConfig;
use causaltad::data::Subset;
use causaltad::encoder::EncoderConfig;
use causaltad::error::Error;
use causaltad::head::{assign_targets, focal_loss, AssignmentConfig, Grid};
use causaltad::model::ModelSpec;
use causaltad::pipeline::{infer_all, Split};
use causaltad::synth::{synth_dataset, SynthConfig};
use causaltad::tape::{Gradients, ParamStore, Tape};
use causaltad::tensor::Matrix;
use causaltad::train::{train, AdamW, Checkpoint, TrainConfig};

fn fixture() -> (Split, ModelSpec) {
    let cfg = SynthConfig {
        num_videos: 12,
        val_videos: 4,
        length: 64,
        dim: 8,
        max_actions: 2,
        max_len: 16,
        ..Default::default()
    };
    let ds = synth_dataset(&cfg).unwrap();
    let spec = ModelSpec {
        input_dim: 8,
        num_classes: cfg.num_classes,
        encoder: EncoderConfig { levels: 3, dim: 16, heads: 2, ssm_state: 4, ..Default::default() },
    };
    (Split::from_synth(&ds, Subset::Train), spec)
}

fn tcfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 2, base_lr: 3e-3, warmup_epochs: 0.5, ..Default::default() }
}

#[test]
fn loss_halves_on_the_synthetic_fixture() {
    let (split, spec) = fixture();
    let cfg = TrainConfig { base_lr: 1e-2, ..tcfg(25) };
    let out = train(&split.train_videos(), &spec, &cfg, &AssignmentConfig::default(), serde_json::Value::Null).unwrap();
    let (first, last) = (out.epoch_losses[0], *out.epoch_losses.last().unwrap());
    assert!(last <= 0.5 * first, "losses {:?}", out.epoch_losses);
}

#[test]
fn single_video_classification_loss_overfits() {
    let (split, spec) = fixture();
    let video = split.train_videos().remove(0);
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 1,
        base_lr: 1e-2,
        lambda_reg: 0.0,
        weight_decay: 0.0,
        warmup_epochs: 5.0,
        ema_decay: 0.0,
        ..Default::default()
    };
    let out = train(std::slice::from_ref(&video), &spec, &cfg, &AssignmentConfig::default(), serde_json::Value::Null).unwrap();
    let last = *out.epoch_losses.last().unwrap();
    assert!(last < 0.01, "final loss {last}");

    // recompute the focal term alone from the trained weights
    let raw = out.detector.infer(&out.params, &video.sequence).unwrap();
    let grid = Grid::new(video.sequence.len(), spec.encoder.levels, video.sequence.feature_fps, video.sequence.duration_s).unwrap();
    let targets = assign_targets(&grid, &video.segments, &AssignmentConfig::default());
    let focal: f64 = raw
        .levels
        .iter()
        .zip(&targets.levels)
        .map(|(lv, t)| focal_loss(&lv.logits.cast::<f64>(), &t.classes))
        .sum::<f64>()
        / targets.num_positives().max(1) as f64;
    assert!(focal < 0.01, "focal {focal}");
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let (split, spec) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let out = train(&split.train_videos(), &spec, &tcfg(2), &AssignmentConfig::default(), serde_json::json!({"run": "x"})).unwrap();
        let path = dir.path().join(format!("run{run}.ckpt"));
        out.checkpoint.save(&path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let other = TrainConfig { seed: 1, ..tcfg(2) };
    let out = train(&split.train_videos(), &spec, &other, &AssignmentConfig::default(), serde_json::json!({"run": "x"})).unwrap();
    let path = dir.path().join("other.ckpt");
    out.checkpoint.save(&path).unwrap();
    assert_ne!(std::fs::read(&path).unwrap(), bytes[0]);
}

#[test]
fn checkpoint_round_trip_preserves_outputs_bit_exactly() {
    let (split, spec) = fixture();
    let out = train(&split.train_videos(), &spec, &tcfg(1), &AssignmentConfig::default(), RunConfig::default().to_json()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params, out.checkpoint.params);
    assert_eq!(loaded.ema, out.checkpoint.ema);
    assert_eq!(loaded.adam, out.checkpoint.adam);
    assert_eq!(loaded.step, out.checkpoint.step);
    assert_eq!(loaded.config, out.checkpoint.config);
    for ema in [false, true] {
        let (d1, s1) = out.checkpoint.detector(ema).unwrap();
        let (d2, s2) = loaded.detector(ema).unwrap();
        let a = infer_all(&d1, &s1, &split.sequences).unwrap();
        let b = infer_all(&d2, &s2, &split.sequences).unwrap();
        assert_eq!(a, b);
    }
    // raw weights in the checkpoint are the trained ones
    let (_, raw) = out.checkpoint.detector(false).unwrap();
    for (e, f) in raw.entries().iter().zip(out.params.entries()) {
        assert_eq!(e.value, f.value);
    }
}

#[test]
fn zero_ema_decay_tracks_raw_weights() {
    let (split, spec) = fixture();
    let cfg = TrainConfig { ema_decay: 0.0, ..tcfg(1) };
    let out = train(&split.train_videos(), &spec, &cfg, &AssignmentConfig::default(), serde_json::Value::Null).unwrap();
    for (e, p) in out.ema.entries().iter().zip(out.params.entries()) {
        assert_eq!(e.value.cast::<f32>(), p.value, "{}", e.name);
    }
}

/// Textbook AdamW at 64-bit: decoupled decay, then the bias-corrected moment update.
fn reference_adamw(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64, wd: f64) {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for i in 0..w.len() {
        w[i] *= 1.0 - lr * wd;
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / (1.0 - b1.powi(t));
        let vhat = v[i] / (1.0 - b2.powi(t));
        w[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

#[test]
fn adamw_matches_reference_over_several_steps() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", Matrix::from_vec(1, 4, vec![0.5, -1.0, 2.0, 0.0]).unwrap(), true);
    let mut adam = AdamW::new(&store);
    let mut w: Vec<f64> = store.get(id).as_slice().iter().map(|&x| x as f64).collect();
    let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
    for t in 1..=5 {
        let g = [0.3 * t as f64, -0.2, 1e-3, -4.0 / t as f64];
        let mut grads = Gradients::zeros_like(&store);
        {
            let mut tape = Tape::new(&store);
            let x = tape.param(id);
            let c = tape.constant(Matrix::from_vec(4, 1, g.iter().map(|&x| x as f32).collect()).unwrap());
            let l = tape.matmul(x, c).unwrap();
            grads.accumulate(&tape.backward(l).unwrap());
        }
        adam.step(&mut store, &grads, 1e-2, 0.05);
        let g32: Vec<f64> = g.iter().map(|&x| x as f32 as f64).collect();
        reference_adamw(&mut w, &g32, &mut m, &mut v, t, 1e-2, 0.05);
        for (a, b) in store.get(id).as_slice().iter().zip(&w) {
            assert!((*a as f64 - b).abs() < 1e-6, "step {t}: {a} vs {b}");
        }
    }
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let (split, spec) = fixture();
    let cfg = TrainConfig { base_lr: 1e30, warmup_epochs: 0.0, clip_grad_norm: 0.0, ..tcfg(3) };
    let err = train(&split.train_videos(), &spec, &cfg, &AssignmentConfig::default(), serde_json::Value::Null).unwrap_err();
    assert!(matches!(err, Error::DivergedAtStep { .. }), "{err}");
}

#[test]
fn cropping_long_videos_trains() {
    let (split, spec) = fixture();
    let cfg = TrainConfig { max_seq_len: Some(32), ..tcfg(2) };
    let a = train(&split.train_videos(), &spec, &cfg, &AssignmentConfig::default(), serde_json::Value::Null).unwrap();
    let b = train(&split.train_videos(), &spec, &cfg, &AssignmentConfig::default(), serde_json::Value::Null).unwrap();
    assert!(a.epoch_losses.iter().all(|l| l.is_finite()));
    assert_eq!(a.epoch_losses, b.epoch_losses);
}
