//! Self-checks run by `stylegrid check-properties`: numeric oracles for the
//! renderer and injection, mask amplification, gradients, checkpoint
//! round trips and parameter-group freezing.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{diff_names, Checkpoint, Header};
use crate::dsi::{inject_pixel, mask_amplify};
use crate::error::Result;
use crate::feature_renderer::{compositing_weights, render_pixel_feature};
use crate::gradcheck::{Fixture, Loss};
use crate::model;
use crate::params::ParamStore;
use crate::perceptual_encoder::StyleFeatures;
use crate::stats::pooled_activation;
use crate::tensor::Tensor;
use crate::trainer::{self, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Literal transmittance loop, kept separate from the renderer's running sum.
fn oracle_weights(sigmas: &[f64], deltas: &[f64]) -> Vec<f64> {
    let n = sigmas.len();
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..i {
            s += sigmas[j] * deltas[j];
        }
        w[i] = (-s).exp() * (1.0 - (-sigmas[i] * deltas[i]).exp());
    }
    w
}

/// Compositing weights and rendered features against the literal loop, and
/// `Σ ω = 1 − exp(−Σ σΔ)`.
pub fn compositing_oracle(draws: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut feat_err, mut sum_err) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let n = rng.gen_range(1..=8);
        let c = rng.gen_range(1..=4);
        let sigmas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..1.0)).collect();
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let w = compositing_weights(&sigmas, &deltas).expect("valid draw");
        let f = render_pixel_feature(&w, &feats).expect("valid draw");
        let ow = oracle_weights(&sigmas, &deltas);
        for k in 0..c {
            let mut expect = 0.0;
            for i in 0..n {
                expect += ow[i] * feats[i][k];
            }
            feat_err = feat_err.max((f[k] - expect).abs());
        }
        let depth: f64 = sigmas.iter().zip(&deltas).map(|(s, d)| s * d).sum();
        sum_err = sum_err.max((w.iter().sum::<f64>() - (1.0 - (-depth).exp())).abs());
    }
    Outcome::new(
        "compositing_oracle",
        feat_err <= 1e-12 && sum_err <= 1e-10,
        format!("{draws} draws, feature err {feat_err:.3e} (tol 1e-12), weight-sum err {sum_err:.3e} (tol 1e-10)"),
    )
}

/// `inject(Σ ω f̄) = Σ ω (f̄ ⊗ w) + b` in single precision.
pub fn injection_commutation(draws: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for _ in 0..draws {
        let n = rng.gen_range(1..=8);
        let c = rng.gen_range(1..=4);
        let sigmas: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let deltas: Vec<f32> = (0..n).map(|_| rng.gen_range(1e-3..1.0)).collect();
        let feats: Vec<Vec<f32>> = (0..n).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let w: Vec<f32> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f32> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let omega = compositing_weights(&sigmas, &deltas).expect("valid draw");
        let lhs = inject_pixel(&render_pixel_feature(&omega, &feats).expect("valid draw"), &w, &b);
        let zero = vec![0.0f32; c];
        let scaled: Vec<Vec<f32>> = feats.iter().map(|f| inject_pixel(f, &w, &zero)).collect();
        let mut rhs = render_pixel_feature(&omega, &scaled).expect("valid draw");
        for (r, bb) in rhs.iter_mut().zip(&b) {
            *r += bb;
        }
        for (l, r) in lhs.iter().zip(&rhs) {
            worst = worst.max((l - r).abs());
        }
    }
    Outcome::new(
        "injection_commutation",
        worst <= 1e-6,
        format!("{draws} draws in f32, max err {worst:.3e} (tol 1e-6)"),
    )
}

/// Constant feature maps masked to coverage 1, 1/2 and 1/4 keep their pooled
/// activation exactly after amplification.
pub fn mask_amplification(size: usize) -> Outcome {
    let value = 0.6;
    let channels = [3, 4, 5];
    let maps = [0, 1, 2].map(|l| {
        let s = size >> l;
        Tensor::full(&[channels[l], s, s], value)
    });
    let feats = StyleFeatures { maps };
    let masks: [(&str, Box<dyn Fn(usize, usize) -> bool>); 3] = [
        ("1", Box::new(|_, _| true)),
        ("1/2", Box::new(move |_, c| c < size / 2)),
        ("1/4", Box::new(move |r, c| r < size / 2 && c < size / 2)),
    ];
    let mut details = Vec::new();
    let mut passed = true;
    for (label, inside) in &masks {
        let mask: Vec<bool> = (0..size * size).map(|i| inside(i / size, i % size)).collect();
        match mask_amplify(&feats, &mask, size, size) {
            Ok(out) => {
                let exact = out
                    .maps
                    .iter()
                    .zip(&feats.maps)
                    .all(|(a, b)| pooled_activation(a) == pooled_activation(b));
                passed &= exact;
                details.push(format!("coverage {label}: {}", if exact { "exact" } else { "differs" }));
            }
            Err(e) => {
                passed = false;
                details.push(format!("coverage {label}: {e}"));
            }
        }
    }
    Outcome::new("mask_amplification", passed, details.join(", "))
}

/// Finite-difference checks of every loss against the tape.
pub fn gradient_checks(seed: u64, per_tensor: Option<usize>) -> Result<Vec<Outcome>> {
    let fixture = Fixture::new(seed)?;
    let params = fixture.parameter_count();
    let mut out = Vec::new();
    for loss in Loss::ALL {
        let probes = fixture.check(loss, per_tensor, seed)?;
        let kinks = probes.iter().filter(|p| p.crosses_kink()).count();
        let smooth: Vec<_> = probes.iter().filter(|p| !p.crosses_kink()).collect();
        let worst = smooth.iter().map(|p| p.rel_err()).fold(0.0, f64::max);
        let worst_abs = smooth.iter().map(|p| (p.analytic - p.numeric).abs()).fold(0.0, f64::max);
        let failing = smooth.iter().filter(|p| !p.passes()).count();
        let groups_hit = loss
            .groups()
            .iter()
            .all(|g| smooth.iter().any(|p| p.param.starts_with(g) && p.analytic != 0.0));
        out.push(Outcome::new(
            &format!("gradient_{}", loss.name()),
            failing == 0 && kinks * 20 <= probes.len() && groups_hit && params <= 2000,
            format!(
                "{} probes over {:?}, {params} params, worst rel err {worst:.3e} (tol 1e-4), max |analytic - numeric| {worst_abs:.3e}, {kinks} kink crossings excluded",
                probes.len(),
                loss.groups()
            ),
        ));
    }
    Ok(out)
}

/// Save → load → save of a checkpoint is byte-identical and the loaded
/// tensors equal the f32-quantized originals.
pub fn checkpoint_round_trip(ckpt: &Checkpoint, scratch: &Path) -> Result<Outcome> {
    let (a, b) = (scratch.join("a"), scratch.join("b"));
    ckpt.save(&a)?;
    let loaded = Checkpoint::load(&a)?;
    loaded.save(&b)?;
    let read = |p: &Path, f: &str| std::fs::read(p.join(f)).map_err(|e| crate::error::Error::io(p.join(f), e));
    let mut identical = true;
    for f in ["manifest.txt", crate::checkpoint::BLOB_FILE] {
        identical &= read(&a, f)? == read(&b, f)?;
    }
    let values = loaded == ckpt.quantized();
    Ok(Outcome::new(
        "checkpoint_round_trip",
        identical && values,
        format!(
            "{} tensors, files {}, values {}",
            ckpt.tensors.len(),
            if identical { "byte-identical" } else { "differ" },
            if values { "match" } else { "differ" }
        ),
    ))
}

/// Every changed tensor belongs to an allowed group, and at least one changed.
pub fn freeze_diff(name: &str, before: &ParamStore, after: &ParamStore, allowed: impl Fn(&str) -> bool) -> Outcome {
    let changed = diff_names(before, after);
    let stray: Vec<&String> = changed.iter().filter(|n| !allowed(n)).collect();
    Outcome::new(
        name,
        stray.is_empty() && !changed.is_empty(),
        if stray.is_empty() {
            format!("{} tensors changed, all trainable", changed.len())
        } else {
            format!("frozen tensors changed: {stray:?}")
        },
    )
}

/// A few steps of each stage on a tiny model, diffed for frozen groups.
pub fn training_freezes(seed: u64) -> Result<Vec<Outcome>> {
    let fixture = Fixture::new(seed)?;
    let cfg = TrainConfig {
        iterations: 2,
        seed,
        ..TrainConfig::default()
    };
    let mut m1 = fixture.model.clone();
    trainer::train_stage1(&mut m1, std::slice::from_ref(&fixture.view), &cfg)?;
    let mut m2 = m1.clone();
    trainer::train_stage2(
        &mut m2,
        &fixture.encoder,
        std::slice::from_ref(&fixture.content),
        std::slice::from_ref(&fixture.style),
        &cfg,
    )?;
    Ok(vec![
        freeze_diff("freeze_stage1", &fixture.model.params, &m1.params, |n| {
            model::is_adaptor_mlp(n) || model::is_decoder(n)
        }),
        freeze_diff("freeze_stage2", &m1.params, &m2.params, |n| {
            model::is_lin(n) || model::is_generator(n) || model::is_decoder(n)
        }),
    ])
}

/// A checkpoint of the gradient-check model, for round-trip checks without
/// a trained run.
pub fn sample_checkpoint(seed: u64) -> Result<Checkpoint> {
    let fixture = Fixture::new(seed)?;
    Ok(Checkpoint::new(Header::new("sample", "-", seed), fixture.model.params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_properties_pass() {
        for o in [compositing_oracle(200, 0), injection_commutation(200, 0), mask_amplification(16)] {
            assert!(o.passed, "{}", o.line());
        }
    }

    #[test]
    fn oracle_agrees_with_a_hand_case() {
        // σ = [1, 2], Δ = [0.5, 0.25]: ω = [1 − e^{−0.5}, e^{−0.5}(1 − e^{−0.5})].
        let w = oracle_weights(&[1.0, 2.0], &[0.5, 0.25]);
        let a = 1.0 - (-0.5f64).exp();
        assert!((w[0] - a).abs() < 1e-15 && (w[1] - (-0.5f64).exp() * a).abs() < 1e-15);
    }

    #[test]
    fn freezing_and_round_trip() {
        for o in training_freezes(0).unwrap() {
            assert!(o.passed, "{}", o.line());
        }
        let dir = tempfile::tempdir().unwrap();
        let o = checkpoint_round_trip(&sample_checkpoint(0).unwrap(), dir.path()).unwrap();
        assert!(o.passed, "{}", o.line());
    }

    #[test]
    fn freeze_diff_flags_stray_groups() {
        let mut a = ParamStore::new();
        a.insert("mlfa.x", Tensor::zeros(&[1]));
        a.insert("mlcd.y", Tensor::zeros(&[1]));
        let mut b = a.clone();
        b.insert("mlfa.x", Tensor::full(&[1], 1.0));
        assert!(!freeze_diff("t", &a, &b, model::is_decoder).passed);
        assert!(freeze_diff("t", &a, &b, model::is_adaptor_mlp).passed);
        assert!(!freeze_diff("t", &a, &a, model::is_adaptor_mlp).passed);
    }
}
