use std::path::Path;
use std::sync::Arc;

use fundus_nn::layers::{ConvBnAct, ConvKind, MbConv, Mode};
use fundus_nn::{io, EfficientNetB0, Module, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn weighted_sum(y: &[f32], r: &[f32]) -> f64 {
    y.iter().zip(r).map(|(a, b)| *a as f64 * *b as f64).sum()
}

#[test]
fn trainable_parameter_count_matches_torchvision_features() {
    // torchvision efficientnet_b0().features has 4,007,548 parameters.
    let net = EfficientNetB0::new(0);
    assert_eq!(net.trainable_count(), 4_007_548);
    let names: Vec<_> = net.params().iter().map(|p| p.name.clone()).collect();
    assert!(names.contains(&"features.1.0.block.0.0.weight".to_string()));
    assert!(names.contains(&"features.2.0.block.2.fc1.weight".to_string()));
    assert!(names.contains(&"features.8.1.running_var".to_string()));
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len(), "parameter names must be unique");
}

#[test]
fn eval_forward_is_deterministic_and_shaped() {
    let mut net = EfficientNetB0::new(3);
    let x = random_tensor([2, 3, 64, 64], 1);
    let a = net.forward(x.clone(), &mut Mode::Eval);
    let b = net.forward(x, &mut Mode::Eval);
    assert_eq!(a.len(), 2 * 1280);
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
}

/// Train-mode gradient of `sum(out * r)` w.r.t. a few scalars, checked by
/// central differences. Batch-norm statistics are recomputed on every
/// forward, so perturbations flow through them too.
fn check_block<F>(mut forward: F, params_len: usize, tol: f64)
where
    F: FnMut(Option<(usize, f32)>, bool) -> (Vec<f32>, Vec<f32>),
{
    // The closure feeds `probe_for(len)` as the upstream gradient.
    let (y, grads) = forward(Some((usize::MAX, 0.0)), true);
    let r = probe_for(y.len()).into_vec();
    let eps = 5e-3f32;
    let step = (params_len / 12).max(1);
    let mut worst = 0.0f64;
    for i in (0..params_len).step_by(step) {
        let (yp, _) = forward(Some((i, eps)), false);
        let (ym, _) = forward(Some((i, -eps)), false);
        let fd = (weighted_sum(&yp, &r) - weighted_sum(&ym, &r)) / (2.0 * eps as f64);
        let an = grads[i] as f64;
        let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-2));
        worst = worst.max(err);
        assert!(err < tol, "param {i}: fd {fd} vs analytic {an}");
    }
    eprintln!("worst relative error {worst:.2e}");
}

fn probe_for(len: usize) -> Tensor {
    let r: Vec<f32> = (0..len).map(|i| ((i * 29 % 61) as f32 / 30.0) - 1.0).collect();
    Tensor::from_vec([1, 1, 1, len], r)
}

#[test]
fn conv_bn_silu_gradients_match_finite_differences() {
    for kind in [ConvKind::Dense { k: 3, stride: 2 }, ConvKind::Depthwise { k: 5, stride: 1 }, ConvKind::Pointwise] {
        let cin = 4;
        let cout = if matches!(kind, ConvKind::Depthwise { .. }) { 4 } else { 6 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = ConvBnAct::new("unit", kind, cin, cout, true, &mut rng);
        let x = random_tensor([3, cin, 6, 5], 2);
        let weights = base.weight.value.clone();
        let mut layer = base;
        layer.gamma.value.iter_mut().enumerate().for_each(|(i, g)| *g = 0.7 + 0.1 * i as f32);
        layer.beta.value.iter_mut().enumerate().for_each(|(i, b)| *b = 0.05 * i as f32 - 0.1);
        check_block(
            |perturb, backward| {
                layer.weight.value.copy_from_slice(&weights);
                if let Some((i, e)) = perturb {
                    if i < weights.len() {
                        layer.weight.value[i] += e;
                    }
                }
                layer.zero_grad();
                let y = layer.forward(Arc::new(x.clone()), &Mode::Train(&mut ChaCha8Rng::seed_from_u64(0)));
                if backward && perturb.is_some() {
                    let r = probe_for(y.len());
                    let dy = Tensor::from_vec(y.shape(), r.data().to_vec());
                    layer.backward(dy, true);
                } else {
                    layer.clear_cache();
                }
                (y.data().to_vec(), layer.weight.grad.clone())
            },
            weights.len(),
            2e-2,
        );
    }
}

#[test]
fn mbconv_block_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Residual block with expansion; stochastic depth off for a smooth loss.
    let mut block = MbConv::new("blk", 8, 8, 3, 3, 1, 0.0, &mut rng);
    let x = random_tensor([2, 8, 5, 5], 9);
    let names: Vec<String> = block.params().iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    for target in ["blk.block.0.0.weight", "blk.block.1.0.weight", "blk.block.2.fc1.weight", "blk.block.2.fc2.bias", "blk.block.3.1.weight"] {
        assert!(names.iter().any(|n| n == target), "{target} missing");
        let original = block.params().iter().find(|p| p.name == target).unwrap().value.clone();
        check_block(
            |perturb, backward| {
                for p in block.params_mut() {
                    if p.name == target {
                        p.value.copy_from_slice(&original);
                        if let Some((i, e)) = perturb {
                            if i < original.len() {
                                p.value[i] += e;
                            }
                        }
                    }
                }
                block.zero_grad();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let y = block.forward(Arc::new(x.clone()), &mut Mode::Train(&mut rng));
                if backward && perturb.is_some() {
                    let r = probe_for(y.len());
                    block.backward(Tensor::from_vec(y.shape(), r.data().to_vec()), true);
                } else {
                    block.clear_cache();
                }
                let g = block.params().iter().find(|p| p.name == target).unwrap().grad.clone();
                (y.data().to_vec(), g)
            },
            original.len(),
            2e-2,
        );
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = std::env::temp_dir().join(format!("fundus-nn-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("b0.safetensors");
    let net = EfficientNetB0::new(7);
    let mut meta = std::collections::HashMap::new();
    meta.insert("k".to_string(), "v".to_string());
    io::save(&net.params(), meta, &path).unwrap();
    let mut other = EfficientNetB0::new(8);
    let report = io::load_into(&mut other.params_mut(), &path).unwrap();
    assert!(report.unexpected.is_empty());
    for (a, b) in net.params().iter().zip(other.params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(io::read_metadata(&path).unwrap()["k"], "v");
    std::fs::remove_dir_all(dir).ok();
}

/// Parity with torchvision. Produce the inputs with
/// `python scripts/export_torchvision_b0.py W.safetensors --probe P.safetensors`
/// and point `FUNDUS_TORCHVISION_WEIGHTS` / `FUNDUS_TORCHVISION_PROBE` at them.
#[test]
fn matches_torchvision_eval_features_when_exported_weights_present() {
    let (Ok(w), Ok(p)) = (std::env::var("FUNDUS_TORCHVISION_WEIGHTS"), std::env::var("FUNDUS_TORCHVISION_PROBE")) else {
        eprintln!("skipping: torchvision export not configured");
        return;
    };
    let mut net = EfficientNetB0::new(0);
    let report = io::load_into(&mut net.params_mut(), Path::new(&w)).unwrap();
    assert!(report.unexpected.is_empty(), "{:?}", report.unexpected);

    let bytes = std::fs::read(&p).unwrap();
    let st = safetensors::SafeTensors::deserialize(&bytes).unwrap();
    let read = |name: &str| -> (Vec<usize>, Vec<f32>) {
        let v = st.tensor(name).unwrap();
        let data = v.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        (v.shape().to_vec(), data)
    };
    let (shape, input) = read("input");
    let (_, expected) = read("features");
    let x = Tensor::from_vec([shape[0], shape[1], shape[2], shape[3]], input);
    let got = net.forward(x, &mut Mode::Eval);
    let scale = expected.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let worst = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    eprintln!("max |diff| = {worst:e} (scale {scale})");
    assert!(worst <= 1e-4 * scale.max(1.0), "max abs diff {worst}");
}
