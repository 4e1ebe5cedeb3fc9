//! The side network against a plain-loop reference, its identity at
//! initialisation and the cached-prefix path.

use dtl_core::checks::{gaussian_images, jitter_trainable};
use dtl_core::csn::{a_name, c_name, G_BIAS, G_KERNEL};
use dtl_core::petl::{attach, AdaptedModel, AdapterSpec};
use dtl_core::vit::{block_forward, embed, NoHooks, ViT, ViTConfig};
use dtl_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

type Rows = Vec<Vec<f64>>;

/// `[B, T, d]` as one row per token.
fn rows(t: &Tensor<f64>) -> Rows {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn matrix(p: &ParamStore<f64>, name: &str) -> (Vec<f64>, usize) {
    let t = p.tensor(name).unwrap();
    (t.data().to_vec(), t.shape()[1])
}

fn times(x: &[f64], m: &(Vec<f64>, usize)) -> Vec<f64> {
    let (w, cols) = m;
    let mut out = vec![0.0; *cols];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..*cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

fn swish(x: f64, beta: f64) -> f64 {
    x / (1.0 + (-beta * x).exp())
}

/// Zero-padded cross-correlation of each channel over the patch grid; the
/// cls row (token 0 of each image) is passed through.
fn conv_patches(gated: &Rows, batch: usize, grid: usize, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Rows {
    let k = kernel.shape()[1];
    let r = (k / 2) as isize;
    let tokens = grid * grid + 1;
    let mut out = gated.clone();
    for b in 0..batch {
        for y in 0..grid as isize {
            for x in 0..grid as isize {
                let row = &mut out[b * tokens + 1 + (y as usize) * grid + x as usize];
                for (ch, v) in row.iter_mut().enumerate() {
                    let mut acc = bias.data()[ch];
                    for dy in 0..k as isize {
                        for dx in 0..k as isize {
                            let (sy, sx) = (y + dy - r, x + dx - r);
                            if sy < 0 || sx < 0 || sy >= grid as isize || sx >= grid as isize {
                                continue;
                            }
                            let src = gated[b * tokens + 1 + (sy as usize) * grid + sx as usize][ch];
                            acc += kernel.data()[ch * k * k + (dy as usize) * k + dx as usize] * src;
                        }
                    }
                    *v = acc;
                }
            }
        }
    }
    out
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) / (var + eps).sqrt() * g + b).collect()
}

/// Logits of a side-network model, with the side state, gate, convolution and
/// head written as loops. Only embedding and blocks come from the library.
fn reference(model: &AdaptedModel<f64>, images: &Tensor<f64>) -> Vec<Vec<f64>> {
    let cfg = &model.vit;
    let csn = model.spec.csn_config().unwrap();
    let p = &model.params;
    let batch = images.shape()[0];
    let mut g = Graph::inference();
    let z1 = embed(&mut g, cfg, p, images).unwrap();
    let mut z = g.value(z1).clone();
    let mut h: Rows = vec![vec![0.0; cfg.dim]; batch * cfg.n_tokens()];
    for i in 1..=cfg.depth {
        let (a, c) = (matrix(p, &a_name(i)), matrix(p, &c_name(i)));
        for (hr, zr) in h.iter_mut().zip(rows(&z)) {
            for (hv, dv) in hr.iter_mut().zip(times(&times(&zr, &a), &c)) {
                *hv += dv;
            }
        }
        let mut g = Graph::inference();
        let zin = g.constant(z.clone());
        let out = block_forward(&mut g, cfg, p, &NoHooks, i, zin).unwrap();
        let mut next = rows(g.value(out));
        if i >= csn.m {
            let gated: Rows = h.iter().map(|r| r.iter().map(|&v| swish(v, csn.beta)).collect()).collect();
            let side = match model.spec {
                AdapterSpec::DtlPlus { .. } => {
                    conv_patches(&gated, batch, cfg.grid_side(), p.tensor(G_KERNEL).unwrap(), p.tensor(G_BIAS).unwrap())
                }
                _ => gated,
            };
            for (nr, sr) in next.iter_mut().zip(&side) {
                for (nv, sv) in nr.iter_mut().zip(sr) {
                    *nv += sv;
                }
            }
        }
        z = Tensor::from_f64(z.shape(), &next.concat()).unwrap();
    }
    let (gamma, beta) = (p.tensor("norm.gamma").unwrap().data(), p.tensor("norm.beta").unwrap().data());
    let head = matrix(p, "head.w");
    let bias = p.tensor("head.b").unwrap().data();
    rows(&z)
        .chunks(cfg.n_tokens())
        .map(|image| {
            let feat = layer_norm(&image[0], gamma, beta, cfg.ln_eps);
            times(&feat, &head).iter().zip(bias).map(|(l, b)| l + b).collect()
        })
        .collect()
}

fn small() -> ViTConfig {
    ViTConfig { depth: 4, dim: 8, heads: 2, img: 12, patch: 4, mlp_ratio: 2, ..ViTConfig::micro() }
}

fn jittered(name: &str, m: usize, seed: u64) -> AdaptedModel<f64> {
    let cfg = small();
    let vit = ViT::<f64>::init(cfg.clone(), seed).unwrap();
    let spec = AdapterSpec::from_name(name, cfg.depth).unwrap().with_m(m);
    let mut model = attach(&spec, &vit, 3, seed).unwrap();
    jitter_trainable(&mut model.params, 0.3, seed + 100);
    model
}

fn logits(model: &AdaptedModel<f64>, images: &Tensor<f64>) -> Vec<Vec<f64>> {
    let mut g = Graph::inference();
    let out = model.forward(&mut g, images).unwrap();
    g.value(out).data().chunks(model.n_classes).map(<[f64]>::to_vec).collect()
}

fn assert_close(a: &[Vec<f64>], b: &[Vec<f64>], what: &str) {
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "{what}: {x} vs {y}");
        }
    }
}

#[test]
fn dtl_matches_reference_at_every_m() {
    let images = gaussian_images(&small(), 3, 4);
    for name in ["dtl", "dtl+"] {
        for m in 1..=5 {
            let model = jittered(name, m, 9);
            assert_close(&logits(&model, &images), &reference(&model, &images), &format!("{name} M={m}"));
        }
    }
}

/// The backbone alone with a linear head, reading the same parameter store.
fn probe_logits(model: &AdaptedModel<f64>, images: &Tensor<f64>) -> Tensor<f64> {
    let probe = AdaptedModel { spec: AdapterSpec::Linear, params: ParamStore::new(), ..model.clone() };
    let mut g = Graph::inference();
    let out = probe.forward_with(&mut g, &model.params, images).unwrap();
    g.value(out).clone()
}

#[test]
fn fresh_side_network_leaves_the_backbone_output_unchanged() {
    let cfg = small();
    let images = gaussian_images(&cfg, 2, 1);
    for name in ["dtl", "dtl+"] {
        for seed in 0..5 {
            let vit = ViT::<f64>::init(cfg.clone(), seed).unwrap();
            let model = attach(&AdapterSpec::from_name(name, cfg.depth).unwrap().with_m(1), &vit, 3, seed).unwrap();
            let mut g = Graph::inference();
            let out = model.forward(&mut g, &images).unwrap();
            assert!(g.value(out).bit_eq(&probe_logits(&model, &images)), "{name} seed {seed}");
        }
    }
}

#[test]
fn jittered_side_network_changes_the_output() {
    let images = gaussian_images(&small(), 2, 1);
    let model = jittered("dtl", 1, 3);
    assert!(!Tensor::from_f64(&[2, 3], &logits(&model, &images).concat()).unwrap().bit_eq(&probe_logits(&model, &images)));
}

#[test]
fn cached_prefix_reproduces_full_forward() {
    let images = gaussian_images(&small(), 3, 2);
    for name in ["dtl", "dtl+", "linear"] {
        for m in 2..=5 {
            let model = if name == "linear" { jittered(name, 0, 5) } else { jittered(name, m, 5) };
            let prefix = model.run_prefix(&model.params, &images).unwrap();
            let mut g = Graph::inference();
            let cached = model.forward_from(&mut g, &model.params, &prefix).unwrap();
            let cached = g.value(cached).clone();
            let mut g = Graph::inference();
            let full = model.forward(&mut g, &images).unwrap();
            assert!(g.value(full).bit_eq(&cached), "{name} M={m}");
        }
    }
}

#[test]
fn only_side_network_and_head_receive_gradients() {
    let images = gaussian_images(&small(), 2, 6);
    for name in ["dtl", "dtl+"] {
        let model = jittered(name, 2, 6);
        let mut g = Graph::train();
        let out = model.forward(&mut g, &images).unwrap();
        let loss = g.cross_entropy(out, &[0, 2]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.names().all(|n| n.starts_with("csn.") || n.starts_with("head.")), "{name}");
        assert_eq!(grads.len(), model.params.trainable().count(), "{name}");
    }
}

#[test]
fn dtl_plus_on_a_multi_stage_backbone_is_rejected() {
    let mut cfg = small();
    cfg.stages = vec![dtl_core::vit::StageSpec { start: 3, dim: 12 }];
    let vit = ViT::<f64>::init(cfg.clone(), 0).unwrap();
    assert!(attach(&AdapterSpec::from_name("dtl+", 4).unwrap(), &vit, 3, 0).is_err());
    assert!(attach(&AdapterSpec::from_name("dtl", 4).unwrap().with_m(2), &vit, 3, 0).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reference_agrees_for_random_models(seed in 0u64..1000, m in 1usize..=5, plus in any::<bool>()) {
        let name = if plus { "dtl+" } else { "dtl" };
        let model = jittered(name, m, seed);
        let images = gaussian_images(&small(), 2, seed + 1);
        let (a, b) = (logits(&model, &images), reference(&model, &images));
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
            }
        }
    }
}
