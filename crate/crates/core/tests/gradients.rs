mod common;

use common::*;
use mswa::attention::{
    causal_attention, mswa_layer, multi_head_attention, multi_head_linear_attention, swa_attention, taylor2_features,
    AttentionParams, Execution, FeatureMapConfig, HeadLayout,
};
use mswa::model::{Model, ModelConfig};
use mswa::numerics::nn;
use mswa::plan::Strategy;
use mswa::Tensor;

const TOL: f64 = 1e-4;

/// Scalar probe `Σ out ⊙ c` with a fixed random `c`, so every output
/// coordinate contributes a distinct weight.
fn probe(out: &Tensor, seed: u64) -> Tensor {
    let c = random(&mut rng(seed), out.shape(), 1.0);
    out.mul(&c).unwrap().sum()
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor) {
    let err = gradcheck(inputs, 64, f);
    eprintln!("{name}: {err:e}");
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn causal_and_window_kernels() {
    let mut r = rng(1);
    let inputs: Vec<Tensor> = (0..3).map(|_| random(&mut r, &[9, 4], 1.0)).collect();
    check("causal", &inputs, |t| probe(&causal_attention(&t[0], &t[1], &t[2]).unwrap(), 2));
    for w in [1, 3] {
        check("window", &inputs, |t| probe(&swa_attention(&t[0], &t[1], &t[2], w).unwrap(), 3));
    }
}

#[test]
fn grouped_multi_head_kernel() {
    let mut r = rng(4);
    let layout = HeadLayout { batch: 2, seq: 7, heads: 4, head_dim: 2 };
    let inputs: Vec<Tensor> = (0..3).map(|_| random(&mut r, &[14, 8], 1.0)).collect();
    for exec in [Execution::Grouped, Execution::PerHead] {
        check("multi-head", &inputs, |t| {
            probe(&multi_head_attention(&t[0], &t[1], &t[2], layout, &[1, 2, 1, 5], exec).unwrap(), 5)
        });
    }
}

#[test]
fn linear_attention_and_feature_map() {
    let cfg = FeatureMapConfig { proj_dim: 2, normalizer: 4 };
    let mut r = rng(6);
    let (heads, n) = (2, 6);
    let inputs = vec![
        random(&mut r, &[2 * n, heads * 2], 1.0),
        random(&mut r, &[2 * n, heads * 2], 1.0),
        random(&mut r, &[2 * n, heads * 3], 1.0),
    ];
    check("linear", &inputs, |t| {
        let fq = taylor2_features(&t[0], heads, cfg).unwrap();
        let fk = taylor2_features(&t[1], heads, cfg).unwrap();
        probe(&multi_head_linear_attention(&fq, &fk, &t[2], 2, n, heads).unwrap(), 7)
    });
}

#[test]
fn layer_building_blocks() {
    let mut r = rng(8);
    let x = random(&mut r, &[5, 8], 1.0);
    let gain = random(&mut r, &[8], 1.0);
    check("rms_norm", &[x.clone(), gain], |t| probe(&nn::rms_norm(&t[0], &t[1], 1e-6).unwrap(), 9));
    check("rope", std::slice::from_ref(&x), |t| probe(&nn::rope(&t[0], 2, &[0, 3, 1, 7, 2]).unwrap(), 10));
    let up = random(&mut r, &[5, 8], 1.0);
    check("swiglu", &[x.clone(), up], |t| probe(&nn::swiglu(&t[0], &t[1]).unwrap(), 11));
    let w = random(&mut r, &[8, 3], 1.0);
    check("matmul", &[x.clone(), w], |t| probe(&t[0].matmul(&t[1]).unwrap(), 12));
    check("softmax", std::slice::from_ref(&x), |t| probe(&t[0].softmax_rows(None).unwrap(), 13));
    check("cross_entropy", std::slice::from_ref(&x), |t| nn::cross_entropy(&t[0], &[1, 0, 7, 3, 3]).unwrap());
    let table = random(&mut r, &[6, 3], 1.0);
    check("embedding", &[table], |t| probe(&nn::embedding(&t[0], &[5, 0, 5, 2]).unwrap(), 14));
}

#[test]
fn full_mswa_layer() {
    let (heads, d) = (4, 2);
    let mut r = rng(15);
    let dm = heads * d;
    let inputs: Vec<Tensor> =
        std::iter::once(random(&mut r, &[10, dm], 1.0)).chain((0..4).map(|_| random(&mut r, &[dm, dm], 0.6))).collect();
    check("mswa_layer", &inputs, |t| {
        let p = AttentionParams {
            wq: t[1].clone(),
            wk: t[2].clone(),
            wv: t[3].clone(),
            wo: t[4].clone(),
            heads,
            head_dim: d,
        };
        probe(&mswa_layer(&t[0], &p, &[1, 2, 4, 8]).unwrap(), 16)
    });
}

fn tiny(pattern_hybrid: bool) -> ModelConfig {
    let base = if pattern_hybrid {
        ModelConfig::hybrid(3, 4, 2, Strategy::MswaH, 4)
    } else {
        ModelConfig::local(4, 4, 2, Strategy::Mswa, 16)
    };
    ModelConfig { max_seq_len: 24, init_std: 0.3, proj_dim: 2, ..base }
}

fn model_gradcheck(config: ModelConfig) {
    let model = Model::new(config.clone()).unwrap();
    let tokens: Vec<usize> = (0..19).map(|i| (i * 53 + 11) % 256).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.tensor.detach()).collect();
    let err = gradcheck(&inputs, 12, |t| {
        let named = names.iter().cloned().zip(t.iter().map(|x| x.data().to_vec())).collect();
        let mut m = Model::from_parts(config.clone(), named).unwrap();
        for (p, x) in m.params_mut().iter_mut().zip(t) {
            p.tensor = x.clone();
        }
        m.loss(&tokens[..18], &tokens[1..], 1).unwrap()
    });
    eprintln!("model: {err:e}");
    assert!(err < TOL, "model relative error {err:e}");
}

#[test]
fn tiny_local_model() {
    model_gradcheck(tiny(false));
}

#[test]
fn tiny_hybrid_model() {
    model_gradcheck(tiny(true));
}

#[test]
fn every_head_group_receives_gradient() {
    let model = Model::new(tiny(false)).unwrap();
    let tokens: Vec<usize> = (0..21).map(|i| (i * 31 + 5) % 256).collect();
    model.loss(&tokens[..20], &tokens[1..], 1).unwrap().backward().unwrap();
    let (heads, d, dm) = (4, 2, 8);
    for layer in 0..4 {
        for name in ["wq", "wk", "wv"] {
            let g = model.param(&format!("layers.{layer}.attn.{name}")).unwrap().grad().unwrap();
            for h in 0..heads {
                let block: f64 =
                    (0..dm).flat_map(|r| (h * d..(h + 1) * d).map(move |c| r * dm + c)).map(|i| g[i].abs()).sum();
                assert!(block > 0.0, "layer {layer} {name} head {h} has no gradient");
            }
        }
    }
}
