mod common;

use common::max_rel_diff;
use mswa::decode::{argmax, greedy_decode, plan_cache_bytes, prefill, step, DecodeState};
use mswa::model::{LayerKind, Model, ModelConfig};
use mswa::plan::Strategy;
use mswa::Error;

pub fn tiny(strategy: Strategy) -> ModelConfig {
    ModelConfig { max_seq_len: 64, init_std: 0.4, ..ModelConfig::local(4, 4, 8, strategy, 16) }
}

fn hybrid() -> ModelConfig {
    ModelConfig { max_seq_len: 64, init_std: 0.4, ..ModelConfig::hybrid(12, 4, 8, Strategy::Mswa, 16) }
}

/// Greedy decode step by step, then a parallel forward over the prompt and
/// generated tokens; returns the worst per-position relative logit error.
fn decode_vs_parallel(config: ModelConfig) -> f64 {
    let model = Model::new(config).unwrap();
    let prompt = [72usize, 101, 108, 108, 111, 32, 119, 111];
    let (generated, logits) = greedy_decode(&model, &prompt, 32).unwrap();
    let mut full: Vec<usize> = prompt.to_vec();
    full.extend_from_slice(&generated[..31]);
    let parallel = model.forward(&full).unwrap();
    let vocab = model.config().vocab;
    let mut worst: f64 = 0.0;
    for (t, step_logits) in logits.iter().enumerate() {
        let row = &parallel.data()[(prompt.len() - 1 + t) * vocab..(prompt.len() + t) * vocab];
        assert_eq!(argmax(row), generated[t], "argmax differs at generated token {t}");
        worst = worst.max(max_rel_diff(step_logits.data(), row));
    }
    worst
}

#[test]
fn incremental_decode_matches_parallel_forward() {
    for strategy in Strategy::ALL {
        let err = decode_vs_parallel(tiny(strategy));
        assert!(err < 1e-4, "{strategy}: {err:e}");
    }
    let err = decode_vs_parallel(hybrid());
    assert!(err < 1e-4, "hybrid: {err:e}");
}

#[test]
fn prefill_equals_stepwise_prefill() {
    for config in [tiny(Strategy::Mswa), hybrid()] {
        let model = Model::new(config).unwrap();
        let tokens: Vec<usize> = (0..40).map(|i| (i * 17 + 3) % 256).collect();
        let (_, mut filled) = prefill(&model, &tokens[..39]).unwrap();
        let mut stepped = DecodeState::new(&model);
        for &t in &tokens[..39] {
            step(&model, &mut stepped, t).unwrap();
        }
        assert_eq!(filled.cached_rows(), stepped.cached_rows());
        let a = step(&model, &mut filled, tokens[39]).unwrap();
        let b = step(&model, &mut stepped, tokens[39]).unwrap();
        assert!(max_rel_diff(a.data(), b.data()) < 1e-10);
    }
}

#[test]
fn caches_saturate_at_their_windows() {
    let model = Model::new(tiny(Strategy::Mswa)).unwrap();
    let mut state = DecodeState::new(&model);
    for p in 0..48 {
        step(&model, &mut state, p % 256).unwrap();
        for layer in 0..4 {
            for head in 0..4 {
                let w = model.plan().window(layer, head);
                assert_eq!(state.cache(layer, head).unwrap().filled(), (p + 1).min(w));
            }
        }
        assert_eq!(state.cache_bytes(8, 4), plan_cache_bytes(model.config(), p, 4).unwrap());
    }
}

#[test]
fn wide_windows_keep_the_whole_prefix() {
    let local = ModelConfig { max_seq_len: 40, ..tiny(Strategy::Uniform) };
    let local = ModelConfig { base_window: 64, ..local };
    let full = local.clone().with_pattern(vec![LayerKind::Full; 4]);
    let a = Model::new(local).unwrap();
    let b = Model::new(full).unwrap();
    let (mut sa, mut sb) = (DecodeState::new(&a), DecodeState::new(&b));
    for t in 0..30 {
        let la = step(&a, &mut sa, (t * 7) % 256).unwrap();
        let lb = step(&b, &mut sb, (t * 7) % 256).unwrap();
        assert!(max_rel_diff(la.data(), lb.data()) < 1e-12);
        assert_eq!(sa.cached_rows(), 16 * (t + 1));
    }
}

#[test]
fn decode_errors() {
    let model = Model::new(ModelConfig { max_seq_len: 3, ..tiny(Strategy::Uniform) }).unwrap();
    let mut state = DecodeState::new(&model);
    assert!(matches!(step(&model, &mut state, 256), Err(Error::Vocabulary { .. })));
    for t in 0..3 {
        step(&model, &mut state, t).unwrap();
    }
    assert!(matches!(step(&model, &mut state, 0), Err(Error::Length { .. })));
}
