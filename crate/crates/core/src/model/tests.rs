use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tokenizer::Tokenizer;

fn tokenizer() -> Tokenizer {
    Tokenizer::build(["This image shows Erythema, Plaque. User: describe it Assistant:"], false)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        d_vision: 8,
        n_vision_layers: 1,
        n_heads: 2,
        n_queries: 2,
        n_query_layers: 1,
        d_decoder: 8,
        n_decoder_layers: 1,
        max_text_len: 32,
        mlp_ratio: 2,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn tiny() -> PipelineModel {
    PipelineModel::new(tiny_config(), tokenizer()).unwrap()
}

fn textured(size: usize, salt: u32) -> Image {
    let mut img = Image::new(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let v = (x as u32 * 31 + y as u32 * 17 + salt * 101) % 251;
            img.put(x, y, [v as u8, (v * 3 % 256) as u8, (255 - v) as u8]);
        }
    }
    img
}

#[test]
fn patch_geometry_default_config() {
    let cfg = ModelConfig { vocab_size: 8, ..ModelConfig::default() };
    let grid = patchify(&textured(64, 1), &cfg).unwrap();
    assert_eq!(grid.patches.shape(), (64, 192));
}

#[test]
fn zero_image_gives_zero_patches() {
    let cfg = ModelConfig { vocab_size: 8, ..ModelConfig::default() };
    let grid = patchify(&Image::new(64, 64, [0, 0, 0]), &cfg).unwrap();
    assert!(grid.patches.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_pixel_only_touches_first_patch() {
    let cfg = ModelConfig { vocab_size: 8, ..ModelConfig::default() };
    let mut img = Image::new(64, 64, [0, 0, 0]);
    img.put(0, 0, [200, 0, 0]);
    let grid = patchify(&img, &cfg).unwrap();
    for p in 0..grid.patches.rows() {
        let nonzero = grid.patches.row(p).iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, p == 0, "patch {p}");
    }
    assert_eq!(grid.patches.get(0, 0), 200.0 / 255.0);
}

#[test]
fn patchify_rejects_wrong_size() {
    let cfg = ModelConfig { vocab_size: 8, ..ModelConfig::default() };
    let err = patchify(&Image::new(32, 64, [0, 0, 0]), &cfg).unwrap_err().to_string();
    assert!(err.contains("12288") && err.contains("6144"), "{err}");
}

#[test]
fn patchify_is_lossless() {
    let cfg = ModelConfig { vocab_size: 8, ..ModelConfig::default() };
    let img = textured(64, 9);
    let back = unpatchify(&patchify(&img, &cfg).unwrap(), &cfg).unwrap();
    assert_eq!(back, img);
}

#[test]
fn identical_patches_without_positions_give_identical_features() {
    let cfg = ModelConfig { vision_positions: false, ..tiny_config() };
    let model = PipelineModel::new(cfg, tokenizer()).unwrap();
    let img = Image::new(16, 16, [90, 30, 200]);
    let f = model.encode_vision(&model.patchify(&img).unwrap()).unwrap();
    for r in 1..f.rows() {
        assert_eq!(f.row(r), f.row(0));
    }
}

#[test]
fn vision_is_deterministic() {
    let model = tiny();
    let grid = model.patchify(&textured(16, 2)).unwrap();
    let a = model.encode_vision(&grid).unwrap();
    let b = model.encode_vision(&grid).unwrap();
    assert_eq!(a, b);
    let again = PipelineModel::new(tiny_config(), tokenizer()).unwrap();
    assert_eq!(again.encode_vision(&grid).unwrap(), a);
}

#[test]
fn perturbing_one_patch_changes_every_feature() {
    let model = tiny();
    let img = textured(16, 4);
    let grid = model.patchify(&img).unwrap();
    let before = model.encode_vision(&grid).unwrap();
    let mut perturbed = grid.clone();
    for v in perturbed.patches.row_mut(0) {
        *v = 1.0 - *v;
    }
    let after = model.encode_vision(&perturbed).unwrap();
    for r in 0..before.rows() {
        assert_ne!(before.row(r), after.row(r), "feature {r} unchanged");
    }
}

#[test]
fn query_embedding_shape() {
    let cfg = ModelConfig { vocab_size: 8, ..ModelConfig::default() };
    let model = PipelineModel::new(cfg, tokenizer()).unwrap();
    let q = model.encode_image(&textured(64, 5)).unwrap();
    assert_eq!(q.0.shape(), (8, 64));
    assert!(q.0.all_finite());
}

#[test]
fn distinct_images_give_distinct_embeddings() {
    let model = tiny();
    let embs: Vec<_> = (0..10).map(|i| model.encode_image(&textured(16, 100 + i)).unwrap()).collect();
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            assert_ne!(embs[i], embs[j], "images {i} and {j} collapsed");
        }
    }
}

/// With zero features and zeroed value/output paths, cross-attention adds
/// nothing; zeroing the MLP too leaves only the residual stream, so the output
/// is the final layer norm of the learned queries.
#[test]
fn zero_values_leave_only_the_query_residual() {
    let mut model = tiny();
    let names: Vec<(String, (usize, usize))> = model
        .params()
        .iter()
        .filter(|(_, p)| {
            p.name.starts_with("query.blocks")
                && (p.name.contains("attn.v") || p.name.contains("attn.o") || p.name.contains("mlp.fc2"))
        })
        .map(|(_, p)| (p.name.clone(), p.value.shape()))
        .collect();
    for (n, (r, c)) in names {
        model.set_param(&n, Mat::zeros(r, c)).unwrap();
    }
    let cfg = model.config().clone();
    let q = model.encode_queries(&Mat::zeros(cfg.n_patches(), cfg.d_vision)).unwrap();

    let queries = model.param("query.queries").unwrap().cast::<f64>();
    let gamma = model.param("query.ln_f.gamma").unwrap().cast::<f64>();
    let beta = model.param("query.ln_f.beta").unwrap().cast::<f64>();
    for r in 0..queries.rows() {
        let row = queries.row(r);
        let d = row.len() as f64;
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        for c in 0..row.len() {
            let expected = (row[c] - mean) / (var + 1e-5).sqrt() * gamma.get(0, c) + beta.get(0, c);
            assert!((q.0.get(r, c) as f64 - expected).abs() < 1e-4);
        }
    }
}

fn random_queries(model: &PipelineModel, salt: u64) -> QueryEmbedding {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let c = model.config();
    QueryEmbedding(Mat::from_fn(c.n_queries, c.d_vision, |_, _| rng.gen_range(-1.0..1.0)))
}

#[test]
fn identity_alignment_is_identity() {
    let mut model = tiny();
    model.set_param("alignment.proj.weight", Mat::identity(8)).unwrap();
    model.set_param("alignment.proj.bias", Mat::zeros(1, 8)).unwrap();
    let q = random_queries(&model, 1);
    assert_eq!(model.align(&q).unwrap().0, q.0);
}

#[test]
fn alignment_is_affine() {
    let model = tiny();
    let q1 = random_queries(&model, 2);
    let q2 = random_queries(&model, 3);
    let sum = QueryEmbedding(Mat::from_fn(2, 8, |r, c| q1.0.get(r, c) + q2.0.get(r, c)));
    let zero = QueryEmbedding(Mat::zeros(2, 8));
    let lhs = model.align(&sum).unwrap().0;
    let a1 = model.align(&q1).unwrap().0;
    let a2 = model.align(&q2).unwrap().0;
    let a0 = model.align(&zero).unwrap().0;
    let rhs = Mat::from_fn(2, 8, |r, c| a1.get(r, c) + a2.get(r, c) - a0.get(r, c));
    assert!(lhs.max_abs_diff(&rhs) < 1e-5);

    let mut unbiased = model.clone();
    unbiased.set_param("alignment.proj.bias", Mat::zeros(1, 8)).unwrap();
    let alpha = -1.7f32;
    let scaled = QueryEmbedding(q1.0.map(|v| v * alpha));
    let lhs = unbiased.align(&scaled).unwrap().0;
    let rhs = unbiased.align(&q1).unwrap().0.map(|v| v * alpha);
    assert!(lhs.max_abs_diff(&rhs) < 1e-5);
}

#[test]
fn alignment_parameter_count() {
    let cfg = ModelConfig { vocab_size: 8, ..ModelConfig::default() };
    let model = PipelineModel::new(cfg, tokenizer()).unwrap();
    assert_eq!(model.param_count(Component::Alignment), 64 * 64 + 64);
}

fn prompt_and_target(model: &PipelineModel) -> (TokenSequence, TokenSequence) {
    let t = model.tokenizer();
    (t.tokenize("User: describe it Assistant:").as_context(), t.tokenize_target("This image shows Erythema."))
}

#[test]
fn uniform_head_gives_log_vocab_loss() {
    let mut model = tiny();
    let v = model.config().vocab_size;
    model.set_param("decoder.head.weight", Mat::zeros(8, v)).unwrap();
    model.set_param("decoder.head.bias", Mat::zeros(1, v)).unwrap();
    let prefix = model.align(&random_queries(&model, 4)).unwrap();
    let (p, t) = prompt_and_target(&model);
    let loss = model.decode_loss(&prefix, &p, &t).unwrap();
    assert!((loss - (v as f32).ln()).abs() < 1e-5, "{loss} vs ln {v}");
}

#[test]
fn confident_correct_head_gives_zero_loss() {
    // A head bias of +60 on one token and a zeroed weight makes the decoder
    // certain of that token; a target repeating it has (numerically) zero loss.
    let mut model = tiny();
    let v = model.config().vocab_size;
    let tok = model.tokenizer().id("Erythema").unwrap();
    model.set_param("decoder.head.weight", Mat::zeros(8, v)).unwrap();
    let mut bias = Mat::zeros(1, v);
    bias.set(0, tok as usize, 60.0);
    model.set_param("decoder.head.bias", bias).unwrap();
    let prefix = model.align(&random_queries(&model, 5)).unwrap();
    let p = model.tokenizer().tokenize("describe it").as_context();
    let t = TokenSequence::new(vec![tok; 3], true);
    let loss = model.decode_loss(&prefix, &p, &t).unwrap();
    assert!(loss.abs() < 1e-6, "{loss}");
}

#[test]
fn loss_matches_hand_computation_from_exported_logits() {
    let model = tiny();
    let prefix = model.align(&random_queries(&model, 6)).unwrap();
    let tk = model.tokenizer();
    let p = tk.tokenize("describe it").as_context();
    let t = tk.tokenize("Erythema Plaque shows");
    assert_eq!(t.len(), 3);
    let loss = model.decode_loss(&prefix, &p, &t).unwrap() as f64;

    let all: Vec<u32> = p.ids.iter().chain(&t.ids).copied().collect();
    let logits = model.decode_logits(&prefix, &all).unwrap();
    let k = model.config().n_queries;
    let mut manual = 0.0f64;
    for (j, &tok) in t.ids.iter().enumerate() {
        let row = logits.row(WRAPPER_TOKENS + k + p.len() + j - 1);
        let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&x| (x as f64 - mx).exp()).sum();
        manual -= (row[tok as usize] as f64 - mx) - z.ln();
    }
    manual /= 3.0;
    assert!((loss - manual).abs() < 1e-5, "{loss} vs {manual}");
}

#[test]
fn decode_loss_rejects_empty_target() {
    let model = tiny();
    let prefix = model.align(&random_queries(&model, 7)).unwrap();
    let p = model.tokenizer().tokenize("describe it").as_context();
    let err = model.decode_loss(&prefix, &p, &TokenSequence::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));
}

#[test]
fn generation_limits_and_determinism() {
    let model = tiny();
    let prefix = model.align(&random_queries(&model, 8)).unwrap();
    let p = model.tokenizer().tokenize("User: describe it Assistant:");
    let zero = model
        .generate(&prefix, &p, &GenerationSettings { max_new_tokens: 0, ..Default::default() })
        .unwrap();
    assert!(zero.ids.is_empty());
    assert_eq!(zero.text, "");

    let g = GenerationSettings { max_new_tokens: 6, ..Default::default() };
    assert_eq!(model.generate(&prefix, &p, &g).unwrap(), model.generate(&prefix, &p, &g).unwrap());

    let s = GenerationSettings { mode: DecodeMode::Sampled, temperature: 1.3, max_new_tokens: 6, seed: 11 };
    assert_eq!(model.generate(&prefix, &p, &s).unwrap(), model.generate(&prefix, &p, &s).unwrap());
    assert!(model.generate(&prefix, &TokenSequence::default(), &g).is_err());
}

#[test]
fn cached_decoder_matches_full_forward() {
    let model = tiny();
    let prefix = model.align(&random_queries(&model, 9)).unwrap();
    let ids = model.tokenizer().tokenize("User: describe it Assistant: This image").ids;
    let full = model.decode_logits(&prefix, &ids).unwrap();
    let split = 3;
    let mut state = infer::DecoderState::new(&model, &prefix, &ids[..split]);
    let last = |m: &Mat<f32>, row: usize| m.row(row).to_vec();
    let base = WRAPPER_TOKENS + model.config().n_queries - 1;
    let check = |got: &[f32], want: Vec<f32>| {
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    };
    check(state.last_logits(), last(&full, base + split));
    for (j, &id) in ids[split..].iter().enumerate() {
        state.push(id);
        check(state.last_logits(), last(&full, base + split + j + 1));
    }
}

/// Central differences in f64 against the tape's f64 gradients, for every
/// component, starting from pixels.
#[test]
fn analytic_gradients_match_finite_differences_for_all_components() {
    let mut model = tiny();
    model.freeze = FreezeFlags { vision: false, query: false, alignment: false, decoder: false };
    let img = textured(16, 12);
    let (p, t) = prompt_and_target(&model);
    let params64: ParamSet<f64> = model.params().cast();
    let grid = model.patchify(&img).unwrap();
    let patches64 = grid.patches.cast::<f64>();
    let text = p.clone().as_context().concat(&t);

    let loss_of = |params: &ParamSet<f64>| {
        let mut ctx = Ctx::new(params, &[]);
        let f = ctx.vision_features(model.layout(), model.config(), &patches64);
        let q = ctx.query_embedding(model.layout(), model.config(), f);
        let pr = ctx.align(model.layout(), q);
        let l = ctx.sequence_loss(model.layout(), model.config(), pr, &text);
        ctx.tape.scalar(l)
    };

    let mut ctx = Ctx::new(&params64, &Component::ALL);
    let f = ctx.vision_features(model.layout(), model.config(), &patches64);
    let q = ctx.query_embedding(model.layout(), model.config(), f);
    let pr = ctx.align(model.layout(), q);
    let l = ctx.sequence_loss(model.layout(), model.config(), pr, &text);
    let mut grads = ctx.tape.backward(l);
    let analytic = ctx.param_grads(&mut grads);

    let h = 1e-4;
    let mut checked = 0;
    for (id, g) in &analytic {
        let n = g.data().len();
        // a few entries per tensor keeps the test fast
        for idx in [0, n / 2, n - 1] {
            let mut plus = params64.clone();
            plus.get_mut(*id).value.data_mut()[idx] += h;
            let mut minus = params64.clone();
            minus.get_mut(*id).value.data_mut()[idx] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = g.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-7);
            assert!(
                (a - numeric).abs() / denom < 1e-3 || (a - numeric).abs() < 1e-9,
                "{}[{idx}]: analytic {a} numeric {numeric}",
                params64.get(*id).name
            );
            checked += 1;
        }
    }
    let tensors = params64.len();
    assert_eq!(analytic.len(), tensors, "every tensor should receive a gradient");
    assert!(checked >= 3 * tensors);
}

#[test]
fn frozen_components_get_no_gradients() {
    let model = tiny();
    let (p, t) = prompt_and_target(&model);
    let (_, grads) = model.loss_and_grads(&random_queries(&model, 10), &p, &t).unwrap();
    assert!(!grads.is_empty());
    for (id, _) in grads {
        assert_eq!(model.params().get(id).component, Component::Alignment);
    }
}

#[test]
fn masked_trailing_positions_do_not_affect_loss() {
    let model = tiny();
    let prefix = model.align(&random_queries(&model, 13)).unwrap();
    let tk = model.tokenizer();
    let mut seq = tk.tokenize("describe it").as_context().concat(&tk.tokenize("Erythema Plaque shows"));
    seq = seq.concat(&tk.tokenize("This image").as_context());
    let base = model.sequence_loss(&prefix, &seq).unwrap();
    let mut changed = seq.clone();
    let n = changed.len();
    changed.ids[n - 1] = tk.id("shows").unwrap();
    changed.ids[n - 2] = tk.id("User").unwrap();
    assert_eq!(model.sequence_loss(&prefix, &changed).unwrap(), base);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn shape_contracts_hold_for_valid_configs(
        patch in 1usize..4,
        side in 1usize..4,
        heads in 1usize..3,
        head_dim in 1usize..4,
        queries in 1usize..4,
        text in 4usize..12,
        seed in 0u64..1000,
    ) {
        let d = heads * head_dim;
        let cfg = ModelConfig {
            image_size: patch * side,
            patch_size: patch,
            d_vision: d,
            d_decoder: d,
            n_heads: heads,
            n_queries: queries,
            n_vision_layers: 1,
            n_query_layers: 1,
            n_decoder_layers: 1,
            max_text_len: text,
            mlp_ratio: 1,
            seed,
            ..ModelConfig::default()
        };
        let model = PipelineModel::new(cfg.clone(), tokenizer()).unwrap();
        let img = textured(cfg.image_size, seed as u32);
        let grid = model.patchify(&img).unwrap();
        prop_assert_eq!(grid.patches.shape(), (side * side, patch * patch * 3));
        let q = model.encode_image(&img).unwrap();
        prop_assert_eq!(q.0.shape(), (queries, d));
        let prefix = model.align(&q).unwrap();
        prop_assert_eq!(prefix.0.shape(), (queries, d));
        let prompt = TokenSequence::new(vec![6], false);
        let g = model.generate(&prefix, &prompt, &GenerationSettings { max_new_tokens: 50, ..Default::default() }).unwrap();
        prop_assert!(prompt.len() + g.ids.len() + WRAPPER_TOKENS <= text);
    }

    #[test]
    fn changing_a_scored_token_changes_the_loss(seed in 0u64..200, pos in 0usize..3, delta in 1u32..5) {
        let cfg = ModelConfig { seed, ..tiny_config() };
        let model = PipelineModel::new(cfg, tokenizer()).unwrap();
        let prefix = model.align(&random_queries(&model, seed)).unwrap();
        let tk = model.tokenizer();
        let p = tk.tokenize("describe it").as_context();
        let t = tk.tokenize("Erythema Plaque shows");
        let base = model.decode_loss(&prefix, &p, &t).unwrap();
        let mut t2 = t.clone();
        let v = model.config().vocab_size as u32;
        t2.ids[pos] = (t2.ids[pos] + delta) % v;
        prop_assert_ne!(model.decode_loss(&prefix, &p, &t2).unwrap(), base);
    }
}
