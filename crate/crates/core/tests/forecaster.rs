use attnembed_core::embed::EmbedMode;
use attnembed_core::model::{
    encoder_forward, forecast_head, forward, init_params, load_checkpoint, patch_embed_baseline,
    save_checkpoint, Forecaster, ModelConfig,
};
use attnembed_core::rng::seeded;
use attnembed_core::tensor::finite_difference_check;
use attnembed_core::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.by_name(name).unwrap_or_else(|| panic!("missing {name}")).value.data()
}

fn zero(store: &mut ParamStore, name: &str) {
    store.by_name_mut(name).unwrap().value.data_mut().fill(0.0);
}

#[test]
fn patch_embedding_is_a_plain_matvec() {
    let cfg = ModelConfig {
        embed: attnembed_core::embed::EmbedConfig {
            window_size: 16,
            stride: 8,
            mode: EmbedMode::Patch,
            ..Default::default()
        },
        ..ModelConfig::default()
    };
    let (mut store, _) = init_params(&cfg).unwrap();
    let window = random(16, 1);
    let out = patch_embed_baseline(&window, &store).unwrap();
    assert_eq!(out.len(), 128);
    let (w, b) = (p(&store, "embed.patch.weight"), p(&store, "embed.patch.bias"));
    for j in 0..128 {
        let mut acc = b[j];
        for i in 0..16 {
            acc += window[i] * w[i * 128 + j];
        }
        assert!((out[j] - acc).abs() <= 1e-12);
    }
    zero(&mut store, "embed.patch.bias");
    assert!(patch_embed_baseline(&[0.0; 16], &store).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn head_is_flatten_then_matvec() {
    let cfg = ModelConfig {
        embed: attnembed_core::embed::EmbedConfig { stride: 10, ..Default::default() },
        ..ModelConfig::default()
    };
    let (mut store, geo) = init_params(&cfg).unwrap();
    assert_eq!(geo.n_windows, 9);
    assert_eq!(store.by_name("head.weight").unwrap().value.numel(), 9 * 128 * 96);
    assert_eq!(store.by_name("head.bias").unwrap().value.numel(), 96);

    let hidden = Tensor::new(vec![9, 128], random(9 * 128, 2)).unwrap();
    let out = forecast_head(&hidden, &store).unwrap();
    let (w, b) = (p(&store, "head.weight"), p(&store, "head.bias"));
    for t in 0..96 {
        let mut acc = b[t];
        for r in 0..9 {
            for c in 0..128 {
                acc += hidden.at(r, c) * w[(r * 128 + c) * 96 + t];
            }
        }
        assert!((out[t] - acc).abs() <= 1e-10);
    }
    let short = Tensor::new(vec![8, 128], vec![0.0; 8 * 128]).unwrap();
    assert!(forecast_head(&short, &store).is_err());
    zero(&mut store, "head.bias");
    assert!(forecast_head(&Tensor::zeros(&[9, 128]), &store).unwrap().iter().all(|&v| v == 0.0));
}

fn ln(row: &[f64], g: &[f64], o: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + o[j]).collect()
}

fn affine(row: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out).map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>()).collect()
}

#[test]
fn single_head_encoder_matches_manual_computation() {
    let mut cfg = ModelConfig::tiny();
    cfg.encoder_heads = 1;
    let (store, geo) = init_params(&cfg).unwrap();
    let (n, d) = (geo.n_windows, cfg.model_dim());
    let emb = Tensor::new(vec![n, d], random(n * d, 3)).unwrap();
    let out = encoder_forward(&emb, &cfg, &store).unwrap();
    assert_eq!(out.hidden.shape(), &[n, d]);

    let pre = "encoder.layers.0";
    let pos = p(&store, "encoder.position");
    let x: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|c| emb.at(i, c) + pos[i * d + c]).collect()).collect();
    let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, p(&store, &format!("{pre}.norm1.gain")), p(&store, &format!("{pre}.norm1.offset")))).collect();
    let proj = |name: &str| -> Vec<Vec<f64>> {
        h.iter().map(|r| affine(r, p(&store, &format!("{pre}.{name}.weight")), p(&store, &format!("{pre}.{name}.bias")))).collect()
    };
    let (q, k, v) = (proj("query"), proj("key"), proj("value"));
    let mut mixed = vec![vec![0.0; d]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..n {
            let a = (logits[j] - m).exp() / z;
            assert!((out.attention[0].at(i, j) - a).abs() <= 1e-12);
            for c in 0..d {
                mixed[i][c] += a * v[j][c];
            }
        }
    }
    for i in 0..n {
        let o = affine(&mixed[i], p(&store, &format!("{pre}.out.weight")), p(&store, &format!("{pre}.out.bias")));
        let x1: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
        let h2 = ln(&x1, p(&store, &format!("{pre}.norm2.gain")), p(&store, &format!("{pre}.norm2.offset")));
        let f = affine(&h2, p(&store, &format!("{pre}.ffn1.weight")), p(&store, &format!("{pre}.ffn1.bias")));
        let f: Vec<f64> = f
            .iter()
            .map(|&v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh()))
            .collect();
        let f = affine(&f, p(&store, &format!("{pre}.ffn2.weight")), p(&store, &format!("{pre}.ffn2.bias")));
        for c in 0..d {
            assert!((out.hidden.at(i, c) - (x1[c] + f[c])).abs() <= 1e-10);
        }
    }
}

#[test]
fn encoder_attention_rows_are_stochastic() {
    let cfg = ModelConfig::default();
    let (store, geo) = init_params(&cfg).unwrap();
    let emb = Tensor::new(vec![geo.n_windows, 128], random(geo.n_windows * 128, 4)).unwrap();
    let out = encoder_forward(&emb, &cfg, &store).unwrap();
    assert_eq!(out.layers.len(), 3);
    for a in &out.attention {
        let n = a.shape()[1];
        for row in a.data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn multichannel_forecast_shapes_and_determinism() {
    let model = Forecaster::new(ModelConfig::default()).unwrap();
    let lookback: Vec<Vec<f64>> = (0..7).map(|c| random(96, 10 + c)).collect();
    let a = model.predict(&lookback).unwrap();
    assert_eq!(a.predictions.len(), 7);
    assert!(a.predictions.iter().all(|p| p.len() == 96));
    assert_eq!(a.encoder_tokens.len(), 7);
    assert_eq!(a.encoder_tokens[0].len(), 3);
    let again = Forecaster::new(ModelConfig::default()).unwrap().predict(&lookback).unwrap();
    assert_eq!(a.predictions, again.predictions);

    let permuted: Vec<Vec<f64>> = [3, 0, 6, 1, 5, 2, 4].iter().map(|&c| lookback[c].clone()).collect();
    let b = model.predict(&permuted).unwrap();
    for (i, &c) in [3, 0, 6, 1, 5, 2, 4].iter().enumerate() {
        for (x, y) in b.predictions[i].iter().zip(&a.predictions[c]) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn constant_input_gives_finite_mean_plus_head_bias_path() {
    let model = Forecaster::new(ModelConfig::tiny()).unwrap();
    let out = model.predict(&[vec![3.25; 24]]).unwrap();
    assert!(out.predictions[0].iter().all(|v| v.is_finite()));
    let normalized = model.predict_normalized(&[0.0; 24]).unwrap();
    let std = out.stats[0].std;
    for (p, z) in out.predictions[0].iter().zip(&normalized) {
        assert!((p - (3.25 + std * z)).abs() <= 1e-12);
    }
}

#[test]
fn patch_and_softmax_share_every_non_embedding_parameter() {
    let softmax = init_params(&ModelConfig::default()).unwrap().0;
    let patch = init_params(&ModelConfig::default().with_mode(EmbedMode::Patch)).unwrap().0;
    let shared = |s: &ParamStore| -> Vec<(String, Vec<usize>, Vec<f64>)> {
        s.iter()
            .filter(|p| !p.name.starts_with("embed."))
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
            .collect()
    };
    assert!(!shared(&softmax).is_empty());
    assert_eq!(shared(&softmax), shared(&patch));
    assert!(patch.names().filter(|n| n.starts_with("embed.")).all(|n| n.starts_with("embed.patch.")));
}

fn loss_of(g: &mut Graph, cfg: &ModelConfig, inputs: &[f64], targets: &[f64]) -> attnembed_core::Result<Var> {
    let s = inputs.len() / cfg.lookback;
    let x = g.constant(Tensor::new(vec![s, cfg.lookback], inputs.to_vec())?);
    let y = g.constant(Tensor::new(vec![s, cfg.horizon], targets.to_vec())?);
    let trace = forward(g, cfg, x, None)?;
    let l = g.sq_err_sum(trace.prediction, y)?;
    Ok(g.scale(l, 1.0 / targets.len() as f64))
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut configs: Vec<ModelConfig> = EmbedMode::ALL.iter().map(|&m| ModelConfig::tiny().with_mode(m)).collect();
    configs.push(ModelConfig { revin_affine: true, ..ModelConfig::tiny() });
    for cfg in configs {
        let (store, _) = init_params(&cfg).unwrap();
        let inputs = random(2 * 24, 21);
        let targets = random(2 * 8, 22);
        let mut g = Graph::with_params(&store);
        let loss = loss_of(&mut g, &cfg, &inputs, &targets).unwrap();
        let grads = g.backward(loss).unwrap().into_params();
        let report = finite_difference_check(
            &store,
            &grads,
            |s| {
                let mut g = Graph::with_params(s);
                let l = loss_of(&mut g, &cfg, &inputs, &targets)?;
                Ok(g.scalar(l))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{:?}: {report:?}", cfg.embed.mode);
        assert!(report.checked_entries > 0);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = ModelConfig { revin_affine: true, ..ModelConfig::tiny() }.with_mode(EmbedMode::Rbf);
    let model = Forecaster::new(cfg).unwrap();
    save_checkpoint(&path, &model).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), model.config());
    for (a, b) in model.params().iter().zip(back.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let bytes = std::fs::read(&path).unwrap();
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
    assert_eq!(header["config"]["embed"]["mode"], "rbf");
    assert_eq!(bytes.len() - 8 - header_len, model.params().numel() * 8);

    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn invalid_model_configs_name_the_field() {
    let cases = [
        ("encoder_heads", ModelConfig { encoder_heads: 7, ..ModelConfig::default() }),
        ("dropout", ModelConfig { dropout: 1.0, ..ModelConfig::default() }),
        ("lookback", ModelConfig { lookback: 8, ..ModelConfig::default() }),
        ("horizon", ModelConfig { horizon: 0, ..ModelConfig::default() }),
    ];
    for (field, cfg) in cases {
        match cfg.validate() {
            Err(attnembed_core::Error::Config { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{field}: {other:?}"),
        }
    }
}
