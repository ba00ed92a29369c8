use attnembed_core::embed::{
    compute_landmarks, embed_lookbacks, embed_series, embed_window_kernel, embed_window_softmax,
    init_embed_params, kernel_eval, EmbedConfig, EmbedMode,
};
use attnembed_core::rng::seeded;
use attnembed_core::tensor::{finite_difference_check, KernelKind};
use attnembed_core::{Graph, ParamStore, Tensor};
use nalgebra::DMatrix;
use rand::Rng;

type Mat = Vec<Vec<f64>>;

fn p(store: &ParamStore, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap_or_else(|| panic!("missing {name}")).value.data().to_vec()
}

fn lin(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn ln(x: &Mat, gain: &[f64], offset: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain[j] + offset[j])
                .collect()
        })
        .collect()
}

fn ema_rows(x: &mut Mat, start: usize, alpha: f64) {
    for t in start + 1..x.len() {
        for j in 0..x[t].len() {
            x[t][j] = alpha * x[t][j] + (1.0 - alpha) * x[t - 1][j];
        }
    }
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

/// Straight-line softmax embedding stack; returns `A^cat` and the projection.
fn softmax_oracle(cfg: &EmbedConfig, store: &ParamStore, tokens: &[f64], landmarks: usize) -> (Vec<f64>, Vec<f64>) {
    let d = cfg.embed_dim;
    let heads = cfg.embed_heads;
    let dh = d / heads;
    let n = tokens.len();
    let lw = p(store, "embed.lift.weight");
    let lb = p(store, "embed.lift.bias");
    let pos = p(store, "embed.position");
    let mut x: Mat = (0..n)
        .map(|i| (0..d).map(|j| tokens[i] * lw[j] + lb[j] + pos[i * d + j]).collect())
        .collect();
    let mut acat = Vec::new();
    for l in 0..cfg.embed_layers {
        let pre = format!("embed.layers.{l}");
        let h = ln(&x, &p(store, &format!("{pre}.norm1.gain")), &p(store, &format!("{pre}.norm1.offset")));
        let mut q = lin(&h, &p(store, &format!("{pre}.query.weight")), &p(store, &format!("{pre}.query.bias")));
        let mut k = lin(&h, &p(store, &format!("{pre}.key.weight")), &p(store, &format!("{pre}.key.bias")));
        if cfg.use_ema {
            let start = if cfg.ema_include_landmarks { 0 } else { landmarks };
            ema_rows(&mut q, start, cfg.ema_alpha);
            ema_rows(&mut k, start, cfg.ema_alpha);
        }
        let mut probs = vec![vec![vec![0.0; n]; n]; heads];
        for hd in 0..heads {
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for j in 0..n {
                    let mut s = 0.0;
                    for c in hd * dh..(hd + 1) * dh {
                        s += q[i][c] * k[j][c];
                    }
                    logits[j] = s / (dh as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                for j in 0..n {
                    probs[hd][i][j] = (logits[j] - m).exp() / z;
                }
            }
            acat.extend_from_slice(&probs[hd][n - 1]);
        }
        if l + 1 == cfg.embed_layers {
            break;
        }
        let v = lin(&h, &p(store, &format!("{pre}.value.weight")), &p(store, &format!("{pre}.value.bias")));
        let mut mixed = vec![vec![0.0; d]; n];
        for hd in 0..heads {
            for i in 0..n {
                for j in 0..n {
                    for c in hd * dh..(hd + 1) * dh {
                        mixed[i][c] += probs[hd][i][j] * v[j][c];
                    }
                }
            }
        }
        let o = lin(&mixed, &p(store, &format!("{pre}.out.weight")), &p(store, &format!("{pre}.out.bias")));
        for i in 0..n {
            for c in 0..d {
                x[i][c] += o[i][c];
            }
        }
        let h2 = ln(&x, &p(store, &format!("{pre}.norm2.gain")), &p(store, &format!("{pre}.norm2.offset")));
        let f = lin(&h2, &p(store, &format!("{pre}.ffn1.weight")), &p(store, &format!("{pre}.ffn1.bias")));
        let f: Mat = f.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        let f = lin(&f, &p(store, &format!("{pre}.ffn2.weight")), &p(store, &format!("{pre}.ffn2.bias")));
        for i in 0..n {
            for c in 0..d {
                x[i][c] += f[i][c];
            }
        }
    }
    let proj = lin(&vec![acat.clone()], &p(store, "embed.proj.weight"), &p(store, "embed.proj.bias"));
    (acat, proj[0].clone())
}

fn tiny(mode: EmbedMode) -> EmbedConfig {
    EmbedConfig {
        window_size: 4,
        stride: 4,
        landmark_kernel: 8,
        landmark_stride: 8,
        embed_layers: 1,
        embed_heads: 1,
        embed_dim: 4,
        out_dim: 5,
        mode,
        ..EmbedConfig::default()
    }
}

fn setup(cfg: &EmbedConfig, lookback: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::default();
    init_embed_params(cfg, lookback, &mut store, &mut seeded(seed)).unwrap();
    store
}

fn random_series(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

#[test]
fn softmax_acat_matches_straight_line_oracle() {
    let configs = [
        tiny(EmbedMode::Softmax),
        EmbedConfig { embed_layers: 2, embed_heads: 2, ..tiny(EmbedMode::Softmax) },
        EmbedConfig { embed_layers: 3, embed_heads: 2, ema_include_landmarks: true, ..tiny(EmbedMode::Softmax) },
        EmbedConfig { use_ema: false, embed_layers: 2, ..tiny(EmbedMode::Softmax) },
    ];
    for (c, cfg) in configs.iter().enumerate() {
        let store = setup(cfg, 8, 10 + c as u64);
        let window = random_series(4, 20 + c as u64);
        let landmark = [0.37];
        let (emb, bundle) = embed_window_softmax(&window, &landmark, cfg, &store).unwrap();
        let tokens: Vec<f64> = landmark.iter().chain(&window).copied().collect();
        let (acat, proj) = softmax_oracle(cfg, &store, &tokens, 1);
        assert_eq!(emb.acat.len(), cfg.embed_layers * cfg.embed_heads * 5);
        for (a, b) in emb.acat.iter().zip(&acat) {
            assert!((a - b).abs() <= 1e-10, "config {c}: {a} vs {b}");
        }
        for (a, b) in emb.values.iter().zip(&proj) {
            assert!((a - b).abs() <= 1e-10, "config {c}: {a} vs {b}");
        }
        assert!(bundle.max_row_sum_error() <= 1e-10);
        assert!(bundle.min_entry() >= 0.0);
        let total: f64 = emb.acat.iter().sum();
        assert!((total - (cfg.embed_layers * cfg.embed_heads) as f64).abs() <= 1e-8);
    }
}

#[test]
fn kernel_scores_match_pairwise_loop() {
    for mode in [EmbedMode::Rbf, EmbedMode::Poly] {
        for depth in [1, 2] {
            let cfg = EmbedConfig { embed_heads: 2, kernel_mlp_depth: depth, ..tiny(mode) };
            let store = setup(&cfg, 8, 3);
            let window = random_series(4, 4);
            let landmark = [-0.4];
            let emb = embed_window_kernel(&window, &landmark, &cfg, &store).unwrap();
            let tokens: Mat = landmark.iter().chain(&window).map(|&v| vec![v]).collect();
            let net = |prefix: &str| {
                let mut x = lin(&tokens, &p(&store, &format!("{prefix}.0.weight")), &p(&store, &format!("{prefix}.0.bias")));
                for i in 1..depth {
                    x = x.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
                    x = lin(&x, &p(&store, &format!("{prefix}.{i}.weight")), &p(&store, &format!("{prefix}.{i}.bias")));
                }
                x
            };
            let mut q = net("embed.query");
            let mut k = net("embed.key");
            ema_rows(&mut q, 1, cfg.ema_alpha);
            ema_rows(&mut k, 1, cfg.ema_alpha);
            let dh = 2;
            let mut expected = Vec::new();
            for h in 0..2 {
                let qi = &q[4][h * dh..(h + 1) * dh];
                for kj in &k {
                    let kj = &kj[h * dh..(h + 1) * dh];
                    let s = match mode {
                        EmbedMode::Rbf => {
                            let d2: f64 = qi.iter().zip(kj).map(|(a, b)| (a - b).powi(2)).sum();
                            (-0.5 * d2).exp()
                        }
                        _ => {
                            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                            (dot / (dh as f64).sqrt() + 1.0).powi(2)
                        }
                    };
                    expected.push(s);
                }
            }
            assert_eq!(emb.acat.len(), 2 * 5);
            for (a, b) in emb.acat.iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-10, "{mode:?} depth {depth}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn tied_rbf_scores_itself_as_one() {
    let cfg = EmbedConfig { tie_qk: true, embed_heads: 2, ..tiny(EmbedMode::Rbf) };
    let store = setup(&cfg, 8, 5);
    assert!(store.by_name("embed.key.0.weight").is_none());
    let emb = embed_window_kernel(&random_series(4, 6), &[0.1], &cfg, &store).unwrap();
    // the query is the last token, so its own slot is the last of each head
    assert_eq!(emb.acat[4], 1.0);
    assert_eq!(emb.acat[9], 1.0);
}

#[test]
fn landmarks_initialize_to_segment_means() {
    let cfg = EmbedConfig { landmark_kernel: 12, landmark_stride: 12, ..EmbedConfig::default() };
    let store = setup(&cfg, 96, 1);
    let ramp: Vec<f64> = (0..96).map(|i| 0.5 * i as f64 - 3.0).collect();
    let marks = compute_landmarks(&ramp, &cfg, &store).unwrap();
    assert_eq!(marks.len(), 8);
    for (g, m) in marks.iter().enumerate() {
        let mut acc = 0.0;
        for t in g * 12..g * 12 + 12 {
            acc += ramp[t];
        }
        assert!((m - acc / 12.0).abs() <= 1e-12);
    }
    let overlap = EmbedConfig { landmark_kernel: 48, landmark_stride: 24, ..EmbedConfig::default() };
    let store = setup(&overlap, 96, 1);
    assert_eq!(compute_landmarks(&ramp, &overlap, &store).unwrap().len(), 3);
}

#[test]
fn widths_follow_mode_formulas() {
    for (w, s) in [(10, 5), (10, 10), (16, 8), (6, 3)] {
        for use_landmarks in [true, false] {
            let base = EmbedConfig { window_size: w, stride: s, use_landmarks, ..EmbedConfig::default() };
            let g = if use_landmarks { 2 } else { 0 };
            let soft = base.geometry(96).unwrap();
            assert_eq!(soft.n_windows, (96 - w) / s + 1);
            assert_eq!(soft.acat_width, 3 * 4 * (g + w));
            let rbf = EmbedConfig { mode: EmbedMode::Rbf, ..base.clone() }.geometry(96).unwrap();
            assert_eq!(rbf.acat_width, 4 * (g + w));
        }
    }
    let kernel = EmbedConfig { mode: EmbedMode::Poly, ..EmbedConfig::default() };
    assert_eq!(kernel.geometry(96).unwrap().acat_width, 48);
}

#[test]
fn series_embedding_counts_and_determinism() {
    let cfg = EmbedConfig { stride: 10, ..EmbedConfig::default() };
    let store = setup(&cfg, 96, 2);
    let u = random_series(96, 8);
    let a = embed_series(&u, &cfg, &store).unwrap();
    let b = embed_series(&u, &cfg, &store).unwrap();
    assert_eq!(a.len(), 9);
    assert!(a.iter().all(|e| e.len() == 128));
    assert_eq!(a, b);
}

#[test]
fn batch_rows_match_single_window_calls() {
    let cfg = EmbedConfig { embed_layers: 2, ..EmbedConfig::default() };
    let store = setup(&cfg, 96, 3);
    let series: Vec<Vec<f64>> = (0..3).map(|s| random_series(96, 30 + s)).collect();
    let mut g = Graph::with_params(&store);
    let flat: Vec<f64> = series.concat();
    let x = g.constant(Tensor::new(vec![3, 96], flat).unwrap());
    let trace = embed_lookbacks(&mut g, &cfg, x).unwrap();
    let batch = g.value(trace.embeddings);
    let nw = cfg.geometry(96).unwrap().n_windows;
    for (s, u) in series.iter().enumerate() {
        let marks = compute_landmarks(u, &cfg, &store).unwrap();
        for i in [0, nw / 2, nw - 1] {
            let window = &u[i * cfg.stride..i * cfg.stride + cfg.window_size];
            let (emb, _) = embed_window_softmax(window, &marks, &cfg, &store).unwrap();
            let row = &batch[(s * nw + i) * 128..][..128];
            for (a, b) in row.iter().zip(&emb.values) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn alpha_one_equals_no_ema() {
    for mode in [EmbedMode::Softmax, EmbedMode::Rbf] {
        let with = EmbedConfig { ema_alpha: 1.0, mode, ..EmbedConfig::default() };
        let without = EmbedConfig { use_ema: false, ..with.clone() };
        let store = setup(&with, 96, 4);
        let u = random_series(96, 9);
        assert_eq!(embed_series(&u, &with, &store).unwrap(), embed_series(&u, &without, &store).unwrap());
    }
}

#[test]
fn no_landmark_width_is_layers_heads_window() {
    let cfg = EmbedConfig { use_landmarks: false, ..EmbedConfig::default() };
    let store = setup(&cfg, 96, 5);
    assert!(store.by_name("embed.landmark.weight").is_none());
    let (emb, bundle) = embed_window_softmax(&random_series(10, 1), &[], &cfg, &store).unwrap();
    assert_eq!(emb.acat.len(), 3 * 4 * 10);
    assert_eq!(bundle.layers.len(), 3);
    assert_eq!(bundle.layers[0][0].shape(), &[10, 10]);
}

#[test]
fn rbf_kernel_properties() {
    let mut rng = seeded(11);
    let dh = 4;
    let points: Mat = (0..16).map(|_| (0..dh).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let rbf = KernelKind::Rbf { gamma: 0.25 };
    let gram = DMatrix::from_fn(16, 16, |i, j| kernel_eval(rbf, &points[i], &points[j]).unwrap());
    for i in 0..16 {
        assert_eq!(gram[(i, i)], 1.0);
        for j in 0..16 {
            assert_eq!(gram[(i, j)], gram[(j, i)]);
        }
    }
    let min_eig = gram.symmetric_eigen().eigenvalues.min();
    assert!(min_eig >= -1e-8, "{min_eig}");

    let shift = [0.3, -7.0, 2.5, 11.0];
    let moved = |v: &[f64]| v.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>();
    let a = kernel_eval(rbf, &points[0], &points[1]).unwrap();
    let b = kernel_eval(rbf, &moved(&points[0]), &moved(&points[1])).unwrap();
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn poly_degree_one_is_scaled_dot() {
    let u = [0.5, -1.0, 2.0, 0.25];
    let v = [1.5, 0.5, -0.75, 4.0];
    let kind = KernelKind::Poly { degree: 1, coef: 0.0 };
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    assert!((kernel_eval(kind, &u, &v).unwrap() - dot / 2.0).abs() <= 1e-12);
    assert!(kernel_eval(KernelKind::Poly { degree: 0, coef: 1.0 }, &u, &v).is_err());
    assert!(kernel_eval(KernelKind::Rbf { gamma: 0.0 }, &u, &v).is_err());
    assert!(kernel_eval(kind, &u, &v[..3]).is_err());
}

#[test]
fn embedding_gradients_match_finite_differences() {
    for mode in [EmbedMode::Softmax, EmbedMode::Rbf, EmbedMode::Poly, EmbedMode::Patch] {
        let cfg = EmbedConfig {
            window_size: 4,
            stride: 4,
            landmark_kernel: 6,
            landmark_stride: 6,
            embed_layers: 2,
            embed_heads: 2,
            embed_dim: 4,
            out_dim: 3,
            mode,
            ..EmbedConfig::default()
        };
        let store = setup(&cfg, 12, 7);
        let series = random_series(24, 12);
        let weights = random_series(2 * 3 * 3, 13);
        let loss_graph = |g: &mut Graph| -> attnembed_core::Result<attnembed_core::Var> {
            let x = g.constant(Tensor::new(vec![2, 12], series.clone()).unwrap());
            let trace = embed_lookbacks(g, &cfg, x)?;
            let w = g.constant(Tensor::new(vec![6, 3], weights.clone()).unwrap());
            let m = g.mul(trace.embeddings, w)?;
            Ok(g.sum(m))
        };
        let mut g = Graph::with_params(&store);
        let loss = loss_graph(&mut g).unwrap();
        let grads = g.backward(loss).unwrap().into_params();
        let report = finite_difference_check(
            &store,
            &grads,
            |s| {
                let mut g = Graph::with_params(s);
                let l = loss_graph(&mut g)?;
                Ok(g.scalar(l))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{mode:?}: {report:?}");
    }
}
