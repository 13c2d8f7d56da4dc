use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stratformer::attention::{padded_attention_oracle, AttentionGeometry, CrpeView, PositionEncoding, RelativePositions};
use stratformer::diffcore::{Graph, ParamStore, Tensor};
use stratformer::geometry::{fps, interp_weights_k, knn, knn_brute_force, window_assign, Point3, PointCloud};
use stratformer::indexing::{build_dense_pairs, build_stratified_pairs, SparseParams, StratifiedParams};
use stratformer::network::{DownLayer, DownPlan, EmbeddingVariant, KernelPointSet, Model, ModelConfig, NeighborWeights, TransformerBlock, UpLayer};
use stratformer::verify::{gradcheck_cloud, model_gradcheck};

const EPS: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

fn rand_positions(r: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point3> {
    (0..n).map(|_| [0, 1, 2].map(|_| r.random_range(0.0..extent))).collect()
}

fn lin(x: &[f64], cin: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let cout = b.len();
    let n = x.len() / cin;
    let mut y = vec![0.0; n * cout];
    for i in 0..n {
        for o in 0..cout {
            let mut acc = b[o];
            for c in 0..cin {
                acc += x[i * cin + c] * w[c * cout + o];
            }
            y[i * cout + o] = acc;
        }
    }
    y
}

fn ln(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let c = gamma.len();
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks(c).zip(y.chunks_mut(c)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for k in 0..c {
            out[k] = (row[k] - mean) / (var + EPS).sqrt() * gamma[k] + beta[k];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn pval(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.value(store.id(name).unwrap_or_else(|| panic!("no param {name}"))).data().to_vec()
}

/// Replaces every parameter with random values so that no zero-initialised
/// bias or unit gain hides a mistake.
fn randomise(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        let scale = if p.name.contains("gamma") { 0.5 } else { 0.4 };
        for v in p.tensor.data_mut() {
            *v = if p.name.contains("gamma") {
                1.0 + r.random_range(-scale..scale)
            } else {
                r.random_range(-scale..scale)
            };
        }
    }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    let dev = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(dev <= tol, "max deviation {dev:e} > {tol:e}");
}

fn geometry(positions: &[Point3], s_win: f64, bins: usize) -> AttentionGeometry {
    let params = StratifiedParams {
        s_win,
        shift_small: true,
        sparse: Some(SparseParams {
            scale: 4,
            s_win_large: 2.0 * s_win,
            shift_large: true,
        }),
    };
    let cand = fps(positions, positions.len().div_ceil(4)).unwrap();
    let pairs = build_stratified_pairs(positions, &params, Some(&cand)).unwrap();
    let rel = RelativePositions::new(positions, &pairs, s_win, bins).unwrap();
    AttentionGeometry {
        pairs: Arc::new(pairs),
        rel: Some(Arc::new(rel)),
    }
}

fn block_config() -> ModelConfig {
    ModelConfig {
        base_channels: 6,
        base_heads: 2,
        num_bins: 8,
        ffn_ratio: 2,
        ..ModelConfig::toy()
    }
}

#[test]
fn transformer_block_matches_manual_composition() {
    let cfg = block_config();
    let mut store = ParamStore::<f64>::new();
    let block = TransformerBlock::register(&mut store, "b", &cfg, 0, 3).unwrap();
    randomise(&mut store, 11);
    let mut r = rng(5);
    let n = 40;
    let positions = rand_positions(&mut r, n, 0.4);
    let geom = geometry(&positions, 0.16, 8);
    let x = rand_vec(&mut r, n * 6, 1.0);

    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(&[n, 6], x.clone()).unwrap());
    let y = block.forward(&mut g, &store, xv, &geom).unwrap();
    let got = g.value(y).data().to_vec();

    let p = |s: &str| pval(&store, &format!("b.{s}"));
    let h = ln(&x, &p("norm1.gamma"), &p("norm1.beta"));
    let q = lin(&h, 6, &p("attn.q.weight"), &p("attn.q.bias"));
    let k = lin(&h, 6, &p("attn.k.weight"), &p("attn.k.bias"));
    let v = lin(&h, 6, &p("attn.v.weight"), &p("attn.v.bias"));
    let tables: Vec<Vec<f64>> = ["q", "k", "v"]
        .iter()
        .flat_map(|role| ["x", "y", "z"].map(|axis| p(&format!("attn.crpe.{role}_{axis}"))))
        .collect();
    let view = CrpeView::new(std::array::from_fn(|i| tables[i].as_slice()), 8, 6).unwrap();
    let att = padded_attention_oracle(&q, &k, &v, &positions, &geom.pairs, 2, Some((view, 0.16)), None, 1.0 / 3f64.sqrt()).unwrap();
    let a = lin(&att, 6, &p("attn.out.weight"), &p("attn.out.bias"));
    let x1: Vec<f64> = x.iter().zip(&a).map(|(u, w)| u + w).collect();
    let h2 = ln(&x1, &p("norm2.gamma"), &p("norm2.beta"));
    let f1: Vec<f64> = lin(&h2, 6, &p("ffn1.weight"), &p("ffn1.bias")).into_iter().map(gelu).collect();
    let f2 = lin(&f1, 12, &p("ffn2.weight"), &p("ffn2.bias"));
    let want: Vec<f64> = x1.iter().zip(&f2).map(|(u, w)| u + w).collect();
    assert_close(&got, &want, 1e-12);
}

#[test]
fn zero_block_weights_are_identity() {
    let cfg = block_config();
    let mut store = ParamStore::<f64>::new();
    let block = TransformerBlock::register(&mut store, "b", &cfg, 0, 3).unwrap();
    randomise(&mut store, 2);
    for p in store.iter_mut() {
        if p.name.contains("weight") || p.name.contains("bias") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut r = rng(8);
    let positions = rand_positions(&mut r, 30, 0.4);
    let geom = geometry(&positions, 0.16, 8);
    let x = Tensor::new(&[30, 6], rand_vec(&mut r, 180, 2.0)).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, &store, xv, &geom).unwrap();
    assert_eq!(g.value(y).shape(), &[30, 6]);
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn downsample_matches_group_then_max() {
    let mut store = ParamStore::<f64>::new();
    let layer = DownLayer::register(&mut store, "d", 4, 8, 1).unwrap();
    randomise(&mut store, 4);
    let mut r = rng(21);
    let n = 37;
    let positions = rand_positions(&mut r, n, 1.0);
    let x = rand_vec(&mut r, n * 4, 1.0);
    let centroids = fps(&positions, n.div_ceil(4)).unwrap();
    assert_eq!(centroids.len(), 10);
    let cpos: Vec<Point3> = centroids.iter().map(|&i| positions[i]).collect();
    let plan = DownPlan {
        centroids,
        groups: knn(&cpos, &positions, 6).unwrap(),
    };
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(&[n, 4], x.clone()).unwrap());
    let y = layer.forward(&mut g, &store, xv, &plan).unwrap();

    let groups = knn_brute_force(&cpos, &positions, 6).unwrap();
    let h = lin(
        &ln(&x, &pval(&store, "d.norm.gamma"), &pval(&store, "d.norm.beta")),
        4,
        &pval(&store, "d.proj.weight"),
        &pval(&store, "d.proj.bias"),
    );
    let mut want = vec![f64::NEG_INFINITY; 10 * 8];
    for q in 0..10 {
        for &j in groups.row(q) {
            for c in 0..8 {
                want[q * 8 + c] = want[q * 8 + c].max(h[j * 8 + c]);
            }
        }
    }
    assert_eq!(g.value(y).shape(), &[10, 8]);
    assert_close(g.value(y).data(), &want, 1e-14);

    // identical inputs give the shared projected row everywhere
    let same: Vec<f64> = (0..n).flat_map(|_| [0.3, -1.0, 0.5, 2.0]).collect();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(&[n, 4], same.clone()).unwrap());
    let y = layer.forward(&mut g, &store, xv, &plan).unwrap();
    let shared = lin(
        &ln(&same[..4], &pval(&store, "d.norm.gamma"), &pval(&store, "d.norm.beta")),
        4,
        &pval(&store, "d.proj.weight"),
        &pval(&store, "d.proj.bias"),
    );
    for row in g.value(y).data().chunks(8) {
        assert_close(row, &shared, 1e-14);
    }
}

#[test]
fn upsample_matches_manual_composition() {
    let mut store = ParamStore::<f64>::new();
    let layer = UpLayer::register(&mut store, "u", 8, 4, 1).unwrap();
    randomise(&mut store, 6);
    let mut r = rng(31);
    let n = 29;
    let fine = rand_positions(&mut r, n, 1.0);
    let centroids = fps(&fine, n.div_ceil(4)).unwrap();
    let coarse: Vec<Point3> = centroids.iter().map(|&i| fine[i]).collect();
    let m = coarse.len();
    let iw = interp_weights_k(&fine, &coarse, 3).unwrap();
    let w = Arc::new(NeighborWeights {
        k: 3,
        blocks: 1,
        indices: iw.indices.clone(),
        weights: iw.weights.clone(),
        num_sources: m,
    });
    let xc = rand_vec(&mut r, m * 8, 1.0);
    let xs = rand_vec(&mut r, n * 4, 1.0);
    let mut g = Graph::new();
    let cv = g.constant(Tensor::new(&[m, 8], xc.clone()).unwrap());
    let sv = g.constant(Tensor::new(&[n, 4], xs.clone()).unwrap());
    let y = layer.forward(&mut g, &store, cv, sv, &w).unwrap();
    assert_eq!(g.value(y).shape(), &[n, 4]);

    let p = |s: &str| pval(&store, &format!("u.{s}"));
    let hc = lin(
        &ln(&xc, &p("norm_coarse.gamma"), &p("norm_coarse.beta")),
        8,
        &p("proj_coarse.weight"),
        &p("proj_coarse.bias"),
    );
    let hs = lin(
        &ln(&xs, &p("norm_skip.gamma"), &p("norm_skip.beta")),
        4,
        &p("proj_skip.weight"),
        &p("proj_skip.bias"),
    );
    let mut want = hs.clone();
    for t in 0..n {
        for a in 0..3 {
            let s = iw.indices[t * 3 + a];
            for c in 0..4 {
                want[t * 4 + c] += iw.weights[t * 3 + a] * hc[s * 4 + c];
            }
        }
    }
    assert_close(g.value(y).data(), &want, 1e-13);

    // a fine point that is itself a centroid receives exactly that centroid's row
    for (ci, &fi) in centroids.iter().enumerate() {
        let row = &iw.weights[fi * 3..fi * 3 + 3];
        let hit = (0..3).find(|&a| iw.indices[fi * 3 + a] == ci).unwrap();
        assert_eq!(row[hit], 1.0);
        assert_eq!(row.iter().sum::<f64>(), 1.0);
        for c in 0..4 {
            let got = g.value(y).data()[fi * 4 + c] - hs[fi * 4 + c];
            assert!((got - hc[ci * 4 + c]).abs() < 1e-14);
        }
    }
}

fn embed_output(model: &Model<f64>, cloud: &PointCloud) -> (Vec<f64>, stratformer::network::Plan) {
    let plan = model.plan(cloud).unwrap();
    let mut g = Graph::new();
    let input = g.constant(model.input_tensor(&plan).unwrap());
    let e = model.embed(&mut g, &plan, input).unwrap();
    (g.value(e).data().to_vec(), plan)
}

fn small_cloud(n: usize, seed: u64) -> PointCloud {
    gradcheck_cloud(n, seed).unwrap()
}

#[test]
fn embedding_variants_reduce_to_linear() {
    let cloud = small_cloud(40, 1);
    let base = ModelConfig {
        embedding: EmbeddingVariant::Linear,
        ..block_config()
    };
    let linear = Model::<f64>::new(base.clone(), 9).unwrap();
    let (lin_out, plan) = embed_output(&linear, &cloud);
    let want = lin(
        &plan.input,
        plan.input_channels,
        &pval(&linear.params, "embed.weight"),
        &pval(&linear.params, "embed.bias"),
    );
    assert_eq!(lin_out, want);

    let maxpool = Model::<f64>::new(
        ModelConfig {
            embedding: EmbeddingVariant::Maxpool,
            knn_k: 1,
            ..base.clone()
        },
        9,
    )
    .unwrap();
    assert_eq!(embed_output(&maxpool, &cloud).0, lin_out);

    let mut flat = cloud.clone();
    flat.features.iter_mut().for_each(|v| *v = 0.4);
    let no_xyz = ModelConfig {
        use_xyz_features: false,
        ..base
    };
    let lin2 = Model::<f64>::new(no_xyz.clone(), 9).unwrap();
    let avg = Model::<f64>::new(
        ModelConfig {
            embedding: EmbeddingVariant::Avgpool,
            ..no_xyz
        },
        9,
    )
    .unwrap();
    assert_close(&embed_output(&avg, &flat).0, &embed_output(&lin2, &flat).0, 1e-14);
}

#[test]
fn kpconv_embedding_matches_triple_loop() {
    let cloud = small_cloud(50, 2);
    let cfg = ModelConfig { knn_k: 8, ..block_config() };
    let mut model = Model::<f64>::new(cfg.clone(), 4).unwrap();
    randomise(&mut model.params, 5);
    let (got, plan) = embed_output(&model, &cloud);
    let pos = &plan.positions;
    let cin = plan.input_channels;
    let c0 = cfg.base_channels;
    let w = pval(&model.params, "embed.weight");
    let b = pval(&model.params, "embed.bias");
    let kp = KernelPointSet::icosahedral(cfg.kp_radius(), cfg.kp_sigma()).unwrap();
    let nbrs = knn_brute_force(pos, pos, 8).unwrap();
    let sigma = cfg.kp_sigma();
    let mut want = vec![0.0; pos.len() * c0];
    for i in 0..pos.len() {
        for o in 0..c0 {
            let mut acc = b[o];
            for &j in nbrs.row(i) {
                for (k, x) in kp.offsets.iter().enumerate() {
                    let d = ((0..3).map(|a| (pos[j][a] - pos[i][a] - x[a]).powi(2)).sum::<f64>()).sqrt();
                    let h = (1.0 - d / sigma).max(0.0);
                    for c in 0..cin {
                        acc += h * w[(k * cin + c) * c0 + o] * plan.input[j * cin + c];
                    }
                }
            }
            want[i * c0 + o] = acc;
        }
    }
    assert_close(&got, &want, 1e-12);
}

fn permutation_equivariant(cfg: ModelConfig, n: usize) {
    let cloud = small_cloud(n, 3);
    let model = Model::<f64>::new(cfg, 1).unwrap();
    let base = model.predict(&cloud).unwrap();
    assert_eq!(base.shape(), &[n, model.config.num_classes]);
    assert!(base.is_finite());
    for seed in 0..3 {
        let order = stratformer::geometry::random_permutation(n, seed);
        let moved = model.predict(&cloud.permuted(&order)).unwrap();
        for (i, &o) in order.iter().enumerate() {
            assert_eq!(moved.row(i), base.row(o), "row {i}");
        }
    }
}

#[test]
fn model_is_permutation_equivariant() {
    permutation_equivariant(block_config(), 120);
    permutation_equivariant(
        ModelConfig {
            extra_early_downsample: true,
            embedding: EmbeddingVariant::Maxpool,
            depths: vec![1, 1, 1],
            ..block_config()
        },
        90,
    );
}

#[test]
fn zero_tables_match_model_without_crpe() {
    let cloud = small_cloud(80, 4);
    let mut with = Model::<f64>::new(block_config(), 2).unwrap();
    for p in with.params.iter_mut() {
        if p.name.contains(".crpe.") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let without = Model::<f64>::new(
        ModelConfig {
            use_crpe: false,
            ..block_config()
        },
        2,
    )
    .unwrap();
    assert_eq!(with.predict(&cloud).unwrap().data(), without.predict(&cloud).unwrap().data());
}

#[test]
fn zero_block_weights_leave_only_the_residual_path() {
    let cloud = small_cloud(80, 5);
    let zeroed = |cfg: ModelConfig| {
        let mut m = Model::<f64>::new(cfg, 3).unwrap();
        for p in m.params.iter_mut() {
            if p.name.starts_with("stage") && !p.name.contains("norm") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        m.predict(&cloud).unwrap()
    };
    let a = zeroed(block_config());
    let b = zeroed(ModelConfig {
        use_stratified: false,
        use_shift: false,
        use_crpe: false,
        ..block_config()
    });
    assert_eq!(a.data(), b.data());
}

#[test]
fn plain_windows_without_stratification() {
    let cloud = small_cloud(100, 6);
    let cfg = ModelConfig {
        use_stratified: false,
        use_crpe: false,
        ..block_config()
    };
    let plan = Model::<f64>::new(cfg.clone(), 0).unwrap().plan(&cloud).unwrap();
    for (s, stage) in plan.stages.iter().enumerate() {
        let even = build_dense_pairs(&window_assign(&stage.positions, cfg.s_win(s), false));
        let odd = build_dense_pairs(&window_assign(&stage.positions, cfg.s_win(s), true));
        assert_eq!(*stage.geoms[0].pairs, even);
        assert_eq!(*stage.geoms[1].pairs, odd);
        assert!(stage.geoms[0].rel.is_none());
    }
    assert_eq!(cfg.position_encoding(), PositionEncoding::None);
}

#[test]
fn erf_saliency_properties() {
    let one = PointCloud::new(vec![[0.1, 0.2, 0.3]], vec![0.5; 3], 3, None).unwrap();
    let m = Model::<f64>::new(block_config(), 0).unwrap();
    assert_eq!(m.erf_saliency(&one, 0).unwrap(), vec![1.0]);
    assert!(m.erf_saliency(&one, 1).is_err());

    // two clusters 0.5 m apart: only the stratified model reaches across early
    let mut r = rng(12);
    let mut positions = rand_positions(&mut r, 40, 0.1);
    positions.extend(rand_positions(&mut r, 40, 0.1).into_iter().map(|p| [p[0] + 0.5, p[1], p[2]]));
    let cloud = PointCloud::new(positions, rand_vec(&mut r, 240, 1.0), 3, None).unwrap();
    let cfg = ModelConfig {
        depths: vec![1, 1],
        ..block_config()
    };
    let strat = Model::<f64>::new(cfg.clone(), 1).unwrap().erf_saliency(&cloud, 3).unwrap();
    let plain = Model::<f64>::new(
        ModelConfig {
            use_stratified: false,
            ..cfg
        },
        1,
    )
    .unwrap()
    .erf_saliency(&cloud, 3)
    .unwrap();
    assert!(strat[3] > 0.0 && plain[3] > 0.0);
    assert!(strat.iter().chain(&plain).all(|v| (0.0..=1.0).contains(v)));
    for i in 0..cloud.len() {
        if plain[i] != 0.0 {
            assert!(strat[i] != 0.0, "point {i} reachable only without stratification");
        }
    }
    let reach = |s: &[f64]| s.iter().filter(|&&v| v != 0.0).count();
    assert!(reach(&strat) >= reach(&plain));
}

#[test]
fn end_to_end_gradcheck() {
    for seed in 0..2 {
        for r in model_gradcheck(seed, 1e-4).unwrap() {
            assert!(r.passed(), "seed {seed}: {r:?}");
        }
    }
}

#[test]
fn f32_and_f64_models_agree() {
    let cloud = small_cloud(60, 7);
    let m = Model::<f64>::new(block_config(), 5).unwrap();
    let a = m.predict(&cloud).unwrap();
    let b = m.cast::<f32>().predict(&cloud).unwrap();
    assert_close(a.data(), &b.to_f64_vec(), 1e-4);
}
