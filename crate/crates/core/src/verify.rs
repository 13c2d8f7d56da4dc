//! Gradient-check and oracle-comparison suites shared by the CLI and tests.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};

use crate::attention::{
    attention_block, attention_core_forward, memory_footprint, padded_attention_oracle, stratified_attention, AttentionGeometry, AttentionVars,
    CrpeView, MemoryFootprint, RelativePositions,
};
use crate::diffcore::{add, cross_entropy_mean, gelu, gradcheck_with, layer_norm, linear, GradcheckOptions, Graph, Tensor, Var, DEFAULT_LN_EPS};
use crate::error::{Error, Result};
use crate::geometry::{fps, knn, window_assign, Point3, PointCloud};
use crate::indexing::{build_dense_pairs, build_stratified_pairs, window_occupancies, IndexPairs, SparseParams, StratifiedParams};
use crate::network::{group_max, neighbor_aggregate, KernelPointSet, Model, ModelConfig, Plan, IGNORE_LABEL};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tol: f64,
    pub checked: usize,
    pub failure: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_error <= self.tol
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches")
}

fn rand_positions(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point3> {
    (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..extent))).collect()
}

fn stratified_geometry(positions: &[Point3], s_win: f64, scale: usize, shifted: bool, bins: usize) -> Result<AttentionGeometry> {
    let params = StratifiedParams {
        s_win,
        shift_small: shifted,
        sparse: Some(SparseParams {
            scale,
            s_win_large: 2.0 * s_win,
            shift_large: shifted,
        }),
    };
    let candidates = fps(positions, positions.len().div_ceil(scale))?;
    let pairs = build_stratified_pairs(positions, &params, Some(&candidates))?;
    let rel = RelativePositions::new(positions, &pairs, s_win, bins)?;
    Ok(AttentionGeometry {
        pairs: Arc::new(pairs),
        rel: Some(Arc::new(rel)),
    })
}

fn run_gradcheck<F>(name: &str, op: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = gradcheck_with(op, inputs, opts)?;
    Ok(CheckResult {
        name: name.to_string(),
        max_error: r.max_rel_error,
        tol: r.tol,
        checked: r.checked,
        failure: r.failure,
    })
}

/// Central finite-difference checks of every differentiable op and of the
/// end-to-end two-stage model, in 64-bit with step `1e-5`.
pub fn gradcheck_suite(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradcheckOptions {
        tol,
        seed,
        ..Default::default()
    };
    let mut out = Vec::new();

    let x = rand_tensor(&mut rng, &[5, 4], 1.0);
    let w = rand_tensor(&mut rng, &[4, 3], 1.0);
    let b = rand_tensor(&mut rng, &[3], 0.5);
    out.push(run_gradcheck(
        "linear",
        |g, v| linear(g, v[0], v[1], Some(v[2])),
        &[x.clone(), w, b],
        &opts,
    )?);

    let gamma = rand_tensor(&mut rng, &[4], 1.5);
    let beta = rand_tensor(&mut rng, &[4], 0.5);
    out.push(run_gradcheck(
        "layer_norm",
        |g, v| layer_norm(g, v[0], v[1], v[2], DEFAULT_LN_EPS),
        &[x.clone(), gamma, beta],
        &opts,
    )?);
    out.push(run_gradcheck(
        "gelu",
        |g, v| gelu(g, v[0]),
        &[rand_tensor(&mut rng, &[5, 4], 3.0)],
        &opts,
    )?);
    let y = rand_tensor(&mut rng, &[5, 4], 1.0);
    out.push(run_gradcheck("add", |g, v| add(g, v[0], v[1]), &[x, y], &opts)?);

    let labels = [0u32, 2, IGNORE_LABEL, 1, 2, 0];
    out.push(run_gradcheck(
        "cross_entropy_mean",
        move |g, v| cross_entropy_mean(g, v[0], &labels, IGNORE_LABEL),
        &[rand_tensor(&mut rng, &[6, 3], 2.0)],
        &opts,
    )?);

    let (n, c, heads, bins) = (24, 6, 2, 8);
    let positions = rand_positions(&mut rng, n, 0.4);
    let geom = stratified_geometry(&positions, 0.16, 4, false, bins)?;
    let qkv: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut rng, &[n, c], 1.0)).collect();
    let g0 = geom.clone();
    out.push(run_gradcheck(
        "stratified_attention",
        move |g, v| Ok(stratified_attention(g, v[0], v[1], v[2], None, None, &g0, heads, true)?.0),
        &qkv,
        &opts,
    )?);
    let mut inputs = qkv.clone();
    inputs.extend((0..9).map(|_| rand_tensor(&mut rng, &[bins, c], 0.5)));
    let g1 = geom.clone();
    out.push(run_gradcheck(
        "stratified_attention_crpe",
        move |g, v| {
            let tables = std::array::from_fn(|i| v[3 + i]);
            Ok(stratified_attention(g, v[0], v[1], v[2], Some(tables), None, &g1, heads, true)?.0)
        },
        &inputs,
        &opts,
    )?);

    let hidden = 4;
    let mut inputs = vec![rand_tensor(&mut rng, &[n, c], 1.0)];
    for _ in 0..4 {
        inputs.push(rand_tensor(&mut rng, &[c, c], 0.8));
        inputs.push(rand_tensor(&mut rng, &[c], 0.3));
    }
    inputs.push(rand_tensor(&mut rng, &[3, hidden], 2.0));
    inputs.push(rand_tensor(&mut rng, &[hidden], 0.5));
    inputs.push(rand_tensor(&mut rng, &[hidden, heads], 1.0));
    inputs.push(rand_tensor(&mut rng, &[heads], 0.5));
    let g2 = geom.clone();
    out.push(run_gradcheck(
        "attention_block_mlp_bias",
        move |g, v| {
            let vars = AttentionVars {
                proj: std::array::from_fn(|i| v[1 + i]),
                crpe: None,
                mlp: Some(std::array::from_fn(|i| v[9 + i])),
            };
            Ok(attention_block(g, v[0], &vars, &g2, heads, true)?.0)
        },
        &inputs,
        &opts,
    )?);

    let nbrs = knn(&positions, &positions, 6)?;
    let kp = KernelPointSet::icosahedral(0.08, 0.1)?;
    let weights = Arc::new(kp.weights(&positions, &nbrs));
    let feats = rand_tensor(&mut rng, &[n, 3], 1.0);
    out.push(run_gradcheck(
        "neighbor_aggregate",
        move |g, v| neighbor_aggregate(g, v[0], &weights),
        std::slice::from_ref(&feats),
        &opts,
    )?);
    out.push(run_gradcheck("group_max", move |g, v| group_max(g, v[0], &nbrs), &[feats], &opts)?);

    out.extend(model_gradcheck(seed, tol)?);
    Ok(out)
}

/// Small cloud for the end-to-end model check: two colour classes in a
/// 0.5 m cube.
pub fn gradcheck_cloud(n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc10d);
    let positions = rand_positions(&mut rng, n, 0.5);
    let labels: Vec<u32> = positions.iter().map(|p| u32::from(p[2] > 0.25)).collect();
    let features = labels
        .iter()
        .flat_map(|&l| {
            let base = if l == 1 { 0.8 } else { 0.2 };
            [0; 3].map(|_| base + rng.random_range(-0.1..0.1))
        })
        .collect();
    PointCloud::new(positions, features, 3, Some(labels))
}

/// Model used by the end-to-end gradient check: two stages with every
/// position term active, under 64 points.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        depths: vec![2, 1],
        base_channels: 6,
        base_heads: 2,
        num_bins: 8,
        knn_k: 6,
        ffn_ratio: 2,
        ..ModelConfig::toy()
    }
}

fn model_loss(model: &Model<f64>, plan: &Plan, labels: &[u32]) -> Result<f64> {
    let mut g = Graph::new();
    let input = g.constant(model.input_tensor(plan)?);
    let out = model.forward_graph(&mut g, plan, input)?;
    let loss = cross_entropy_mean(&mut g, out.logits, labels, IGNORE_LABEL)?;
    Ok(g.value(loss).item())
}

/// End-to-end checks of the segmentation loss: gradients with respect to the
/// input features, and with respect to a sample of every parameter tensor.
pub fn model_gradcheck(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let opts = GradcheckOptions {
        tol,
        seed,
        ..Default::default()
    };
    let cloud = gradcheck_cloud(48, seed)?;
    let mut model = Model::<f64>::new(gradcheck_model_config(), seed)?;
    let plan = model.plan(&cloud)?;
    let labels: Vec<u32> = plan.order.iter().map(|&i| cloud.labels.as_ref().expect("labelled")[i]).collect();

    let input = model.input_tensor(&plan)?;
    let m = &model;
    let p = &plan;
    let l = labels.clone();
    let input_check = run_gradcheck(
        "model_input",
        move |g, v| {
            let out = m.forward_graph(g, p, v[0])?;
            cross_entropy_mean(g, out.logits, &l, IGNORE_LABEL)
        },
        &[input],
        &GradcheckOptions {
            max_elements: Some(48),
            ..opts.clone()
        },
    )?;

    model.params.zero_grad();
    model.loss_and_grad(&cloud)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a7a);
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut result = CheckResult {
        name: "model_params".into(),
        max_error: 0.0,
        tol,
        checked: 0,
        failure: None,
    };
    for id in ids {
        let numel = model.params.value(id).numel();
        let analytic = model.params.value(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        for _ in 0..numel.min(3) {
            let e = rng.random_range(0..numel);
            let orig = model.params.value(id).data()[e];
            model.params.get_mut(id).tensor.data_mut()[e] = orig + opts.step;
            let plus = model_loss(&model, &plan, &labels)?;
            model.params.get_mut(id).tensor.data_mut()[e] = orig - opts.step;
            let minus = model_loss(&model, &plan, &labels)?;
            model.params.get_mut(id).tensor.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            result.checked += 1;
            if !err.is_finite() {
                result.failure = Some(format!("non-finite gradient in `{}`", model.params.get(id).name));
            } else if err > result.max_error {
                result.max_error = err;
            }
        }
    }
    Ok(vec![input_check, result])
}

/// Worst deviation between the gather/scatter kernel and the padded oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub trials: usize,
    pub max_deviation: f64,
    pub worst_trial: Option<usize>,
}

/// One random attention instance and its description.
#[derive(Clone, Debug)]
pub struct OracleInstance {
    pub positions: Vec<Point3>,
    pub pairs: IndexPairs,
    pub heads: usize,
    pub head_dim: usize,
    pub crpe: bool,
    pub s_win: f64,
    pub num_bins: usize,
}

pub fn oracle_instance(trial: usize, seed: u64) -> Result<OracleInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(trial as u64));
    let n = rng.random_range(1..=256);
    let heads = rng.random_range(1..=4);
    let head_dim = rng.random_range(1..=4);
    let s_win = [0.1, 0.16, 0.25][rng.random_range(0..3)];
    let extent = rng.random_range(0.2..1.0);
    let positions = rand_positions(&mut rng, n, extent);
    let scale = rng.random_range(2..=8);
    let shifted = rng.random_bool(0.5);
    let num_bins = 16;
    let geom = stratified_geometry(&positions, s_win, scale, shifted, num_bins)?;
    Ok(OracleInstance {
        positions,
        pairs: Arc::try_unwrap(geom.pairs).unwrap_or_else(|a| (*a).clone()),
        heads,
        head_dim,
        crpe: trial.is_multiple_of(2),
        s_win,
        num_bins,
    })
}

/// Runs `trials` random instances (even trials with cRPE) through both the
/// gather/scatter kernel and the padded masked-softmax oracle.
pub fn oracle_compare(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut report = OracleReport {
        trials,
        max_deviation: 0.0,
        worst_trial: None,
    };
    for t in 0..trials {
        let inst = oracle_instance(t, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x51_7cc1));
        let n = inst.positions.len();
        let c = inst.heads * inst.head_dim;
        let [q, k, v] = [0; 3].map(|_| rand_tensor(&mut rng, &[n, c], 1.0).into_data());
        let tables: Vec<Vec<f64>> = (0..9).map(|_| rand_tensor(&mut rng, &[inst.num_bins, c], 0.5).into_data()).collect();
        let view = CrpeView::new(std::array::from_fn(|i| tables[i].as_slice()), inst.num_bins, c)?;
        let rel = RelativePositions::new(&inst.positions, &inst.pairs, inst.s_win, inst.num_bins)?;
        let scale = 1.0 / (inst.head_dim as f64).sqrt();
        let fast = attention_core_forward(
            &q,
            &k,
            &v,
            &inst.pairs,
            inst.heads,
            inst.crpe.then_some((view, rel.bins.as_slice())),
            None,
            scale,
        )?;
        let slow = padded_attention_oracle(
            &q,
            &k,
            &v,
            &inst.positions,
            &inst.pairs,
            inst.heads,
            inst.crpe.then_some((view, inst.s_win)),
            None,
            scale,
        )?;
        let dev = fast.y.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !dev.is_finite() {
            return Err(Error::invalid(format!("trial {t} produced a non-finite output")));
        }
        if dev > report.max_deviation || report.worst_trial.is_none() {
            report.max_deviation = dev.max(report.max_deviation);
            report.worst_trial = Some(t);
        }
    }
    Ok(report)
}

/// Cloud whose window occupancies are heavy-tailed: 64 windows of side
/// `s_win` on an 8 × 8 grid, with Pareto-distributed point counts.
pub fn skewed_cloud(s_win: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce3);
    let pareto = Pareto::new(2.0, 1.1).expect("valid parameters");
    let mut positions = Vec::new();
    for w in 0..64 {
        let count = (pareto.sample(&mut rng) as usize).min(400);
        let origin = [(w % 8) as f64 * s_win, (w / 8) as f64 * s_win, 0.0];
        for _ in 0..count {
            positions.push([0, 1, 2].map(|a| origin[a] + s_win * rng.random_range(0.02..0.98)));
        }
    }
    let features = positions.iter().flat_map(|_| [0.5; 3]).collect();
    PointCloud::new(positions, features, 3, None).expect("well-formed")
}

/// Points uniform in a cube of side `extent`, grey.
pub fn uniform_cloud(n: usize, extent: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = rand_positions(&mut rng, n, extent);
    PointCloud::new(positions, vec![0.5; 3 * n], 3, None).expect("well-formed")
}

/// Buffer accounting of first-stage window attention on `cloud`: ragged pairs
/// against one padded `k_max × k_max` block per occupied window.
pub fn bench_memory(cloud: &PointCloud, config: &ModelConfig) -> Result<MemoryFootprint> {
    config.validate()?;
    cloud.validate()?;
    let ids = window_assign(&cloud.positions, config.s_win(0), false);
    let pairs = build_dense_pairs(&ids);
    let occ = window_occupancies(&ids);
    let heads = config.heads(0);
    Ok(memory_footprint(&pairs, &occ, heads, config.channels(0) / heads, config.use_crpe))
}
