use std::sync::Arc;

use super::ops::{group_max, neighbor_aggregate, KernelPointSet, NeighborWeights};
use super::plan::{DownPlan, EmbedPlan, Plan};
use super::{EmbeddingVariant, ModelConfig};
use crate::attention::{AttentionGeometry, AttentionLayer};
use crate::diffcore::{
    add, cross_entropy_mean, gelu, layer_norm, linear, name_seed, uniform_tensor, Graph, ParamId, ParamStore, Real, Tensor, Var, DEFAULT_LN_EPS,
};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Label value excluded from the loss.
pub const IGNORE_LABEL: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, seed: u64) -> Result<Self> {
        let wname = format!("{name}.weight");
        let bound = 1.0 / (c_in.max(1) as f64).sqrt();
        let w = uniform_tensor(&[c_in, c_out], bound, name_seed(seed, &wname));
        Ok(LinearLayer {
            weight: store.add(wname, w, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), false)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        linear(g, x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormLayer {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(NormLayer {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()), false)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), false)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        layer_norm(g, x, gamma, beta, DEFAULT_LN_EPS)
    }
}

/// Pre-LN attention and feed-forward sublayers, each with a residual bypass.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: NormLayer,
    pub attn: AttentionLayer,
    pub norm2: NormLayer,
    pub ffn1: LinearLayer,
    pub ffn2: LinearLayer,
}

impl TransformerBlock {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, config: &ModelConfig, stage: usize, seed: u64) -> Result<Self> {
        let c = config.channels(stage);
        let hidden = c * config.ffn_ratio;
        Ok(TransformerBlock {
            norm1: NormLayer::register(store, &format!("{name}.norm1"), c)?,
            attn: AttentionLayer::register(
                store,
                &format!("{name}.attn"),
                c,
                config.heads(stage),
                config.position_encoding(),
                config.scale_logits,
                seed,
            )?,
            norm2: NormLayer::register(store, &format!("{name}.norm2"), c)?,
            ffn1: LinearLayer::register(store, &format!("{name}.ffn1"), c, hidden, seed)?,
            ffn2: LinearLayer::register(store, &format!("{name}.ffn2"), hidden, c, seed)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, geom: &AttentionGeometry) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let (a, _) = self.attn.forward(g, store, h, geom)?;
        let x = add(g, x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.ffn1.forward(g, store, h)?;
        let h = gelu(g, h)?;
        let f = self.ffn2.forward(g, store, h)?;
        add(g, x, f)
    }
}

/// Max over kNN groups of `Linear(LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct DownLayer {
    pub norm: NormLayer,
    pub proj: LinearLayer,
}

impl DownLayer {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, seed: u64) -> Result<Self> {
        Ok(DownLayer {
            norm: NormLayer::register(store, &format!("{name}.norm"), c_in)?,
            proj: LinearLayer::register(store, &format!("{name}.proj"), c_in, c_out, seed)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, plan: &DownPlan) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.proj.forward(g, store, h)?;
        group_max(g, h, &plan.groups)
    }
}

/// `Linear(LN(skip)) + interpolate(Linear(LN(coarse)))`.
#[derive(Clone, Copy, Debug)]
pub struct UpLayer {
    pub norm_coarse: NormLayer,
    pub proj_coarse: LinearLayer,
    pub norm_skip: NormLayer,
    pub proj_skip: LinearLayer,
}

impl UpLayer {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, c_coarse: usize, c_fine: usize, seed: u64) -> Result<Self> {
        Ok(UpLayer {
            norm_coarse: NormLayer::register(store, &format!("{name}.norm_coarse"), c_coarse)?,
            proj_coarse: LinearLayer::register(store, &format!("{name}.proj_coarse"), c_coarse, c_fine, seed)?,
            norm_skip: NormLayer::register(store, &format!("{name}.norm_skip"), c_fine)?,
            proj_skip: LinearLayer::register(store, &format!("{name}.proj_skip"), c_fine, c_fine, seed)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, coarse: Var, skip: Var, weights: &Arc<NeighborWeights>) -> Result<Var> {
        let h = self.norm_coarse.forward(g, store, coarse)?;
        let h = self.proj_coarse.forward(g, store, h)?;
        let up = neighbor_aggregate(g, h, weights)?;
        let s = self.norm_skip.forward(g, store, skip)?;
        let s = self.proj_skip.forward(g, store, s)?;
        add(g, s, up)
    }
}

/// Graph outputs of one forward pass, in canonical point order.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub input: Var,
    pub pre_head: Var,
    pub logits: Var,
}

/// The encoder-decoder segmentation network and its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    embed: LinearLayer,
    early: Option<DownLayer>,
    early_up: Option<UpLayer>,
    stages: Vec<Vec<TransformerBlock>>,
    downs: Vec<DownLayer>,
    ups: Vec<UpLayer>,
    head_norm: NormLayer,
    head: LinearLayer,
}

impl<T: Real> Model<T> {
    /// Builds a model with parameters drawn from `seed`. Each parameter's
    /// values depend only on its name and the seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let cin = config.input_channels();
        let c0 = config.channels(0);
        let embed_in = match config.embedding {
            EmbeddingVariant::Kpconv => cin * KernelPointSet::icosahedral(1.0, 1.0)?.len(),
            _ => cin,
        };
        let embed = LinearLayer::register(&mut store, "embed", embed_in, c0, seed)?;
        let early = if config.extra_early_downsample {
            Some(DownLayer::register(&mut store, "early_down", c0, c0, seed)?)
        } else {
            None
        };
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for (s, &depth) in config.depths.iter().enumerate() {
            if s > 0 {
                downs.push(DownLayer::register(
                    &mut store,
                    &format!("down{s}"),
                    config.channels(s - 1),
                    config.channels(s),
                    seed,
                )?);
            }
            let blocks = (0..depth)
                .map(|b| TransformerBlock::register(&mut store, &format!("stage{s}.block{b}"), &config, s, seed))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        let mut ups = Vec::new();
        for s in 0..config.num_stages() - 1 {
            ups.push(UpLayer::register(
                &mut store,
                &format!("up{s}"),
                config.channels(s + 1),
                config.channels(s),
                seed,
            )?);
        }
        let early_up = if config.extra_early_downsample {
            Some(UpLayer::register(&mut store, "early_up", c0, c0, seed)?)
        } else {
            None
        };
        let head_norm = NormLayer::register(&mut store, "head.norm", c0)?;
        let head = LinearLayer::register(&mut store, "head.proj", c0, config.num_classes, seed)?;
        Ok(Model {
            config,
            params: store,
            embed,
            early,
            early_up,
            stages,
            downs,
            ups,
            head_norm,
            head,
        })
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed,
            early: self.early,
            early_up: self.early_up,
            stages: self.stages.clone(),
            downs: self.downs.clone(),
            ups: self.ups.clone(),
            head_norm: self.head_norm,
            head: self.head,
        }
    }

    pub fn plan(&self, cloud: &PointCloud) -> Result<Plan> {
        Plan::build(&self.config, cloud)
    }

    pub fn input_tensor(&self, plan: &Plan) -> Result<Tensor<T>> {
        Tensor::from_f64(&[plan.num_points(), plan.input_channels], &plan.input)
    }

    pub fn blocks(&self, stage: usize) -> &[TransformerBlock] {
        &self.stages[stage]
    }

    /// Point embedding of the canonical input features.
    pub fn embed(&self, g: &mut Graph<T>, plan: &Plan, input: Var) -> Result<Var> {
        let store = &self.params;
        match &plan.embed {
            EmbedPlan::Linear => self.embed.forward(g, store, input),
            EmbedPlan::Max(groups) => {
                let h = self.embed.forward(g, store, input)?;
                group_max(g, h, groups)
            }
            EmbedPlan::Mix(w) if w.blocks == 1 => {
                let h = self.embed.forward(g, store, input)?;
                neighbor_aggregate(g, h, w)
            }
            EmbedPlan::Mix(w) => {
                let agg = neighbor_aggregate(g, input, w)?;
                self.embed.forward(g, store, agg)
            }
        }
    }

    /// Records the full forward pass on `input` (canonical order) into `g`.
    pub fn forward_graph(&self, g: &mut Graph<T>, plan: &Plan, input: Var) -> Result<ForwardVars> {
        if plan.stages.len() != self.stages.len() {
            return Err(Error::invalid("plan was built for a different stage count"));
        }
        let store = &self.params;
        let embedded = self.embed(g, plan, input)?;
        let mut x = match (&self.early, &plan.early) {
            (Some(layer), Some(p)) => layer.forward(g, store, embedded, p)?,
            (None, None) => embedded,
            _ => return Err(Error::invalid("plan and model disagree on the early downsample")),
        };
        let mut skips = Vec::with_capacity(self.stages.len());
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                x = self.downs[s - 1].forward(g, store, x, &plan.downs[s - 1])?;
            }
            for (b, block) in blocks.iter().enumerate() {
                x = block.forward(g, store, x, &plan.stages[s].geoms[b % 2])?;
            }
            skips.push(x);
        }
        let mut dec = skips.pop().expect("at least one stage");
        for s in (0..skips.len()).rev() {
            dec = self.ups[s].forward(g, store, dec, skips[s], &plan.ups[s])?;
        }
        if let (Some(layer), Some(w)) = (&self.early_up, &plan.early_up) {
            dec = layer.forward(g, store, dec, embedded, w)?;
        }
        let h = self.head_norm.forward(g, store, dec)?;
        let logits = self.head.forward(g, store, h)?;
        Ok(ForwardVars {
            input,
            pre_head: dec,
            logits,
        })
    }

    /// `N × num_classes` logits in the cloud's own point order.
    pub fn predict(&self, cloud: &PointCloud) -> Result<Tensor<T>> {
        let plan = self.plan(cloud)?;
        let mut g = Graph::new();
        let input = g.constant(self.input_tensor(&plan)?);
        let out = self.forward_graph(&mut g, &plan, input)?;
        Ok(unpermute_rows(g.value(out.logits), &plan.order))
    }

    /// Mean cross-entropy on the cloud's labels; parameter gradients are added
    /// into `self.params`. Returns the loss and the logits in cloud order.
    pub fn loss_and_grad(&mut self, cloud: &PointCloud) -> Result<(T, Tensor<T>)> {
        let labels = cloud.labels.as_ref().ok_or_else(|| Error::invalid("training needs a labelled cloud"))?;
        let plan = self.plan(cloud)?;
        let sorted: Vec<u32> = plan.order.iter().map(|&i| labels[i]).collect();
        let mut g = Graph::new();
        let input = g.constant(self.input_tensor(&plan)?);
        let out = self.forward_graph(&mut g, &plan, input)?;
        let loss = cross_entropy_mean(&mut g, out.logits, &sorted, IGNORE_LABEL)?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        g.accumulate_param_grads(&mut self.params)?;
        Ok((value, unpermute_rows(g.value(out.logits), &plan.order)))
    }

    /// Gradient magnitude of `‖pre_head[target]‖` with respect to each point's
    /// input features, divided by its maximum.
    pub fn erf_saliency(&self, cloud: &PointCloud, target: usize) -> Result<Vec<f64>> {
        if target >= cloud.len() {
            return Err(Error::IndexOutOfRange {
                context: "erf target",
                index: target,
                len: cloud.len(),
            });
        }
        let plan = self.plan(cloud)?;
        let t = plan.order.iter().position(|&i| i == target).expect("order is a permutation");
        let mut g = Graph::new();
        let input = g.leaf(self.input_tensor(&plan)?);
        let out = self.forward_graph(&mut g, &plan, input)?;
        let feats = g.value(out.pre_head);
        let c = feats.cols();
        let row = feats.row(t);
        let norm = row.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        let mut seed = vec![T::zero(); feats.numel()];
        if norm > 0.0 {
            for (s, &v) in seed[t * c..(t + 1) * c].iter_mut().zip(row) {
                *s = T::lit(v.as_f64() / norm);
            }
        }
        g.backward_seeded(out.pre_head, seed)?;
        let cin = plan.input_channels;
        let grad = g
            .grad(input)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); plan.num_points() * cin]);
        let mut sal = vec![0.0; cloud.len()];
        for (k, &orig) in plan.order.iter().enumerate() {
            sal[orig] = grad[k * cin..(k + 1) * cin].iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        }
        let max = sal.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            sal.iter_mut().for_each(|v| *v /= max);
        } else if cloud.len() == 1 {
            sal[0] = 1.0;
        }
        Ok(sal)
    }
}

/// Row `order[i]` of the output is row `i` of `t`.
pub fn unpermute_rows<T: Real>(t: &Tensor<T>, order: &[usize]) -> Tensor<T> {
    let c = t.cols();
    let mut out = vec![T::zero(); t.numel()];
    for (i, &o) in order.iter().enumerate() {
        out[o * c..(o + 1) * c].copy_from_slice(t.row(i));
    }
    Tensor::new(t.shape(), out).expect("same shape")
}
