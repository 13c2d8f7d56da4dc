use std::sync::Arc;

use super::op::{attention_block, AttentionGeometry, AttentionVars, AttentionWorkspace};
use super::{AXES, ROLES};
use crate::diffcore::{name_seed, uniform_tensor, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Initial half-width of the cRPE tables; small so early training is close
/// to the model without position encoding.
pub const CRPE_INIT_SCALE: f64 = 0.02;

/// How relative positions enter the logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionEncoding {
    None,
    /// Quantized lookup tables with `bins` entries per axis.
    Crpe {
        bins: usize,
    },
    /// MLP bias from raw relative coordinates, with `hidden` units.
    Mlp {
        hidden: usize,
    },
}

/// Parameter handles of one attention sublayer.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub channels: usize,
    pub heads: usize,
    pub scale_logits: bool,
    proj: [ParamId; 8],
    crpe: Option<[ParamId; 9]>,
    mlp: Option<[ParamId; 4]>,
}

fn weight<T: Real>(store: &mut ParamStore<T>, name: String, rows: usize, cols: usize, seed: u64) -> Result<ParamId> {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let t = uniform_tensor(&[rows, cols], bound, name_seed(seed, &name));
    store.add(name, t, true)
}

fn bias<T: Real>(store: &mut ParamStore<T>, name: String, cols: usize) -> Result<ParamId> {
    store.add(name, Tensor::zeros(&[cols]), false)
}

impl AttentionLayer {
    /// Adds the layer's parameters under `prefix`, initialised from `seed`.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        pe: PositionEncoding,
        scale_logits: bool,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::invalid(format!("{channels} channels do not split into {heads} heads")));
        }
        let mut proj = Vec::with_capacity(8);
        for name in ["q", "k", "v", "out"] {
            proj.push(weight(store, format!("{prefix}.{name}.weight"), channels, channels, seed)?);
            proj.push(bias(store, format!("{prefix}.{name}.bias"), channels)?);
        }
        let proj: [ParamId; 8] = proj.try_into().expect("eight projections");
        let (crpe, mlp) = match pe {
            PositionEncoding::None => (None, None),
            PositionEncoding::Crpe { bins } => {
                let mut ids = Vec::with_capacity(9);
                for role in ROLES {
                    for axis in AXES {
                        let name = format!("{prefix}.crpe.{role}_{axis}");
                        let t = uniform_tensor(&[bins, channels], CRPE_INIT_SCALE, name_seed(seed, &name));
                        ids.push(store.add(name, t, false)?);
                    }
                }
                (Some(ids.try_into().expect("nine tables")), None)
            }
            PositionEncoding::Mlp { hidden } => {
                let ids = [
                    weight(store, format!("{prefix}.pos_mlp.0.weight"), 3, hidden, seed)?,
                    bias(store, format!("{prefix}.pos_mlp.0.bias"), hidden)?,
                    weight(store, format!("{prefix}.pos_mlp.1.weight"), hidden, heads, seed)?,
                    bias(store, format!("{prefix}.pos_mlp.1.bias"), heads)?,
                ];
                (None, Some(ids))
            }
        };
        Ok(AttentionLayer {
            channels,
            heads,
            scale_logits,
            proj,
            crpe,
            mlp,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.proj.to_vec();
        ids.extend(self.crpe.iter().flatten());
        ids.extend(self.mlp.iter().flatten());
        ids
    }

    pub fn crpe_ids(&self) -> Option<[ParamId; 9]> {
        self.crpe
    }

    pub fn vars<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> AttentionVars {
        AttentionVars {
            proj: self.proj.map(|id| g.param(store, id)),
            crpe: self.crpe.map(|ids| ids.map(|id| g.param(store, id))),
            mlp: self.mlp.map(|ids| ids.map(|id| g.param(store, id))),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        geom: &AttentionGeometry,
    ) -> Result<(Var, Arc<AttentionWorkspace<T>>)> {
        let vars = self.vars(g, store);
        attention_block(g, x, &vars, geom, self.heads, self.scale_logits)
    }
}

/// Gradients returned by [`AttentionSession::backward`].
#[derive(Clone, Debug)]
pub struct AttentionGrads<T> {
    pub dx: Vec<T>,
    pub params: Vec<(ParamId, Vec<T>)>,
}

struct SessionState<T: Real> {
    graph: Graph<T>,
    x: Var,
    out: Var,
    params: Vec<(ParamId, Var)>,
    workspace: Arc<AttentionWorkspace<T>>,
}

/// Standalone forward/backward of one attention layer outside a model graph.
pub struct AttentionSession<T: Real> {
    state: Option<SessionState<T>>,
}

impl<T: Real> Default for AttentionSession<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> AttentionSession<T> {
    pub fn new() -> Self {
        AttentionSession { state: None }
    }

    /// Runs the layer on `x` (`N × C`) and keeps the workspace for backward.
    pub fn forward(&mut self, layer: &AttentionLayer, store: &ParamStore<T>, x: &Tensor<T>, geom: &AttentionGeometry) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let xv = graph.leaf(x.clone());
        let vars = layer.vars(&mut graph, store);
        let (out, workspace) = attention_block(&mut graph, xv, &vars, geom, layer.heads, layer.scale_logits)?;
        let mut params: Vec<(ParamId, Var)> = layer.proj.iter().copied().zip(vars.proj).collect();
        if let (Some(ids), Some(v)) = (layer.crpe, vars.crpe) {
            params.extend(ids.into_iter().zip(v));
        }
        if let (Some(ids), Some(v)) = (layer.mlp, vars.mlp) {
            params.extend(ids.into_iter().zip(v));
        }
        let y = graph.value(out).clone();
        self.state = Some(SessionState {
            graph,
            x: xv,
            out,
            params,
            workspace,
        });
        Ok(y)
    }

    pub fn workspace(&self) -> Option<&AttentionWorkspace<T>> {
        self.state.as_ref().map(|s| s.workspace.as_ref())
    }

    /// Gradients of `<upstream, output>` with respect to `x` and every parameter.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<AttentionGrads<T>> {
        let st = self.state.as_mut().ok_or(Error::MissingWorkspace)?;
        st.graph.backward_seeded(st.out, upstream.data().to_vec())?;
        let grad_of = |v: Var, n: usize| st.graph.grad(v).map_or_else(|| vec![T::zero(); n], <[T]>::to_vec);
        let dx = grad_of(st.x, st.graph.value(st.x).numel());
        let params = st.params.iter().map(|&(id, v)| (id, grad_of(v, st.graph.value(v).numel()))).collect();
        Ok(AttentionGrads { dx, params })
    }
}
