use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// The vector-Jacobian product of one recorded op.
pub trait Backward<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<Var>;
    /// Adds the input gradients implied by `grad_out` into `sink`.
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad_out: &[T], sink: &mut GradSink<'_, T>) -> Result<()>;
}

/// Read access to forward values during the backward pass.
pub struct BackwardCtx<'a, T> {
    values: &'a [Tensor<T>],
}

impl<'a, T: Real> BackwardCtx<'a, T> {
    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.values[v.0]
    }
}

/// Gradient accumulator for the nodes of a graph.
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    requires: &'a [bool],
    sizes: &'a [Tensor<T>],
}

impl<T: Real> GradSink<'_, T> {
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Mutable gradient buffer of `v`, zero-initialised on first use.
    pub fn buffer(&mut self, v: Var) -> &mut [T] {
        let n = self.sizes[v.0].numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn accumulate(&mut self, v: Var, grad: &[T]) {
        if !self.requires[v.0] {
            return;
        }
        let buf = self.buffer(v);
        debug_assert_eq!(buf.len(), grad.len());
        for (b, &g) in buf.iter_mut().zip(grad) {
            *b = *b + g;
        }
    }
}

/// Records one forward pass so gradients can be propagated back through it.
pub struct Graph<T: Real> {
    values: Vec<Tensor<T>>,
    ops: Vec<Option<Box<dyn Backward<T>>>>,
    params: Vec<Option<ParamId>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push_node(&mut self, value: Tensor<T>, op: Option<Box<dyn Backward<T>>>, param: Option<ParamId>, requires: bool) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.params.push(param);
        self.requires.push(requires);
        self.grads.push(None);
        Var(id)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, None, None, false)
    }

    /// An input whose gradient is retained after `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, None, None, true)
    }

    /// A parameter leaf; its gradient can be written back with [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.push_node(value, None, Some(id), true)
    }

    /// Records the output of an op.
    pub fn record(&mut self, value: Tensor<T>, op: impl Backward<T> + 'static) -> Var {
        let requires = op.inputs().iter().any(|v| self.requires[v.0]);
        let op: Option<Box<dyn Backward<T>>> = if requires { Some(Box::new(op)) } else { None };
        self.push_node(value, op, None, requires)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.values[output.0].numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.values[output.0].shape().to_vec(),
                rhs: vec![],
            });
        }
        self.backward_seeded(output, vec![T::one()])
    }

    /// Backpropagates an arbitrary cotangent `seed` from `output`.
    pub fn backward_seeded(&mut self, output: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.values[output.0].numel() {
            return Err(Error::Shape {
                op: "backward_seeded",
                lhs: self.values[output.0].shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let Some(op) = &self.ops[id] else { continue };
            let Some(grad_out) = self.grads[id].take() else { continue };
            let ctx = BackwardCtx { values: &self.values };
            let mut sink = GradSink {
                grads: &mut self.grads,
                requires: &self.requires,
                sizes: &self.values,
            };
            op.backward(&ctx, &grad_out, &mut sink)?;
            self.grads[id] = Some(grad_out);
        }
        Ok(())
    }

    /// Adds parameter-leaf gradients from the last backward pass into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, param) in self.params.iter().enumerate() {
            if let (Some(pid), Some(g)) = (param, &self.grads[id]) {
                store.accumulate_grad(*pid, g)?;
            }
        }
        Ok(())
    }
}
