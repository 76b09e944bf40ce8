use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

/// What a backward closure sees: the upstream gradient, the op's input values,
/// its output value, and which inputs actually need a gradient.
pub(crate) struct BackCtx<'a> {
    pub grad: &'a [f64],
    pub inputs: Vec<&'a Tensor>,
    pub out: &'a Tensor,
    pub needs: Vec<bool>,
}

pub(crate) type InputGrads = Vec<Option<Vec<f64>>>;
type BackFn = Box<dyn Fn(&BackCtx) -> InputGrads>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Op,
    Constant,
    Leaf,
    Param(ParamId),
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
    requires_grad: bool,
    source: Source,
}

/// Append-only record of the operations of one forward pass.
///
/// Every op appends a node holding its output value. `backward` walks the
/// nodes in reverse append order, so each node is visited exactly once after
/// all of its consumers have contributed to its gradient.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    training: bool,
    param_vars: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor)>,
    scope: Vec<String>,
    macs: BTreeMap<String, u64>,
    taps: Option<Vec<(String, Tensor)>>,
}

/// Gradients of leaf inputs produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    tape: u64,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get(&v.id).map(|g| g.as_slice())
    }
}

impl Tape {
    pub fn new(training: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            training,
            param_vars: HashMap::new(),
            buffer_updates: Vec::new(),
            scope: Vec::new(),
            macs: BTreeMap::new(),
            taps: None,
        }
    }

    pub fn train() -> Self {
        Self::new(true)
    }

    pub fn eval() -> Self {
        Self::new(false)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            back: None,
            requires_grad: false,
            source: Source::Constant,
        })
    }

    /// An input whose gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            back: None,
            requires_grad: true,
            source: Source::Leaf,
        })
    }

    /// Loads a parameter. Repeated loads of the same id return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(Node {
            value: p.value.clone(),
            parents: Vec::new(),
            back: None,
            requires_grad: p.kind == ParamKind::Weight,
            source: Source::Param(id),
        });
        self.param_vars.insert(id, v);
        v
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::DetachedTape);
        }
        Ok(())
    }

    /// Value of a recorded var.
    ///
    /// Panics if `v` was recorded on a different tape.
    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "var from a different tape");
        &self.nodes[v.id].value
    }

    pub(crate) fn get(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.id].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.id].requires_grad
    }

    /// Records an op output. The backward closure is dropped when no input
    /// needs a gradient.
    pub(crate) fn record(
        &mut self,
        value: Tensor,
        parents: &[Var],
        back: impl Fn(&BackCtx) -> InputGrads + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p.id].requires_grad);
        let back: Option<BackFn> = if requires_grad {
            Some(Box::new(back))
        } else {
            None
        };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            back,
            requires_grad,
            source: Source::Op,
        })
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Parameter gradients are accumulated into `store`; gradients of vars
    /// created with [`Tape::leaf`] are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        self.check(loss)?;
        let loss_value = &self.nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients {
            leaves: HashMap::new(),
            tape: self.id,
        };
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.source {
                Source::Param(pid) => {
                    store.accumulate_grad(pid, &g);
                    continue;
                }
                Source::Leaf => {
                    out.leaves.insert(i, g);
                    continue;
                }
                Source::Constant => continue,
                Source::Op => {}
            }
            let Some(back) = &node.back else { continue };
            let ctx = BackCtx {
                grad: &g,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                out: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let input_grads = back(&ctx);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(input_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), self.nodes[p].value.numel());
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn queue_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    /// Writes running statistics gathered during a training-mode forward pass.
    pub fn apply_buffer_updates(&mut self, store: &mut ParamStore) -> Result<()> {
        for (id, value) in self.buffer_updates.drain(..) {
            store.set_value(id, value)?;
        }
        Ok(())
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn scope_name(&self) -> String {
        if self.scope.is_empty() {
            "(root)".to_string()
        } else {
            self.scope.join(".")
        }
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        let key = self.scope_name();
        *self.macs.entry(key).or_insert(0) += n;
    }

    /// Multiply-accumulate counts of convolutions keyed by scope path.
    pub fn macs(&self) -> &BTreeMap<String, u64> {
        &self.macs
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    /// Starts recording values passed to [`Tape::tap`].
    pub fn enable_taps(&mut self) {
        self.taps.get_or_insert_with(Vec::new);
    }

    /// Records an intermediate value for inspection when taps are enabled.
    pub fn tap(&mut self, name: &str, v: Var) {
        if self.taps.is_none() {
            return;
        }
        let key = if self.scope.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.scope.join("."), name)
        };
        let value = self.nodes[v.id].value.clone();
        if let Some(taps) = &mut self.taps {
            taps.push((key, value));
        }
    }

    pub fn taps(&self) -> &[(String, Tensor)] {
        self.taps.as_deref().unwrap_or(&[])
    }

    pub(crate) fn dtype_of(&self, vars: &[Var]) -> DType {
        vars.iter()
            .map(|&v| self.nodes[v.id].value.dtype())
            .reduce(DType::promote)
            .unwrap_or(DType::F64)
    }
}
