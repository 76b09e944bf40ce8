use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter's initial values are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform { lo: f64, hi: f64 },
    Constant(f64),
    /// Kaiming-uniform for a ReLU-family layer: U(-b, b), b = sqrt(6 / fan_in).
    Kaiming { fan_in: usize },
}

impl Init {
    pub fn sample<R: Rng>(self, shape: &[usize], dtype: DType, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
            Init::Constant(v) => vec![v; n],
            Init::Kaiming { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        Tensor::from_parts(shape.to_vec(), data, dtype)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable; updated by the optimizer.
    Weight,
    /// Persistent state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub init: Init,
    pub kind: ParamKind,
}

/// Ordered collection of every parameter and buffer of a model.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: Vec::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn add<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let value = init.sample(shape, self.dtype, rng);
        self.push(name.into(), value, init, ParamKind::Weight)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let value = value.to_dtype(self.dtype);
        self.push(name.into(), value, Init::Constant(0.0), ParamKind::Buffer)
    }

    fn push(&mut self, name: String, value: Tensor, init: Init, kind: ParamKind) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = value.zeros_like().to_dtype(DType::F64);
        self.params.push(Param {
            name,
            value,
            grad,
            init,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(shape_err(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value.to_dtype(self.dtype);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = p.grad.zeros_like();
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        let mut acc = std::mem::replace(&mut p.grad, Tensor::scalar(0.0, DType::F64)).into_vec();
        debug_assert_eq!(acc.len(), g.len());
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
        p.grad = Tensor::from_parts(p.value.shape().to_vec(), acc, DType::F64);
    }

    /// Number of learnable scalars.
    pub fn count(&self) -> usize {
        self.count_where(|_| true)
    }

    /// Number of learnable scalars whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight && pred(&p.name))
            .map(|p| p.value.numel())
            .sum()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}
