//! Dense f64 tensor value type and named trainable parameters.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense n-dimensional array, row-major, always f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    /// Populated by `Tape::backward` for leaves that requested gradients.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor::new(shape, data).expect("shape/data mismatch")
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }
}

/// How a parameter tensor is filled at construction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Exactly zero; used for the conditioning convolutions and output heads.
    Zero,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    UniformScaled,
    /// Normal with std sqrt(2 / (fan_in + fan_out)).
    NormalScaled,
}

/// Named trainable tensor. The name encodes the module placement,
/// e.g. `enc.0.dda.img.wq`.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub init_kind: InitKind,
}

impl Parameter {
    pub fn init(
        name: impl Into<String>,
        shape: Vec<usize>,
        kind: InitKind,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let numel: usize = shape.iter().product();
        let data = match kind {
            InitKind::Zero => vec![0.0; numel],
            InitKind::UniformScaled => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| rng.next_range(-bound, bound)).collect()
            }
            InitKind::NormalScaled => {
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| rng.next_normal() * std).collect()
            }
        };
        Parameter {
            name: name.into(),
            tensor: Tensor {
                shape,
                data,
                requires_grad: true,
                grad: None,
            },
            init_kind: kind,
        }
    }
}

/// Parameter collection with unique names and deterministic iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: std::collections::BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) {
        let prev = self.map.insert(param.name.clone(), param);
        assert!(prev.is_none(), "duplicate parameter name");
    }

    pub fn get(&self, name: &str) -> &Parameter {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Parameter {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar element count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.map.values().map(|p| p.tensor.numel()).sum()
    }
}
