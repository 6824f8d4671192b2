//! Trainable building blocks: linear maps, the feed-forward network and the
//! named parameter store they live in.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `x W + b` with `W: D_in x D_out`, `b: D_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearMap {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, d_out) = weight.dims2()?;
        if bias.shape() != [d_out] {
            return Err(Error::Shape {
                op: "linear",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Tensor::identity(d),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    /// Glorot-uniform weight, zero bias.
    pub fn random(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: glorot(d_in, d_out, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> LinearVars<'t> {
        LinearVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let y = self.bind(&tape).apply(tape.leaf(x.clone()))?;
        Ok((*y.value()).clone())
    }
}

pub fn glorot(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..d_in * d_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(&[d_in, d_out], data).expect("finite by construction")
}

/// A linear map recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> LinearVars<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.weight)?.add_row(self.bias)
    }
}

pub const FFN_EXPANSION: usize = 4;

/// Two linear maps with a GELU between, hidden width `4 * D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub up: LinearMap,
    pub down: LinearMap,
}

impl Ffn {
    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: LinearMap::random(d, FFN_EXPANSION * d, rng),
            down: LinearMap::random(FFN_EXPANSION * d, d, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            up: LinearMap::zeros(d, FFN_EXPANSION * d),
            down: LinearMap::zeros(FFN_EXPANSION * d, d),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> FfnVars<'t> {
        FfnVars {
            up: self.up.bind(tape),
            down: self.down.bind(tape),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let y = self.bind(&tape).apply(tape.leaf(x.clone()))?;
        Ok((*y.value()).clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars<'t> {
    pub up: LinearVars<'t>,
    pub down: LinearVars<'t>,
}

impl<'t> FfnVars<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.down.apply(self.up.apply(x)?.gelu()?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "param_set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    pub fn map_values(&mut self, f: impl Fn(&Tensor) -> Tensor) {
        for v in &mut self.values {
            *v = f(v);
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Substitutes `var` for the parameter `id`.
    pub fn with(mut self, id: ParamId, var: Var<'t>) -> Self {
        self.vars[id.0] = var;
        self
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Handles for a [`LinearMap`] stored in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, init: LinearMap) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init.weight),
            bias: store.add(format!("{name}.bias"), init.bias),
        }
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> LinearVars<'t> {
        LinearVars {
            weight: b.var(self.weight),
            bias: b.var(self.bias),
        }
    }

    pub fn to_map(&self, store: &ParamStore) -> LinearMap {
        LinearMap {
            weight: store.get(self.weight).clone(),
            bias: store.get(self.bias).clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub up: Linear,
    pub down: Linear,
}

impl FfnParams {
    pub fn register(store: &mut ParamStore, name: &str, init: Ffn) -> Self {
        Self {
            up: Linear::register(store, &format!("{name}.up"), init.up),
            down: Linear::register(store, &format!("{name}.down"), init.down),
        }
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> FfnVars<'t> {
        FfnVars {
            up: self.up.bind(b),
            down: self.down.bind(b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl NormParams {
    pub fn register(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(b.var(self.gain), b.var(self.shift))
    }
}
