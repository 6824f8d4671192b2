//! Latent synchronization: every token attends only to its most similar
//! prototype, and the attended value is refined by an FFN and added back.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Ffn, FfnParams, FfnVars, Linear, LinearMap, LinearVars, ParamStore};
use crate::proto::{PrototypeSet, TokenGrid};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    /// `q . k / sqrt(D)` on the attention projections.
    #[default]
    ScaledDot,
    /// Cosine of the same projections.
    Cosine,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" | "scaled-dot" => Ok(Self::ScaledDot),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown similarity '{other}' (expected dot or cosine)"))),
        }
    }
}

/// Hard token-to-prototype assignment, one prototype per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMask {
    pub assignments: Vec<usize>,
    pub prototypes: usize,
}

impl AssignmentMask {
    pub fn new(assignments: Vec<usize>, prototypes: usize) -> Result<Self> {
        if let Some(&bad) = assignments.iter().find(|&&a| a >= prototypes) {
            return Err(Error::Contract(format!("assignment {bad} out of range for {prototypes} prototypes")));
        }
        Ok(Self { assignments, prototypes })
    }

    pub fn tokens(&self) -> usize {
        self.assignments.len()
    }

    /// `T x K` flattened, `true` where token `t` may attend to prototype `k`.
    pub fn allowed(&self) -> Vec<bool> {
        let k = self.prototypes;
        let mut out = vec![false; self.tokens() * k];
        for (t, &a) in self.assignments.iter().enumerate() {
            out[t * k + a] = true;
        }
        out
    }

    /// Binary `T x K` mask matrix.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.allowed().into_iter().map(|a| if a { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[self.tokens(), self.prototypes], data).expect("finite")
    }
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    let (m, _) = scores.dims2()?;
    Ok((0..m)
        .map(|i| {
            let row = scores.row(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncParams {
    pub query: LinearMap,
    pub key: LinearMap,
    pub value: LinearMap,
    pub ffn: Ffn,
    pub similarity: Similarity,
}

impl SyncParams {
    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: LinearMap::random(d, d, rng),
            key: LinearMap::random(d, d, rng),
            value: LinearMap::random(d, d, rng),
            ffn: Ffn::random(d, rng),
            similarity: Similarity::ScaledDot,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> SyncVars<'t> {
        SyncVars {
            query: self.query.bind(tape),
            key: self.key.bind(tape),
            value: self.value.bind(tape),
            ffn: self.ffn.bind(tape),
            similarity: self.similarity,
        }
    }
}

/// Trainable synchronization handles inside a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct SyncLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub ffn: FfnParams,
    pub similarity: Similarity,
}

impl SyncLayer {
    pub fn register(store: &mut ParamStore, name: &str, init: SyncParams) -> Self {
        Self {
            query: Linear::register(store, &format!("{name}.query"), init.query),
            key: Linear::register(store, &format!("{name}.key"), init.key),
            value: Linear::register(store, &format!("{name}.value"), init.value),
            ffn: FfnParams::register(store, &format!("{name}.ffn"), init.ffn),
            similarity: init.similarity,
        }
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> SyncVars<'t> {
        SyncVars {
            query: self.query.bind(b),
            key: self.key.bind(b),
            value: self.value.bind(b),
            ffn: self.ffn.bind(b),
            similarity: self.similarity,
        }
    }
}

#[derive(Clone, Copy)]
pub struct SyncVars<'t> {
    pub query: LinearVars<'t>,
    pub key: LinearVars<'t>,
    pub value: LinearVars<'t>,
    pub ffn: FfnVars<'t>,
    pub similarity: Similarity,
}

impl<'t> SyncVars<'t> {
    fn similarity_scores(&self, q: Var<'t>, k: Var<'t>) -> Result<Tensor> {
        let d = q.shape()[1];
        match self.similarity {
            Similarity::ScaledDot => {
                let s = q.value().matmul(&k.value().transpose()?)?;
                s.map("similarity", |v| v / (d as f64).sqrt())
            }
            Similarity::Cosine => q.row_normalize()?.value().matmul(&k.row_normalize()?.value().transpose()?),
        }
    }

    /// Hard assignment of each token to its most similar prototype. The
    /// argmax carries no gradient.
    pub fn mask(&self, tokens: Var<'t>, prototypes: Var<'t>) -> Result<AssignmentMask> {
        let q = self.query.apply(tokens)?;
        let k = self.key.apply(prototypes)?;
        let scores = self.similarity_scores(q, k)?;
        AssignmentMask::new(argmax_rows(&scores)?, prototypes.shape()[0])
    }

    /// Masked cross-attention from tokens to prototypes.
    pub fn attend(&self, tokens: Var<'t>, prototypes: Var<'t>, mask: &AssignmentMask) -> Result<Var<'t>> {
        let (t, kp) = (tokens.shape()[0], prototypes.shape()[0]);
        if mask.tokens() != t || mask.prototypes != kp {
            return Err(Error::Contract(format!(
                "mask is {}x{} but attention is {t}x{kp}",
                mask.tokens(),
                mask.prototypes
            )));
        }
        let q = self.query.apply(tokens)?;
        let k = self.key.apply(prototypes)?;
        let v = self.value.apply(prototypes)?;
        let scale = 1.0 / (q.shape()[1] as f64).sqrt();
        let weights = q.matmul(k.transpose()?)?.scale(scale)?.masked_softmax_rows(&mask.allowed())?;
        weights.matmul(v)
    }

    /// `FFN(attend(...))`, the residual update.
    pub fn update(&self, tokens: Var<'t>, prototypes: Var<'t>, mask: &AssignmentMask) -> Result<Var<'t>> {
        self.ffn.apply(self.attend(tokens, prototypes, mask)?)
    }
}

fn check_dims(tokens: &TokenGrid, p: &PrototypeSet) -> Result<()> {
    if tokens.dim() != p.dim() {
        return Err(Error::Shape {
            op: "latent_sync",
            lhs: tokens.features.shape().to_vec(),
            rhs: p.prototypes.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn build_assignment_mask(tokens: &TokenGrid, p: &PrototypeSet, params: &SyncParams) -> Result<AssignmentMask> {
    check_dims(tokens, p)?;
    let tape = Tape::new();
    params
        .bind(&tape)
        .mask(tape.leaf(tokens.features.clone()), tape.leaf(p.prototypes.clone()))
}

/// `tokens + FFN(masked_attention(tokens, P))`.
pub fn latent_synchronization(
    tokens: &TokenGrid,
    p: &PrototypeSet,
    mask: &AssignmentMask,
    params: &SyncParams,
) -> Result<TokenGrid> {
    check_dims(tokens, p)?;
    let tape = Tape::new();
    let x = tape.leaf(tokens.features.clone());
    let out = x.add(params.bind(&tape).update(x, tape.leaf(p.prototypes.clone()), mask)?)?;
    TokenGrid::new((*out.value()).clone(), tokens.height, tokens.width)
}

/// Masked attention output only, without FFN or residual.
pub fn attention_output(tokens: &TokenGrid, p: &PrototypeSet, mask: &AssignmentMask, params: &SyncParams) -> Result<Tensor> {
    check_dims(tokens, p)?;
    let tape = Tape::new();
    let out = params
        .bind(&tape)
        .attend(tape.leaf(tokens.features.clone()), tape.leaf(p.prototypes.clone()), mask)?;
    Ok((*out.value()).clone())
}
