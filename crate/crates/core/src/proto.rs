//! Cross-attention prototyping: prototypes are refined by EM-style
//! attention over the token grid.
//!
//! Each iteration computes the soft assignment `M = softmax_K(Q(P) K^T / sqrt(d))`
//! (every token's column is a distribution over prototypes) and the new
//! prototypes as assignment-weighted means of the token values. Keys and
//! values are projected once per layer call; only the query is recomputed.
//! The layer accumulates residually: `P = P0 + step(P0)`, then `P += step(P)`
//! for the remaining iterations.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, LinearMap, LinearVars, ParamStore};
use crate::pgm::GrayImage;
use crate::tape::{Tape, Var, GATHER_ZERO};
use crate::tensor::Tensor;

/// `T x D` token features laid out row-major over an `H x W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub features: Tensor,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn new(features: Tensor, height: usize, width: usize) -> Result<Self> {
        let (t, _) = features.dims2()?;
        if t != height * width {
            return Err(Error::InvalidShape {
                op: "token_grid",
                msg: format!("{t} tokens do not fill a {height}x{width} grid"),
            });
        }
        Ok(Self { features, height, width })
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Initial,
    External,
    Iterated(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Tensor,
    pub provenance: Provenance,
}

impl PrototypeSet {
    pub fn new(prototypes: Tensor, provenance: Provenance) -> Result<Self> {
        prototypes.dims2()?;
        Ok(Self { prototypes, provenance })
    }

    pub fn count(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }
}

/// `K x T` soft assignment; column `t` is token `t`'s distribution over
/// prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub matrix: Tensor,
}

pub const COLUMN_SUM_TOLERANCE: f64 = 1e-9;

impl SoftAssignment {
    pub fn new(matrix: Tensor) -> Result<Self> {
        let a = Self { matrix };
        let dev = a.max_column_deviation()?;
        if dev > COLUMN_SUM_TOLERANCE || a.matrix.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Contract(format!(
                "soft assignment is not column-stochastic (max deviation {dev:e})"
            )));
        }
        Ok(a)
    }

    pub fn prototypes(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// `max_t |sum_k M[k, t] - 1|`.
    pub fn max_column_deviation(&self) -> Result<f64> {
        let (k, t) = self.matrix.dims2()?;
        Ok((0..t)
            .map(|j| ((0..k).map(|i| self.matrix.at2(i, j)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max))
    }

    /// Most probable prototype per token, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        let (k, t) = (self.prototypes(), self.tokens());
        (0..t)
            .map(|j| {
                (0..k).fold(0, |best, i| {
                    if self.matrix.at2(i, j) > self.matrix.at2(best, j) {
                        i
                    } else {
                        best
                    }
                })
            })
            .collect()
    }
}

/// One 8-bit image per prototype (`round(255 M[k, .])` on the `h x w` token
/// grid) and the argmax label map with maxval `max(K - 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentImages {
    pub prototypes: Vec<GrayImage>,
    pub argmax: GrayImage,
}

impl AssignmentImages {
    pub fn new(assignment: &SoftAssignment, height: usize, width: usize) -> Result<Self> {
        let (k, t) = assignment.matrix.dims2()?;
        if t != height * width {
            return Err(Error::InvalidShape {
                op: "assignment_images",
                msg: format!("{t} tokens do not fill a {height}x{width} grid"),
            });
        }
        let prototypes = (0..k)
            .map(|i| GrayImage::from_unit(width, height, assignment.matrix.row(i)))
            .collect::<Result<_>>()?;
        let labels = assignment.argmax().into_iter().map(|i| i as u16).collect();
        let argmax = GrayImage::new(width, height, (k.saturating_sub(1)).max(1) as u16, labels)?;
        Ok(Self { prototypes, argmax })
    }

    /// Writes `proto_<k>.pgm` for every prototype and `argmax.pgm` into
    /// `dir`, creating it if needed; returns the paths written.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.prototypes.len() + 1);
        for (k, img) in self.prototypes.iter().enumerate() {
            let path = dir.join(format!("proto_{k}.pgm"));
            img.save(&path)?;
            paths.push(path);
        }
        let path = dir.join("argmax.pgm");
        self.argmax.save(&path)?;
        paths.push(path);
        Ok(paths)
    }
}

/// Per-token entropy `-sum_k p ln p` of the assignment, in `[0, ln K]`.
pub fn assignment_entropy(assignment: &SoftAssignment) -> Vec<f64> {
    let (k, t) = (assignment.prototypes(), assignment.tokens());
    (0..t)
        .map(|j| {
            -(0..k)
                .map(|i| assignment.matrix.at2(i, j))
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })
        .collect()
}

/// Adaptive average-pooling cells for `k` prototypes on an `h x w` grid:
/// a `kh x kw` layout with `kh = ceil(sqrt(k))`, `kw = ceil(k / kh)`, cell
/// `(i, j)` covering rows `floor(i h / kh) .. ceil((i + 1) h / kh)` and the
/// analogous columns. The first `k` cells in row-major order are kept.
pub fn pooling_groups(height: usize, width: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    let t = height * width;
    if k == 0 || k > t {
        return Err(Error::Param(format!(
            "prototype count {k} must be in 1..={t} for a {height}x{width} grid"
        )));
    }
    let kh = (k as f64).sqrt().ceil() as usize;
    let kw = k.div_ceil(kh);
    let span = |i: usize, n: usize, cells: usize| (i * n / cells, ((i + 1) * n).div_ceil(cells));
    let mut groups = Vec::with_capacity(k);
    'outer: for i in 0..kh {
        let (r0, r1) = span(i, height, kh);
        for j in 0..kw {
            if groups.len() == k {
                break 'outer;
            }
            let (c0, c1) = span(j, width, kw);
            groups.push((r0..r1).flat_map(|r| (c0..c1).map(move |c| r * width + c)).collect());
        }
    }
    Ok(groups)
}

/// Initial prototypes by adaptive average pooling of the token grid.
pub fn init_prototypes(tokens: &TokenGrid, k: usize) -> Result<PrototypeSet> {
    let tape = Tape::new();
    let p = init_on_tape(tape.leaf(tokens.features.clone()), tokens.height, tokens.width, k)?;
    PrototypeSet::new((*p.value()).clone(), Provenance::Initial)
}

pub fn init_on_tape<'t>(tokens: Var<'t>, height: usize, width: usize, k: usize) -> Result<Var<'t>> {
    tokens.group_mean_rows(Rc::new(pooling_groups(height, width, k)?))
}

/// Query/key/value projections of one prototyping layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoProjections {
    pub query: LinearMap,
    pub key: LinearMap,
    pub value: LinearMap,
    pub heads: usize,
}

impl ProtoProjections {
    pub fn identity(d: usize) -> Self {
        Self {
            query: LinearMap::identity(d),
            key: LinearMap::identity(d),
            value: LinearMap::identity(d),
            heads: 1,
        }
    }

    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: LinearMap::random(d, d, rng),
            key: LinearMap::random(d, d, rng),
            value: LinearMap::random(d, d, rng),
            heads: 1,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> ProtoVars<'t> {
        ProtoVars {
            query: self.query.bind(tape),
            key: self.key.bind(tape),
            value: self.value.bind(tape),
            heads: self.heads,
        }
    }
}

/// Trainable prototyping layer handles inside a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct PrototypingParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub heads: usize,
}

impl PrototypingParams {
    pub fn register(store: &mut ParamStore, name: &str, init: ProtoProjections) -> Self {
        Self {
            query: Linear::register(store, &format!("{name}.query"), init.query),
            key: Linear::register(store, &format!("{name}.key"), init.key),
            value: Linear::register(store, &format!("{name}.value"), init.value),
            heads: init.heads,
        }
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> ProtoVars<'t> {
        ProtoVars {
            query: self.query.bind(b),
            key: self.key.bind(b),
            value: self.value.bind(b),
            heads: self.heads,
        }
    }
}

/// Token keys (pre-transposed) and values, computed once per layer call.
pub struct KeyValues<'t> {
    keys_t: Vec<Var<'t>>,
    values: Vec<Var<'t>>,
}

#[derive(Clone, Copy)]
pub struct ProtoVars<'t> {
    pub query: LinearVars<'t>,
    pub key: LinearVars<'t>,
    pub value: LinearVars<'t>,
    pub heads: usize,
}

fn column_slice<'t>(x: Var<'t>, start: usize, width: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    let (rows, cols) = (shape[0], shape[1]);
    let index: Vec<usize> = (0..rows)
        .flat_map(|r| (start..start + width).map(move |c| r * cols + c))
        .collect();
    debug_assert!(!index.contains(&GATHER_ZERO));
    x.gather(Rc::new(index), &[rows, width])
}

impl<'t> ProtoVars<'t> {
    fn split_heads(&self, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        if self.heads == 1 {
            return Ok(vec![x]);
        }
        let d = x.shape()[1];
        if d % self.heads != 0 {
            return Err(Error::Config(format!("dimension {d} not divisible by {} heads", self.heads)));
        }
        let dh = d / self.heads;
        (0..self.heads).map(|h| column_slice(x, h * dh, dh)).collect()
    }

    pub fn key_values(&self, tokens: Var<'t>) -> Result<KeyValues<'t>> {
        let keys = self.split_heads(self.key.apply(tokens)?)?;
        let values = self.split_heads(self.value.apply(tokens)?)?;
        Ok(KeyValues {
            keys_t: keys.iter().map(|k| k.transpose()).collect::<Result<_>>()?,
            values,
        })
    }

    /// One E/M step: returns the assignment-weighted mean prototypes and
    /// the soft assignment (averaged over heads).
    pub fn step(&self, prototypes: Var<'t>, kv: &KeyValues<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let queries = self.split_heads(self.query.apply(prototypes)?)?;
        let mut heads_out = Vec::with_capacity(self.heads);
        let mut assignment: Option<Var<'t>> = None;
        for ((q, k_t), v) in queries.iter().zip(&kv.keys_t).zip(&kv.values) {
            let scale = 1.0 / (q.shape()[1] as f64).sqrt();
            // E-step: normalise over the prototype axis
            let m = q.matmul(*k_t)?.scale(scale)?.softmax(0)?;
            // M-step: weighted mean of the values
            let p = m.matmul(*v)?.div_rows(m.sum_rows()?)?;
            heads_out.push(p);
            assignment = Some(match assignment {
                None => m,
                Some(acc) => acc.add(m)?,
            });
        }
        let p = if heads_out.len() == 1 {
            heads_out[0]
        } else {
            Var::concat_cols(&heads_out)?
        };
        let mut m = assignment.expect("at least one head");
        if self.heads > 1 {
            m = m.scale(1.0 / self.heads as f64)?;
        }
        Ok((p, m))
    }

    /// Residual prototyping over `iterations >= 1` steps starting at `p0`.
    pub fn run(&self, tokens: Var<'t>, p0: Var<'t>, iterations: usize) -> Result<(Var<'t>, Var<'t>)> {
        if iterations == 0 {
            return Err(Error::Param("prototyping needs at least one iteration".into()));
        }
        let kv = self.key_values(tokens)?;
        let mut p = p0;
        let mut last = None;
        for _ in 0..iterations {
            let (update, m) = self.step(p, &kv)?;
            p = p.add(update)?;
            last = Some(m);
        }
        Ok((p, last.expect("iterations >= 1")))
    }
}

fn check_dims(p: &PrototypeSet, tokens: &TokenGrid, proj: &ProtoProjections) -> Result<()> {
    let d = tokens.dim();
    let ok = p.dim() == d
        && proj.query.d_in() == d
        && proj.key.d_in() == d
        && proj.value.d_in() == d
        && proj.query.d_out() == proj.key.d_out();
    if ok {
        Ok(())
    } else {
        Err(Error::Shape {
            op: "prototyping",
            lhs: p.prototypes.shape().to_vec(),
            rhs: tokens.features.shape().to_vec(),
        })
    }
}

/// A single E/M step without the residual. The returned prototypes are
/// `M V` with each row divided by its assignment mass.
pub fn prototyping_step(
    p: &PrototypeSet,
    tokens: &TokenGrid,
    proj: &ProtoProjections,
) -> Result<(PrototypeSet, SoftAssignment)> {
    check_dims(p, tokens, proj)?;
    let kv = DirectKeyValues::new(proj, &tokens.features)?;
    let (next, m) = kv.step(proj, &p.prototypes)?;
    let n = match p.provenance {
        Provenance::Iterated(n) => n + 1,
        _ => 1,
    };
    Ok((
        PrototypeSet::new(next, Provenance::Iterated(n))?,
        SoftAssignment::new(m)?,
    ))
}

/// Full layer: pooled initial prototypes followed by `n` residual steps.
pub fn cross_attention_prototyping(
    tokens: &TokenGrid,
    k: usize,
    n: usize,
    proj: &ProtoProjections,
) -> Result<(PrototypeSet, SoftAssignment)> {
    let p0 = init_prototypes(tokens, k)?;
    cross_attention_prototyping_from(tokens, &p0, n, proj)
}

/// As [`cross_attention_prototyping`] with caller-supplied initial prototypes.
pub fn cross_attention_prototyping_from(
    tokens: &TokenGrid,
    p0: &PrototypeSet,
    n: usize,
    proj: &ProtoProjections,
) -> Result<(PrototypeSet, SoftAssignment)> {
    check_dims(p0, tokens, proj)?;
    if n == 0 {
        return Err(Error::Param("prototyping needs at least one iteration".into()));
    }
    let kv = DirectKeyValues::new(proj, &tokens.features)?;
    let mut p = p0.prototypes.clone();
    let mut last = None;
    for _ in 0..n {
        let (update, m) = kv.step(proj, &p)?;
        p = p.zip_map(&update, "add", |a, b| a + b)?;
        last = Some(m);
    }
    Ok((
        PrototypeSet::new(p, Provenance::Iterated(n))?,
        SoftAssignment::new(last.expect("n >= 1"))?,
    ))
}

/// Tape-free counterpart of [`KeyValues`] for forward-only calls. It
/// performs the same operations in the same order as [`ProtoVars::step`],
/// so both paths agree bit for bit, but no intermediate outlives its use.
struct DirectKeyValues {
    keys_t: Vec<Tensor>,
    values: Vec<Tensor>,
}

fn linear(map: &LinearMap, x: &Tensor) -> Result<Tensor> {
    let y = x.matmul(&map.weight)?;
    let n = map.bias.len();
    let data = y
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(map.bias.data()).map(|(a, b)| a + b))
        .collect();
    Tensor::new(y.shape(), data)
}

fn split_columns(x: Tensor, heads: usize) -> Result<Vec<Tensor>> {
    if heads == 1 {
        return Ok(vec![x]);
    }
    let (rows, d) = x.dims2()?;
    if d % heads != 0 {
        return Err(Error::Config(format!("dimension {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            let data = x.data().chunks(d).flat_map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect();
            Tensor::new(&[rows, dh], data)
        })
        .collect()
}

impl DirectKeyValues {
    fn new(proj: &ProtoProjections, tokens: &Tensor) -> Result<Self> {
        let keys = split_columns(linear(&proj.key, tokens)?, proj.heads)?;
        Ok(Self {
            keys_t: keys.iter().map(Tensor::transpose).collect::<Result<_>>()?,
            values: split_columns(linear(&proj.value, tokens)?, proj.heads)?,
        })
    }

    fn step(&self, proj: &ProtoProjections, prototypes: &Tensor) -> Result<(Tensor, Tensor)> {
        let queries = split_columns(linear(&proj.query, prototypes)?, proj.heads)?;
        let mut heads_out = Vec::with_capacity(queries.len());
        let mut assignment: Option<Tensor> = None;
        for ((q, k_t), v) in queries.iter().zip(&self.keys_t).zip(&self.values) {
            let scale = 1.0 / (q.shape()[1] as f64).sqrt();
            let m = q.matmul(k_t)?.map("scale", |a| a * scale)?.softmax_axis(0)?;
            let (k, d) = (m.shape()[0], v.shape()[1]);
            let pv = m.matmul(v)?;
            let mut data = vec![0.0; k * d];
            for (i, row) in m.data().chunks(m.shape()[1]).enumerate() {
                let mass: f64 = row.iter().sum();
                if mass > 0.0 {
                    for j in 0..d {
                        data[i * d + j] = pv.data()[i * d + j] / mass;
                    }
                }
            }
            heads_out.push(Tensor::new(&[k, d], data)?);
            assignment = Some(match assignment {
                None => m,
                Some(acc) => acc.zip_map(&m, "add", |a, b| a + b)?,
            });
        }
        let p = if heads_out.len() == 1 {
            heads_out.pop().expect("one head")
        } else {
            let k = heads_out[0].shape()[0];
            let width: usize = heads_out.iter().map(|h| h.shape()[1]).sum();
            let mut data = Vec::with_capacity(k * width);
            for i in 0..k {
                for h in &heads_out {
                    data.extend_from_slice(h.row(i));
                }
            }
            Tensor::new(&[k, width], data)?
        };
        let mut m = assignment.expect("at least one head");
        if proj.heads > 1 {
            let c = 1.0 / proj.heads as f64;
            m = m.map("scale", |a| a * c)?;
        }
        Ok((p, m))
    }
}

/// Closed-form multiply-accumulate count of one layer call with `n`
/// iterations: `(iterative, projections)` where the iterative part is the
/// `N K T D` term of the E and M products and the projections are the
/// one-time key/value maps plus one query map per iteration.
pub fn layer_macs(t: u64, k: u64, n: u64, d: u64) -> (u64, u64) {
    (2 * n * k * t * d, 2 * t * d * d + n * k * d * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{e_step, m_step, MixtureState};
    use crate::gradcheck::grad_check;
    use crate::tensor::macs;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn grid(h: usize, w: usize, d: usize, rng: &mut impl Rng) -> TokenGrid {
        TokenGrid::new(random(&[h * w, d], rng, 1.0), h, w).unwrap()
    }

    #[test]
    fn init_identity_pooling_when_k_equals_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid(4, 4, 3, &mut rng);
        let p = init_prototypes(&g, 16).unwrap();
        assert_eq!(p.prototypes, g.features);
        assert_eq!(p.provenance, Provenance::Initial);
    }

    #[test]
    fn init_constant_map() {
        let g = TokenGrid::new(Tensor::full(&[30, 2], 0.7), 5, 6).unwrap();
        let p = init_prototypes(&g, 7).unwrap();
        assert!(p.prototypes.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert_eq!(p.count(), 7);
    }

    #[test]
    fn init_quadrant_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = grid(8, 8, 3, &mut rng);
        let p = init_prototypes(&g, 4).unwrap();
        for (q, (r0, c0)) in [(0, 0), (0, 4), (4, 0), (4, 4)].into_iter().enumerate() {
            for d in 0..3 {
                let mut acc = 0.0;
                for r in r0..r0 + 4 {
                    for c in c0..c0 + 4 {
                        acc += g.features.at2(r * 8 + c, d);
                    }
                }
                assert!((p.prototypes.at2(q, d) - acc / 16.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn init_rejects_too_many_prototypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(2, 2, 3, &mut rng);
        assert!(matches!(init_prototypes(&g, 5), Err(Error::Param(_))));
        assert!(matches!(init_prototypes(&g, 0), Err(Error::Param(_))));
    }

    #[test]
    fn single_prototype_takes_mean_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = grid(3, 3, 4, &mut rng);
        let proj = ProtoProjections::random(4, &mut rng);
        let p = PrototypeSet::new(random(&[1, 4], &mut rng, 1.0), Provenance::External).unwrap();
        let (next, m) = prototyping_step(&p, &g, &proj).unwrap();
        assert!(m.matrix.data().iter().all(|&v| v == 1.0));
        let v = proj.value.apply(&g.features).unwrap();
        for d in 0..4 {
            let mean = (0..9).map(|t| v.at2(t, d)).sum::<f64>() / 9.0;
            assert!((next.prototypes.at2(0, d) - mean).abs() < 1e-12);
        }
        assert_eq!(next.provenance, Provenance::Iterated(1));
    }

    #[test]
    fn step_matches_em_with_matched_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let g = grid(4, 5, d, &mut rng);
        let centers = random(&[3, d], &mut rng, 1.0);
        let p = PrototypeSet::new(centers.clone(), Provenance::External).unwrap();
        let (next, m) = prototyping_step(&p, &g, &ProtoProjections::identity(d)).unwrap();

        let state = MixtureState::matched_to_attention(centers).unwrap();
        let resp = e_step(&g.features, &state).unwrap();
        let (em, _) = m_step(&g.features, &resp, &state).unwrap();
        assert!(next.prototypes.max_abs_diff(&em.centers) < 1e-8);
        assert!(m.matrix.max_abs_diff(&resp.r.transpose().unwrap()) < 1e-8);
    }

    #[test]
    fn hard_assignment_limit_gives_cluster_means() {
        // one-hot tokens, prototypes aligned and strongly scaled
        let d = 3;
        let labels = [0, 1, 2, 0, 1, 2, 2, 0];
        let mut feats = vec![0.0; labels.len() * d];
        for (t, &l) in labels.iter().enumerate() {
            feats[t * d + l] = 1.0;
        }
        let g = TokenGrid::new(Tensor::new(&[8, d], feats).unwrap(), 2, 4).unwrap();
        let p = PrototypeSet::new(Tensor::identity(d).map("scale", |v| 60.0 * v).unwrap(), Provenance::External).unwrap();
        let (next, m) = prototyping_step(&p, &g, &ProtoProjections::identity(d)).unwrap();
        for (t, &l) in labels.iter().enumerate() {
            assert!(m.matrix.at2(l, t) > 1.0 - 1e-9);
        }
        // per-cluster mean of one-hot values is the one-hot vector itself
        assert!(next.prototypes.max_abs_diff(&Tensor::identity(d)) < 1e-9);
    }

    #[test]
    fn one_iteration_is_init_plus_one_residual_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = grid(4, 4, 5, &mut rng);
        let proj = ProtoProjections::random(5, &mut rng);
        let p0 = init_prototypes(&g, 4).unwrap();
        let (step, _) = prototyping_step(&p0, &g, &proj).unwrap();
        let (full, _) = cross_attention_prototyping(&g, 4, 1, &proj).unwrap();
        let expect = p0.prototypes.zip_map(&step.prototypes, "add", |a, b| a + b).unwrap();
        assert_eq!(full.prototypes, expect);
    }

    #[test]
    fn zero_projections_leave_prototypes_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = grid(4, 4, 5, &mut rng);
        let zero = ProtoProjections {
            query: LinearMap::zeros(5, 5),
            key: LinearMap::zeros(5, 5),
            value: LinearMap::zeros(5, 5),
            heads: 1,
        };
        let p0 = init_prototypes(&g, 6).unwrap();
        let (p, _) = cross_attention_prototyping(&g, 6, 3, &zero).unwrap();
        assert_eq!(p.prototypes, p0.prototypes);
    }

    #[test]
    fn permutation_equivariance_with_external_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = grid(3, 4, 5, &mut rng);
        let proj = ProtoProjections::random(5, &mut rng);
        let p0 = PrototypeSet::new(random(&[4, 5], &mut rng, 1.0), Provenance::External).unwrap();
        let perm = [5, 2, 11, 0, 7, 3, 9, 1, 10, 4, 8, 6];
        let permuted: Vec<f64> = perm.iter().flat_map(|&t| g.features.row(t).to_vec()).collect();
        let gp = TokenGrid::new(Tensor::new(&[12, 5], permuted).unwrap(), 3, 4).unwrap();

        let (pa, ma) = cross_attention_prototyping_from(&g, &p0, 3, &proj).unwrap();
        let (pb, mb) = cross_attention_prototyping_from(&gp, &p0, 3, &proj).unwrap();
        assert!(pa.prototypes.max_abs_diff(&pb.prototypes) < 1e-12);
        for (new_t, &old_t) in perm.iter().enumerate() {
            for k in 0..4 {
                assert!((ma.matrix.at2(k, old_t) - mb.matrix.at2(k, new_t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mac_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w, d, k, n) = (6, 5, 8, 7, 3);
        let g = grid(h, w, d, &mut rng);
        let proj = ProtoProjections::random(d, &mut rng);
        let (_, counted) = macs::measure(|| cross_attention_prototyping(&g, k, n, &proj).unwrap());
        let (iter, projections) = layer_macs((h * w) as u64, k as u64, n as u64, d as u64);
        assert_eq!(counted, iter + projections);
    }

    #[test]
    fn multi_head_assignment_is_column_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = grid(4, 4, 8, &mut rng);
        let mut proj = ProtoProjections::random(8, &mut rng);
        proj.heads = 2;
        let (p, m) = cross_attention_prototyping(&g, 5, 2, &proj).unwrap();
        assert_eq!(p.prototypes.shape(), &[5, 8]);
        assert!(m.max_column_deviation().unwrap() < 1e-12);
        proj.heads = 3;
        assert!(cross_attention_prototyping(&g, 5, 2, &proj).is_err());
    }

    #[test]
    fn forward_only_path_matches_tape_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = grid(6, 5, 8, &mut rng);
        for heads in [1, 2, 4] {
            let mut proj = ProtoProjections::random(8, &mut rng);
            proj.heads = heads;
            let (p, m) = cross_attention_prototyping(&g, 7, 3, &proj).unwrap();
            let tape = Tape::new();
            let x = tape.leaf(g.features.clone());
            let (pt, mt) = proj.bind(&tape).run(x, init_on_tape(x, 6, 5, 7).unwrap(), 3).unwrap();
            assert_eq!(&p.prototypes, &*pt.value());
            assert_eq!(&m.matrix, &*mt.value());
        }
    }

    #[test]
    fn entropy_extremes_and_formula() {
        let hard = SoftAssignment::new(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(assignment_entropy(&hard), vec![0.0, 0.0]);
        let uniform = SoftAssignment::new(Tensor::full(&[4, 3], 0.25)).unwrap();
        for e in assignment_entropy(&uniform) {
            assert!((e - 4f64.ln()).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = SoftAssignment::new(random(&[5, 7], &mut rng, 3.0).softmax_axis(0).unwrap()).unwrap();
        for (t, e) in assignment_entropy(&m).into_iter().enumerate() {
            let direct: f64 = (0..5).map(|k| -m.matrix.at2(k, t) * m.matrix.at2(k, t).ln()).sum();
            assert!((e - direct).abs() < 1e-12);
            assert!(e >= 0.0 && e <= 5f64.ln() + 1e-12);
        }
    }

    #[test]
    fn assignment_images_round_and_label() {
        let m = SoftAssignment::new(Tensor::from_rows(&[&[0.2, 1.0, 0.5], &[0.8, 0.0, 0.5]]).unwrap()).unwrap();
        let imgs = AssignmentImages::new(&m, 1, 3).unwrap();
        assert_eq!(imgs.prototypes[0].pixels, vec![51, 255, 128]);
        assert_eq!(imgs.prototypes[1].pixels, vec![204, 0, 128]);
        // tie at the last token resolves to the lower index
        assert_eq!(imgs.argmax.pixels, vec![1, 0, 0]);
        assert_eq!(imgs.argmax.maxval, 1);
        assert!(AssignmentImages::new(&m, 2, 2).is_err());
        let dir = tempfile::tempdir().unwrap();
        let paths = imgs.save(dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        assert_eq!(GrayImage::load(&paths[1]).unwrap(), imgs.prototypes[1]);
    }

    #[test]
    fn soft_assignment_rejects_bad_columns() {
        assert!(SoftAssignment::new(Tensor::full(&[2, 2], 0.6)).is_err());
    }

    #[test]
    fn layer_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = grid(3, 3, 4, &mut rng);
        let proj = ProtoProjections::random(4, &mut rng);
        let w = random(&[3, 4], &mut rng, 1.0);
        let r = grad_check(
            |t, x| {
                let vars = proj.bind(t);
                let p0 = init_on_tape(x, 3, 3, 3)?;
                let (p, m) = vars.run(x, p0, 3)?;
                p.mul(t.leaf(w.clone()))?.sum_all()?.add(m.square()?.sum_all()?)
            },
            &g.features,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(1e-4), "{r:?}");
    }

    proptest! {
        #[test]
        fn columns_stay_stochastic(seed in any::<u64>(), k in 1usize..8, n in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = grid(3, 4, 4, &mut rng);
            let proj = ProtoProjections::random(4, &mut rng);
            let (_, m) = cross_attention_prototyping(&g, k.min(12), n, &proj).unwrap();
            prop_assert!(m.max_column_deviation().unwrap() < 1e-9);
        }
    }
}
