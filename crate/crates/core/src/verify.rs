//! Self-contained property suites run by `protoformer verify`.
//!
//! Each check draws its own random instances from a fixed seed, so a suite
//! is deterministic and its verdict does not depend on run order.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::em::{
    e_step, em_center_operator, iterate, m_step, probe_convergence, run_em, MixtureState,
};
use crate::encoder::{EncoderConfig, Head, Model};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::nn::Ffn;
use crate::proto::{
    init_on_tape, init_prototypes, prototyping_step, PrototypeSet, ProtoProjections, Provenance, TokenGrid,
    COLUMN_SUM_TOLERANCE,
};
use crate::sync::{attention_output, build_assignment_mask, SyncParams};
use crate::tensor::Tensor;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const EM_EQUIVALENCE_TOLERANCE: f64 = 1e-8;
pub const MONOTONE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Em,
    Proto,
    Sync,
    Grad,
    All,
}

impl Suite {
    /// The concrete suites `self` stands for.
    pub fn members(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Em, Suite::Proto, Suite::Sync, Suite::Grad],
            s => vec![s],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Em => "em",
            Suite::Proto => "proto",
            Suite::Sync => "sync",
            Suite::Grad => "grad",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em" => Ok(Suite::Em),
            "proto" => Ok(Suite::Proto),
            "sync" => Ok(Suite::Sync),
            "grad" => Ok(Suite::Grad),
            "all" => Ok(Suite::All),
            _ => Err(Error::Config(format!("unknown suite {s:?}; expected em, proto, sync, grad or all"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs every member of `suite`; errors inside a check count as failures.
pub fn run(suite: Suite, seed: u64) -> Vec<SuiteReport> {
    suite
        .members()
        .into_iter()
        .map(|s| {
            let start = Instant::now();
            let checks: Vec<(&'static str, fn(u64) -> Result<Check>)> = match s {
                Suite::Em => vec![
                    ("em_monotone", em_monotone),
                    ("contraction_linear", contraction_linear),
                    ("contraction_em", contraction_em),
                ],
                Suite::Proto => vec![
                    ("column_normalization", column_normalization),
                    ("em_equivalence", em_equivalence),
                ],
                Suite::Sync => vec![("mask_one_hot", mask_one_hot), ("mask_no_leakage", mask_no_leakage)],
                Suite::Grad => vec![
                    ("grad_softmax", grad_softmax),
                    ("grad_layer_norm", grad_layer_norm),
                    ("grad_ffn", grad_ffn),
                    ("grad_prototyping", grad_prototyping),
                    ("grad_latent_sync", grad_latent_sync),
                    ("grad_encoder", grad_encoder),
                ],
                Suite::All => unreachable!("expanded by members"),
            };
            let checks = checks
                .into_iter()
                .map(|(name, f)| f(seed).unwrap_or_else(|e| Check::new(name, false, format!("error: {e}"))))
                .collect();
            SuiteReport {
                suite: s,
                checks,
                elapsed: start.elapsed(),
            }
        })
        .collect()
}

fn random(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("finite")
}

/// Samples around `k` separated centres, `per` points each.
fn clustered(k: usize, d: usize, per: usize, spread: f64, noise: f64, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let centers = random(&[k, d], spread, rng);
    let mut data = Vec::with_capacity(k * per * d);
    for i in 0..k * per {
        let c = centers.row(i % k);
        data.extend(c.iter().map(|v| v + rng.gen_range(-noise..noise)));
    }
    (Tensor::new(&[k * per, d], data).expect("finite"), centers)
}

fn em_monotone(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe301);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let k = rng.gen_range(1..=5);
        let d = rng.gen_range(1..=4);
        let (data, _) = clustered(k, d, rng.gen_range(5..=15), 4.0, 1.0, &mut rng);
        let init = MixtureState::uniform(random(&[k, d], 3.0, &mut rng), rng.gen_range(0.3..2.0))?;
        let run = run_em(&data, &init, 30, 0.0)?;
        for w in run.trace.windows(2) {
            worst = worst.max(w[0] - w[1]);
        }
    }
    Ok(Check::new(
        "em_monotone",
        worst <= MONOTONE_TOLERANCE,
        format!("100 mixtures, largest log-likelihood drop {worst:.3e}"),
    ))
}

fn contraction_linear(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc047);
    let mut detail = Vec::new();
    let mut passed = true;
    for kappa in [0.3, 0.7, 0.95] {
        let fixed: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let op = |t: &[f64]| t.iter().zip(&fixed).map(|(x, f)| f + kappa * (x - f)).collect::<Vec<_>>();
        let init: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let probe = probe_convergence(op, &init, &fixed, 50, None, 0.05)?;
        passed &= probe.certified() && probe.epsilon == 0.0;
        match probe.kappa() {
            Some(k) => detail.push(format!("kappa {kappa}: estimate {k:.4}")),
            None => detail.push(format!("kappa {kappa}: not contracting")),
        }
    }
    Ok(Check::new("contraction_linear", passed, detail.join(", ")))
}

fn contraction_em(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0e3);
    let mut worst_kappa: f64 = 0.0;
    for _ in 0..5 {
        let (data, centers) = clustered(3, 2, 40, 10.0, 0.5, &mut rng);
        let weights = vec![1.0 / 3.0; 3];
        let op = em_center_operator(&data, &weights, 1.0);
        let init: Vec<f64> = centers.data().iter().map(|c| c + rng.gen_range(-1.0..1.0)).collect();
        let fixed = iterate(&op, &init, 200);
        let probe = probe_convergence(&op, &init, &fixed, 50, None, 0.05)?;
        match probe.kappa() {
            Some(k) if probe.certified() => worst_kappa = worst_kappa.max(k),
            _ => return Ok(Check::new("contraction_em", false, "EM trajectory not certified")),
        }
    }
    Ok(Check::new(
        "contraction_em",
        true,
        format!("5 separated mixtures, largest kappa {worst_kappa:.3e}"),
    ))
}

const NORMALIZATION_K: [usize; 4] = [1, 4, 20, 100];
const NORMALIZATION_SIDES: [usize; 3] = [4, 16, 32];

fn column_normalization(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa55);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = NORMALIZATION_K[rng.gen_range(0..NORMALIZATION_K.len())];
        let side = NORMALIZATION_SIDES[rng.gen_range(0..NORMALIZATION_SIDES.len())];
        let d = rng.gen_range(2..=8);
        let n = rng.gen_range(1..=3);
        let tokens = TokenGrid::new(random(&[side * side, d], 2.0, &mut rng), side, side)?;
        let proj = ProtoProjections::random(d, &mut rng);
        let mut p = if k <= side * side {
            init_prototypes(&tokens, k)?
        } else {
            PrototypeSet::new(random(&[k, d], 2.0, &mut rng), Provenance::External)?
        };
        for _ in 0..n {
            let (update, m) = prototyping_step(&p, &tokens, &proj)?;
            worst = worst.max(m.max_column_deviation()?);
            let next = p.prototypes.zip_map(&update.prototypes, "residual", |a, b| a + b)?;
            p = PrototypeSet::new(next, update.provenance)?;
        }
    }
    Ok(Check::new(
        "column_normalization",
        worst <= COLUMN_SUM_TOLERANCE,
        format!("100 configs, largest column-sum deviation {worst:.3e}"),
    ))
}

fn em_equivalence(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe9);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let k = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=6);
        let tokens = TokenGrid::new(random(&[h * w, d], 1.5, &mut rng), h, w)?;
        let centers = random(&[k, d], 1.5, &mut rng);
        let p = PrototypeSet::new(centers.clone(), Provenance::External)?;
        let (next, m) = prototyping_step(&p, &tokens, &ProtoProjections::identity(d))?;
        let state = MixtureState::matched_to_attention(centers)?;
        let resp = e_step(&tokens.features, &state)?;
        let (em, _) = m_step(&tokens.features, &resp, &state)?;
        worst = worst
            .max(next.prototypes.max_abs_diff(&em.centers))
            .max(m.matrix.max_abs_diff(&resp.r.transpose()?));
    }
    Ok(Check::new(
        "em_equivalence",
        worst <= EM_EQUIVALENCE_TOLERANCE,
        format!("50 instances, largest elementwise gap {worst:.3e}"),
    ))
}

fn random_sync_instance(rng: &mut impl Rng) -> Result<(TokenGrid, PrototypeSet, SyncParams)> {
    let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let k = rng.gen_range(1..=8);
    let d = rng.gen_range(1..=6);
    let tokens = TokenGrid::new(random(&[h * w, d], 2.0, rng), h, w)?;
    let p = PrototypeSet::new(random(&[k, d], 2.0, rng), Provenance::External)?;
    let mut params = SyncParams::random(d, rng);
    if rng.gen_bool(0.5) {
        params.similarity = crate::sync::Similarity::Cosine;
    }
    Ok((tokens, p, params))
}

fn mask_one_hot(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1407);
    let mut bad = 0;
    for _ in 0..1000 {
        let (tokens, p, params) = random_sync_instance(&mut rng)?;
        let mask = build_assignment_mask(&tokens, &p, &params)?.to_tensor();
        let k = p.count();
        for t in 0..tokens.tokens() {
            let row = mask.row(t);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != k - 1 {
                bad += 1;
            }
        }
    }
    Ok(Check::new(
        "mask_one_hot",
        bad == 0,
        format!("1000 instances, {bad} rows not one-hot"),
    ))
}

fn mask_no_leakage(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1eac);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (tokens, p, params) = random_sync_instance(&mut rng)?;
        let mask = build_assignment_mask(&tokens, &p, &params)?;
        let before = attention_output(&tokens, &p, &mask, &params)?;
        let used: std::collections::BTreeSet<usize> = mask.assignments.iter().copied().collect();
        let (k, d) = p.prototypes.dims2()?;
        let mut moved = p.prototypes.data().to_vec();
        for j in (0..k).filter(|j| !used.contains(j)) {
            for v in &mut moved[j * d..(j + 1) * d] {
                *v += rng.gen_range(-10.0..10.0);
            }
        }
        let moved = PrototypeSet::new(Tensor::new(&[k, d], moved)?, Provenance::External)?;
        let after = attention_output(&tokens, &moved, &mask, &params)?;
        worst = worst.max(before.max_abs_diff(&after));
    }
    Ok(Check::new(
        "mask_no_leakage",
        worst == 0.0,
        format!("1000 instances, largest change from unassigned prototypes {worst:e}"),
    ))
}

fn grad_verdict(name: &'static str, reports: &[GradCheckReport]) -> Check {
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let passed = reports.iter().all(|r| r.passed(GRAD_TOLERANCE));
    Check::new(name, passed, format!("max relative error {worst:.3e}"))
}

fn grad_softmax(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9501);
    let x = random(&[5, 4], 2.0, &mut rng);
    let w = random(&[5, 4], 1.0, &mut rng);
    let reports = [0, 1]
        .into_iter()
        .map(|axis| grad_check(|t, x| x.softmax(axis)?.mul(t.leaf(w.clone()))?.sum_all(), &x, GRAD_STEP))
        .collect::<Result<Vec<_>>>()?;
    Ok(grad_verdict("grad_softmax", &reports))
}

fn grad_layer_norm(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9502);
    let x = random(&[4, 6], 2.0, &mut rng);
    let gain = random(&[6], 1.0, &mut rng);
    let shift = random(&[6], 1.0, &mut rng);
    let w = random(&[4, 6], 1.0, &mut rng);
    let r = grad_check(
        |t, x| {
            x.layer_norm(t.leaf(gain.clone()), t.leaf(shift.clone()))?
                .mul(t.leaf(w.clone()))?
                .sum_all()
        },
        &x,
        GRAD_STEP,
    )?;
    Ok(grad_verdict("grad_layer_norm", &[r]))
}

fn grad_ffn(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9503);
    let ffn = Ffn::random(5, &mut rng);
    let x = random(&[3, 5], 1.0, &mut rng);
    let w = random(&[3, 5], 1.0, &mut rng);
    let r = grad_check(|t, x| ffn.bind(t).apply(x)?.mul(t.leaf(w.clone()))?.sum_all(), &x, GRAD_STEP)?;
    Ok(grad_verdict("grad_ffn", &[r]))
}

fn grad_prototyping(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9504);
    let (h, w, d, k) = (4, 4, 6, 5);
    let mut proj = ProtoProjections::random(d, &mut rng);
    let x = random(&[h * w, d], 1.0, &mut rng);
    let wp = random(&[k, d], 1.0, &mut rng);
    let wm = random(&[k, h * w], 1.0, &mut rng);
    let mut reports = Vec::new();
    for heads in [1, 2] {
        proj.heads = heads;
        reports.push(grad_check(
            |t, x| {
                let p0 = init_on_tape(x, h, w, k)?;
                let (p, m) = proj.bind(t).run(x, p0, 3)?;
                p.mul(t.leaf(wp.clone()))?.sum_all()?.add(m.mul(t.leaf(wm.clone()))?.sum_all()?)
            },
            &x,
            GRAD_STEP,
        )?);
    }
    // gradient through the query projection weights
    proj.heads = 1;
    let q = proj.query.weight.clone();
    reports.push(grad_check(
        |t, wq| {
            let mut vars = proj.bind(t);
            vars.query.weight = wq;
            let xv = t.leaf(x.clone());
            let (p, _) = vars.run(xv, init_on_tape(xv, h, w, k)?, 2)?;
            p.mul(t.leaf(wp.clone()))?.sum_all()
        },
        &q,
        GRAD_STEP,
    )?);
    Ok(grad_verdict("grad_prototyping", &reports))
}

fn grad_latent_sync(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9505);
    let (t_count, k, d) = (12, 4, 6);
    let params = SyncParams::random(d, &mut rng);
    let tokens = TokenGrid::new(random(&[t_count, d], 1.0, &mut rng), 3, 4)?;
    let p = PrototypeSet::new(random(&[k, d], 1.0, &mut rng), Provenance::External)?;
    let mask = build_assignment_mask(&tokens, &p, &params)?;
    let w = random(&[t_count, d], 1.0, &mut rng);
    let wrt_tokens = grad_check(
        |t, x| {
            let out = x.add(params.bind(t).update(x, t.leaf(p.prototypes.clone()), &mask)?)?;
            out.mul(t.leaf(w.clone()))?.sum_all()
        },
        &tokens.features,
        GRAD_STEP,
    )?;
    let wrt_prototypes = grad_check(
        |t, pv| {
            let x = t.leaf(tokens.features.clone());
            let out = x.add(params.bind(t).update(x, pv, &mask)?)?;
            out.mul(t.leaf(w.clone()))?.sum_all()
        },
        &p.prototypes,
        GRAD_STEP,
    )?;
    Ok(grad_verdict("grad_latent_sync", &[wrt_tokens, wrt_prototypes]))
}

fn grad_encoder(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9506);
    let side = 16;
    let img = |rng: &mut ChaCha8Rng| {
        Tensor::new(&[side * side, 1], (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("finite")
    };
    let (f1, f2) = (img(&mut rng), img(&mut rng));
    let mut reports = Vec::new();
    for head in [Head::Flow, Head::Depth] {
        let model = Model::new(EncoderConfig::new(head), seed)?;
        let w = random(&[side * side, head.channels()], 1.0, &mut rng);
        reports.push(grad_check(
            |t, x| {
                let b = model.store().bind(t);
                let frames = match head {
                    Head::Flow => vec![x, t.leaf(f2.clone())],
                    Head::Depth => vec![x],
                };
                model.forward_vars(&b, t, &frames, side, side, None)?.mul(t.leaf(w.clone()))?.sum_all()
            },
            &f1,
            GRAD_STEP,
        )?);
    }
    Ok(grad_verdict("grad_encoder", &reports))
}
