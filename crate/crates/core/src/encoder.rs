//! Two-stage prototype encoder with flow and depth heads.
//!
//! Each stage patch-embeds its input grid and runs pre-norm blocks:
//!
//! ```text
//! h = LN1(x)
//! P, M = prototyping(h)            // init by pooling, N residual E/M steps
//! x = x + FFN_s(masked_attention(h, P))
//! x = x + FFN(LN2(x))
//! ```
//!
//! The flow head encodes both frames with shared weights, takes a cosine
//! local correlation between them at every stage, moves all correlations to
//! the final grid by space-to-depth, refines them with a residual FFN and
//! regresses `(u, v)` per token. The depth head regresses log-depth from the
//! final tokens. Both upsample bilinearly to the input resolution.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Bound, Ffn, FfnParams, Linear, LinearMap, NormParams, ParamStore};
use crate::proto::{init_on_tape, ProtoProjections, PrototypingParams, SoftAssignment, TokenGrid};
use crate::sync::{AssignmentMask, Similarity, SyncLayer, SyncParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Flow,
    Depth,
}

impl Head {
    pub fn channels(self) -> usize {
        match self {
            Head::Flow => 2,
            Head::Depth => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::Flow => "flow",
            Head::Depth => "depth",
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Head::Flow),
            "depth" => Ok(Head::Depth),
            other => Err(Error::Config(format!("unknown head '{other}' (expected flow or depth)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub patch: usize,
    pub blocks: usize,
    pub dim: usize,
    /// Prototype count; clamped to the stage's token count.
    pub prototypes: usize,
    pub iterations: usize,
    pub heads: usize,
}

pub const DEFAULT_PROTOTYPES: usize = 20;
pub const DEFAULT_ITERATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub head: Head,
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub similarity: Similarity,
    pub fusion_radius: usize,
    /// Prototype blocks run over the fused correlation tokens (flow only).
    pub fusion_blocks: usize,
    /// Prototype count and iterations of the fusion blocks; the stage
    /// settings do not apply to them.
    pub fusion_prototypes: usize,
    pub fusion_iterations: usize,
    /// Each final token predicts an `r x r` block of output cells before
    /// bilinear upsampling.
    pub output_subgrid: usize,
}

impl EncoderConfig {
    pub fn new(head: Head) -> Self {
        let stage = |patch, dim| StageConfig {
            patch,
            blocks: 2,
            dim,
            prototypes: DEFAULT_PROTOTYPES,
            iterations: DEFAULT_ITERATIONS,
            heads: 1,
        };
        Self {
            head,
            in_channels: 1,
            stages: vec![stage(4, 16), stage(2, 32)],
            similarity: Similarity::ScaledDot,
            fusion_radius: 1,
            fusion_blocks: 2,
            fusion_prototypes: DEFAULT_PROTOTYPES,
            fusion_iterations: DEFAULT_ITERATIONS,
            output_subgrid: match head {
                Head::Flow => 1,
                Head::Depth => 4,
            },
        }
    }

    /// Settings of the flow fusion blocks: the last stage's width and
    /// heads with the fusion prototype and iteration counts.
    pub fn fusion_stage(&self) -> StageConfig {
        StageConfig {
            blocks: self.fusion_blocks,
            prototypes: self.fusion_prototypes,
            iterations: self.fusion_iterations,
            ..self.stages[self.stages.len() - 1]
        }
    }

    /// Same prototype count and iteration count in every encoder stage.
    pub fn with_prototypes(mut self, k: usize, n: usize) -> Self {
        for s in &mut self.stages {
            s.prototypes = k;
            s.iterations = n;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("input channels must be positive".into()));
        }
        if self.fusion_blocks > 0 && (self.fusion_prototypes == 0 || self.fusion_iterations == 0) {
            return Err(Error::Config("fusion K and N must be positive".into()));
        }
        if self.output_subgrid == 0 {
            return Err(Error::Config("output subgrid must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if s.patch == 0 || s.blocks == 0 || s.dim == 0 || s.prototypes == 0 || s.iterations == 0 || s.heads == 0 {
                return Err(Error::Config(format!("stage{n}: patch, blocks, dim, K, N and heads must be positive")));
            }
            if s.dim % s.heads != 0 {
                return Err(Error::Config(format!("stage{n}: dim {} not divisible by {} heads", s.dim, s.heads)));
            }
        }
        Ok(())
    }

    /// Cumulative downsampling after every stage.
    pub fn strides(&self) -> Vec<usize> {
        self.stages
            .iter()
            .scan(1, |acc, s| {
                *acc *= s.patch;
                Some(*acc)
            })
            .collect()
    }

    pub fn total_stride(&self) -> usize {
        self.strides().last().copied().unwrap_or(1)
    }

    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        let f = self.total_stride();
        if height % f != 0 || width % f != 0 {
            return Err(Error::Config(format!(
                "image {height}x{width} is not divisible by the cumulative patch factor {f}"
            )));
        }
        Ok(())
    }

    fn correlation_channels(&self) -> usize {
        let side = 2 * self.fusion_radius + 1;
        let total = self.total_stride();
        self.strides()
            .iter()
            .map(|s| {
                let f = total / s;
                side * side * f * f
            })
            .sum()
    }

    /// Number of scalar parameters, independent of `K` and `N`.
    pub fn param_count(&self) -> Result<usize> {
        Ok(Model::new(self.clone(), 0)?.store.scalar_count())
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    norm1: NormParams,
    proto: PrototypingParams,
    sync: SyncLayer,
    norm2: NormParams,
    ffn: FfnParams,
}

impl BlockLayout {
    fn register(store: &mut ParamStore, name: &str, s: &StageConfig, similarity: Similarity, rng: &mut ChaCha8Rng) -> Self {
        let mut proto = ProtoProjections::random(s.dim, rng);
        proto.heads = s.heads;
        let mut sync = SyncParams::random(s.dim, rng);
        sync.similarity = similarity;
        Self {
            norm1: NormParams::register(store, &format!("{name}.norm1"), s.dim),
            proto: PrototypingParams::register(store, &format!("{name}.proto"), proto),
            sync: SyncLayer::register(store, &format!("{name}.sync"), sync),
            norm2: NormParams::register(store, &format!("{name}.norm2"), s.dim),
            ffn: FfnParams::register(store, &format!("{name}.ffn"), Ffn::random(s.dim, rng)),
        }
    }

    /// One pre-norm block on an `h x w` token grid; returns the new tokens,
    /// the last soft assignment and the synchronization mask.
    fn forward<'t>(
        &self,
        b: &Bound<'t>,
        x: Var<'t>,
        h: usize,
        w: usize,
        cfg: &StageConfig,
    ) -> Result<(Var<'t>, Var<'t>, AssignmentMask)> {
        let normed = self.norm1.apply(b, x)?;
        let p0 = init_on_tape(normed, h, w, cfg.prototypes.min(h * w))?;
        let (p, m) = self.proto.bind(b).run(normed, p0, cfg.iterations)?;
        let sync = self.sync.bind(b);
        let mask = sync.mask(normed, p)?;
        let x = x.add(sync.update(normed, p, &mask)?)?;
        let x = x.add(self.ffn.bind(b).apply(self.norm2.apply(b, x)?)?)?;
        Ok((x, m, mask))
    }
}

#[derive(Debug, Clone)]
struct StageLayout {
    embed: Linear,
    blocks: Vec<BlockLayout>,
}

#[derive(Debug, Clone)]
enum HeadLayout {
    Flow {
        norm: NormParams,
        ffn: FfnParams,
        fusion: Option<(Linear, Vec<BlockLayout>)>,
        out: Linear,
    },
    Depth { out: Linear },
}

/// Per-block record of the prototype assignment.
#[derive(Debug, Clone)]
pub struct BlockDiagnostics {
    pub stage: usize,
    pub block: usize,
    /// Which input frame the block processed (0 for depth).
    pub frame: usize,
    pub height: usize,
    pub width: usize,
    pub assignment: SoftAssignment,
    pub mask: AssignmentMask,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// `(H * W) x C` field at input resolution: `(u, v)` pixels for flow,
    /// log-depth for depth.
    pub field: Tensor,
    pub height: usize,
    pub width: usize,
    pub diagnostics: Vec<BlockDiagnostics>,
}

/// A model input: images are `H x W x C` tensors.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Flow { frame1: &'a Tensor, frame2: &'a Tensor },
    Depth { image: &'a Tensor },
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Config(format!("images must be HxW or HxWxC, got {:?}", image.shape()))),
    }
}

/// Index map taking a `(h * w) x c` grid to non-overlapping `p x p` patches,
/// one row per patch in row-major order, each row laid out `(py, px, c)`.
pub fn patch_index(height: usize, width: usize, channels: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Config(format!("{height}x{width} grid is not divisible by patch {patch}")));
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut index = Vec::with_capacity(height * width * channels);
    for i in 0..gh {
        for j in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    let pixel = (i * patch + py) * width + j * patch + px;
                    index.extend((0..channels).map(|c| pixel * channels + c));
                }
            }
        }
    }
    Ok(index)
}

/// Index map taking `(h * w) x (r * r * c)` tokens, each row laid out
/// `(ry, rx, c)`, to the `(h * r * w * r) x c` grid they tile.
pub fn depth_to_space_index(height: usize, width: usize, channels: usize, r: usize) -> Result<Vec<usize>> {
    let forward = patch_index(height * r, width * r, channels, r)?;
    let mut index = vec![0; forward.len()];
    for (src, &dst) in forward.iter().enumerate() {
        index[dst] = src;
    }
    Ok(index)
}

/// Flattens an `H x W x C` image into `(H/p * W/p) x (p * p * C)` patches.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w, c) = image_dims(image)?;
    let index = patch_index(h, w, c, patch)?;
    let data = index.iter().map(|&i| image.data()[i]).collect();
    Tensor::new(&[(h / patch) * (w / patch), patch * patch * c], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, channels: usize, patch: usize) -> Result<Tensor> {
    let index = patch_index(height, width, channels, patch)?;
    if patches.len() != index.len() {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![height, width, channels],
        });
    }
    let mut data = vec![0.0; index.len()];
    for (src, &dst) in index.iter().enumerate() {
        data[dst] = patches.data()[src];
    }
    Tensor::new(&[height, width, channels], data)
}

/// Non-overlapping patch flattening followed by a linear map.
pub fn patch_embed(image: &Tensor, patch: usize, proj: &LinearMap) -> Result<TokenGrid> {
    let (h, w, _) = image_dims(image)?;
    let tokens = proj.apply(&patchify(image, patch)?)?;
    TokenGrid::new(tokens, h / patch, w / patch)
}

/// `(out_h * out_w) x (in_h * in_w)` bilinear interpolation matrix with
/// half-pixel centres and edge clamping.
pub fn bilinear_matrix(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Tensor {
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    let cols = in_h * in_w;
    let mut data = vec![0.0; out_h * out_w * cols];
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let row = &mut data[(oy * out_w + ox) * cols..][..cols];
            row[y0 * in_w + x0] += (1.0 - ly) * (1.0 - lx);
            row[y0 * in_w + x1] += (1.0 - ly) * lx;
            row[y1 * in_w + x0] += ly * (1.0 - lx);
            row[y1 * in_w + x1] += ly * lx;
        }
    }
    Tensor::new(&[out_h * out_w, cols], data).expect("finite weights")
}

struct Encoded<'t> {
    /// Output tokens of every stage with its grid size.
    stages: Vec<(Var<'t>, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: EncoderConfig,
    store: ParamStore,
    stages: Vec<StageLayout>,
    head: HeadLayout,
}

impl Model {
    /// Fresh model with Glorot-initialised weights drawn from `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let r = config.output_subgrid;
        let mut d_in = config.in_channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (si, s) in config.stages.iter().enumerate() {
            let name = format!("stage{}", si + 1);
            let embed = Linear::register(
                &mut store,
                &format!("{name}.embed"),
                LinearMap::random(d_in * s.patch * s.patch, s.dim, &mut rng),
            );
            let blocks = (0..s.blocks)
                .map(|bi| BlockLayout::register(&mut store, &format!("{name}.block{}", bi + 1), s, config.similarity, &mut rng))
                .collect();
            stages.push(StageLayout { embed, blocks });
            d_in = s.dim;
        }
        let head = match config.head {
            Head::Flow => {
                let c = config.correlation_channels();
                let norm = NormParams::register(&mut store, "head.norm", c);
                let ffn = FfnParams::register(&mut store, "head.ffn", Ffn::random(c, &mut rng));
                let last = config.fusion_stage();
                let fusion = (config.fusion_blocks > 0).then(|| {
                    let proj = Linear::register(&mut store, "head.fusion.embed", LinearMap::random(c, last.dim, &mut rng));
                    let blocks = (0..config.fusion_blocks)
                        .map(|bi| {
                            BlockLayout::register(&mut store, &format!("head.fusion.block{}", bi + 1), &last, config.similarity, &mut rng)
                        })
                        .collect();
                    (proj, blocks)
                });
                let d_out = if fusion.is_some() { last.dim } else { c };
                HeadLayout::Flow {
                    norm,
                    ffn,
                    fusion,
                    out: Linear::register(&mut store, "head.out", LinearMap::random(d_out, 2 * r * r, &mut rng)),
                }
            }
            Head::Depth => HeadLayout::Depth {
                out: Linear::register(&mut store, "head.out", LinearMap::random(d_in, r * r, &mut rng)),
            },
        };
        Ok(Self { config, store, stages, head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Sets every parameter of the prediction head's final linear map to zero.
    pub fn zero_head_output(&mut self) -> Result<()> {
        let out = match &self.head {
            HeadLayout::Flow { out, .. } | HeadLayout::Depth { out } => *out,
        };
        for id in [out.weight, out.bias] {
            let shape = self.store.get(id).shape().to_vec();
            self.store.set(id, Tensor::zeros(&shape))?;
        }
        Ok(())
    }

    fn encode<'t>(
        &self,
        b: &Bound<'t>,
        image: Var<'t>,
        height: usize,
        width: usize,
        frame: usize,
        diagnostics: &mut Option<&mut Vec<BlockDiagnostics>>,
    ) -> Result<Encoded<'t>> {
        let mut x = image;
        let (mut h, mut w) = (height, width);
        let mut channels = self.config.in_channels;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (si, (layout, cfg)) in self.stages.iter().zip(&self.config.stages).enumerate() {
            let index = patch_index(h, w, channels, cfg.patch)?;
            let (gh, gw) = (h / cfg.patch, w / cfg.patch);
            let patches = x.gather(Rc::new(index), &[gh * gw, cfg.patch * cfg.patch * channels])?;
            x = layout.embed.bind(b).apply(patches)?;
            (h, w, channels) = (gh, gw, cfg.dim);
            for (bi, block) in layout.blocks.iter().enumerate() {
                let (next, m, mask) = block.forward(b, x, h, w, cfg)?;
                x = next;
                if let Some(diag) = diagnostics.as_deref_mut() {
                    diag.push(BlockDiagnostics {
                        stage: si,
                        block: bi,
                        frame,
                        height: h,
                        width: w,
                        assignment: SoftAssignment::new((*m.value()).clone())?,
                        mask,
                    });
                }
            }
            stages.push((x, h, w));
        }
        Ok(Encoded { stages })
    }

    /// Records the forward pass on the tape of `b`; returns the
    /// `(H * W) x C` prediction field.
    pub fn forward_on<'t>(
        &self,
        b: &Bound<'t>,
        tape: &'t Tape,
        input: Input<'_>,
        diagnostics: Option<&mut Vec<BlockDiagnostics>>,
    ) -> Result<Var<'t>> {
        let frames: Vec<&Tensor> = match input {
            Input::Flow { frame1, frame2 } => vec![frame1, frame2],
            Input::Depth { image } => vec![image],
        };
        let (h, w, c) = image_dims(frames[0])?;
        let mut vars = Vec::with_capacity(frames.len());
        for f in frames {
            if image_dims(f)? != (h, w, c) {
                return Err(Error::Config(format!("frames differ in shape: {:?}", f.shape())));
            }
            vars.push(tape.leaf(f.reshape(&[h * w, c])?));
        }
        self.forward_vars(b, tape, &vars, h, w, diagnostics)
    }

    /// As [`Model::forward_on`] with the frames already on the tape as
    /// `(H * W) x C` token grids: two for flow, one for depth.
    pub fn forward_vars<'t>(
        &self,
        b: &Bound<'t>,
        tape: &'t Tape,
        frames: &[Var<'t>],
        h: usize,
        w: usize,
        mut diagnostics: Option<&mut Vec<BlockDiagnostics>>,
    ) -> Result<Var<'t>> {
        let expected = match self.config.head {
            Head::Flow => 2,
            Head::Depth => 1,
        };
        if frames.len() != expected {
            return Err(Error::Config(format!(
                "the {} head takes {expected} frame(s), got {}",
                self.config.head.name(),
                frames.len()
            )));
        }
        for f in frames {
            if f.shape() != [h * w, self.config.in_channels] {
                return Err(Error::Config(format!(
                    "expected {}x{} frames with {} channel(s), got tokens {:?}",
                    h,
                    w,
                    self.config.in_channels,
                    f.shape()
                )));
            }
        }
        self.config.check_image(h, w)?;
        let stride = self.config.total_stride();
        let (fh, fw) = (h / stride, w / stride);
        let tokens = match &self.head {
            HeadLayout::Flow { norm, ffn, fusion, out } => {
                let a = self.encode(b, frames[0], h, w, 0, &mut diagnostics)?;
                let bb = self.encode(b, frames[1], h, w, 1, &mut diagnostics)?;
                let mut parts = Vec::with_capacity(a.stages.len());
                for (&(fa, sh, sw), &(fb, _, _)) in a.stages.iter().zip(&bb.stages) {
                    let corr = fa
                        .row_normalize()?
                        .local_correlation(fb.row_normalize()?, sh, sw, self.config.fusion_radius)?;
                    let factor = sh / fh;
                    parts.push(if factor == 1 {
                        corr
                    } else {
                        let cc = corr.shape()[1];
                        corr.gather(Rc::new(patch_index(sh, sw, cc, factor)?), &[fh * fw, factor * factor * cc])?
                    });
                }
                let z = Var::concat_cols(&parts)?;
                let mut z = z.add(ffn.bind(b).apply(norm.apply(b, z)?)?)?;
                if let Some((proj, blocks)) = fusion {
                    let cfg = &self.config.fusion_stage();
                    z = proj.bind(b).apply(z)?;
                    for (bi, block) in blocks.iter().enumerate() {
                        let (next, m, mask) = block.forward(b, z, fh, fw, cfg)?;
                        z = next;
                        if let Some(diag) = diagnostics.as_deref_mut() {
                            diag.push(BlockDiagnostics {
                                stage: self.config.stages.len(),
                                block: bi,
                                frame: 0,
                                height: fh,
                                width: fw,
                                assignment: SoftAssignment::new((*m.value()).clone())?,
                                mask,
                            });
                        }
                    }
                }
                out.bind(b).apply(z)?
            }
            HeadLayout::Depth { out } => {
                let e = self.encode(b, frames[0], h, w, 0, &mut diagnostics)?;
                let (last, _, _) = e.stages[e.stages.len() - 1];
                out.bind(b).apply(last)?
            }
        };
        let r = self.config.output_subgrid;
        let channels = self.config.head.channels();
        let tokens = if r > 1 {
            tokens.gather(Rc::new(depth_to_space_index(fh, fw, channels, r)?), &[fh * r * fw * r, channels])?
        } else {
            tokens
        };
        tape.leaf(bilinear_matrix(fh * r, fw * r, h, w)).matmul(tokens)
    }

    pub fn forward(&self, input: Input<'_>) -> Result<Prediction> {
        let tape = Tape::new();
        let b = self.store.bind(&tape);
        let mut diagnostics = Vec::new();
        let field = self.forward_on(&b, &tape, input, Some(&mut diagnostics))?;
        let first = match input {
            Input::Flow { frame1, .. } => frame1,
            Input::Depth { image } => image,
        };
        let (height, width, _) = image_dims(first)?;
        Ok(Prediction {
            field: (*field.value()).clone(),
            height,
            width,
            diagnostics,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let cfg = &self.config;
        let scalar = |v: usize| Tensor::scalar(v as f64).expect("finite");
        c.insert("meta.head", scalar(matches!(cfg.head, Head::Depth) as usize));
        c.insert("meta.in_channels", scalar(cfg.in_channels));
        c.insert("meta.similarity", scalar(matches!(cfg.similarity, Similarity::Cosine) as usize));
        c.insert("meta.fusion_radius", scalar(cfg.fusion_radius));
        c.insert("meta.fusion_blocks", scalar(cfg.fusion_blocks));
        c.insert("meta.fusion_prototypes", scalar(cfg.fusion_prototypes));
        c.insert("meta.fusion_iterations", scalar(cfg.fusion_iterations));
        c.insert("meta.output_subgrid", scalar(cfg.output_subgrid));
        c.insert("meta.stages", scalar(cfg.stages.len()));
        for (i, s) in cfg.stages.iter().enumerate() {
            let p = format!("meta.stage{}", i + 1);
            c.insert(format!("{p}.patch"), scalar(s.patch));
            c.insert(format!("{p}.blocks"), scalar(s.blocks));
            c.insert(format!("{p}.dim"), scalar(s.dim));
            c.insert(format!("{p}.K"), scalar(s.prototypes));
            c.insert(format!("{p}.N"), scalar(s.iterations));
            c.insert(format!("{p}.heads"), scalar(s.heads));
        }
        for (name, t) in self.store.iter() {
            c.insert(name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let int = |name: &str| -> Result<usize> {
            let v = c.require(name)?.item();
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format {
                    what: "checkpoint",
                    msg: format!("'{name}' is not a count: {v}"),
                });
            }
            Ok(v as usize)
        };
        let head = if int("meta.head")? == 1 { Head::Depth } else { Head::Flow };
        let mut config = EncoderConfig::new(head);
        config.in_channels = int("meta.in_channels")?;
        config.similarity = if int("meta.similarity")? == 1 {
            Similarity::Cosine
        } else {
            Similarity::ScaledDot
        };
        config.fusion_radius = int("meta.fusion_radius")?;
        config.fusion_blocks = int("meta.fusion_blocks")?;
        config.fusion_prototypes = int("meta.fusion_prototypes")?;
        config.fusion_iterations = int("meta.fusion_iterations")?;
        config.output_subgrid = int("meta.output_subgrid")?;
        config.stages = (1..=int("meta.stages")?)
            .map(|i| {
                let p = format!("meta.stage{i}");
                Ok(StageConfig {
                    patch: int(&format!("{p}.patch"))?,
                    blocks: int(&format!("{p}.blocks"))?,
                    dim: int(&format!("{p}.dim"))?,
                    prototypes: int(&format!("{p}.K"))?,
                    iterations: int(&format!("{p}.N"))?,
                    heads: int(&format!("{p}.heads"))?,
                })
            })
            .collect::<Result<_>>()?;
        let mut model = Self::new(config, 0)?;
        let ids: Vec<_> = model.store.ids().collect();
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for (id, name) in ids.into_iter().zip(names) {
            model.store.set(id, c.require(&name)?.clone())?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[h, w, 1], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn whole_image_patch_is_one_token() {
        let img = image(4, 4, 1);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 16]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn patch_arithmetic() {
        let img = image(8, 8, 2);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[4, 16]);
        // second patch starts at column 4 of row 0
        assert_eq!(p.at2(1, 0), img.data()[4]);
        assert_eq!(p.at2(2, 5), img.data()[(4 + 1) * 8 + 1]);
    }

    #[test]
    fn orthogonal_embedding_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::new(&[8, 12, 2], (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        // a permutation with sign flips is orthogonal
        let d = 2 * 2 * 2;
        let mut q = Tensor::zeros(&[d, d]).into_data();
        for i in 0..d {
            q[i * d + (i * 3 + 1) % d] = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let q = Tensor::new(&[d, d], q).unwrap();
        let grid = patch_embed(&img, 2, &LinearMap::new(q.clone(), Tensor::zeros(&[d])).unwrap()).unwrap();
        let back = grid.features.matmul(&q.transpose().unwrap()).unwrap();
        let rec = unpatchify(&back, 8, 12, 2, 2).unwrap();
        assert!(rec.max_abs_diff(&img) < 1e-10);
    }

    #[test]
    fn indivisible_image_is_config_error() {
        assert!(matches!(patchify(&image(6, 8, 4), 4), Err(Error::Config(_))));
        let model = Model::new(EncoderConfig::new(Head::Depth), 1).unwrap();
        let img = image(20, 16, 5);
        assert!(matches!(model.forward(Input::Depth { image: &img }), Err(Error::Config(_))));
    }

    #[test]
    fn bilinear_preserves_constants_and_matches_corners() {
        let m = bilinear_matrix(4, 4, 32, 32);
        for r in 0..1024 {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // half-pixel centres: output pixel 0 lies before input centre 0
        assert_eq!(m.row(0)[0], 1.0);
        let same = bilinear_matrix(3, 5, 3, 5);
        assert_eq!(same, Tensor::identity(15));
    }

    #[test]
    fn output_shapes_for_both_heads() {
        let f1 = image(32, 32, 6);
        let f2 = image(32, 32, 7);
        let flow = Model::new(EncoderConfig::new(Head::Flow), 1).unwrap();
        let p = flow.forward(Input::Flow { frame1: &f1, frame2: &f2 }).unwrap();
        assert_eq!(p.field.shape(), &[1024, 2]);
        assert_eq!(p.diagnostics.len(), 10);
        let depth = Model::new(EncoderConfig::new(Head::Depth), 1).unwrap();
        let p = depth.forward(Input::Depth { image: &f1 }).unwrap();
        assert_eq!(p.field.shape(), &[1024, 1]);
        assert_eq!(p.diagnostics.len(), 4);
        // stage 2 runs on a 4x4 grid, so K is clamped to 16
        assert_eq!(p.diagnostics[3].assignment.prototypes(), 16);
        for d in &p.diagnostics {
            assert!(d.assignment.max_column_deviation().unwrap() < 1e-9);
        }
    }

    #[test]
    fn depth_to_space_tiles_token_blocks() {
        // 2x1 tokens, each carrying a 2x2 block of 1 channel
        let index = depth_to_space_index(2, 1, 1, 2).unwrap();
        let tokens: Vec<f64> = (0..8).map(f64::from).collect();
        let grid: Vec<f64> = index.iter().map(|&i| tokens[i]).collect();
        assert_eq!(grid, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let index = depth_to_space_index(1, 2, 1, 2).unwrap();
        let grid: Vec<f64> = index.iter().map(|&i| tokens[i]).collect();
        assert_eq!(grid, vec![0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn zero_head_predicts_zero() {
        let f1 = image(16, 16, 8);
        let mut model = Model::new(EncoderConfig::new(Head::Flow), 2).unwrap();
        model.zero_head_output().unwrap();
        let p = model.forward(Input::Flow { frame1: &f1, frame2: &f1 }).unwrap();
        assert!(p.field.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_head_is_config_error() {
        let f1 = image(16, 16, 9);
        let model = Model::new(EncoderConfig::new(Head::Flow), 2).unwrap();
        assert!(matches!(model.forward(Input::Depth { image: &f1 }), Err(Error::Config(_))));
    }

    #[test]
    fn param_count_independent_of_prototypes() {
        let base = EncoderConfig::new(Head::Flow);
        let a = base.param_count().unwrap();
        assert_eq!(a, base.clone().with_prototypes(100, 1).param_count().unwrap());
        let mut wider = base.clone();
        wider.stages[0].dim = 24;
        assert!(wider.param_count().unwrap() > a);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = EncoderConfig::new(Head::Depth).with_prototypes(7, 2);
        cfg.similarity = Similarity::Cosine;
        let model = Model::new(cfg.clone(), 3).unwrap();
        let mut buf = Vec::new();
        model.to_checkpoint().write_to(&mut buf).unwrap();
        let back = Model::from_checkpoint(&Checkpoint::read_from(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back.config(), &cfg);
        for ((n1, t1), (n2, t2)) in model.store().iter().zip(back.store().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(&t1.round_to_f32(), t2);
        }
    }

    #[test]
    fn encoder_gradient_wrt_image() {
        let f1 = image(16, 16, 10).reshape(&[256, 1]).unwrap();
        let f2 = image(16, 16, 11).reshape(&[256, 1]).unwrap();
        let weights = image(16, 32, 12).reshape(&[256, 2]).unwrap();
        let model = Model::new(EncoderConfig::new(Head::Flow), 4).unwrap();
        let r = grad_check(
            |t, x| {
                let b = model.store().bind(t);
                let field = model.forward_vars(&b, t, &[x, t.leaf(f2.clone())], 16, 16, None)?;
                field.mul(t.leaf(weights.clone()))?.sum_all()
            },
            &f1,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(1e-4), "{r:?}");
    }

    #[test]
    fn encoder_gradient_wrt_parameters() {
        let img = image(16, 16, 13).reshape(&[256, 1]).unwrap();
        let model = Model::new(EncoderConfig::new(Head::Depth), 5).unwrap();
        for name in ["stage1.embed.weight", "stage1.block1.proto.query.weight", "stage2.block2.sync.value.weight"] {
            let id = model.store().id(name).unwrap();
            let r = grad_check(
                |t, x| {
                    let b = model.store().bind(t).with(id, x);
                    let field = model.forward_vars(&b, t, &[t.leaf(img.clone())], 16, 16, None)?;
                    field.square()?.mean_all()
                },
                model.store().get(id),
                1e-5,
            )
            .unwrap();
            assert!(r.passed(1e-4), "{name}: {r:?}");
        }
    }
}
