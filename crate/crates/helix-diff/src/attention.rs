//! The three attention mechanisms of the two-stream backbone and the probes
//! that quantify cross-domain leakage.
//!
//! * `concat_attention` — the entangled baseline: image and annotation tokens
//!   share one softmax, so each domain's output mixes both value streams.
//! * `image_cross_attention` / `annotation_self_attention` — the decoupled
//!   pair: the image branch attends over itself plus a zero-initialized
//!   projection of the reference feature; the annotation branch is pure
//!   self-attention. Neither reads the other domain.
//! * `semantic_score_maps` / `ssm_fuse` — per-domain pixel-to-text score
//!   maps, aligned by a zero-initialized fusion convolution plus the
//!   elementwise mean, optionally steered by a rasterized control mask.
//!
//! Every score computation applies the 1/sqrt(d) scale. All functions loop
//! over the batch axis internally and keep features in the `[b, c, h*w]`
//! layout.

use crate::data::BinaryMask;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{InitKind, Parameter, Tensor};

/// Gain applied to zero-initialized conditioning layers.
pub const ZERO_CONV_GAIN: f64 = 8.0;

/// Token rows of the learned vocabulary table for one prompt.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    /// `[n_tokens, d_text]`, copied out of the vocabulary table.
    pub tokens: Tensor,
    pub prompt: String,
    /// Vocabulary row per token, used to rebuild the lookup on a tape.
    pub ids: Vec<usize>,
}

/// Image / annotation (and optional reference) features of one block.
#[derive(Debug, Clone)]
pub struct DomainFeatures {
    pub f_image: Tensor,
    pub f_annot: Tensor,
    pub f_ref: Option<Tensor>,
}

impl DomainFeatures {
    pub fn new(f_image: Tensor, f_annot: Tensor, f_ref: Option<Tensor>) -> Result<Self> {
        if f_image.ndim() != 3 {
            return Err(Error::Dimension(format!(
                "domain features must be [b,c,hw], got {:?}",
                f_image.shape
            )));
        }
        if f_image.shape != f_annot.shape {
            return Err(Error::Dimension(format!(
                "image and annotation features must share a shape: {:?} vs {:?}",
                f_image.shape, f_annot.shape
            )));
        }
        if let Some(r) = &f_ref {
            if r.shape != f_image.shape {
                return Err(Error::Dimension(format!(
                    "reference feature shape {:?} differs from {:?}",
                    r.shape, f_image.shape
                )));
            }
        }
        Ok(DomainFeatures {
            f_image,
            f_annot,
            f_ref,
        })
    }

    pub fn batch(&self) -> usize {
        self.f_image.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.f_image.shape[1]
    }

    pub fn tokens(&self) -> usize {
        self.f_image.shape[2]
    }

    /// Record the features as constants on a tape.
    pub fn bind(&self, tape: &mut Tape) -> FeatureIds {
        self.bind_with_grad(tape, None)
    }

    /// Record the features, tracking gradients for one selected domain.
    pub fn bind_with_grad(&self, tape: &mut Tape, grad_on: Option<ProbeDomain>) -> FeatureIds {
        let leaf = |tape: &mut Tape, t: &Tensor, tracked: bool| {
            if tracked {
                tape.input(t)
            } else {
                tape.constant(t)
            }
        };
        FeatureIds {
            image: leaf(tape, &self.f_image, matches!(grad_on, Some(ProbeDomain::Image))),
            annot: leaf(
                tape,
                &self.f_annot,
                matches!(grad_on, Some(ProbeDomain::Annotation)),
            ),
            reference: self.f_ref.as_ref().map(|r| {
                leaf(tape, r, matches!(grad_on, Some(ProbeDomain::Reference)))
            }),
        }
    }
}

/// Tape handles for one block's domain features.
#[derive(Debug, Clone, Copy)]
pub struct FeatureIds {
    pub image: TensorId,
    pub annot: TensorId,
    pub reference: Option<TensorId>,
}

/// Q/K/V projection matrices for one attention mechanism.
#[derive(Debug, Clone)]
pub struct AttentionProjections {
    pub w_q: Parameter,
    pub w_k: Parameter,
    pub w_v: Parameter,
    pub dim: usize,
}

impl AttentionProjections {
    pub fn init(prefix: &str, channels: usize, dim: usize, rng: &mut Rng) -> Self {
        let mk = |name: &str, rng: &mut Rng| {
            Parameter::init(
                format!("{prefix}.{name}"),
                vec![channels, dim],
                InitKind::UniformScaled,
                channels,
                dim,
                rng,
            )
        };
        AttentionProjections {
            w_q: mk("wq", rng),
            w_k: mk("wk", rng),
            w_v: mk("wv", rng),
            dim,
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }
}

/// 1x1 convolution over channels, zero-initialized weights and bias.
#[derive(Debug, Clone)]
pub struct ZeroConv {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl ZeroConv {
    pub fn init(prefix: &str, channels: usize, rng: &mut Rng) -> Self {
        ZeroConv {
            weight: Parameter::init(
                format!("{prefix}.w"),
                vec![channels, channels],
                InitKind::Zero,
                channels,
                channels,
                rng,
            ),
            bias: Parameter::init(
                format!("{prefix}.b"),
                vec![channels],
                InitKind::Zero,
                channels,
                channels,
                rng,
            ),
        }
    }

    /// Apply to `[tokens, channels]` rows. The constant gain keeps the
    /// zero-initialized kernel's effective adaptation rate usable at small
    /// learning rates (Adam's updates are scale-invariant, the output is
    /// not).
    pub fn apply(&self, tape: &mut Tape, tokens: TensorId) -> Result<TensorId> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let projected = tape.matmul_scaled(tokens, w, ZERO_CONV_GAIN)?;
        let scaled_bias = tape.scale(b, ZERO_CONV_GAIN);
        tape.add_row_bias(projected, scaled_bias)
    }
}

/// Query/text projections of one score-map block.
#[derive(Debug, Clone)]
pub struct SsmProjections {
    pub img_q: Parameter,
    pub ann_q: Parameter,
    pub text_k: Parameter,
    pub text_v: Parameter,
    pub dim: usize,
}

impl SsmProjections {
    pub fn init(prefix: &str, channels: usize, d_text: usize, rng: &mut Rng) -> Self {
        SsmProjections {
            img_q: Parameter::init(
                format!("{prefix}.img.wq"),
                vec![channels, channels],
                InitKind::UniformScaled,
                channels,
                channels,
                rng,
            ),
            ann_q: Parameter::init(
                format!("{prefix}.ann.wq"),
                vec![channels, channels],
                InitKind::UniformScaled,
                channels,
                channels,
                rng,
            ),
            text_k: Parameter::init(
                format!("{prefix}.text.wk"),
                vec![d_text, channels],
                InitKind::UniformScaled,
                d_text,
                channels,
                rng,
            ),
            text_v: Parameter::init(
                format!("{prefix}.text.wv"),
                vec![d_text, channels],
                InitKind::UniformScaled,
                d_text,
                channels,
                rng,
            ),
            dim: channels,
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }

    /// Project text tokens `[n, d_text]` to keys and values `[n, c]`.
    pub fn project_text(&self, tape: &mut Tape, text: TensorId) -> Result<(TensorId, TensorId)> {
        let wk = tape.param(&self.text_k);
        let wv = tape.param(&self.text_v);
        Ok((tape.matmul(text, wk)?, tape.matmul(text, wv)?))
    }
}

/// The score-fusion convolution: a zero-initialized 1x1 kernel over the
/// stacked-map axis, with one kernel per input arity (2 or 3 maps).
#[derive(Debug, Clone)]
pub struct ScoreFusion {
    pub w2: Parameter,
    pub b2: Parameter,
    pub w3: Parameter,
    pub b3: Parameter,
}

impl ScoreFusion {
    pub fn init(prefix: &str, rng: &mut Rng) -> Self {
        let zero = |name: &str, shape: Vec<usize>, rng: &mut Rng| {
            Parameter::init(format!("{prefix}.{name}"), shape, InitKind::Zero, 1, 1, rng)
        };
        ScoreFusion {
            w2: zero("fuse2.w", vec![2, 2], rng),
            b2: zero("fuse2.b", vec![2], rng),
            w3: zero("fuse3.w", vec![2, 3], rng),
            b3: zero("fuse3.b", vec![2], rng),
        }
    }

    fn kernel(&self, arity: usize) -> Result<(&Parameter, &Parameter)> {
        match arity {
            2 => Ok((&self.w2, &self.b2)),
            3 => Ok((&self.w3, &self.b3)),
            other => Err(Error::Dimension(format!(
                "score fusion supports 2 or 3 stacked maps, got {other}"
            ))),
        }
    }
}

/// Pixel-to-text response matrix of one sample.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    /// `[hw, n_tokens]`.
    pub values: Tensor,
    /// True when every row is a softmax distribution over the tokens.
    pub normalized: bool,
}

// ── Shared token plumbing ───────────────────────────────────────────────

/// Extract batch item `item` of `[b, c, hw]` as `[hw, c]` token rows.
fn item_tokens(tape: &mut Tape, x: TensorId, item: usize) -> Result<TensorId> {
    let (c, hw) = {
        let s = tape.shape(x);
        (s[1], s[2])
    };
    let slice = tape.narrow(x, 0, item, 1)?;
    let mat = tape.reshape(slice, vec![c, hw])?;
    tape.transpose(mat)
}

/// Pack `[hw, c]` token rows back into a `[1, c, hw]` feature slice.
fn tokens_to_feature(tape: &mut Tape, tokens: TensorId) -> Result<TensorId> {
    let (hw, c) = {
        let s = tape.shape(tokens);
        (s[0], s[1])
    };
    let mat = tape.transpose(tokens)?;
    tape.reshape(mat, vec![1, c, hw])
}

fn concat_items(tape: &mut Tape, items: &[TensorId]) -> Result<TensorId> {
    if items.len() == 1 {
        return Ok(items[0]);
    }
    tape.concat(items, 0)
}

/// `softmax(q k^T / sqrt(d))` for token matrices `q`, `k`.
fn scaled_scores(tape: &mut Tape, q: TensorId, k: TensorId, scale: f64) -> Result<TensorId> {
    let kt = tape.transpose(k)?;
    let scaled = tape.matmul_scaled(q, kt, scale)?;
    tape.softmax(scaled, 1)
}

// ── Entangled baseline ──────────────────────────────────────────────────

/// The four sub-blocks of the joint score matrix, each `[b, hw, hw]`.
#[derive(Debug, Clone, Copy)]
pub struct ScoreBlocks {
    pub i_i: TensorId,
    pub i_a: TensorId,
    pub a_i: TensorId,
    pub a_a: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct ConcatAttentionOut {
    pub f_image: TensorId,
    pub f_annot: TensorId,
    pub blocks: ScoreBlocks,
}

/// Concatenated attention over both domains with one shared projection set.
/// The joint softmax runs over all `2*hw` keys; outputs reassemble as
/// `F_I = I_I V_I + I_A V_A` and `F_A = A_A V_A + A_I V_I`.
pub fn concat_attention(
    tape: &mut Tape,
    feats: &FeatureIds,
    proj: &AttentionProjections,
) -> Result<ConcatAttentionOut> {
    let (b, c, hw) = {
        let s = tape.shape(feats.image);
        (s[0], s[1], s[2])
    };
    if proj.w_q.tensor.shape[0] != c {
        return Err(Error::Dimension(format!(
            "projection expects {} channels, features have {c}",
            proj.w_q.tensor.shape[0]
        )));
    }
    let wq = tape.param(&proj.w_q);
    let wk = tape.param(&proj.w_k);
    let wv = tape.param(&proj.w_v);

    let mut img_out = Vec::with_capacity(b);
    let mut ann_out = Vec::with_capacity(b);
    let mut blocks: [Vec<TensorId>; 4] = Default::default();
    for item in 0..b {
        let ti = item_tokens(tape, feats.image, item)?;
        let ta = item_tokens(tape, feats.annot, item)?;
        let tokens = tape.concat(&[ti, ta], 0)?;
        let q = tape.matmul(tokens, wq)?;
        let k = tape.matmul(tokens, wk)?;
        let v = tape.matmul(tokens, wv)?;
        let s = scaled_scores(tape, q, k, proj.scale())?;

        let out = tape.matmul(s, v)?;
        let parts = tape.split(out, 0, &[hw, hw])?;
        img_out.push(tokens_to_feature(tape, parts[0])?);
        ann_out.push(tokens_to_feature(tape, parts[1])?);

        let rows = tape.split(s, 0, &[hw, hw])?;
        for (r, row) in rows.into_iter().enumerate() {
            let cols = tape.split(row, 1, &[hw, hw])?;
            for (cix, block) in cols.into_iter().enumerate() {
                let shaped = tape.reshape(block, vec![1, hw, hw])?;
                blocks[2 * r + cix].push(shaped);
            }
        }
    }
    Ok(ConcatAttentionOut {
        f_image: concat_items(tape, &img_out)?,
        f_annot: concat_items(tape, &ann_out)?,
        blocks: ScoreBlocks {
            i_i: concat_items(tape, &blocks[0])?,
            i_a: concat_items(tape, &blocks[1])?,
            a_i: concat_items(tape, &blocks[2])?,
            a_a: concat_items(tape, &blocks[3])?,
        },
    })
}

// ── Decoupled attention ─────────────────────────────────────────────────

/// Image-branch cross-attention: queries from the image feature, keys and
/// values from the zero-convolved reference added to the image feature,
/// residual output. Never reads the annotation feature.
pub fn image_cross_attention(
    tape: &mut Tape,
    feats: &FeatureIds,
    proj: &AttentionProjections,
    zeta: &ZeroConv,
) -> Result<TensorId> {
    let reference = feats.reference.ok_or_else(|| {
        Error::Usage("image cross-attention requires a reference feature".into())
    })?;
    let (b, c) = {
        let s = tape.shape(feats.image);
        (s[0], s[1])
    };
    if proj.dim != c {
        return Err(Error::Dimension(format!(
            "residual attention needs dim == channels, got {} vs {c}",
            proj.dim
        )));
    }
    let wq = tape.param(&proj.w_q);
    let wk = tape.param(&proj.w_k);
    let wv = tape.param(&proj.w_v);

    let mut out = Vec::with_capacity(b);
    for item in 0..b {
        let ti = item_tokens(tape, feats.image, item)?;
        let tr = item_tokens(tape, reference, item)?;
        let conditioned = zeta.apply(tape, tr)?;
        let kv_src = tape.add(conditioned, ti)?;
        let q = tape.matmul(ti, wq)?;
        let k = tape.matmul(kv_src, wk)?;
        let v = tape.matmul(kv_src, wv)?;
        let s = scaled_scores(tape, q, k, proj.scale())?;
        let attended = tape.matmul(s, v)?;
        let residual = tape.add(attended, ti)?;
        out.push(tokens_to_feature(tape, residual)?);
    }
    concat_items(tape, &out)
}

/// Annotation-branch self-attention with residual output. Never reads the
/// image or reference features.
pub fn annotation_self_attention(
    tape: &mut Tape,
    feats: &FeatureIds,
    proj: &AttentionProjections,
) -> Result<TensorId> {
    let (b, c) = {
        let s = tape.shape(feats.annot);
        (s[0], s[1])
    };
    if proj.dim != c {
        return Err(Error::Dimension(format!(
            "residual attention needs dim == channels, got {} vs {c}",
            proj.dim
        )));
    }
    let wq = tape.param(&proj.w_q);
    let wk = tape.param(&proj.w_k);
    let wv = tape.param(&proj.w_v);

    let mut out = Vec::with_capacity(b);
    for item in 0..b {
        let ta = item_tokens(tape, feats.annot, item)?;
        let q = tape.matmul(ta, wq)?;
        let k = tape.matmul(ta, wk)?;
        let v = tape.matmul(ta, wv)?;
        let s = scaled_scores(tape, q, k, proj.scale())?;
        let attended = tape.matmul(s, v)?;
        let residual = tape.add(attended, ta)?;
        out.push(tokens_to_feature(tape, residual)?);
    }
    concat_items(tape, &out)
}

// ── Score-map alignment ─────────────────────────────────────────────────

/// Per-domain pixel-to-text score maps `[b, hw, n_tokens]`, rows softmaxed
/// over the text tokens.
pub fn semantic_score_maps(
    tape: &mut Tape,
    feats: &FeatureIds,
    text_keys: TensorId,
    ssm: &SsmProjections,
) -> Result<(TensorId, TensorId)> {
    let b = tape.shape(feats.image)[0];
    let n_tokens = tape.shape(text_keys)[0];
    if n_tokens == 0 {
        return Err(Error::Dimension("text embedding has no tokens".into()));
    }
    let wq_i = tape.param(&ssm.img_q);
    let wq_a = tape.param(&ssm.ann_q);
    let mut maps_i = Vec::with_capacity(b);
    let mut maps_a = Vec::with_capacity(b);
    for item in 0..b {
        let ti = item_tokens(tape, feats.image, item)?;
        let ta = item_tokens(tape, feats.annot, item)?;
        let qi = tape.matmul(ti, wq_i)?;
        let qa = tape.matmul(ta, wq_a)?;
        let si = scaled_scores(tape, qi, text_keys, ssm.scale())?;
        let sa = scaled_scores(tape, qa, text_keys, ssm.scale())?;
        let hw = tape.shape(si)[0];
        maps_i.push(tape.reshape(si, vec![1, hw, n_tokens])?);
        maps_a.push(tape.reshape(sa, vec![1, hw, n_tokens])?);
    }
    Ok((concat_items(tape, &maps_i)?, concat_items(tape, &maps_a)?))
}

/// Broadcast a binary control mask across the text tokens: active pixels
/// get `1/n_tokens` in every column so their rows sum to one, inactive rows
/// stay zero (hence `normalized = false`).
pub fn rasterize_control(mask: &BinaryMask, n_tokens: usize) -> Result<ScoreMap> {
    if n_tokens == 0 {
        return Err(Error::Validation("control map needs at least one token".into()));
    }
    if mask.pixels.iter().any(|&p| p > 1) {
        return Err(Error::Validation("control mask must be binary".into()));
    }
    let hw = mask.width * mask.height;
    let mut values = vec![0.0; hw * n_tokens];
    let share = 1.0 / n_tokens as f64;
    for (p, &m) in mask.pixels.iter().enumerate() {
        if m == 1 {
            values[p * n_tokens..(p + 1) * n_tokens].fill(share);
        }
    }
    Ok(ScoreMap {
        values: Tensor::from_vec(vec![hw, n_tokens], values),
        normalized: false,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SsmOut {
    pub f_image: TensorId,
    pub f_annot: TensorId,
    /// Fused maps `[b, hw, n_tokens]`.
    pub s_hat_image: TensorId,
    pub s_hat_annot: TensorId,
}

/// Fuse the domain score maps (and the optional control map) through the
/// zero-initialized fusion kernel plus the stacked-map mean, then push the
/// aligned text values back into both feature streams residually.
pub fn ssm_fuse(
    tape: &mut Tape,
    feats: &FeatureIds,
    s_image: TensorId,
    s_annot: TensorId,
    s_control: Option<TensorId>,
    text_values: TensorId,
    fusion: &ScoreFusion,
) -> Result<SsmOut> {
    let (b, hw, n_tokens) = {
        let s = tape.shape(s_image);
        (s[0], s[1], s[2])
    };
    if tape.shape(s_annot) != [b, hw, n_tokens] {
        return Err(Error::Dimension(format!(
            "score maps disagree: {:?} vs {:?}",
            tape.shape(s_image),
            tape.shape(s_annot)
        )));
    }
    if let Some(so) = s_control {
        if tape.shape(so) != [b, hw, n_tokens] {
            return Err(Error::Dimension(format!(
                "control map shape {:?} does not match {:?}",
                tape.shape(so),
                [b, hw, n_tokens]
            )));
        }
    }
    let arity = if s_control.is_some() { 3 } else { 2 };
    let (w, bias) = fusion.kernel(arity)?;
    let w_id = tape.param(w);
    let b_id = tape.param(bias);
    let wt = tape.transpose(w_id)?;

    let mut out_i = Vec::with_capacity(b);
    let mut out_a = Vec::with_capacity(b);
    let mut hat_i = Vec::with_capacity(b);
    let mut hat_a = Vec::with_capacity(b);
    for item in 0..b {
        let mut maps = Vec::with_capacity(arity);
        for &src in [s_image, s_annot].iter() {
            let m = tape.narrow(src, 0, item, 1)?;
            maps.push(tape.reshape(m, vec![hw, n_tokens])?);
        }
        if let Some(so) = s_control {
            let m = tape.narrow(so, 0, item, 1)?;
            maps.push(tape.reshape(m, vec![hw, n_tokens])?);
        }

        // mu: elementwise mean over the stacked maps.
        let mut acc = maps[0];
        for &m in &maps[1..] {
            acc = tape.add(acc, m)?;
        }
        let mu = tape.scale(acc, 1.0 / arity as f64);

        // eta: 1x1 fusion over the stack axis yielding the two corrections.
        let mut rows = Vec::with_capacity(arity);
        for &m in &maps {
            rows.push(tape.reshape(m, vec![1, hw * n_tokens])?);
        }
        let stack = tape.concat(&rows, 0)?;
        let stack_t = tape.transpose(stack)?;
        let fused = tape.matmul_scaled(stack_t, wt, ZERO_CONV_GAIN)?;
        let scaled_bias = tape.scale(b_id, ZERO_CONV_GAIN);
        let fused = tape.add_row_bias(fused, scaled_bias)?;
        let cols = tape.split(fused, 1, &[1, 1])?;
        let eta_i = tape.reshape(cols[0], vec![hw, n_tokens])?;
        let eta_a = tape.reshape(cols[1], vec![hw, n_tokens])?;

        let s_hat_i = tape.add(eta_i, mu)?;
        let s_hat_a = tape.add(eta_a, mu)?;

        let contrib_i = tape.matmul(s_hat_i, text_values)?;
        let contrib_a = tape.matmul(s_hat_a, text_values)?;
        let ti = item_tokens(tape, feats.image, item)?;
        let ta = item_tokens(tape, feats.annot, item)?;
        let fi = tape.add(ti, contrib_i)?;
        let fa = tape.add(ta, contrib_a)?;
        out_i.push(tokens_to_feature(tape, fi)?);
        out_a.push(tokens_to_feature(tape, fa)?);
        hat_i.push(tape.reshape(s_hat_i, vec![1, hw, n_tokens])?);
        hat_a.push(tape.reshape(s_hat_a, vec![1, hw, n_tokens])?);
    }
    Ok(SsmOut {
        f_image: concat_items(tape, &out_i)?,
        f_annot: concat_items(tape, &out_a)?,
        s_hat_image: concat_items(tape, &hat_i)?,
        s_hat_annot: concat_items(tape, &hat_a)?,
    })
}

// ── Leakage probes ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeDomain {
    Image,
    Annotation,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputDomain {
    Image,
    Annotation,
}

const FD_PROBES: usize = 16;
const FD_EPS: f64 = 1e-4;

/// Sensitivity of one output domain to one input domain through `block_fn`:
/// the exact gradient norm of the summed output w.r.t. the selected input,
/// cross-checked by random directional finite differences. Returns 0.0
/// exactly (not merely small) when the block admits no computational path.
pub fn cross_jacobian_norm<F>(
    block_fn: F,
    input_sel: ProbeDomain,
    output_sel: OutputDomain,
    probe: &DomainFeatures,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &FeatureIds) -> Result<(TensorId, TensorId)>,
{
    if input_sel == ProbeDomain::Reference && probe.f_ref.is_none() {
        return Err(Error::Usage("probe has no reference feature".into()));
    }

    // Exact route: differentiate the scalar projection sum(selected output).
    let mut tape = Tape::new();
    let ids = probe.bind_with_grad(&mut tape, Some(input_sel));
    let (img_out, ann_out) = block_fn(&mut tape, &ids)?;
    let selected = match output_sel {
        OutputDomain::Image => img_out,
        OutputDomain::Annotation => ann_out,
    };
    let loss = tape.sum(selected);
    tape.backward(loss)?;
    let probe_id = match input_sel {
        ProbeDomain::Image => ids.image,
        ProbeDomain::Annotation => ids.annot,
        ProbeDomain::Reference => ids.reference.unwrap(),
    };
    let analytic: f64 = tape
        .grad(probe_id)
        .iter()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();

    // Directional finite differences on top; with no path the two
    // evaluations are bitwise equal and every probe is exactly zero.
    let eval = |features: &DomainFeatures| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ids = features.bind(&mut tape);
        let (img_out, ann_out) = block_fn(&mut tape, &ids)?;
        let sel = match output_sel {
            OutputDomain::Image => img_out,
            OutputDomain::Annotation => ann_out,
        };
        Ok(tape.value(sel).to_vec())
    };
    let mut rng = Rng::new(seed);
    let base_field = |f: &DomainFeatures| match input_sel {
        ProbeDomain::Image => f.f_image.clone(),
        ProbeDomain::Annotation => f.f_annot.clone(),
        ProbeDomain::Reference => f.f_ref.clone().unwrap(),
    };
    let n = base_field(probe).numel();
    let mut max_directional: f64 = 0.0;
    for _ in 0..FD_PROBES {
        let mut dir: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        for d in dir.iter_mut() {
            *d /= norm;
        }
        let mut plus = probe.clone();
        let mut minus = probe.clone();
        {
            let (p, m) = match input_sel {
                ProbeDomain::Image => (&mut plus.f_image, &mut minus.f_image),
                ProbeDomain::Annotation => (&mut plus.f_annot, &mut minus.f_annot),
                ProbeDomain::Reference => (
                    plus.f_ref.as_mut().unwrap(),
                    minus.f_ref.as_mut().unwrap(),
                ),
            };
            for (i, d) in dir.iter().enumerate() {
                p.data[i] += FD_EPS * d;
                m.data[i] -= FD_EPS * d;
            }
        }
        let fp = eval(&plus)?;
        let fm = eval(&minus)?;
        let diff: f64 = fp
            .iter()
            .zip(&fm)
            .map(|(a, b)| (a - b) / (2.0 * FD_EPS))
            .map(|v| v.abs())
            .sum();
        max_directional = max_directional.max(diff);
    }
    Ok(analytic.max(max_directional))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    // ── Brute-force oracles, independent of the tape path ───────────────

    fn mat_vecmul(rows: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                (0..w[0].len())
                    .map(|j| (0..r.len()).map(|i| r[i] * w[i][j]).sum())
                    .collect()
            })
            .collect()
    }

    fn softmax_row(row: &[f64]) -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    /// softmax(q k^T / sqrt(d)) v over explicit token lists.
    fn attention_oracle(
        q: &[Vec<f64>],
        k: &[Vec<f64>],
        v: &[Vec<f64>],
        d: usize,
    ) -> Vec<Vec<f64>> {
        let scale = 1.0 / (d as f64).sqrt();
        q.iter()
            .map(|qr| {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let weights = softmax_row(&scores);
                (0..v[0].len())
                    .map(|j| weights.iter().zip(v).map(|(w, vr)| w * vr[j]).sum())
                    .collect()
            })
            .collect()
    }

    fn rand_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| rng.next_normal() * 0.5).collect())
            .collect()
    }

    fn tensor_of(rows: &[Vec<f64>]) -> Tensor {
        let data: Vec<f64> = rows.iter().flatten().cloned().collect();
        Tensor::from_vec(vec![rows.len(), rows[0].len()], data)
    }

    /// Features `[1, c, hw]` from token rows `[hw][c]`.
    fn feature_of(tokens: &[Vec<f64>]) -> Tensor {
        let hw = tokens.len();
        let c = tokens[0].len();
        let mut data = vec![0.0; c * hw];
        for (t, row) in tokens.iter().enumerate() {
            for (ch, &v) in row.iter().enumerate() {
                data[ch * hw + t] = v;
            }
        }
        Tensor::from_vec(vec![1, c, hw], data)
    }

    fn proj_from(
        prefix: &str,
        wq: &[Vec<f64>],
        wk: &[Vec<f64>],
        wv: &[Vec<f64>],
    ) -> AttentionProjections {
        let mut rng = Rng::new(0);
        let mut proj = AttentionProjections::init(prefix, wq.len(), wq[0].len(), &mut rng);
        proj.w_q.tensor = tensor_of(wq);
        proj.w_k.tensor = tensor_of(wk);
        proj.w_v.tensor = tensor_of(wv);
        proj
    }

    fn read_tokens(tape: &Tape, feature: TensorId, item: usize) -> Vec<Vec<f64>> {
        let s = tape.shape(feature).to_vec();
        let (c, hw) = (s[1], s[2]);
        let v = tape.value(feature);
        (0..hw)
            .map(|t| (0..c).map(|ch| v[item * c * hw + ch * hw + t]).collect())
            .collect()
    }

    fn assert_close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) {
        for (ra, rb) in a.iter().zip(b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < tol, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn concat_attention_identical_domains_give_equal_cross_blocks() {
        let mut rng = Rng::new(31);
        let tokens = rand_matrix(3, 4, &mut rng);
        let w = rand_matrix(4, 4, &mut rng);
        let feats = DomainFeatures::new(
            feature_of(&tokens),
            feature_of(&tokens),
            None,
        )
        .unwrap();
        let proj = proj_from("p", &w, &w, &w);
        let mut tape = Tape::new();
        let ids = feats.bind(&mut tape);
        let out = concat_attention(&mut tape, &ids, &proj).unwrap();
        assert_eq!(tape.value(out.blocks.i_i), tape.value(out.blocks.i_a));
        assert_eq!(tape.value(out.blocks.a_i), tape.value(out.blocks.a_a));
    }

    #[test]
    fn concat_attention_blocks_partition_unity() {
        let mut rng = Rng::new(32);
        let feats = DomainFeatures::new(
            feature_of(&rand_matrix(4, 3, &mut rng)),
            feature_of(&rand_matrix(4, 3, &mut rng)),
            None,
        )
        .unwrap();
        let w = AttentionProjections::init("p", 3, 3, &mut rng);
        let mut tape = Tape::new();
        let ids = feats.bind(&mut tape);
        let out = concat_attention(&mut tape, &ids, &w).unwrap();
        let hw = 4;
        for (left, right) in [
            (out.blocks.i_i, out.blocks.i_a),
            (out.blocks.a_i, out.blocks.a_a),
        ] {
            let l = tape.value(left);
            let r = tape.value(right);
            for row in 0..hw {
                let sum: f64 = l[row * hw..(row + 1) * hw]
                    .iter()
                    .chain(&r[row * hw..(row + 1) * hw])
                    .sum();
                assert!((sum - 1.0).abs() < 1e-9, "row {row} sums to {sum}");
            }
        }
    }

    #[test]
    fn concat_attention_matches_dense_oracle() {
        let mut rng = Rng::new(33);
        let ti = rand_matrix(2, 3, &mut rng);
        let ta = rand_matrix(2, 3, &mut rng);
        let wq = rand_matrix(3, 3, &mut rng);
        let wk = rand_matrix(3, 3, &mut rng);
        let wv = rand_matrix(3, 3, &mut rng);
        let proj = proj_from("p", &wq, &wk, &wv);
        let feats = DomainFeatures::new(feature_of(&ti), feature_of(&ta), None).unwrap();
        let mut tape = Tape::new();
        let ids = feats.bind(&mut tape);
        let out = concat_attention(&mut tape, &ids, &proj).unwrap();

        let all: Vec<Vec<f64>> = ti.iter().chain(&ta).cloned().collect();
        let q = mat_vecmul(&all, &wq);
        let k = mat_vecmul(&all, &wk);
        let v = mat_vecmul(&all, &wv);
        let dense = attention_oracle(&q, &k, &v, 3);
        assert_close(&read_tokens(&tape, out.f_image, 0), &dense[..2], 1e-12);
        assert_close(&read_tokens(&tape, out.f_annot, 0), &dense[2..], 1e-12);
    }

    #[test]
    fn image_cross_attention_zero_init_reduces_to_self_attention() {
        let mut rng = Rng::new(34);
        let ti = rand_matrix(3, 4, &mut rng);
        let tr = rand_matrix(3, 4, &mut rng);
        let proj = AttentionProjections::init("p", 4, 4, &mut rng);
        let zeta = ZeroConv::init("p.zeta", 4, &mut rng);
        let feats = DomainFeatures::new(
            feature_of(&ti),
            feature_of(&rand_matrix(3, 4, &mut rng)),
            Some(feature_of(&tr)),
        )
        .unwrap();
        let mut tape = Tape::new();
        let ids = feats.bind(&mut tape);
        let out = image_cross_attention(&mut tape, &ids, &proj, &zeta).unwrap();

        // Reference is projected through an all-zero kernel, so the result
        // is plain self-attention on the image tokens.
        let wq: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| proj.w_q.tensor.data[i * 4 + j]).collect())
            .collect();
        let wk: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| proj.w_k.tensor.data[i * 4 + j]).collect())
            .collect();
        let wv: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| proj.w_v.tensor.data[i * 4 + j]).collect())
            .collect();
        let q = mat_vecmul(&ti, &wq);
        let k = mat_vecmul(&ti, &wk);
        let v = mat_vecmul(&ti, &wv);
        let mut want = attention_oracle(&q, &k, &v, 4);
        for (row, t) in want.iter_mut().zip(&ti) {
            for (o, x) in row.iter_mut().zip(t) {
                *o += x;
            }
        }
        assert_close(&read_tokens(&tape, out, 0), &want, 1e-12);
    }

    #[test]
    fn image_cross_attention_ignores_annotation_perturbation() {
        let mut rng = Rng::new(35);
        let proj = AttentionProjections::init("p", 3, 3, &mut rng);
        let mut zeta = ZeroConv::init("p.zeta", 3, &mut rng);
        // Nonzero conditioning so the reference genuinely participates.
        for v in zeta.weight.tensor.data.iter_mut() {
            *v = rng.next_normal() * 0.3;
        }
        let base = DomainFeatures::new(
            feature_of(&rand_matrix(4, 3, &mut rng)),
            feature_of(&rand_matrix(4, 3, &mut rng)),
            Some(feature_of(&rand_matrix(4, 3, &mut rng))),
        )
        .unwrap();
        let mut perturbed = base.clone();
        for v in perturbed.f_annot.data.iter_mut() {
            *v += rng.next_normal();
        }
        let run = |f: &DomainFeatures| {
            let mut tape = Tape::new();
            let ids = f.bind(&mut tape);
            let out = image_cross_attention(&mut tape, &ids, &proj, &zeta).unwrap();
            tape.value(out).to_vec()
        };
        assert_eq!(run(&base), run(&perturbed));
    }

    #[test]
    fn image_cross_attention_with_nonzero_conditioning_matches_oracle() {
        let mut rng = Rng::new(36);
        let ti = rand_matrix(3, 3, &mut rng);
        let tr = rand_matrix(3, 3, &mut rng);
        let wq = rand_matrix(3, 3, &mut rng);
        let wk = rand_matrix(3, 3, &mut rng);
        let wv = rand_matrix(3, 3, &mut rng);
        let wz = rand_matrix(3, 3, &mut rng);
        let bz: Vec<f64> = (0..3).map(|_| rng.next_normal()).collect();

        let proj = proj_from("p", &wq, &wk, &wv);
        let mut zeta = ZeroConv::init("p.zeta", 3, &mut rng);
        zeta.weight.tensor = tensor_of(&wz);
        zeta.bias.tensor = Tensor::from_vec(vec![3], bz.clone());

        let feats = DomainFeatures::new(
            feature_of(&ti),
            feature_of(&rand_matrix(3, 3, &mut rng)),
            Some(feature_of(&tr)),
        )
        .unwrap();
        let mut tape = Tape::new();
        let ids = feats.bind(&mut tape);
        let out = image_cross_attention(&mut tape, &ids, &proj, &zeta).unwrap();

        let zr: Vec<Vec<f64>> = mat_vecmul(&tr, &wz)
            .into_iter()
            .zip(&ti)
            .map(|(zrow, trow)| {
                zrow.iter()
                    .zip(&bz)
                    .zip(trow)
                    .map(|((z, b), t)| ZERO_CONV_GAIN * (z + b) + t)
                    .collect()
            })
            .collect();
        let q = mat_vecmul(&ti, &wq);
        let k = mat_vecmul(&zr, &wk);
        let v = mat_vecmul(&zr, &wv);
        let mut want = attention_oracle(&q, &k, &v, 3);
        for (row, t) in want.iter_mut().zip(&ti) {
            for (o, x) in row.iter_mut().zip(t) {
                *o += x;
            }
        }
        assert_close(&read_tokens(&tape, out, 0), &want, 1e-12);
    }

    #[test]
    fn annotation_attention_single_token_and_decoupling() {
        let mut rng = Rng::new(37);
        let proj = AttentionProjections::init("p", 3, 3, &mut rng);
        let ta = rand_matrix(1, 3, &mut rng);
        let feats = DomainFeatures::new(
            feature_of(&rand_matrix(1, 3, &mut rng)),
            feature_of(&ta),
            Some(feature_of(&rand_matrix(1, 3, &mut rng))),
        )
        .unwrap();
        let mut tape = Tape::new();
        let ids = feats.bind(&mut tape);
        let out = annotation_self_attention(&mut tape, &ids, &proj).unwrap();
        // One token: softmax weight is 1, output = V + residual.
        let wv: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| proj.w_v.tensor.data[i * 3 + j]).collect())
            .collect();
        let v = mat_vecmul(&ta, &wv);
        let want: Vec<Vec<f64>> = vec![v[0]
            .iter()
            .zip(&ta[0])
            .map(|(a, b)| a + b)
            .collect()];
        assert_close(&read_tokens(&tape, out, 0), &want, 1e-12);

        // Perturbing image and reference leaves the output bit-identical.
        let mut perturbed = feats.clone();
        for v in perturbed.f_image.data.iter_mut() {
            *v += 1.0;
        }
        for v in perturbed.f_ref.as_mut().unwrap().data.iter_mut() {
            *v -= 2.0;
        }
        let run = |f: &DomainFeatures| {
            let mut tape = Tape::new();
            let ids = f.bind(&mut tape);
            let out = annotation_self_attention(&mut tape, &ids, &proj).unwrap();
            tape.value(out).to_vec()
        };
        assert_eq!(run(&feats), run(&perturbed));
    }

    #[test]
    fn annotation_attention_matches_oracle_on_four_tokens() {
        let mut rng = Rng::new(38);
        let ta = rand_matrix(4, 3, &mut rng);
        let wq = rand_matrix(3, 3, &mut rng);
        let wk = rand_matrix(3, 3, &mut rng);
        let wv = rand_matrix(3, 3, &mut rng);
        let proj = proj_from("p", &wq, &wk, &wv);
        let feats = DomainFeatures::new(
            feature_of(&rand_matrix(4, 3, &mut rng)),
            feature_of(&ta),
            None,
        )
        .unwrap();
        let mut tape = Tape::new();
        let ids = feats.bind(&mut tape);
        let out = annotation_self_attention(&mut tape, &ids, &proj).unwrap();
        let q = mat_vecmul(&ta, &wq);
        let k = mat_vecmul(&ta, &wk);
        let v = mat_vecmul(&ta, &wv);
        let mut want = attention_oracle(&q, &k, &v, 3);
        for (row, t) in want.iter_mut().zip(&ta) {
            for (o, x) in row.iter_mut().zip(t) {
                *o += x;
            }
        }
        assert_close(&read_tokens(&tape, out, 0), &want, 1e-12);
    }

    fn ssm_setup(rng: &mut Rng, hw: usize, c: usize, n: usize) -> (DomainFeatures, SsmProjections, Tensor) {
        let feats = DomainFeatures::new(
            feature_of(&rand_matrix(hw, c, rng)),
            feature_of(&rand_matrix(hw, c, rng)),
            None,
        )
        .unwrap();
        let ssm = SsmProjections::init("s", c, 4, rng);
        let text = tensor_of(&rand_matrix(n, 4, rng));
        (feats, ssm, text)
    }

    #[test]
    fn single_token_score_maps_are_all_ones() {
        let mut rng = Rng::new(39);
        let (feats, ssm, text) = ssm_setup(&mut rng, 3, 2, 1);
        let mut tape = Tape::new();
        let ids = feats.bind(&mut tape);
        let text_id = tape.constant(&text);
        let (k, _) = ssm.project_text(&mut tape, text_id).unwrap();
        let (si, sa) = semantic_score_maps(&mut tape, &ids, k, &ssm).unwrap();
        assert!(tape.value(si).iter().all(|&v| v == 1.0));
        assert!(tape.value(sa).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_features_and_shared_queries_give_identical_maps() {
        let mut rng = Rng::new(40);
        let tokens = rand_matrix(3, 2, &mut rng);
        let feats =
            DomainFeatures::new(feature_of(&tokens), feature_of(&tokens), None).unwrap();
        let mut ssm = SsmProjections::init("s", 2, 4, &mut rng);
        ssm.ann_q.tensor = ssm.img_q.tensor.clone();
        let text = tensor_of(&rand_matrix(2, 4, &mut rng));
        let mut tape = Tape::new();
        let ids = feats.bind(&mut tape);
        let text_id = tape.constant(&text);
        let (k, _) = ssm.project_text(&mut tape, text_id).unwrap();
        let (si, sa) = semantic_score_maps(&mut tape, &ids, k, &ssm).unwrap();
        assert_eq!(tape.value(si), tape.value(sa));
    }

    #[test]
    fn score_maps_match_oracle_on_two_by_two() {
        let mut rng = Rng::new(41);
        let (feats, ssm, text) = ssm_setup(&mut rng, 2, 2, 2);
        let mut tape = Tape::new();
        let ids = feats.bind(&mut tape);
        let text_id = tape.constant(&text);
        let (k, _) = ssm.project_text(&mut tape, text_id).unwrap();
        let (si, _) = semantic_score_maps(&mut tape, &ids, k, &ssm).unwrap();

        let wq: Vec<Vec<f64>> = (0..2)
            .map(|i| (0..2).map(|j| ssm.img_q.tensor.data[i * 2 + j]).collect())
            .collect();
        let wk: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..2).map(|j| ssm.text_k.tensor.data[i * 2 + j]).collect())
            .collect();
        let ti = read_tokens(&tape, ids.image, 0);
        let q = mat_vecmul(&ti, &wq);
        let text_rows: Vec<Vec<f64>> = (0..2)
            .map(|i| (0..4).map(|j| text.data[i * 4 + j]).collect())
            .collect();
        let kt = mat_vecmul(&text_rows, &wk);
        let scale = 1.0 / (2.0f64).sqrt();
        let got = tape.value(si);
        for (p, qrow) in q.iter().enumerate() {
            let scores: Vec<f64> = kt
                .iter()
                .map(|kr| qrow.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let want = softmax_row(&scores);
            for (t, w) in want.iter().enumerate() {
                assert!((got[p * 2 + t] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rasterize_control_cases() {
        let ones = BinaryMask::new(2, 2, vec![1; 4]).unwrap();
        let map = rasterize_control(&ones, 2).unwrap();
        assert!(map.values.data.iter().all(|&v| v == 0.5));
        assert!(!map.normalized);

        let zeros = BinaryMask::zeros(2, 2);
        let map = rasterize_control(&zeros, 3).unwrap();
        assert!(map.values.data.iter().all(|&v| v == 0.0));

        let checker = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let map = rasterize_control(&checker, 4).unwrap();
        for (p, chunk) in map.values.data.chunks(4).enumerate() {
            let expect = if p == 0 || p == 3 { 0.25 } else { 0.0 };
            assert!(chunk.iter().all(|&v| v == expect));
        }

        let bad = BinaryMask {
            width: 1,
            height: 1,
            pixels: vec![2],
        };
        assert!(matches!(
            rasterize_control(&bad, 2),
            Err(Error::Validation(_))
        ));
    }

    fn run_fuse(
        feats: &DomainFeatures,
        ssm: &SsmProjections,
        fusion: &ScoreFusion,
        text: &Tensor,
        control: Option<&ScoreMap>,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let ids = feats.bind(&mut tape);
        let text_id = tape.constant(text);
        let (k, v) = ssm.project_text(&mut tape, text_id).unwrap();
        let (si, sa) = semantic_score_maps(&mut tape, &ids, k, ssm).unwrap();
        let so = control.map(|c| {
            let hw = c.values.shape[0];
            let n = c.values.shape[1];
            let t = tape.constant(&c.values);
            tape.reshape(t, vec![1, hw, n]).unwrap()
        });
        let out = ssm_fuse(&mut tape, &ids, si, sa, so, v, fusion).unwrap();
        (
            tape.value(out.s_hat_image).to_vec(),
            tape.value(out.s_hat_annot).to_vec(),
            tape.value(si).to_vec(),
            tape.value(sa).to_vec(),
            tape.value(out.f_image).to_vec(),
        )
    }

    #[test]
    fn fuse_at_zero_init_is_the_map_mean() {
        let mut rng = Rng::new(42);
        let (feats, ssm, text) = ssm_setup(&mut rng, 3, 2, 2);
        let fusion = ScoreFusion::init("f", &mut rng);
        let (hat_i, hat_a, si, sa, _) = run_fuse(&feats, &ssm, &fusion, &text, None);
        assert_eq!(hat_i, hat_a);
        for ((h, a), b) in hat_i.iter().zip(&si).zip(&sa) {
            assert!((h - (a + b) / 2.0).abs() < 1e-15);
        }
        // Rows still sum to one.
        for row in hat_i.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn control_map_shifts_mass_to_active_rows() {
        let mut rng = Rng::new(43);
        // Uniform features make S^I == S^A rows uniform over tokens.
        let c = 2;
        let tokens = vec![vec![0.0; c]; 4];
        let feats =
            DomainFeatures::new(feature_of(&tokens), feature_of(&tokens), None).unwrap();
        let ssm = SsmProjections::init("s", c, 4, &mut rng);
        let text = tensor_of(&rand_matrix(2, 4, &mut rng));
        let fusion = ScoreFusion::init("f", &mut rng);
        let control = rasterize_control(
            &BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap(),
            2,
        )
        .unwrap();
        let (hat_i, _, _, _, _) = run_fuse(&feats, &ssm, &fusion, &text, Some(&control));
        let row_mass: Vec<f64> = hat_i.chunks(2).map(|r| r.iter().sum()).collect();
        assert!(row_mass[0] > row_mass[1]);
        assert!(row_mass[3] > row_mass[2]);
    }

    #[test]
    fn fuse_matches_hand_rolled_oracle_with_random_kernel() {
        let mut rng = Rng::new(44);
        let (feats, ssm, text) = ssm_setup(&mut rng, 2, 2, 2);
        let mut fusion = ScoreFusion::init("f", &mut rng);
        for v in fusion.w2.tensor.data.iter_mut() {
            *v = rng.next_normal() * 0.3;
        }
        for v in fusion.b2.tensor.data.iter_mut() {
            *v = rng.next_normal() * 0.1;
        }
        let (hat_i, hat_a, si, sa, f_img) = run_fuse(&feats, &ssm, &fusion, &text, None);

        let w = &fusion.w2.tensor.data;
        let bias = &fusion.b2.tensor.data;
        let g = ZERO_CONV_GAIN;
        for i in 0..si.len() {
            let mu = (si[i] + sa[i]) / 2.0;
            let want_i = g * (w[0] * si[i] + w[1] * sa[i] + bias[0]) + mu;
            let want_a = g * (w[2] * si[i] + w[3] * sa[i] + bias[1]) + mu;
            assert!((hat_i[i] - want_i).abs() < 1e-12);
            assert!((hat_a[i] - want_a).abs() < 1e-12);
        }

        // Output residual contribution stays in the row span of the text
        // values: f_image - f_image_in == s_hat_i @ V.
        let mut tape = Tape::new();
        let text_id = tape.constant(&text);
        let (_, v) = ssm.project_text(&mut tape, text_id).unwrap();
        let vv = tape.value(v).to_vec();
        let c = 2;
        for p in 0..2 {
            for ch in 0..c {
                let contrib: f64 = (0..2).map(|t| hat_i[p * 2 + t] * vv[t * c + ch]).sum();
                let got = f_img[ch * 2 + p] - feats.f_image.data[ch * 2 + p];
                assert!((got - contrib).abs() < 1e-12);
            }
        }
    }

    fn probe_features(rng: &mut Rng, hw: usize, c: usize) -> DomainFeatures {
        DomainFeatures::new(
            feature_of(&rand_matrix(hw, c, rng)),
            feature_of(&rand_matrix(hw, c, rng)),
            Some(feature_of(&rand_matrix(hw, c, rng))),
        )
        .unwrap()
    }

    #[test]
    fn decoupled_branches_have_exactly_zero_cross_jacobians() {
        let mut rng = Rng::new(45);
        let proj_i = AttentionProjections::init("i", 3, 3, &mut rng);
        let proj_a = AttentionProjections::init("a", 3, 3, &mut rng);
        let mut zeta = ZeroConv::init("z", 3, &mut rng);
        for v in zeta.weight.tensor.data.iter_mut() {
            *v = rng.next_normal() * 0.2;
        }
        let probe = probe_features(&mut rng, 4, 3);
        let block = |tape: &mut Tape, ids: &FeatureIds| {
            let img = image_cross_attention(tape, ids, &proj_i, &zeta)?;
            let ann = annotation_self_attention(tape, ids, &proj_a)?;
            Ok((img, ann))
        };
        let v = cross_jacobian_norm(block, ProbeDomain::Annotation, OutputDomain::Image, &probe, 1)
            .unwrap();
        assert_eq!(v, 0.0);
        let v = cross_jacobian_norm(block, ProbeDomain::Image, OutputDomain::Annotation, &probe, 2)
            .unwrap();
        assert_eq!(v, 0.0);
        let v = cross_jacobian_norm(
            block,
            ProbeDomain::Reference,
            OutputDomain::Annotation,
            &probe,
            3,
        )
        .unwrap();
        assert_eq!(v, 0.0);
        // The same-domain path is alive.
        let v = cross_jacobian_norm(block, ProbeDomain::Image, OutputDomain::Image, &probe, 4)
            .unwrap();
        assert!(v > 1e-3);
    }

    #[test]
    fn concat_attention_leaks_across_domains() {
        let mut rng = Rng::new(46);
        let proj = AttentionProjections::init("c", 3, 3, &mut rng);
        let probe = probe_features(&mut rng, 4, 3);
        let block = |tape: &mut Tape, ids: &FeatureIds| {
            let out = concat_attention(tape, ids, &proj)?;
            Ok((out.f_image, out.f_annot))
        };
        let v = cross_jacobian_norm(block, ProbeDomain::Annotation, OutputDomain::Image, &probe, 5)
            .unwrap();
        assert!(v > 1e-3, "image<-annotation leakage {v}");
        let v = cross_jacobian_norm(block, ProbeDomain::Image, OutputDomain::Annotation, &probe, 6)
            .unwrap();
        assert!(v > 1e-3, "annotation<-image leakage {v}");
    }
}
