//! The two-stream denoising U-Net.
//!
//! Image and annotation features live in separate channel groups end to end:
//! the CNN stages use 2-group convolutions, normalization groups never span
//! the domain boundary, and the decoupled attention blocks touch one domain
//! each. The score-map block is the only cross-domain connection, so with it
//! disabled the annotation output provably cannot see the image input.
//!
//! Each encoder cycle is [grouped CNN -> DDA? -> SSM? -> downsample]; the
//! decoder mirrors it with upsampling and per-domain skip concatenation. A
//! sibling condition encoder turns the noised reference image into one
//! feature per resolution that hosts a DDA block.

use std::collections::BTreeSet;

use crate::attention::{
    annotation_self_attention, image_cross_attention, rasterize_control, semantic_score_maps,
    ssm_fuse, AttentionProjections, FeatureIds, ScoreFusion, SsmProjections, TextEmbedding,
    ZeroConv,
};
use crate::data::BinaryMask;
use crate::diffusion::{corrupt, NoisePredictor, PredictContext};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, TensorId};
use crate::tensor::{InitKind, Parameter, Tensor};

/// Gain on every zero-initialized layer (output heads, timestep
/// modulation, residual-branch closers); see `ZERO_CONV_GAIN` in the
/// attention module for the conditioning layers.
const ZERO_INIT_GAIN: f64 = 8.0;
const HEAD_GAIN: f64 = ZERO_INIT_GAIN;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub image_size: usize,
    /// Channels per domain at the first level.
    pub base_channels: usize,
    /// Number of down-sampling cycles.
    pub depth: usize,
    /// Per-level channel multiplier, length `depth`.
    pub channel_mult: Vec<usize>,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub d_text: usize,
    /// Normalization groups within one domain's channels.
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            base_channels: 16,
            depth: 4,
            channel_mult: vec![1, 1, 2, 2],
            n_heads: 1,
            vocab_size: 64,
            d_text: 64,
            norm_groups: 4,
        }
    }
}

impl BackboneConfig {
    /// Small configuration for gradient checks: 8x8, two levels.
    pub fn micro() -> Self {
        BackboneConfig {
            image_size: 8,
            base_channels: 4,
            depth: 2,
            channel_mult: vec![1, 2],
            n_heads: 1,
            vocab_size: 16,
            d_text: 8,
            norm_groups: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.image_size % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "image size {} must be divisible by 2^{}",
                self.image_size, self.depth
            )));
        }
        if self.channel_mult.len() != self.depth {
            return Err(Error::Config(format!(
                "channel_mult needs {} entries, got {}",
                self.depth,
                self.channel_mult.len()
            )));
        }
        if self.n_heads != 1 {
            return Err(Error::Config(
                "only single-head attention is supported".into(),
            ));
        }
        if self.vocab_size < 2 || self.d_text == 0 || self.base_channels == 0 {
            return Err(Error::Config("degenerate text/channel configuration".into()));
        }
        for (level, &m) in self.channel_mult.iter().enumerate() {
            let c = self.base_channels * m;
            if m == 0 || c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "level {level} channels {c} must be a positive multiple of {} norm groups",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    /// Channels per domain at `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    fn time_dim(&self) -> usize {
        4 * self.base_channels
    }
}

/// Which encoder/decoder cycles carry the attention modules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlacement {
    pub dda_encoder: BTreeSet<usize>,
    pub dda_decoder: BTreeSet<usize>,
    pub ssm_encoder: BTreeSet<usize>,
    pub ssm_decoder: BTreeSet<usize>,
}

fn every_block(depth: usize) -> BTreeSet<usize> {
    (0..depth).collect()
}

fn every_other_block(depth: usize) -> BTreeSet<usize> {
    (0..depth).step_by(2).collect()
}

impl BlockPlacement {
    /// All encoder blocks, every other decoder block.
    pub fn default_for(depth: usize) -> Self {
        BlockPlacement {
            dda_encoder: every_block(depth),
            dda_decoder: every_other_block(depth),
            ssm_encoder: every_block(depth),
            ssm_decoder: every_other_block(depth),
        }
    }

    pub fn empty() -> Self {
        BlockPlacement {
            dda_encoder: BTreeSet::new(),
            dda_decoder: BTreeSet::new(),
            ssm_encoder: BTreeSet::new(),
            ssm_decoder: BTreeSet::new(),
        }
    }

    /// Named placement presets; the `tab7-*` rows are the architecture
    /// ablation grid (module count per stage: 4 = every block, 2 = every
    /// other block, none = absent).
    pub fn preset(name: &str, depth: usize) -> Result<Self> {
        let p = match name {
            "default" => Self::default_for(depth),
            "tab7-1" => BlockPlacement {
                dda_encoder: every_block(depth),
                dda_decoder: BTreeSet::new(),
                ssm_encoder: every_block(depth),
                ssm_decoder: BTreeSet::new(),
            },
            "tab7-2" => BlockPlacement {
                dda_encoder: every_other_block(depth),
                dda_decoder: BTreeSet::new(),
                ssm_encoder: every_other_block(depth),
                ssm_decoder: BTreeSet::new(),
            },
            "tab7-3" => BlockPlacement {
                dda_encoder: every_other_block(depth),
                dda_decoder: every_other_block(depth),
                ssm_encoder: every_other_block(depth),
                ssm_decoder: every_other_block(depth),
            },
            "tab7-4" => BlockPlacement {
                dda_encoder: every_block(depth),
                dda_decoder: every_block(depth),
                ssm_encoder: every_other_block(depth),
                ssm_decoder: every_other_block(depth),
            },
            "none" => Self::empty(),
            other => {
                return Err(Error::Config(format!(
                    "unknown placement preset '{other}'"
                )))
            }
        };
        Ok(p)
    }

    pub fn preset_names() -> [&'static str; 6] {
        ["default", "tab7-1", "tab7-2", "tab7-3", "tab7-4", "none"]
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        for set in [
            &self.dda_encoder,
            &self.dda_decoder,
            &self.ssm_encoder,
            &self.ssm_decoder,
        ] {
            if let Some(&bad) = set.iter().find(|&&i| i >= depth) {
                return Err(Error::Config(format!(
                    "placement index {bad} out of range for depth {depth}"
                )));
            }
        }
        Ok(())
    }

    /// Resolution levels at which a reference feature is needed.
    fn dda_levels(&self, depth: usize) -> BTreeSet<usize> {
        let mut levels: BTreeSet<usize> = self.dda_encoder.clone();
        levels.extend(self.dda_decoder.iter().map(|&j| depth - 1 - j));
        levels
    }
}

// ── Prompt vocabulary ───────────────────────────────────────────────────

/// Learned token table. Row 0 is reserved for out-of-vocabulary words;
/// tokenization is lowercase whitespace splitting.
#[derive(Debug, Clone)]
pub struct PromptVocabulary {
    rows: std::collections::BTreeMap<String, usize>,
    pub table: Parameter,
    pub d_text: usize,
}

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(|w| w.to_lowercase()).collect()
}

impl PromptVocabulary {
    pub fn build(prompts: &[String], vocab_size: usize, d_text: usize, rng: &mut Rng) -> Self {
        let mut words: BTreeSet<String> = BTreeSet::new();
        for p in prompts {
            words.extend(tokenize(p));
        }
        let mut rows = std::collections::BTreeMap::new();
        for (i, w) in words.into_iter().enumerate() {
            if i + 1 >= vocab_size {
                break;
            }
            rows.insert(w, i + 1);
        }
        let table = Parameter::init(
            "text.table",
            vec![vocab_size, d_text],
            InitKind::NormalScaled,
            d_text,
            d_text,
            rng,
        );
        PromptVocabulary { rows, table, d_text }
    }

    /// Rebuild the word -> row mapping from a persisted token list (row
    /// order, starting at row 1). Table values are restored separately.
    pub fn from_token_list(tokens: &[String], vocab_size: usize, d_text: usize) -> Result<Self> {
        if tokens.len() + 1 > vocab_size {
            return Err(Error::Config(format!(
                "{} tokens exceed vocabulary size {vocab_size}",
                tokens.len()
            )));
        }
        let mut rows = std::collections::BTreeMap::new();
        for (i, w) in tokens.iter().enumerate() {
            rows.insert(w.clone(), i + 1);
        }
        let mut rng = Rng::new(0);
        let table = Parameter::init(
            "text.table",
            vec![vocab_size, d_text],
            InitKind::NormalScaled,
            d_text,
            d_text,
            &mut rng,
        );
        Ok(PromptVocabulary { rows, table, d_text })
    }

    /// Tokens in row order (row 1 upward), for persistence.
    pub fn token_list(&self) -> Vec<String> {
        let mut by_row: Vec<(usize, String)> =
            self.rows.iter().map(|(w, &r)| (r, w.clone())).collect();
        by_row.sort();
        by_row.into_iter().map(|(_, w)| w).collect()
    }

    pub fn row_of(&self, token: &str) -> usize {
        self.rows.get(token).copied().unwrap_or(0)
    }

    pub fn vocab_size(&self) -> usize {
        self.table.tensor.shape[0]
    }
}

/// Look a prompt up in the vocabulary: one table row per token, unknown
/// tokens land on the reserved row 0.
pub fn embed_prompt(prompt: &str, vocab: &PromptVocabulary) -> Result<TextEmbedding> {
    let words = tokenize(prompt);
    if words.is_empty() {
        return Err(Error::Validation("prompt is empty after trimming".into()));
    }
    let ids: Vec<usize> = words.iter().map(|w| vocab.row_of(w)).collect();
    let mut data = Vec::with_capacity(ids.len() * vocab.d_text);
    for &id in &ids {
        let base = id * vocab.d_text;
        data.extend_from_slice(&vocab.table.tensor.data[base..base + vocab.d_text]);
    }
    Ok(TextEmbedding {
        tokens: Tensor::from_vec(vec![ids.len(), vocab.d_text], data),
        prompt: prompt.to_string(),
        ids,
    })
}

fn one_hot(ids: &[usize], vocab_size: usize) -> Tensor {
    let mut data = vec![0.0; ids.len() * vocab_size];
    for (i, &id) in ids.iter().enumerate() {
        data[i * vocab_size + id] = 1.0;
    }
    Tensor::from_vec(vec![ids.len(), vocab_size], data)
}

// ── Building blocks ─────────────────────────────────────────────────────

fn conv_pair(
    prefix: &str,
    cout: usize,
    cin_per_group: usize,
    k: usize,
    rng: &mut Rng,
) -> (Parameter, Parameter) {
    let fan_in = cin_per_group * k * k;
    let fan_out = cout * k * k;
    (
        Parameter::init(
            format!("{prefix}.w"),
            vec![cout, cin_per_group, k, k],
            InitKind::UniformScaled,
            fan_in,
            fan_out,
            rng,
        ),
        Parameter::init(
            format!("{prefix}.b"),
            vec![cout],
            InitKind::Zero,
            1,
            1,
            rng,
        ),
    )
}

fn linear_pair(
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut Rng,
) -> (Parameter, Parameter) {
    (
        Parameter::init(
            format!("{prefix}.w"),
            vec![d_in, d_out],
            InitKind::UniformScaled,
            d_in,
            d_out,
            rng,
        ),
        Parameter::init(format!("{prefix}.b"), vec![d_out], InitKind::Zero, 1, 1, rng),
    )
}

/// Grouped residual CNN stage with timestep modulation.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1_w: Parameter,
    conv1_b: Parameter,
    conv2_w: Parameter,
    conv2_b: Parameter,
    skip_w: Option<Parameter>,
    temb_w: Parameter,
    temb_b: Parameter,
    c_out: usize,
    groups: usize,
}

impl ResBlock {
    /// `c_in`/`c_out` are per-domain channel counts; the block operates on
    /// the joint tensor with twice as many channels.
    fn init(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        t_dim: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Self {
        let (conv1_w, conv1_b) = conv_pair(
            &format!("{prefix}.conv1"),
            2 * c_out,
            2 * c_in / groups,
            3,
            rng,
        );
        // Zero-init final conv: each stage starts as its skip path.
        let conv2_w = Parameter::init(
            format!("{prefix}.conv2.w"),
            vec![2 * c_out, 2 * c_out / groups, 3, 3],
            InitKind::Zero,
            1,
            1,
            rng,
        );
        let conv2_b = Parameter::init(
            format!("{prefix}.conv2.b"),
            vec![2 * c_out],
            InitKind::Zero,
            1,
            1,
            rng,
        );
        let skip_w = (c_in != c_out).then(|| {
            Parameter::init(
                format!("{prefix}.skip.w"),
                vec![2 * c_out, 2 * c_in / groups, 1, 1],
                InitKind::UniformScaled,
                2 * c_in / groups,
                2 * c_out,
                rng,
            )
        });
        // Zero-init modulation: every block starts as a plain residual
        // stage (scale 1, shift 0) and learns its timestep response.
        let temb_w = Parameter::init(
            format!("{prefix}.temb.w"),
            vec![t_dim, 4 * c_out],
            InitKind::Zero,
            t_dim,
            4 * c_out,
            rng,
        );
        let temb_b = Parameter::init(
            format!("{prefix}.temb.b"),
            vec![4 * c_out],
            InitKind::Zero,
            1,
            1,
            rng,
        );
        ResBlock {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            skip_w,
            temb_w,
            temb_b,
            c_out,
            groups,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: TensorId,
        temb: TensorId,
        norm_groups: usize,
    ) -> Result<TensorId> {
        let b = tape.shape(x)[0];
        // Joint-tensor group count: per-domain groups on each half.
        let joint_groups = 2 * norm_groups;

        let h = tape.group_norm(x, joint_groups)?;
        let h = tape.silu(h);
        let w1 = tape.param(&self.conv1_w);
        let b1 = tape.param(&self.conv1_b);
        let h = tape.conv2d(h, w1, Some(b1), 1, 1, self.groups)?;

        // Per-channel (1 + scale, shift) modulation from the time embedding;
        // gained like every other zero-initialized layer.
        let tw = tape.param(&self.temb_w);
        let tb = tape.param(&self.temb_b);
        let aff = tape.matmul_scaled(temb, tw, ZERO_INIT_GAIN)?;
        let tb_scaled = tape.scale(tb, ZERO_INIT_GAIN);
        let aff = tape.add_row_bias(aff, tb_scaled)?;
        let parts = tape.split(aff, 1, &[2 * self.c_out, 2 * self.c_out])?;
        let ones = tape.constant(&Tensor::filled(vec![b, 2 * self.c_out], 1.0));
        let scale = tape.add(parts[0], ones)?;
        let h = tape.group_norm(h, joint_groups)?;
        let h = tape.affine_channels(h, scale, parts[1])?;
        let h = tape.silu(h);

        let w2 = tape.param(&self.conv2_w);
        let b2 = tape.param(&self.conv2_b);
        let h = tape.conv2d(h, w2, Some(b2), 1, 1, self.groups)?;
        let h = tape.scale(h, ZERO_INIT_GAIN);

        let skip = match &self.skip_w {
            Some(sw) => {
                let swi = tape.param(sw);
                tape.conv2d(x, swi, None, 1, 0, self.groups)?
            }
            None => x,
        };
        tape.add(h, skip)
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        out.extend([
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.temb_w,
            &self.temb_b,
        ]);
        if let Some(s) = &self.skip_w {
            out.push(s);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.extend([
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.temb_w,
            &mut self.temb_b,
        ]);
        if let Some(s) = &mut self.skip_w {
            out.push(s);
        }
    }
}

/// Single-domain residual stage of the condition encoder.
#[derive(Debug, Clone)]
struct CondBlock {
    conv1_w: Parameter,
    conv1_b: Parameter,
    conv2_w: Parameter,
    conv2_b: Parameter,
    skip_w: Option<Parameter>,
}

impl CondBlock {
    fn init(prefix: &str, c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let (conv1_w, conv1_b) = conv_pair(&format!("{prefix}.conv1"), c_out, c_in, 3, rng);
        let (conv2_w, conv2_b) = conv_pair(&format!("{prefix}.conv2"), c_out, c_out, 3, rng);
        let skip_w = (c_in != c_out).then(|| {
            Parameter::init(
                format!("{prefix}.skip.w"),
                vec![c_out, c_in, 1, 1],
                InitKind::UniformScaled,
                c_in,
                c_out,
                rng,
            )
        });
        CondBlock {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            skip_w,
        }
    }

    fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        // No normalization here: the reference content's amplitude is the
        // signal the conditioned attention needs to copy.
        let h = tape.silu(x);
        let w1 = tape.param(&self.conv1_w);
        let b1 = tape.param(&self.conv1_b);
        let h = tape.conv2d(h, w1, Some(b1), 1, 1, 1)?;
        let h = tape.silu(h);
        let w2 = tape.param(&self.conv2_w);
        let b2 = tape.param(&self.conv2_b);
        let h = tape.conv2d(h, w2, Some(b2), 1, 1, 1)?;
        let skip = match &self.skip_w {
            Some(sw) => {
                let swi = tape.param(sw);
                tape.conv2d(x, swi, None, 1, 0, 1)?
            }
            None => x,
        };
        tape.add(h, skip)
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        out.extend([&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b]);
        if let Some(s) = &self.skip_w {
            out.push(s);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.extend([
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
        ]);
        if let Some(s) = &mut self.skip_w {
            out.push(s);
        }
    }
}

#[derive(Debug, Clone)]
struct DdaBlock {
    img: AttentionProjections,
    ann: AttentionProjections,
    zeta: ZeroConv,
}

impl DdaBlock {
    fn init(prefix: &str, channels: usize, rng: &mut Rng) -> Self {
        DdaBlock {
            img: AttentionProjections::init(&format!("{prefix}.img"), channels, channels, rng),
            ann: AttentionProjections::init(&format!("{prefix}.ann"), channels, channels, rng),
            zeta: ZeroConv::init(&format!("{prefix}.zeta"), channels, rng),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        for p in [&self.img, &self.ann] {
            out.extend([&p.w_q, &p.w_k, &p.w_v]);
        }
        out.extend([&self.zeta.weight, &self.zeta.bias]);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        for p in [&mut self.img, &mut self.ann] {
            out.extend([&mut p.w_q, &mut p.w_k, &mut p.w_v]);
        }
        out.extend([&mut self.zeta.weight, &mut self.zeta.bias]);
    }
}

#[derive(Debug, Clone)]
struct SsmBlock {
    proj: SsmProjections,
    fusion: ScoreFusion,
}

impl SsmBlock {
    fn init(prefix: &str, channels: usize, d_text: usize, rng: &mut Rng) -> Self {
        SsmBlock {
            proj: SsmProjections::init(prefix, channels, d_text, rng),
            fusion: ScoreFusion::init(prefix, rng),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        out.extend([
            &self.proj.img_q,
            &self.proj.ann_q,
            &self.proj.text_k,
            &self.proj.text_v,
            &self.fusion.w2,
            &self.fusion.b2,
            &self.fusion.w3,
            &self.fusion.b3,
        ]);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.extend([
            &mut self.proj.img_q,
            &mut self.proj.ann_q,
            &mut self.proj.text_k,
            &mut self.proj.text_v,
            &mut self.fusion.w2,
            &mut self.fusion.b2,
            &mut self.fusion.w3,
            &mut self.fusion.b3,
        ]);
    }
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    dda: Option<DdaBlock>,
    ssm: Option<SsmBlock>,
}

// ── The model ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: BackboneConfig,
    pub placement: BlockPlacement,
    pub vocab: PromptVocabulary,
    /// Construction-time switch that replaces the 2-group convolutions with
    /// ordinary ones; exists solely as a negative control for the
    /// decoupling checks.
    pub debug_entangle: bool,

    stem_img_w: Parameter,
    stem_img_b: Parameter,
    stem_ann_w: Parameter,
    stem_ann_b: Parameter,
    temb_lin1_w: Parameter,
    temb_lin1_b: Parameter,
    temb_lin2_w: Parameter,
    temb_lin2_b: Parameter,
    encoder: Vec<Stage>,
    decoder: Vec<Stage>,
    cond_stem_w: Parameter,
    cond_stem_b: Parameter,
    cond_blocks: Vec<CondBlock>,
    head_img_w: Parameter,
    head_img_b: Parameter,
    head_ann_w: Parameter,
    head_ann_b: Parameter,
}

impl Model {
    pub fn new(
        cfg: BackboneConfig,
        placement: BlockPlacement,
        prompts: &[String],
        seed: u64,
        debug_entangle: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        placement.validate(cfg.depth)?;
        let mut rng = Rng::new(seed);
        let groups = if debug_entangle { 1 } else { 2 };
        let c0 = cfg.channels(0);
        let t_dim = cfg.time_dim();

        let (stem_img_w, stem_img_b) = conv_pair("stem.img", c0, 3, 3, &mut rng);
        let (stem_ann_w, stem_ann_b) = conv_pair("stem.ann", c0, 1, 3, &mut rng);
        let (temb_lin1_w, temb_lin1_b) = linear_pair("temb.lin1", t_dim, t_dim, &mut rng);
        let (temb_lin2_w, temb_lin2_b) = linear_pair("temb.lin2", t_dim, t_dim, &mut rng);

        let (cond_stem_w, cond_stem_b) = conv_pair("cond.stem", c0, 3, 3, &mut rng);
        let mut cond_blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let c_in = if i == 0 { c0 } else { cfg.channels(i - 1) };
            cond_blocks.push(CondBlock::init(
                &format!("cond.{i}"),
                c_in,
                cfg.channels(i),
                &mut rng,
            ));
        }

        let mut encoder = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let c_in = if i == 0 { c0 } else { cfg.channels(i - 1) };
            let c_out = cfg.channels(i);
            let res = ResBlock::init(&format!("enc.{i}.cnn"), c_in, c_out, t_dim, groups, &mut rng);
            let dda = placement
                .dda_encoder
                .contains(&i)
                .then(|| DdaBlock::init(&format!("enc.{i}.dda"), c_out, &mut rng));
            let ssm = placement
                .ssm_encoder
                .contains(&i)
                .then(|| SsmBlock::init(&format!("enc.{i}.ssm"), c_out, cfg.d_text, &mut rng));
            encoder.push(Stage { res, dda, ssm });
        }

        let mut decoder = Vec::with_capacity(cfg.depth);
        for j in 0..cfg.depth {
            let level = cfg.depth - 1 - j;
            let c_carried = if j == 0 {
                cfg.channels(cfg.depth - 1)
            } else {
                cfg.channels(level + 1)
            };
            let c_in = c_carried + cfg.channels(level);
            let c_out = cfg.channels(level);
            let res = ResBlock::init(&format!("dec.{j}.cnn"), c_in, c_out, t_dim, groups, &mut rng);
            let dda = placement
                .dda_decoder
                .contains(&j)
                .then(|| DdaBlock::init(&format!("dec.{j}.dda"), c_out, &mut rng));
            let ssm = placement
                .ssm_decoder
                .contains(&j)
                .then(|| SsmBlock::init(&format!("dec.{j}.ssm"), c_out, cfg.d_text, &mut rng));
            decoder.push(Stage { res, dda, ssm });
        }

        let zero_conv = |name: &str, cout: usize, cin: usize, rng: &mut Rng| {
            (
                Parameter::init(
                    format!("{name}.w"),
                    vec![cout, cin, 3, 3],
                    InitKind::Zero,
                    1,
                    1,
                    rng,
                ),
                Parameter::init(format!("{name}.b"), vec![cout], InitKind::Zero, 1, 1, rng),
            )
        };
        let (head_img_w, head_img_b) = zero_conv("head.img", 3, c0, &mut rng);
        let (head_ann_w, head_ann_b) = zero_conv("head.ann", 1, c0, &mut rng);

        let vocab = PromptVocabulary::build(prompts, cfg.vocab_size, cfg.d_text, &mut rng);

        let model = Model {
            cfg,
            placement,
            vocab,
            debug_entangle,
            stem_img_w,
            stem_img_b,
            stem_ann_w,
            stem_ann_b,
            temb_lin1_w,
            temb_lin1_b,
            temb_lin2_w,
            temb_lin2_b,
            encoder,
            decoder,
            cond_stem_w,
            cond_stem_b,
            cond_blocks,
            head_img_w,
            head_img_b,
            head_ann_w,
            head_ann_b,
        };
        debug_assert!(model.names_are_unique());
        Ok(model)
    }

    fn names_are_unique(&self) -> bool {
        let params = self.parameters();
        let names: BTreeSet<&str> = params.iter().map(|p| p.name.as_str()).collect();
        names.len() == params.len()
    }

    /// All parameters in construction order.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        out.extend([
            &self.stem_img_w,
            &self.stem_img_b,
            &self.stem_ann_w,
            &self.stem_ann_b,
            &self.temb_lin1_w,
            &self.temb_lin1_b,
            &self.temb_lin2_w,
            &self.temb_lin2_b,
            &self.cond_stem_w,
            &self.cond_stem_b,
        ]);
        for c in &self.cond_blocks {
            c.visit(&mut out);
        }
        for s in self.encoder.iter().chain(&self.decoder) {
            s.res.visit(&mut out);
            if let Some(d) = &s.dda {
                d.visit(&mut out);
            }
            if let Some(m) = &s.ssm {
                m.visit(&mut out);
            }
        }
        out.extend([
            &self.head_img_w,
            &self.head_img_b,
            &self.head_ann_w,
            &self.head_ann_b,
            &self.vocab.table,
        ]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        out.extend([
            &mut self.stem_img_w,
            &mut self.stem_img_b,
            &mut self.stem_ann_w,
            &mut self.stem_ann_b,
            &mut self.temb_lin1_w,
            &mut self.temb_lin1_b,
            &mut self.temb_lin2_w,
            &mut self.temb_lin2_b,
            &mut self.cond_stem_w,
            &mut self.cond_stem_b,
        ]);
        for c in &mut self.cond_blocks {
            c.visit_mut(&mut out);
        }
        for s in self.encoder.iter_mut().chain(&mut self.decoder) {
            s.res.visit_mut(&mut out);
            if let Some(d) = &mut s.dda {
                d.visit_mut(&mut out);
            }
            if let Some(m) = &mut s.ssm {
                m.visit_mut(&mut out);
            }
        }
        out.extend([
            &mut self.head_img_w,
            &mut self.head_img_b,
            &mut self.head_ann_w,
            &mut self.head_ann_b,
            &mut self.vocab.table,
        ]);
        out
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    // ── Forward pieces ──────────────────────────────────────────────────

    fn sinusoidal(&self, t: &[usize]) -> Tensor {
        let dim = self.cfg.time_dim();
        let half = dim / 2;
        let mut data = vec![0.0; t.len() * dim];
        for (i, &ti) in t.iter().enumerate() {
            for k in 0..half {
                let freq = (10000.0f64).powf(-(k as f64) / half as f64);
                let arg = ti as f64 * freq;
                data[i * dim + k] = arg.sin();
                data[i * dim + half + k] = arg.cos();
            }
        }
        Tensor::from_vec(vec![t.len(), dim], data)
    }

    fn time_embedding(&self, tape: &mut Tape, t: &[usize]) -> Result<TensorId> {
        let sin = self.sinusoidal(t);
        let sin_id = tape.constant(&sin);
        let w1 = tape.param(&self.temb_lin1_w);
        let b1 = tape.param(&self.temb_lin1_b);
        let h = tape.matmul(sin_id, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.silu(h);
        let w2 = tape.param(&self.temb_lin2_w);
        let b2 = tape.param(&self.temb_lin2_b);
        let h = tape.matmul(h, w2)?;
        tape.add_row_bias(h, b2)
    }

    /// Encode a (pre-noised) reference latent into one flattened feature
    /// per resolution level that hosts a DDA block.
    pub fn encode_condition_from(
        &self,
        tape: &mut Tape,
        r_noised: TensorId,
    ) -> Result<Vec<Option<TensorId>>> {
        let levels = self.placement.dda_levels(self.cfg.depth);
        let w = tape.param(&self.cond_stem_w);
        let b = tape.param(&self.cond_stem_b);
        let mut x = tape.conv2d(r_noised, w, Some(b), 1, 1, 1)?;
        let mut out = vec![None; self.cfg.depth];
        for (i, block) in self.cond_blocks.iter().enumerate() {
            x = block.forward(tape, x)?;
            if levels.contains(&i) {
                let s = tape.shape(x).to_vec();
                out[i] = Some(tape.reshape(x, vec![s[0], s[1], s[2] * s[3]])?);
            }
            if i + 1 < self.cfg.depth {
                x = tape.avg_pool_2x(x)?;
            }
        }
        Ok(out)
    }

    /// Noise the reference with the given realization and timesteps, then
    /// encode it. The same noise that corrupts the image latent is used
    /// during training so both streams see an aligned noise level.
    pub fn encode_condition(
        &self,
        tape: &mut Tape,
        reference: &Tensor,
        eps: &Tensor,
        t: &[usize],
        s: &NoiseSchedule,
    ) -> Result<Vec<Option<TensorId>>> {
        let noised = corrupt(reference, eps, t, s)?;
        let id = tape.constant(&noised);
        self.encode_condition_from(tape, id)
    }

    fn split_domains(&self, tape: &mut Tape, x: TensorId) -> Result<(TensorId, TensorId)> {
        let c = tape.shape(x)[1] / 2;
        let parts = tape.split(x, 1, &[c, c])?;
        Ok((parts[0], parts[1]))
    }

    fn dda_forward(
        &self,
        tape: &mut Tape,
        dda: &DdaBlock,
        x: TensorId,
        f_ref: TensorId,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        let (b, c2, h, w) = (s[0], s[1], s[2], s[3]);
        let c = c2 / 2;
        let (xi, xa) = self.split_domains(tape, x)?;
        let fi = tape.reshape(xi, vec![b, c, h * w])?;
        let fa = tape.reshape(xa, vec![b, c, h * w])?;
        let ids = FeatureIds {
            image: fi,
            annot: fa,
            reference: Some(f_ref),
        };
        let img_out = image_cross_attention(tape, &ids, &dda.img, &dda.zeta)?;
        let ann_out = annotation_self_attention(tape, &ids, &dda.ann)?;
        let img_sp = tape.reshape(img_out, vec![b, c, h, w])?;
        let ann_sp = tape.reshape(ann_out, vec![b, c, h, w])?;
        tape.concat(&[img_sp, ann_sp], 1)
    }

    fn control_map_for(
        &self,
        control: &Tensor,
        item: usize,
        h: usize,
        w: usize,
        n_tokens: usize,
    ) -> Result<Tensor> {
        let (full_h, full_w) = (control.shape[2], control.shape[3]);
        let plane = &control.data[item * full_h * full_w..(item + 1) * full_h * full_w];
        let mut mask = BinaryMask::zeros(w, h);
        for r in 0..h {
            for c in 0..w {
                let v = plane[(r * full_h / h) * full_w + (c * full_w / w)];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Validation(
                        "control mask values must be 0 or 1".into(),
                    ));
                }
                mask.set(r, c, (v == 1.0) as u8);
            }
        }
        Ok(rasterize_control(&mask, n_tokens)?.values)
    }

    fn ssm_forward(
        &self,
        tape: &mut Tape,
        ssm: &SsmBlock,
        x: TensorId,
        text: &[TextEmbedding],
        control: Option<&Tensor>,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        let (b, c2, h, w) = (s[0], s[1], s[2], s[3]);
        let c = c2 / 2;
        let mut outs = Vec::with_capacity(b);
        for item in 0..b {
            let xi = tape.narrow(x, 0, item, 1)?;
            let (di, da) = self.split_domains(tape, xi)?;
            let fi = tape.reshape(di, vec![1, c, h * w])?;
            let fa = tape.reshape(da, vec![1, c, h * w])?;
            let ids = FeatureIds {
                image: fi,
                annot: fa,
                reference: None,
            };
            // Vocabulary lookup on the tape so the table keeps training.
            let hot = tape.constant(&one_hot(&text[item].ids, self.vocab.vocab_size()));
            let table = tape.param(&self.vocab.table);
            let rows = tape.matmul(hot, table)?;
            let (keys, values) = ssm.proj.project_text(tape, rows)?;
            let (si, sa) = semantic_score_maps(tape, &ids, keys, &ssm.proj)?;
            let n_tokens = text[item].ids.len();
            let so = match control {
                Some(ctrl) => {
                    let map = self.control_map_for(ctrl, item, h, w, n_tokens)?;
                    let id = tape.constant(&map);
                    Some(tape.reshape(id, vec![1, h * w, n_tokens])?)
                }
                None => None,
            };
            let fused = ssm_fuse(tape, &ids, si, sa, so, values, &ssm.fusion)?;
            let img_sp = tape.reshape(fused.f_image, vec![1, c, h, w])?;
            let ann_sp = tape.reshape(fused.f_annot, vec![1, c, h, w])?;
            outs.push(tape.concat(&[img_sp, ann_sp], 1)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat(&outs, 0)
        }
    }

    /// Full forward pass over pre-bound latent ids. The probes use this to
    /// track gradients w.r.t. the inputs themselves.
    pub fn predict_from(
        &self,
        tape: &mut Tape,
        z_image: TensorId,
        z_annot: TensorId,
        r_noised: TensorId,
        t: &[usize],
        text: &[TextEmbedding],
        control: Option<&Tensor>,
    ) -> Result<(TensorId, TensorId)> {
        let b = tape.shape(z_image)[0];
        if t.len() != b || text.len() != b {
            return Err(Error::Usage(format!(
                "need {b} timesteps and prompts, got {} and {}",
                t.len(),
                text.len()
            )));
        }
        let temb = self.time_embedding(tape, t)?;
        let refs = self.encode_condition_from(tape, r_noised)?;

        // Stems keep the domains in separate channel groups from the start.
        let wi = tape.param(&self.stem_img_w);
        let bi = tape.param(&self.stem_img_b);
        let xi = tape.conv2d(z_image, wi, Some(bi), 1, 1, 1)?;
        let wa = tape.param(&self.stem_ann_w);
        let ba = tape.param(&self.stem_ann_b);
        let xa = tape.conv2d(z_annot, wa, Some(ba), 1, 1, 1)?;
        let mut x = tape.concat(&[xi, xa], 1)?;

        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (i, stage) in self.encoder.iter().enumerate() {
            x = stage.res.forward(tape, x, temb, self.cfg.norm_groups)?;
            if let Some(dda) = &stage.dda {
                let f_ref = refs[i].ok_or_else(|| {
                    Error::Config(format!("no reference feature at encoder level {i}"))
                })?;
                x = self.dda_forward(tape, dda, x, f_ref)?;
            }
            if let Some(ssm) = &stage.ssm {
                x = self.ssm_forward(tape, ssm, x, text, control)?;
            }
            skips.push(x);
            x = tape.avg_pool_2x(x)?;
        }

        for (j, stage) in self.decoder.iter().enumerate() {
            let level = self.cfg.depth - 1 - j;
            x = tape.upsample_nearest_2x(x)?;
            let skip = skips[level];
            // Per-domain skip concatenation keeps the groups aligned.
            let (xi, xa) = self.split_domains(tape, x)?;
            let (si, sa) = self.split_domains(tape, skip)?;
            x = tape.concat(&[xi, si, xa, sa], 1)?;
            x = stage.res.forward(tape, x, temb, self.cfg.norm_groups)?;
            if let Some(dda) = &stage.dda {
                let f_ref = refs[level].ok_or_else(|| {
                    Error::Config(format!("no reference feature at decoder level {level}"))
                })?;
                x = self.dda_forward(tape, dda, x, f_ref)?;
            }
            if let Some(ssm) = &stage.ssm {
                x = self.ssm_forward(tape, ssm, x, text, control)?;
            }
        }

        let (xi, xa) = self.split_domains(tape, x)?;
        let head = |tape: &mut Tape, x: TensorId, w: &Parameter, b: &Parameter| -> Result<TensorId> {
            let h = tape.silu(x);
            let wid = tape.param(w);
            let bid = tape.param(b);
            let out = tape.conv2d(h, wid, Some(bid), 1, 1, 1)?;
            Ok(tape.scale(out, HEAD_GAIN))
        };
        let eps_img = head(tape, xi, &self.head_img_w, &self.head_img_b)?;
        let eps_ann = head(tape, xa, &self.head_ann_w, &self.head_ann_b)?;
        Ok((eps_img, eps_ann))
    }
}

impl NoisePredictor for Model {
    fn predict(
        &self,
        tape: &mut Tape,
        z_image: &Tensor,
        z_annot: &Tensor,
        ctx: &PredictContext,
    ) -> Result<(TensorId, TensorId)> {
        if z_image.shape[2] != self.cfg.image_size || z_image.shape[3] != self.cfg.image_size {
            return Err(Error::Dimension(format!(
                "latent spatial size {:?} does not match configured {}",
                &z_image.shape[2..],
                self.cfg.image_size
            )));
        }
        if ctx.reference.shape != z_image.shape {
            return Err(Error::Dimension(format!(
                "reference shape {:?} does not match latent {:?}",
                ctx.reference.shape, z_image.shape
            )));
        }
        let zi = tape.constant(z_image);
        let za = tape.constant(z_annot);
        let noised = corrupt(ctx.reference, ctx.ref_eps, ctx.t, ctx.schedule)?;
        let r_id = tape.constant(&noised);
        self.predict_from(tape, zi, za, r_id, ctx.t, ctx.text, ctx.control)
    }
}

/// Deterministic parameter count of a configuration without keeping the
/// model around.
pub fn count_parameters(cfg: &BackboneConfig, placement: &BlockPlacement) -> Result<usize> {
    let model = Model::new(cfg.clone(), placement.clone(), &[], 0, false)?;
    Ok(model.parameter_count())
}
