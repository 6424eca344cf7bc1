//! The end-to-end spotter: backbone, encoder, proposal sampling, decoder and
//! the four prediction heads.

mod backbone;
mod decoder;
mod infer;
mod loss;
mod matcher;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{build_multilevel_tokens, encoder_stack, f6_conv, Encoder, MixerKind, LEVELS};
use crate::error::{Error, Result};
use crate::fscrs::{
    positional_queries, sample_curve, sample_features, select_topk, sinusoidal_encoding,
    ControlPointSet, Point, ProposalSet, SamplingMode, COORD_CLAMP, DEFAULT_TENSION,
};
use crate::raster::GrayImage;
use crate::tensor::{
    init_rng, logit, Activation, AffineLayer, Conv2d, Mlp, Param, Parameterized, Scalar, Tape,
    Tensor, Var,
};

pub use backbone::{Backbone, BACKBONE_STRIDE};
pub use decoder::{decoder_forward, Decoder, DecoderLayer};
pub use infer::{
    collapse, draw_overlay, evaluate, nms, predict, transcribe, Detection, InferenceOptions,
};
pub use loss::{
    char_targets, compute_loss, prepare_targets, InstanceTarget, LossOutput, LossTerms, LossWeights,
};
pub use matcher::{assignment_cost, hungarian};
pub use train::{
    batch_indices, checkpoint_model_config, AdamW, AdamWConfig, StepRecord, TrainConfig, Trainer,
};

/// Which of the two mechanisms are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Efficient-mixer encoder with spline feature sampling.
    #[default]
    Full,
    /// Softmax-attention encoder with spline feature sampling.
    FscrsOnly,
    /// Softmax-attention encoder with learned queries and reference points.
    Baseline,
}

impl Variant {
    pub fn mixer(self) -> MixerKind {
        match self {
            Variant::Full => MixerKind::Efficient,
            Variant::FscrsOnly | Variant::Baseline => MixerKind::Softmax,
        }
    }

    pub fn uses_fscrs(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Variant::Full),
            "fscrs_only" | "fscrs-only" => Ok(Variant::FscrsOnly),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant `{other}` (expected full, fscrs-only or baseline)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpotterConfig {
    /// `[width, height]`, each a multiple of 32.
    pub image_size: [usize; 2],
    pub channels: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// Hidden width of every two-layer MLP, as a multiple of `channels`.
    pub mlp_ratio: usize,
    pub num_proposals: usize,
    pub num_points: usize,
    pub num_classes: usize,
    pub tension: f64,
    pub sampling: SamplingMode,
    pub variant: Variant,
}

impl Default for SpotterConfig {
    fn default() -> Self {
        Self {
            image_size: [128, 128],
            channels: 32,
            encoder_depth: 1,
            decoder_depth: 2,
            mlp_ratio: 2,
            num_proposals: 100,
            num_points: 25,
            num_classes: crate::synth::ALPHABET_SIZE,
            tension: DEFAULT_TENSION,
            sampling: SamplingMode::Parameter,
            variant: Variant::Full,
        }
    }
}

impl SpotterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let [w, h] = self.image_size;
        if w == 0 || h == 0 || w % BACKBONE_STRIDE != 0 || h % BACKBONE_STRIDE != 0 {
            return bad(format!(
                "image size {w}x{h} must be positive multiples of {BACKBONE_STRIDE}"
            ));
        }
        if self.channels < 4 || !self.channels.is_multiple_of(4) {
            return bad(format!(
                "channels must be a positive multiple of 4, got {}",
                self.channels
            ));
        }
        if self.encoder_depth == 0 || self.mlp_ratio == 0 {
            return bad("encoder depth and mlp ratio must be at least 1".into());
        }
        if self.num_proposals == 0 || self.num_points < 2 || self.num_classes < 2 {
            return bad(format!(
                "need K >= 1, n >= 2, classes >= 2; got K={}, n={}, classes={}",
                self.num_proposals, self.num_points, self.num_classes
            ));
        }
        if self.variant.uses_fscrs() && self.num_proposals > self.token_count() {
            return bad(format!(
                "K = {} exceeds the {} tokens of a {w}x{h} image",
                self.num_proposals,
                self.token_count()
            ));
        }
        if !(self.tension.is_finite()) {
            return bad("tension must be finite".into());
        }
        Ok(())
    }

    /// `[height, width]` of F3..F6.
    pub fn level_extents(&self) -> [[usize; 2]; 4] {
        let [w, h] = self.image_size;
        let f5 = [h / 32, w / 32];
        [
            [h / 8, w / 8],
            [h / 16, w / 16],
            f5,
            [f5[0].div_ceil(2), f5[1].div_ceil(2)],
        ]
    }

    pub fn token_count(&self) -> usize {
        self.level_extents().iter().map(|e| e[0] * e[1]).sum()
    }

    pub fn blank(&self) -> usize {
        self.num_classes
    }

    fn hidden(&self) -> usize {
        self.channels * self.mlp_ratio
    }
}

/// Per-token control-point offsets and scores.
#[derive(Clone, Debug)]
pub struct ProposalHead<T> {
    pub score: AffineLayer<T>,
    pub offsets: Mlp<T>,
    /// Projects features sampled along each curve into query content.
    pub content: AffineLayer<T>,
}

/// Content and reference points learned directly, for the baseline.
#[derive(Clone, Debug)]
pub struct LearnedQueries<T> {
    /// `[K·n, C]`.
    pub content: Param<T>,
    /// Logit-space reference points `[K, n, 2]`.
    pub reference: Param<T>,
}

#[derive(Clone, Debug)]
pub struct Heads<T> {
    pub instance: AffineLayer<T>,
    pub chars: AffineLayer<T>,
    pub points: Mlp<T>,
    pub bbox: Mlp<T>,
}

impl<T: Scalar> Heads<T> {
    pub fn new(channels: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let mut instance = AffineLayer::new("heads.instance", channels, 1, rng);
        instance.bias.value = Tensor::full(&[1], T::from_f64_lossy(PRIOR_BIAS));
        Self {
            instance,
            chars: AffineLayer::new("heads.chars", channels, classes + 1, rng),
            points: Mlp::new(
                "heads.points",
                &[channels, hidden, 2],
                Activation::Gelu,
                rng,
            ),
            bbox: Mlp::new("heads.bbox", &[channels, hidden, 4], Activation::Gelu, rng),
        }
    }
}

/// Score bias giving an initial foreground probability of 1%.
const PRIOR_BIAS: f64 = -4.595_119_850_134_59;

/// Head outputs, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Instance logits `[K]`.
    pub instance_logits: Var,
    /// `[K, n, classes + 1]`, blank last.
    pub char_logits: Var,
    /// `[K, n, 2]` in `[0, 1]`.
    pub center_points: Var,
    /// `[K, 4]` as `(cx, cy, w, h)` in `[0, 1]`.
    pub bbox: Var,
}

/// The four heads over decoded point features `[K, n, C]`.
///
/// `point_base` (`[K, n, 2]`) and `box_base` (`[K, 4]`) are logit-space
/// anchors that the point and box offsets are added to before the sigmoid.
pub fn prediction_heads<T: Scalar>(
    tape: &Tape<T>,
    decoded: Var,
    point_base: Var,
    box_base: Var,
    heads: &Heads<T>,
) -> HeadOutput {
    let k = tape.shape(decoded)[0];
    let pooled = tape.mean_middle(decoded);
    let instance_logits = tape.reshape(heads.instance.forward(tape, pooled), &[k]);
    let char_logits = heads.chars.forward(tape, decoded);
    let dp = heads.points.forward(tape, decoded);
    let center_points = tape.sigmoid(tape.add(dp, point_base));
    let db = heads.bbox.forward(tape, pooled);
    let bbox = tape.sigmoid(tape.add(db, box_base));
    HeadOutput {
        instance_logits,
        char_logits,
        center_points,
        bbox,
    }
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub heads: HeadOutput,
    pub proposals: ProposalSet,
    /// `P_q`, `[K, n, C]`.
    pub positional_queries: Var,
    /// Per-token proposal logits `[N]` and control points `[N, 8]`.
    pub token_scores: Option<Var>,
    pub token_control_points: Option<Var>,
    pub token_count: usize,
}

#[derive(Clone, Debug)]
pub struct Spotter<T> {
    pub config: SpotterConfig,
    pub backbone: Backbone<T>,
    pub f6: Conv2d<T>,
    pub encoder: Encoder<T>,
    /// Added to memory keys per pyramid level, `[4, C]`.
    pub level_embed: Param<T>,
    pub proposal: Option<ProposalHead<T>>,
    pub learned: Option<LearnedQueries<T>>,
    pub query_pos: Mlp<T>,
    pub decoder: Decoder<T>,
    pub heads: Heads<T>,
}

impl<T: Scalar> Spotter<T> {
    pub fn new(config: SpotterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let c = config.channels;
        let hidden = config.hidden();
        let backbone = Backbone::new(c, &mut rng);
        let f6 = f6_conv("encoder.f6", c, &mut rng);
        let encoder = Encoder::new(
            "encoder",
            c,
            config.encoder_depth,
            hidden,
            config.variant.mixer(),
            &mut rng,
        )?;
        let level_embed = Param::uniform("encoder.level_embed", &[LEVELS.len(), c], 0.1, &mut rng);
        let (proposal, learned) = if config.variant.uses_fscrs() {
            let mut score = AffineLayer::new("proposal.score", c, 1, &mut rng);
            score.bias.value = Tensor::full(&[1], T::from_f64_lossy(PRIOR_BIAS));
            let offsets = Mlp::new(
                "proposal.offsets",
                &[c, hidden, 8],
                Activation::Gelu,
                &mut rng,
            );
            let content = AffineLayer::new("proposal.content", c, c, &mut rng);
            (
                Some(ProposalHead {
                    score,
                    offsets,
                    content,
                }),
                None,
            )
        } else {
            let (k, n) = (config.num_proposals, config.num_points);
            let content = Param::uniform("queries.content", &[k * n, c], 0.1, &mut rng);
            let mut refs = Vec::with_capacity(k * n * 2);
            for _ in 0..k {
                let (cx, cy) = (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85));
                for j in 0..n {
                    let u = j as f64 / (n - 1) as f64 - 0.5;
                    refs.push(logit(cx + 0.2 * u));
                    refs.push(logit(cy));
                }
            }
            let reference = Param::new("queries.reference", Tensor::from_f64(&[k, n, 2], &refs));
            (None, Some(LearnedQueries { content, reference }))
        };
        let query_pos = Mlp::new("queries.pos", &[c, c, c], Activation::Gelu, &mut rng);
        let decoder = Decoder::new(c, config.decoder_depth, hidden, &mut rng);
        let heads = Heads::new(c, hidden, config.num_classes, &mut rng);
        Ok(Self {
            config,
            backbone,
            f6,
            encoder,
            level_embed,
            proposal,
            learned,
            query_pos,
            decoder,
            heads,
        })
    }

    /// Full forward pass for one `[H, W, 1]` image tensor.
    pub fn forward(&self, tape: &Tape<T>, image: &Tensor<T>) -> Result<ForwardOutput> {
        self.forward_inner(tape, image, None)
    }

    /// Forward pass reusing the proposal selection and sampled curves of an
    /// earlier pass. Those are detached in training, so this is the function
    /// whose gradient [`Spotter::forward`] back-propagates.
    pub fn forward_with_proposals(
        &self,
        tape: &Tape<T>,
        image: &Tensor<T>,
        fixed: &ProposalSet,
    ) -> Result<ForwardOutput> {
        let (k, n) = (self.config.num_proposals, self.config.num_points);
        if fixed.k() != k || fixed.n != n {
            return Err(Error::Shape(format!(
                "fixed proposals are {}x{}, model expects {k}x{n}",
                fixed.k(),
                fixed.n
            )));
        }
        self.forward_inner(tape, image, Some(fixed))
    }

    fn forward_inner(
        &self,
        tape: &Tape<T>,
        image: &Tensor<T>,
        fixed: Option<&ProposalSet>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let [w, h] = cfg.image_size;
        if image.shape() != [h, w, 1] {
            return Err(Error::Shape(format!(
                "model expects a {w}x{h} image, got shape {:?}",
                image.shape()
            )));
        }
        let (k, n, c) = (cfg.num_proposals, cfg.num_points, cfg.channels);
        let img = tape.constant(image.clone());
        let maps = self.backbone.forward(tape, img)?;
        let tokens = build_multilevel_tokens(tape, maps, &self.f6)?;
        let memory = encoder_stack(tape, &tokens, &self.encoder)?;
        let n_tok = memory.token_count();

        let (centers, levels) = token_layout(&memory.spans);
        let pe = tape.constant(sinusoidal_encoding::<T>(&centers, c)?);
        let level_embed = tape.param(&self.level_embed);
        let memory_pos = tape.add(pe, tape.select_rows(level_embed, &levels));

        let (content, point_base, proposals, token_scores, token_crp);
        if let Some(head) = &self.proposal {
            let scores = tape.reshape(head.score.forward(tape, memory.tokens), &[n_tok]);
            let offsets = head.offsets.forward(tape, memory.tokens);
            let base: Vec<f64> = centers
                .iter()
                .flat_map(|p| {
                    let l = [
                        logit(p[0].clamp(COORD_CLAMP, 1.0 - COORD_CLAMP)),
                        logit(p[1].clamp(COORD_CLAMP, 1.0 - COORD_CLAMP)),
                    ];
                    [l[0], l[1], l[0], l[1], l[0], l[1], l[0], l[1]]
                })
                .collect();
            let base = tape.constant(Tensor::from_f64(&[n_tok, 8], &base));
            let crp = tape.sigmoid(tape.add(offsets, base));
            if !tape.value(crp).is_finite() || !tape.value(scores).is_finite() {
                return Err(Error::non_finite("proposals"));
            }
            let score_vals = tape.value(scores);
            let (top, control_points, sampled) = match fixed {
                Some(f) => (
                    f.token_indices.clone(),
                    f.control_points.clone(),
                    f.sampled_points.clone(),
                ),
                None => {
                    let top = select_topk(score_vals.data(), k)?;
                    let crp_vals = tape.value(crp);
                    let mut control_points = Vec::with_capacity(k);
                    let mut sampled = Vec::with_capacity(k);
                    for &t in &top {
                        let r = crp_vals.row(t);
                        let cp = ControlPointSet(std::array::from_fn(|j| {
                            [r[2 * j].to_f64_lossy(), r[2 * j + 1].to_f64_lossy()]
                        }));
                        // The spline can overshoot its control points near
                        // the border; samples are kept inside the image.
                        let mut pts = sample_curve(&cp, n, cfg.tension, cfg.sampling)?;
                        pts.iter_mut()
                            .flatten()
                            .for_each(|v| *v = v.clamp(0.0, 1.0));
                        sampled.push(pts);
                        control_points.push(cp);
                    }
                    (top, control_points, sampled)
                }
            };
            let f3 = memory.spans[0];
            let flat: Vec<Point> = sampled.iter().flatten().copied().collect();
            let feats = sample_features(tape, memory.tokens, &flat, f3.height, f3.width, f3.start);
            content = tape.reshape(head.content.forward(tape, feats), &[k, n, c]);
            point_base = tape.constant(points_logit::<T>(&sampled));
            proposals = ProposalSet {
                scores: top
                    .iter()
                    .map(|&t| score_vals.data()[t].to_f64_lossy())
                    .collect(),
                token_indices: top,
                control_points,
                sampled_points: sampled,
                n,
            };
            token_scores = Some(scores);
            token_crp = Some(crp);
        } else {
            let learned = self.learned.as_ref().expect("baseline queries");
            content = tape.reshape(tape.param(&learned.content), &[k, n, c]);
            point_base = tape.param(&learned.reference);
            let refs = tape.value(point_base);
            let sampled: Vec<Vec<Point>> = match fixed {
                Some(f) => f.sampled_points.clone(),
                None => (0..k)
                    .map(|i| {
                        (0..n)
                            .map(|j| {
                                let at =
                                    |a| crate::tensor::sigmoid(refs.at(&[i, j, a]).to_f64_lossy());
                                [at(0), at(1)]
                            })
                            .collect()
                    })
                    .collect(),
            };
            proposals = ProposalSet {
                token_indices: (0..k).collect(),
                control_points: sampled.iter().map(|s| curve_anchor(s)).collect(),
                scores: vec![0.0; k],
                sampled_points: sampled,
                n,
            };
            token_scores = None;
            token_crp = None;
        }
        let pos = positional_queries(tape, &proposals.sampled_points, &self.query_pos)?;
        let queries = tape.add(content, pos);
        let decoded =
            decoder_forward(tape, queries, pos, memory.tokens, memory_pos, &self.decoder)?;
        let box_base = tape.constant(box_logit::<T>(&proposals.sampled_points));
        let heads = prediction_heads(tape, decoded, point_base, box_base, &self.heads);
        for (v, stage) in [
            (heads.instance_logits, "heads.instance"),
            (heads.char_logits, "heads.chars"),
            (heads.center_points, "heads.points"),
            (heads.bbox, "heads.bbox"),
        ] {
            if !tape.value(v).is_finite() {
                return Err(Error::non_finite(stage));
            }
        }
        Ok(ForwardOutput {
            heads,
            proposals,
            positional_queries: pos,
            token_scores,
            token_control_points: token_crp,
            token_count: n_tok,
        })
    }
}

impl<T: Scalar> Parameterized<T> for Spotter<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.backbone.visit(f);
        self.f6.visit(f);
        self.encoder.visit(f);
        f(&self.level_embed);
        if let Some(p) = &self.proposal {
            p.score.visit(f);
            p.offsets.visit(f);
            p.content.visit(f);
        }
        if let Some(l) = &self.learned {
            f(&l.content);
            f(&l.reference);
        }
        self.query_pos.visit(f);
        self.decoder.visit(f);
        self.heads.instance.visit(f);
        self.heads.chars.visit(f);
        self.heads.points.visit(f);
        self.heads.bbox.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.visit_mut(f);
        self.f6.visit_mut(f);
        self.encoder.visit_mut(f);
        f(&mut self.level_embed);
        if let Some(p) = &mut self.proposal {
            p.score.visit_mut(f);
            p.offsets.visit_mut(f);
            p.content.visit_mut(f);
        }
        if let Some(l) = &mut self.learned {
            f(&mut l.content);
            f(&mut l.reference);
        }
        self.query_pos.visit_mut(f);
        self.decoder.visit_mut(f);
        self.heads.instance.visit_mut(f);
        self.heads.chars.visit_mut(f);
        self.heads.points.visit_mut(f);
        self.heads.bbox.visit_mut(f);
    }
}

/// Gray image as a `[H, W, 1]` tensor scaled to `[-1, 1]`.
pub fn image_tensor<T: Scalar>(image: &GrayImage) -> Tensor<T> {
    let data: Vec<f64> = image
        .pixels
        .iter()
        .map(|&p| p as f64 / 127.5 - 1.0)
        .collect();
    Tensor::from_f64(&[image.height, image.width, 1], &data)
}

/// Normalized cell centers and level index of every token.
fn token_layout(spans: &[crate::encoder::LevelSpan]) -> (Vec<Point>, Vec<usize>) {
    let mut centers = Vec::new();
    let mut levels = Vec::new();
    for (li, s) in spans.iter().enumerate() {
        for y in 0..s.height {
            for x in 0..s.width {
                centers.push([
                    (x as f64 + 0.5) / s.width as f64,
                    (y as f64 + 0.5) / s.height as f64,
                ]);
                levels.push(li);
            }
        }
    }
    (centers, levels)
}

fn clamped_logit(v: f64) -> f64 {
    logit(v.clamp(COORD_CLAMP, 1.0 - COORD_CLAMP))
}

fn points_logit<T: Scalar>(sampled: &[Vec<Point>]) -> Tensor<T> {
    let k = sampled.len();
    let n = sampled.first().map_or(0, |s| s.len());
    let data: Vec<f64> = sampled
        .iter()
        .flatten()
        .flat_map(|p| [clamped_logit(p[0]), clamped_logit(p[1])])
        .collect();
    Tensor::from_f64(&[k, n, 2], &data)
}

/// Margin added to the sampled-point extent to form the anchor box.
const BOX_MARGIN: f64 = 0.05;

/// Anchor box of each sampled curve: its extent plus a margin.
pub fn anchor_box(points: &[Point]) -> [f64; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for p in points {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    [
        (x0 + x1) / 2.0,
        (y0 + y1) / 2.0,
        x1 - x0 + BOX_MARGIN,
        y1 - y0 + BOX_MARGIN,
    ]
}

fn box_logit<T: Scalar>(sampled: &[Vec<Point>]) -> Tensor<T> {
    let data: Vec<f64> = sampled
        .iter()
        .flat_map(|s| anchor_box(s).map(clamped_logit))
        .collect();
    Tensor::from_f64(&[sampled.len(), 4], &data)
}

/// Four points spread along a sampled polyline, standing in for control
/// points when proposals are learned directly.
fn curve_anchor(points: &[Point]) -> ControlPointSet {
    let last = points.len() - 1;
    ControlPointSet(std::array::from_fn(|j| points[(j * last + 1) / 3]))
}

#[cfg(test)]
mod tests;
