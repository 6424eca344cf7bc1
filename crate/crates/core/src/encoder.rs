//! Multi-level tokens and the efficient-mixer transformer encoder.
//!
//! The mixer replaces token-to-token attention with a learned per-token
//! weight: `W_attn = K·W_m` scales the rows of `V`, so no `N×N` matrix is
//! ever formed and the cost is linear in the token count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    Activation, AffineLayer, Conv2d, LayerNorm, Mlp, Param, Parameterized, Scalar, Tape, Var,
};

/// Pyramid levels in token order.
pub const LEVELS: [u8; 4] = [3, 4, 5, 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpan {
    pub level: u8,
    pub start: usize,
    pub len: usize,
    pub height: usize,
    pub width: usize,
}

/// Flattened multi-level feature sequence `[N, C]` living on a tape.
#[derive(Clone, Debug)]
pub struct TokenFeatures {
    pub tokens: Var,
    pub spans: Vec<LevelSpan>,
    pub channels: usize,
}

impl TokenFeatures {
    pub fn token_count(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    /// Span holding token `index`.
    pub fn level_of(&self, index: usize) -> Option<&LevelSpan> {
        self.spans
            .iter()
            .find(|s| (s.start..s.start + s.len).contains(&index))
    }

    pub fn span(&self, level: u8) -> Option<&LevelSpan> {
        self.spans.iter().find(|s| s.level == level)
    }

    /// Checks the span bookkeeping against the token tensor.
    pub fn validate<T: Scalar>(&self, tape: &Tape<T>) -> Result<()> {
        let shape = tape.shape(self.tokens);
        let mut next = 0;
        for s in &self.spans {
            if s.start != next || s.len != s.height * s.width {
                return Err(Error::Shape(format!("level span {s:?} is not contiguous")));
            }
            next += s.len;
        }
        if shape != [next, self.channels] {
            return Err(Error::Shape(format!(
                "tokens {shape:?} disagree with spans covering {next} x {}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Flattens `F3`, `F4`, `F5` (each `[H, W, C]`) and `F6 = conv(F5)` row-major
/// and concatenates them in level order.
pub fn build_multilevel_tokens<T: Scalar>(
    tape: &Tape<T>,
    maps: [Var; 3],
    f6_conv: &Conv2d<T>,
) -> Result<TokenFeatures> {
    let channels = *tape.shape(maps[0]).last().unwrap_or(&0);
    for (m, level) in maps.iter().zip(LEVELS) {
        let s = tape.shape(*m);
        if s.len() != 3 || s[2] != channels {
            return Err(Error::Shape(format!(
                "F{level} has shape {s:?}; expected [H, W, {channels}]"
            )));
        }
        if s[0] == 0 || s[1] == 0 {
            return Err(Error::Shape(format!(
                "F{level} has an empty spatial extent"
            )));
        }
    }
    if f6_conv.in_channels() != channels || f6_conv.out_channels() != channels {
        return Err(Error::Shape(format!(
            "F6 conv maps {} -> {} channels; features have {channels}",
            f6_conv.in_channels(),
            f6_conv.out_channels()
        )));
    }
    let f6 = f6_conv.forward(tape, maps[2])?;
    let mut spans = Vec::with_capacity(4);
    let mut parts = Vec::with_capacity(4);
    let mut start = 0;
    for (m, level) in maps.into_iter().chain([f6]).zip(LEVELS) {
        let s = tape.shape(m);
        let len = s[0] * s[1];
        spans.push(LevelSpan {
            level,
            start,
            len,
            height: s[0],
            width: s[1],
        });
        parts.push(tape.reshape(m, &[len, channels]));
        start += len;
    }
    let tokens = tape.concat_rows(&parts);
    Ok(TokenFeatures {
        tokens,
        spans,
        channels,
    })
}

/// The stride-2 3×3 convolution producing `F6` from `F5`.
pub fn f6_conv<T: Scalar>(name: &str, channels: usize, rng: &mut impl Rng) -> Conv2d<T> {
    Conv2d::new(name, channels, channels, 3, 2, 1, rng)
}

#[derive(Clone, Debug)]
pub struct EMMixerParams<T> {
    /// Shared query/key projection `[C, C]`.
    pub w_k: Param<T>,
    pub w_v: Param<T>,
    /// Multi-level attention weights `[C]`.
    pub w_m: Param<T>,
    pub phi_inner: AffineLayer<T>,
    pub phi_outer: AffineLayer<T>,
}

impl<T: Scalar> EMMixerParams<T> {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        Self {
            w_k: Param::glorot(format!("{name}.w_k"), c, c, rng),
            w_v: Param::glorot(format!("{name}.w_v"), c, c, rng),
            w_m: Param::uniform(format!("{name}.w_m"), &[c], 1.0 / (c as f64).sqrt(), rng),
            phi_inner: AffineLayer::new(&format!("{name}.phi_inner"), c, c, rng),
            phi_outer: AffineLayer::new(&format!("{name}.phi_outer"), c, c, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_m.value.len()
    }

    fn check(&self) -> Result<()> {
        let c = self.channels();
        let square = |p: &Param<T>| p.value.shape() == [c, c];
        let ok = square(&self.w_k)
            && square(&self.w_v)
            && [&self.phi_inner, &self.phi_outer]
                .iter()
                .all(|l| l.in_dim() == c && l.out_dim() == c);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "mixer parameters do not all have width {c}"
            )))
        }
    }
}

impl<T: Scalar> Parameterized<T> for EMMixerParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.w_k);
        f(&self.w_v);
        f(&self.w_m);
        self.phi_inner.visit(f);
        self.phi_outer.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w_k);
        f(&mut self.w_v);
        f(&mut self.w_m);
        self.phi_inner.visit_mut(f);
        self.phi_outer.visit_mut(f);
    }
}

/// Intermediates exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct MixerTrace {
    /// Global attention query vector `[N]`.
    pub w_attn: Var,
    /// Multi-scale attention matrix `[N, C]`.
    pub g: Var,
}

fn finite<T: Scalar>(tape: &Tape<T>, v: Var, stage: &str) -> Result<Var> {
    if tape.value(v).is_finite() {
        Ok(v)
    } else {
        Err(Error::non_finite(stage))
    }
}

/// `φ_outer(φ_inner(V ⊙ W_attn / √D) + Q)` with `Q = K = X·W_k`, `V = X·W_v`,
/// `W_attn = K·W_m` and `D = C`.
pub fn efficient_mixer<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    params: &EMMixerParams<T>,
) -> Result<(Var, MixerTrace)> {
    params.check()?;
    let c = params.channels();
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != c || shape[0] == 0 {
        return Err(Error::Shape(format!(
            "mixer expects [N >= 1, {c}], got {shape:?}"
        )));
    }
    let n = shape[0];
    finite(tape, x, "mixer.input")?;
    let w_k = tape.param(&params.w_k);
    let w_v = tape.param(&params.w_v);
    let w_m = tape.param(&params.w_m);
    let q = finite(tape, tape.matmul(x, w_k), "mixer.query")?;
    let v = finite(tape, tape.matmul(x, w_v), "mixer.value")?;
    let w_m_col = tape.reshape(w_m, &[c, 1]);
    let w_attn = tape.reshape(tape.matmul(q, w_m_col), &[n]);
    let w_attn = finite(tape, w_attn, "mixer.w_attn")?;
    let scaled = tape.scale(w_attn, T::one() / T::from_usize(c).unwrap().sqrt());
    let context = finite(tape, tape.mul_rows(v, scaled), "mixer.context")?;
    let g = finite(
        tape,
        params.phi_inner.forward(tape, context),
        "mixer.phi_inner",
    )?;
    let mixed = tape.add(g, q);
    let out = finite(
        tape,
        params.phi_outer.forward(tape, mixed),
        "mixer.phi_outer",
    )?;
    Ok((out, MixerTrace { w_attn, g }))
}

/// Single-head softmax self-attention, used by the baseline encoder.
#[derive(Clone, Debug)]
pub struct SoftmaxAttention<T> {
    pub query: AffineLayer<T>,
    pub key: AffineLayer<T>,
    pub value: AffineLayer<T>,
    pub output: AffineLayer<T>,
}

impl<T: Scalar> SoftmaxAttention<T> {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        Self {
            query: AffineLayer::new(&format!("{name}.query"), c, c, rng),
            key: AffineLayer::new(&format!("{name}.key"), c, c, rng),
            value: AffineLayer::new(&format!("{name}.value"), c, c, rng),
            output: AffineLayer::new(&format!("{name}.output"), c, c, rng),
        }
    }

    /// `queries [M, C]` attend over `keys`/`values` `[N, C]`.
    pub fn attend(&self, tape: &Tape<T>, queries: Var, keys: Var, values: Var) -> Var {
        let c = self.query.out_dim();
        let q = self.query.forward(tape, queries);
        let k = self.key.forward(tape, keys);
        let v = self.value.forward(tape, values);
        let logits = tape.scale(
            tape.matmul_t(q, k, false, true),
            T::one() / T::from_usize(c).unwrap().sqrt(),
        );
        let weights = tape.softmax(logits);
        let ctx = tape.matmul(weights, v);
        self.output.forward(tape, ctx)
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Var {
        self.attend(tape, x, x, x)
    }
}

impl<T: Scalar> Parameterized<T> for SoftmaxAttention<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for l in [&self.query, &self.key, &self.value, &self.output] {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
        ] {
            l.visit_mut(f);
        }
    }
}

/// Token mixer used inside an encoder block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    #[default]
    Efficient,
    Softmax,
}

#[derive(Clone, Debug)]
pub enum TokenMixer<T> {
    Efficient(EMMixerParams<T>),
    Softmax(SoftmaxAttention<T>),
}

/// Pre-norm block: `X = Mix(LN(F)) + F`, `out = MLP(LN(X)) + X`.
#[derive(Clone, Debug)]
pub struct EmtBlock<T> {
    pub norm1: LayerNorm<T>,
    pub mixer: TokenMixer<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> EmtBlock<T> {
    pub fn new(
        name: &str,
        channels: usize,
        mlp_hidden: usize,
        kind: MixerKind,
        rng: &mut impl Rng,
    ) -> Self {
        let mixer = match kind {
            MixerKind::Efficient => {
                TokenMixer::Efficient(EMMixerParams::new(&format!("{name}.em"), channels, rng))
            }
            MixerKind::Softmax => TokenMixer::Softmax(SoftmaxAttention::new(
                &format!("{name}.attn"),
                channels,
                rng,
            )),
        };
        Self {
            norm1: LayerNorm::new(&format!("{name}.norm1"), channels),
            mixer,
            norm2: LayerNorm::new(&format!("{name}.norm2"), channels),
            mlp: Mlp::new(
                &format!("{name}.mlp"),
                &[channels, mlp_hidden, channels],
                Activation::Gelu,
                rng,
            ),
        }
    }
}

impl<T: Scalar> Parameterized<T> for EmtBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.norm1.visit(f);
        match &self.mixer {
            TokenMixer::Efficient(m) => m.visit(f),
            TokenMixer::Softmax(m) => m.visit(f),
        }
        self.norm2.visit(f);
        self.mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.norm1.visit_mut(f);
        match &mut self.mixer {
            TokenMixer::Efficient(m) => m.visit_mut(f),
            TokenMixer::Softmax(m) => m.visit_mut(f),
        }
        self.norm2.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}

pub fn emt_block<T: Scalar>(
    tape: &Tape<T>,
    features: &TokenFeatures,
    block: &EmtBlock<T>,
) -> Result<TokenFeatures> {
    let f = features.tokens;
    let normed = block.norm1.try_forward(tape, f)?;
    let mixed = match &block.mixer {
        TokenMixer::Efficient(p) => efficient_mixer(tape, normed, p)?.0,
        TokenMixer::Softmax(a) => a.forward(tape, normed),
    };
    let x = tape.add(mixed, f);
    let normed = block.norm2.try_forward(tape, x)?;
    let out = tape.add(block.mlp.try_forward(tape, normed)?, x);
    let out = finite(tape, out, "encoder.block")?;
    Ok(TokenFeatures {
        tokens: out,
        spans: features.spans.clone(),
        channels: features.channels,
    })
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub blocks: Vec<EmtBlock<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(
        name: &str,
        channels: usize,
        depth: usize,
        mlp_hidden: usize,
        kind: MixerKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument(
                "encoder depth must be at least 1".into(),
            ));
        }
        let blocks = (0..depth)
            .map(|i| EmtBlock::new(&format!("{name}.{i}"), channels, mlp_hidden, kind, rng))
            .collect();
        Ok(Self { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

impl<T: Scalar> Parameterized<T> for Encoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.blocks.iter().for_each(|b| b.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
    }
}

/// Applies every block of `encoder` in order.
pub fn encoder_stack<T: Scalar>(
    tape: &Tape<T>,
    features: &TokenFeatures,
    encoder: &Encoder<T>,
) -> Result<TokenFeatures> {
    if encoder.blocks.is_empty() {
        return Err(Error::InvalidArgument(
            "encoder depth must be at least 1".into(),
        ));
    }
    let mut cur = features.clone();
    for block in &encoder.blocks {
        cur = emt_block(tape, &cur, block)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, init_rng, Tensor};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = init_rng(seed);
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64(shape, &data)
    }

    fn single_level(tape: &Tape<f64>, x: Tensor<f64>) -> TokenFeatures {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        TokenFeatures {
            tokens: tape.constant(x),
            spans: vec![LevelSpan {
                level: 3,
                start: 0,
                len: n,
                height: 1,
                width: n,
            }],
            channels: c,
        }
    }

    fn token_count(levels: [(usize, usize); 3], c: usize) -> TokenFeatures {
        let tape = Tape::<f64>::new();
        let mut rng = init_rng(1);
        let maps = levels.map(|(h, w)| tape.constant(random(&[h, w, c], 2)));
        build_multilevel_tokens(&tape, maps, &f6_conv("f6", c, &mut rng)).unwrap()
    }

    #[test]
    fn token_counts_per_pyramid() {
        let f = token_count([(8, 8), (4, 4), (2, 2)], 8);
        assert_eq!(f.token_count(), 85);
        assert_eq!(f.spans[3].len, 1);
        let f = token_count([(16, 16), (8, 8), (4, 4)], 4);
        assert_eq!(f.token_count(), 340);
        let starts: Vec<usize> = f.spans.iter().map(|s| s.start).collect();
        assert_eq!(starts, [0, 256, 320, 336]);
        for i in 0..340 {
            assert_eq!(
                f.spans
                    .iter()
                    .filter(|s| (s.start..s.start + s.len).contains(&i))
                    .count(),
                1
            );
        }
    }

    #[test]
    fn tokens_are_row_major_concatenation() {
        let tape = Tape::<f64>::new();
        let mut rng = init_rng(3);
        let raw = [
            random(&[3, 2, 2], 1),
            random(&[2, 2, 2], 2),
            random(&[1, 2, 2], 3),
        ];
        let maps = raw.clone().map(|t| tape.constant(t));
        let f = build_multilevel_tokens(&tape, maps, &f6_conv("f6", 2, &mut rng)).unwrap();
        f.validate(&tape).unwrap();
        let tokens = tape.value(f.tokens);
        for (span, map) in f.spans.iter().zip(&raw) {
            for y in 0..span.height {
                for x in 0..span.width {
                    for c in 0..2 {
                        assert_eq!(
                            tokens.at(&[span.start + y * span.width + x, c]),
                            map.at(&[y, x, c])
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn zero_f5_gives_zero_f6() {
        let tape = Tape::<f64>::new();
        let mut rng = init_rng(3);
        let maps = [
            tape.constant(random(&[4, 4, 3], 1)),
            tape.constant(random(&[2, 2, 3], 2)),
            tape.constant(Tensor::zeros(&[2, 2, 3])),
        ];
        let f = build_multilevel_tokens(&tape, maps, &f6_conv("f6", 3, &mut rng)).unwrap();
        let span = *f.span(6).unwrap();
        let tokens = tape.value(f.tokens);
        assert!(tokens.data()[span.start * 3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let tape = Tape::<f64>::new();
        let mut rng = init_rng(3);
        let maps = [
            tape.constant(Tensor::zeros(&[4, 4, 3])),
            tape.constant(Tensor::zeros(&[2, 2, 4])),
            tape.constant(Tensor::zeros(&[1, 1, 3])),
        ];
        assert!(build_multilevel_tokens(&tape, maps, &f6_conv("f6", 3, &mut rng)).is_err());
    }

    #[test]
    fn zero_w_m_reduces_to_projected_query() {
        let mut rng = init_rng(5);
        let mut p = EMMixerParams::<f64>::new("em", 8, &mut rng);
        p.w_m.value = Tensor::zeros(&[8]);
        p.phi_inner.bias.value = Tensor::zeros(&[8]);
        p.phi_outer.bias.value = Tensor::zeros(&[8]);
        let x = random(&[4, 8], 6);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (out, trace) = efficient_mixer(&tape, xv, &p).unwrap();
        assert!(tape.value(trace.w_attn).data().iter().all(|&v| v == 0.0));
        let q = x.matmul(&p.w_k.value).unwrap();
        let want = q.matmul(&p.phi_outer.weight.value).unwrap();
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn single_token_mixer() {
        let mut rng = init_rng(5);
        let p = EMMixerParams::<f64>::new("em", 8, &mut rng);
        let x = random(&[1, 8], 7);
        let tape = Tape::new();
        let (out, trace) = efficient_mixer(&tape, tape.constant(x.clone()), &p).unwrap();
        assert_eq!(tape.shape(out), [1, 8]);
        let k = x.matmul(&p.w_k.value).unwrap();
        let want: f64 = k
            .data()
            .iter()
            .zip(p.w_m.value.data())
            .map(|(a, b)| a * b)
            .sum();
        let got = tape.value(trace.w_attn);
        assert_eq!(got.shape(), [1]);
        assert!((got.data()[0] - want).abs() < 1e-12);
        assert_eq!(tape.shape(trace.g), [1, 8]);
    }

    #[test]
    fn mixer_matches_direct_formula() {
        let mut rng = init_rng(9);
        let p = EMMixerParams::<f64>::new("em", 6, &mut rng);
        let x = random(&[5, 6], 10);
        let tape = Tape::new();
        let (out, _) = efficient_mixer(&tape, tape.constant(x.clone()), &p).unwrap();
        let out = tape.value(out);
        let affine = |row: &[f64], l: &AffineLayer<f64>| -> Vec<f64> {
            (0..6)
                .map(|j| {
                    l.bias.value.data()[j]
                        + (0..6)
                            .map(|i| row[i] * l.weight.value.at(&[i, j]))
                            .sum::<f64>()
                })
                .collect()
        };
        for r in 0..5 {
            let xr = x.row(r);
            let q: Vec<f64> = (0..6)
                .map(|j| (0..6).map(|i| xr[i] * p.w_k.value.at(&[i, j])).sum())
                .collect();
            let v: Vec<f64> = (0..6)
                .map(|j| (0..6).map(|i| xr[i] * p.w_v.value.at(&[i, j])).sum())
                .collect();
            let w: f64 = q.iter().zip(p.w_m.value.data()).map(|(a, b)| a * b).sum();
            let ctx: Vec<f64> = v.iter().map(|&vi| vi * w / 6f64.sqrt()).collect();
            let g = affine(&ctx, &p.phi_inner);
            let s: Vec<f64> = g.iter().zip(&q).map(|(a, b)| a + b).collect();
            let want = affine(&s, &p.phi_outer);
            for (j, w) in want.iter().enumerate() {
                assert!((out.at(&[r, j]) - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixer_is_permutation_equivariant() {
        let mut rng = init_rng(11);
        let p = EMMixerParams::<f64>::new("em", 8, &mut rng);
        let x = random(&[4, 8], 12);
        let perm = [2usize, 0, 3, 1];
        let px = Tensor::from_vec(
            &[4, 8],
            perm.iter().flat_map(|&r| x.row(r).to_vec()).collect(),
        );
        let tape = Tape::new();
        let a = tape.value(efficient_mixer(&tape, tape.constant(x), &p).unwrap().0);
        let b = tape.value(efficient_mixer(&tape, tape.constant(px), &p).unwrap().0);
        for (i, &r) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((b.at(&[i, j]) - a.at(&[r, j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mixer_never_materializes_token_pairs() {
        let mut rng = init_rng(11);
        let p = EMMixerParams::<f32>::new("em", 16, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[340, 16], 0.1));
        efficient_mixer(&tape, x, &p).unwrap();
        let largest = tape.largest_intermediate();
        assert_eq!(largest, [340, 16]);
    }

    #[test]
    fn mixer_reports_non_finite_stage() {
        let mut rng = init_rng(11);
        let mut p = EMMixerParams::<f64>::new("em", 4, &mut rng);
        p.w_m.value.data_mut()[0] = f64::INFINITY;
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 4], 1.0));
        match efficient_mixer(&tape, x, &p) {
            Err(Error::NonFinite { stage }) => assert_eq!(stage, "mixer.w_attn"),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = Tensor::full(&[3, 4], 1.0);
        bad.data_mut()[5] = f64::NAN;
        let p = EMMixerParams::<f64>::new("em", 4, &mut rng);
        assert!(matches!(
            efficient_mixer(&tape, tape.constant(bad), &p),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn zeroed_blocks_are_identity() {
        let mut rng = init_rng(13);
        let mut enc = Encoder::<f64>::new("enc", 8, 2, 16, MixerKind::Efficient, &mut rng).unwrap();
        enc.zero_params();
        let x = random(&[5, 8], 14);
        let tape = Tape::new();
        let f = single_level(&tape, x.clone());
        let one = emt_block(&tape, &f, &enc.blocks[0]).unwrap();
        assert_eq!(*tape.value(one.tokens), x);
        let out = encoder_stack(&tape, &f, &enc).unwrap();
        assert_eq!(*tape.value(out.tokens), x);
        assert_eq!(out.spans, f.spans);
    }

    #[test]
    fn depth_one_stack_equals_block() {
        let mut rng = init_rng(15);
        let enc = Encoder::<f64>::new("enc", 8, 1, 16, MixerKind::Efficient, &mut rng).unwrap();
        let tape = Tape::new();
        let f = single_level(&tape, random(&[6, 8], 16));
        let a = tape.value(emt_block(&tape, &f, &enc.blocks[0]).unwrap().tokens);
        let b = tape.value(encoder_stack(&tape, &f, &enc).unwrap().tokens);
        assert_eq!(a, b);
        assert!(Encoder::<f64>::new("enc", 8, 0, 16, MixerKind::Efficient, &mut rng).is_err());
    }

    #[test]
    fn deep_stack_stays_finite_and_keeps_spans() {
        let mut rng = init_rng(17);
        let enc = Encoder::<f64>::new("enc", 8, 4, 16, MixerKind::Efficient, &mut rng).unwrap();
        let tape = Tape::new();
        let maps = [
            tape.constant(random(&[8, 8, 8], 1)),
            tape.constant(random(&[4, 4, 8], 2)),
            tape.constant(random(&[2, 2, 8], 3)),
        ];
        let f = build_multilevel_tokens(&tape, maps, &f6_conv("f6", 8, &mut rng)).unwrap();
        let out = encoder_stack(&tape, &f, &enc).unwrap();
        let v = tape.value(out.tokens);
        assert!(v.is_finite());
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e4, "norm {norm}");
        assert_eq!(out.spans, f.spans);
        out.validate(&tape).unwrap();
    }

    #[test]
    fn mixer_gradient_matches_finite_differences() {
        let mut rng = init_rng(19);
        let p = EMMixerParams::<f64>::new("em", 8, &mut rng);
        let r = gradient_check(
            |t, x| {
                let (y, _) = efficient_mixer(t, x, &p).unwrap();
                let y2 = t.mul(y, y);
                t.sum(y2)
            },
            &random(&[4, 8], 20),
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(r.passed, "max rel error {}", r.max_rel_error);
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        for kind in [MixerKind::Efficient, MixerKind::Softmax] {
            let mut rng = init_rng(21);
            let block = EmtBlock::<f64>::new("b", 8, 16, kind, &mut rng);
            let r = gradient_check(
                |t, x| {
                    let f = TokenFeatures {
                        tokens: x,
                        spans: vec![LevelSpan {
                            level: 3,
                            start: 0,
                            len: 4,
                            height: 2,
                            width: 2,
                        }],
                        channels: 8,
                    };
                    let y = emt_block(t, &f, &block).unwrap().tokens;
                    let w = t.constant(random(&[4, 8], 22));
                    t.sum(t.mul(y, w))
                },
                &random(&[4, 8], 23),
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(r.passed, "{kind:?}: max rel error {}", r.max_rel_error);
        }
    }

    #[test]
    fn softmax_mixer_is_also_equivariant() {
        let mut rng = init_rng(25);
        let a = SoftmaxAttention::<f64>::new("a", 4, &mut rng);
        let x = random(&[3, 4], 26);
        let perm = [1usize, 2, 0];
        let px = Tensor::from_vec(
            &[3, 4],
            perm.iter().flat_map(|&r| x.row(r).to_vec()).collect(),
        );
        let tape = Tape::new();
        let ya = tape.value(a.forward(&tape, tape.constant(x)));
        let yb = tape.value(a.forward(&tape, tape.constant(px)));
        for (i, &r) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((yb.at(&[i, j]) - ya.at(&[r, j])).abs() < 1e-9);
            }
        }
    }
}
