//! Point-query decoder: attention within each instance's points, across
//! instances at the same point index, then into the encoder memory.

use rand::Rng;

use crate::encoder::SoftmaxAttention;
use crate::error::{Error, Result};
use crate::tensor::{Activation, LayerNorm, Mlp, Param, Parameterized, Scalar, Tape, Var};

/// Post-norm decoder layer.
#[derive(Clone, Debug)]
pub struct DecoderLayer<T> {
    pub intra: SoftmaxAttention<T>,
    pub norm_intra: LayerNorm<T>,
    pub inter: SoftmaxAttention<T>,
    pub norm_inter: LayerNorm<T>,
    pub cross: SoftmaxAttention<T>,
    pub norm_cross: LayerNorm<T>,
    pub ffn: Mlp<T>,
    pub norm_ffn: LayerNorm<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    pub fn new(name: &str, channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        Self {
            intra: SoftmaxAttention::new(&format!("{name}.intra"), c, rng),
            norm_intra: LayerNorm::new(&format!("{name}.norm_intra"), c),
            inter: SoftmaxAttention::new(&format!("{name}.inter"), c, rng),
            norm_inter: LayerNorm::new(&format!("{name}.norm_inter"), c),
            cross: SoftmaxAttention::new(&format!("{name}.cross"), c, rng),
            norm_cross: LayerNorm::new(&format!("{name}.norm_cross"), c),
            ffn: Mlp::new(
                &format!("{name}.ffn"),
                &[c, hidden, c],
                Activation::Gelu,
                rng,
            ),
            norm_ffn: LayerNorm::new(&format!("{name}.norm_ffn"), c),
        }
    }

    /// `x`, `pos`: `[K, n, C]`; `memory`, `memory_pos`: `[N, C]`.
    pub fn forward(&self, tape: &Tape<T>, x: Var, pos: Var, memory: Var, memory_pos: Var) -> Var {
        let s = tape.shape(x);
        let (k, n, c) = (s[0], s[1], s[2]);

        let qk = tape.add(x, pos);
        let a = self.intra.attend(tape, qk, qk, x);
        let x = self.norm_intra.forward(tape, tape.add(x, a));

        let xt = tape.permute3(x, [1, 0, 2]);
        let qk = tape.permute3(tape.add(x, pos), [1, 0, 2]);
        let a = tape.permute3(self.inter.attend(tape, qk, qk, xt), [1, 0, 2]);
        let x = self.norm_inter.forward(tape, tape.add(x, a));

        let q = tape.reshape(tape.add(x, pos), &[k * n, c]);
        let keys = tape.add(memory, memory_pos);
        let a = tape.reshape(self.cross.attend(tape, q, keys, memory), &[k, n, c]);
        let x = self.norm_cross.forward(tape, tape.add(x, a));

        let f = self.ffn.forward(tape, x);
        self.norm_ffn.forward(tape, tape.add(x, f))
    }
}

impl<T: Scalar> Parameterized<T> for DecoderLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.intra.visit(f);
        self.norm_intra.visit(f);
        self.inter.visit(f);
        self.norm_inter.visit(f);
        self.cross.visit(f);
        self.norm_cross.visit(f);
        self.ffn.visit(f);
        self.norm_ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.intra.visit_mut(f);
        self.norm_intra.visit_mut(f);
        self.inter.visit_mut(f);
        self.norm_inter.visit_mut(f);
        self.cross.visit_mut(f);
        self.norm_cross.visit_mut(f);
        self.ffn.visit_mut(f);
        self.norm_ffn.visit_mut(f);
    }
}

#[derive(Clone, Debug, Default)]
pub struct Decoder<T> {
    pub layers: Vec<DecoderLayer<T>>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(channels: usize, depth: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..depth)
            .map(|i| DecoderLayer::new(&format!("decoder.{i}"), channels, hidden, rng))
            .collect();
        Self { layers }
    }
}

impl<T: Scalar> Parameterized<T> for Decoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// Runs every layer; with no layers the queries come back unchanged.
pub fn decoder_forward<T: Scalar>(
    tape: &Tape<T>,
    queries: Var,
    pos: Var,
    memory: Var,
    memory_pos: Var,
    decoder: &Decoder<T>,
) -> Result<Var> {
    let qs = tape.shape(queries);
    let ms = tape.shape(memory);
    if qs.len() != 3 || tape.shape(pos) != qs {
        return Err(Error::Shape(format!(
            "decoder queries {qs:?} and positions {:?} must match as [K, n, C]",
            tape.shape(pos)
        )));
    }
    if ms.len() != 2 || ms[1] != qs[2] || tape.shape(memory_pos) != ms {
        return Err(Error::Shape(format!(
            "decoder memory {ms:?} incompatible with queries {qs:?}"
        )));
    }
    let mut x = queries;
    for layer in &decoder.layers {
        x = layer.forward(tape, x, pos, memory, memory_pos);
    }
    if !tape.value(x).is_finite() {
        return Err(Error::non_finite("decoder"));
    }
    Ok(x)
}
