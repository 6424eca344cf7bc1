//! Four strided convolutions producing feature maps at strides 8, 16 and 32.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv2d, Param, Parameterized, Scalar, Tape, Var};

/// Total stride of the deepest map.
pub const BACKBONE_STRIDE: usize = 32;

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    /// 8×8 kernel at stride 4 on the single gray channel.
    pub stem: Conv2d<T>,
    /// 3×3 stride-2 stages producing F3, F4, F5.
    pub stages: [Conv2d<T>; 3],
}

impl<T: Scalar> Backbone<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let stem = Conv2d::new("backbone.stem", 1, channels, 8, 4, 2, rng);
        let stages = std::array::from_fn(|i| {
            Conv2d::new(
                &format!("backbone.stage{}", i + 3),
                channels,
                channels,
                3,
                2,
                1,
                rng,
            )
        });
        Self { stem, stages }
    }

    /// `image` is `[H, W, 1]`; returns `[F3, F4, F5]`.
    pub fn forward(&self, tape: &Tape<T>, image: Var) -> Result<[Var; 3]> {
        let s = tape.shape(image);
        if s.len() != 3 || s[2] != 1 {
            return Err(Error::Shape(format!(
                "backbone expects a [H, W, 1] image, got {s:?}"
            )));
        }
        if !s[0].is_multiple_of(BACKBONE_STRIDE)
            || !s[1].is_multiple_of(BACKBONE_STRIDE)
            || s[0] == 0
            || s[1] == 0
        {
            return Err(Error::Shape(format!(
                "image extents {}x{} must be positive multiples of {BACKBONE_STRIDE}",
                s[1], s[0]
            )));
        }
        let mut x = tape.gelu(self.stem.forward(tape, image)?);
        let mut maps = Vec::with_capacity(3);
        for stage in &self.stages {
            x = tape.gelu(stage.forward(tape, x)?);
            maps.push(x);
        }
        Ok([maps[0], maps[1], maps[2]])
    }
}

impl<T: Scalar> Parameterized<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit(f);
        self.stages.iter().for_each(|s| s.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_mut(f);
        self.stages.iter_mut().for_each(|s| s.visit_mut(f));
    }
}
