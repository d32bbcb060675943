use crate::autodiff::{Tape, Tensor, Var};
use crate::model::{ConvLayer, CHANNELS};
use crate::real::Real;

/// Segmentation head over the encoder's pre-pooling block activations:
/// one 1×1×1 convolution per block to class logits, each upsampled
/// (nearest) to the crop size, summed.
///
/// All weights start at zero, so an untrained head predicts class 0
/// everywhere regardless of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHead<T> {
    pub convs: [ConvLayer<T>; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct BoundSegHead {
    convs: [(Var, Var); 3],
}

impl<T: Real> SegHead<T> {
    pub fn zeros(classes: usize) -> Self {
        Self { convs: CHANNELS.map(|c| ConvLayer::zeros(c, classes, 1)) }
    }

    pub fn classes(&self) -> usize {
        self.convs[0].bias.len()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundSegHead {
        BoundSegHead { convs: [0, 1, 2].map(|i| self.convs[i].bind(tape, trainable)) }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &c.weight));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs.iter_mut().flat_map(|c| [&mut c.weight, &mut c.bias]).collect()
    }
}

impl BoundSegHead {
    pub fn vars(&self) -> Vec<Var> {
        self.convs.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Logits `[N, K, Z, Y, X]` for crop extent `dims = [x, y, z]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, maps: [Var; 3], dims: [usize; 3]) -> crate::autodiff::Result<Var> {
        let size = [dims[2], dims[1], dims[0]];
        let mut total: Option<Var> = None;
        for (map, conv) in maps.into_iter().zip(self.convs) {
            let logits = ConvLayer::forward(tape, conv, map, 1, 0)?;
            let up = tape.upsample_nearest(logits, size)?;
            total = Some(match total {
                Some(t) => tape.add(t, up)?,
                None => up,
            });
        }
        Ok(total.expect("three blocks"))
    }
}
