use super::layers::{ConvLayer, Linear};
use super::{ModelError, Result};
use crate::autodiff::{Tape, Tensor, Var};
use crate::real::Real;
use crate::rng::Rng;

/// Output channels of the three strided blocks.
pub const CHANNELS: [usize; 3] = [8, 16, 32];
/// Smallest crop extent accepted per axis.
pub const MIN_CROP: usize = 8;

/// Three stride-2 3×3×3 conv blocks with ReLU, global average pooling and
/// a linear map from 32 channels to C features.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub blocks: [ConvLayer<T>; 3],
    pub head: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    blocks: [(Var, Var); 3],
    head: (Var, Var),
}

/// Block activations (pre-pooling) and pooled features `[N, C]`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub maps: [Var; 3],
    pub features: Var,
}

impl<T: Real> Encoder<T> {
    pub fn init(feature_dim: usize, rng: &mut Rng) -> Self {
        let blocks = [
            ConvLayer::init(1, CHANNELS[0], 3, rng),
            ConvLayer::init(CHANNELS[0], CHANNELS[1], 3, rng),
            ConvLayer::init(CHANNELS[1], CHANNELS[2], 3, rng),
        ];
        Self { blocks, head: Linear::init(CHANNELS[2], feature_dim, rng) }
    }

    pub fn feature_dim(&self) -> usize {
        self.head.bias.len()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            blocks: [self.blocks[0].bind(tape, trainable), self.blocks[1].bind(tape, trainable), self.blocks[2].bind(tape, trainable)],
            head: self.head.bind(tape, trainable),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), &b.weight));
            out.push((format!("block{i}.bias"), &b.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let [b0, b1, b2] = &mut self.blocks;
        vec![
            &mut b0.weight,
            &mut b0.bias,
            &mut b1.weight,
            &mut b1.bias,
            &mut b2.weight,
            &mut b2.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    /// Encodes one crop into a C-vector without recording gradients.
    pub fn encode(&self, crop: &[f32], dims: [usize; 3]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = crop_batch(&mut tape, &[crop], dims)?;
        let out = bound.forward(&mut tape, x)?;
        Ok(tape.value(out.features).data().to_vec())
    }
}

/// Stacks equally sized crops (x innermost) into a `[N, 1, Z, Y, X]` leaf.
pub fn crop_batch<T: Real>(tape: &mut Tape<T>, crops: &[&[f32]], dims: [usize; 3]) -> Result<Var> {
    if dims.iter().any(|&d| d < MIN_CROP) {
        return Err(ModelError::CropTooSmall(dims));
    }
    let mut data = Vec::with_capacity(crops.len() * dims.iter().product::<usize>());
    for c in crops {
        data.extend(c.iter().map(|&v| T::lit(v as f64)));
    }
    let t = Tensor::new(vec![crops.len(), 1, dims[2], dims[1], dims[0]], data)?;
    Ok(tape.constant(t))
}

impl BoundEncoder {
    /// Inverse of [`BoundEncoder::vars`].
    pub(crate) fn from_vars(v: &[Var]) -> Self {
        Self { blocks: [(v[0], v[1]), (v[2], v[3]), (v[4], v[5])], head: (v[6], v[7]) }
    }

    /// Parameter handles in [`Encoder::params_mut`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.extend([self.head.0, self.head.1]);
        out
    }

    /// `input` is `[N, 1, Z, Y, X]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, input: Var) -> Result<EncoderOutput> {
        let s = tape.shape(input).to_vec();
        if s.len() == 5 && s[2..].iter().any(|&d| d < MIN_CROP) {
            return Err(ModelError::CropTooSmall([s[4], s[3], s[2]]));
        }
        let mut x = input;
        let mut maps = [input; 3];
        for (i, b) in self.blocks.iter().enumerate() {
            let y = ConvLayer::forward(tape, *b, x, 2, 1)?;
            x = tape.relu(y);
            maps[i] = x;
        }
        let pooled = tape.adaptive_avg_pool3d_to_1(x)?;
        let features = Linear::forward(tape, self.head, pooled)?;
        Ok(EncoderOutput { maps, features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_crop_gives_zero_features() {
        let enc: Encoder<f64> = Encoder::init(16, &mut rng::stream(1, 0));
        let f = enc.encode(&vec![0.0; 16 * 16 * 16], [16, 16, 16]).unwrap();
        assert_eq!(f.len(), 16);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_crops_identical_features() {
        let enc: Encoder<f32> = Encoder::init(32, &mut rng::stream(2, 0));
        let crop: Vec<f32> = (0..8 * 12 * 10).map(|i| ((i * 7) % 13) as f32 / 13.0).collect();
        assert_eq!(enc.encode(&crop, [8, 12, 10]).unwrap(), enc.encode(&crop, [8, 12, 10]).unwrap());
    }

    #[test]
    fn small_crop_is_rejected() {
        let enc: Encoder<f64> = Encoder::init(8, &mut rng::stream(3, 0));
        assert!(matches!(enc.encode(&[0.0; 7 * 8 * 8], [7, 8, 8]), Err(ModelError::CropTooSmall(_))));
    }
}
