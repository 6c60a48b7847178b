use rand::Rng;

use super::network::{Activation, Mlp};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_HIDDEN: [usize; 3] = [500, 500, 1000];
pub const DEFAULT_LATENT: usize = 100;

/// Fully connected encoder/decoder pair around the quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct VqAutoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl VqAutoencoder {
    /// Encoder `d_in → hidden… → latent` with ReLU after every layer; decoder
    /// mirrors it back to `d_in` with a linear output layer.
    pub fn new<R: Rng + ?Sized>(d_in: usize, hidden: &[usize], latent: usize, rng: &mut R) -> Self {
        let mut enc_dims = vec![d_in];
        enc_dims.extend_from_slice(hidden);
        enc_dims.push(latent);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        VqAutoencoder {
            encoder: Mlp::build(&enc_dims, Activation::Relu, Activation::Relu, rng),
            decoder: Mlp::build(&dec_dims, Activation::Relu, Activation::Identity, rng),
        }
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() || encoder.input_dim() != decoder.output_dim() {
            return Err(Error::dim(format!(
                "encoder {}→{} does not pair with decoder {}→{}",
                encoder.input_dim(),
                encoder.output_dim(),
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        Ok(VqAutoencoder { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(format!("embedding of length {} for encoder input {}", x.len(), self.input_dim())));
        }
        Ok(self.encoder.forward(&Tensor::from_vec(x.to_vec()))?.into_values())
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::dim(format!("latent of length {} for decoder input {}", z.len(), self.latent_dim())));
        }
        Ok(self.decoder.forward(&Tensor::from_vec(z.to_vec()))?.into_values())
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }

    pub fn round_f32(&mut self) {
        for p in self.encoder.params_mut().into_iter().chain(self.decoder.params_mut()) {
            *p = p.round_f32();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vq::network::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_widths_follow_the_mirror() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ae = VqAutoencoder::new(16, &[12, 10], 4, &mut rng);
        let enc: Vec<usize> = ae.encoder.layers.iter().map(|l| l.fan_out()).collect();
        let dec: Vec<usize> = ae.decoder.layers.iter().map(|l| l.fan_out()).collect();
        assert_eq!(enc, vec![12, 10, 4]);
        assert_eq!(dec, vec![10, 12, 16]);
        assert_eq!(ae.decoder.layers.last().unwrap().activation, Activation::Identity);
        assert!(ae.encoder.layers.iter().all(|l| l.activation == Activation::Relu));
    }

    #[test]
    fn identity_single_layer_reproduces_the_input_slice() {
        let mut w = Tensor::zeros(&[5, 3]);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        let enc = Mlp::new(vec![Linear::new(w.clone(), Tensor::zeros(&[3]), Activation::Identity).unwrap()]).unwrap();
        let dec =
            Mlp::new(vec![Linear::new(w.transpose(), Tensor::zeros(&[5]), Activation::Identity).unwrap()]).unwrap();
        let ae = VqAutoencoder::from_parts(enc, dec).unwrap();
        assert_eq!(ae.encode(&[1.5, -2.0, 3.0, 9.0, 9.0]).unwrap(), vec![1.5, -2.0, 3.0]);
        assert!(matches!(ae.encode(&[1.0; 4]), Err(Error::Dimension(_))));
    }
}
