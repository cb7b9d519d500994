//! Amortized inference: encoder `x → (m, s)`, decoder `u → λ`, and the
//! per-task objective with hand-written gradients.

mod adam;
mod dense;
mod losses;
mod objective;

pub use adam::{adam_step, AdamState, DEFAULT_STEP_SIZE};
pub use dense::{DenseLayer, DenseNetwork, ForwardTrace, NetworkGrads, Topology, LEAKY_SLOPE};
pub use losses::{
    cb_log_likelihood, d_ln_cb_normalizer, ln_cb_normalizer, prototypical_loss, sample_embedding, EmbeddingSample,
    Labelled, CB_TAYLOR_RADIUS,
};
pub use objective::{
    evaluate_objective, evaluate_objective_fixed, FixedPosterior, ObjectiveComponents, ObjectiveForward,
    ObjectiveGrads, ObjectiveWeights, TaskHalves,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::theme::EmbeddingPosterior;

/// Raw log-variance outputs are clamped to this magnitude before `exp(½·)`.
pub const LOG_VARIANCE_LIMIT: f64 = 40.0;

/// Decoder outputs are squashed and clamped into `[λ_min, 1 − λ_min]`.
pub const LAMBDA_MIN: f64 = 1e-6;

/// Encoder and decoder with compatible widths.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNetworks {
    pub encoder: DenseNetwork,
    pub decoder: DenseNetwork,
}

impl EmbeddingNetworks {
    /// Encoder `P → hidden → 2D`, decoder `D → reversed hidden → P`.
    pub fn new<R: Rng + ?Sized>(p: usize, d: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let encoder = DenseNetwork::new(Topology::new(p, hidden.to_vec(), 2 * d)?, rng);
        let mirrored: Vec<usize> = hidden.iter().rev().copied().collect();
        let decoder = DenseNetwork::new(Topology::new(d, mirrored, p)?, rng);
        Self::from_parts(encoder, decoder)
    }

    pub fn from_parts(encoder: DenseNetwork, decoder: DenseNetwork) -> Result<Self> {
        let enc_out = encoder.output_width();
        if !enc_out.is_multiple_of(2) {
            return Err(Error::Config("encoder output width must be even (m and log-variance)".into()));
        }
        if decoder.input_width() != enc_out / 2 {
            return Err(Error::Config(format!(
                "decoder input {} does not match embedding dimension {}",
                decoder.input_width(),
                enc_out / 2
            )));
        }
        if decoder.output_width() != encoder.input_width() {
            return Err(Error::Config(format!(
                "decoder output {} does not match data width {}",
                decoder.output_width(),
                encoder.input_width()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn data_width(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn embedding_dim(&self) -> usize {
        self.decoder.input_width()
    }

    pub fn encode_rows(&self, x: &DMatrix<f64>) -> Result<Vec<EmbeddingPosterior>> {
        let trace = self.encoder.forward(x)?;
        posteriors_from_output(&trace.output)
    }

    /// `λ` for every row of `u`.
    pub fn decode_rows(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.decoder.forward(u)?.output.map(squash_output))
    }
}

/// `[mᵀ sᵀ]ᵀ = f(x; φ)` for a single data point.
pub fn encode(x: &[f64], phi: &DenseNetwork) -> Result<EmbeddingPosterior> {
    if !phi.output_width().is_multiple_of(2) {
        return Err(Error::Usage("encoder output width must be even".into()));
    }
    let row = DMatrix::from_row_slice(1, x.len(), x);
    let out = phi.forward(&row)?.output;
    Ok(posteriors_from_output(&out)?.remove(0))
}

pub(crate) fn posteriors_from_output(out: &DMatrix<f64>) -> Result<Vec<EmbeddingPosterior>> {
    let d = out.ncols() / 2;
    out.row_iter()
        .map(|row| {
            let m = DVector::from_iterator(d, row.iter().take(d).copied());
            let s = DVector::from_iterator(d, row.iter().skip(d).map(|&lv| log_variance_to_scale(lv)));
            EmbeddingPosterior::new(m, s)
        })
        .collect()
}

pub(crate) fn log_variance_to_scale(lv: f64) -> f64 {
    (0.5 * lv.clamp(-LOG_VARIANCE_LIMIT, LOG_VARIANCE_LIMIT)).exp()
}

/// Logistic squashing clamped to `[λ_min, 1 − λ_min]`.
pub fn squash_output(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(LAMBDA_MIN, 1.0 - LAMBDA_MIN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_gives_standard_posterior() {
        let net = DenseNetwork::zeros(Topology::new(3, vec![4], 4).unwrap());
        let post = encode(&[0.2, 0.4, 0.9], &net).unwrap();
        assert_eq!(post.m().as_slice(), &[0.0, 0.0]);
        assert_eq!(post.s().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn identity_layer_passes_mean_through() {
        let topo = Topology::new(2, vec![], 4).unwrap();
        let mut weight = DMatrix::zeros(4, 2);
        weight[(0, 0)] = 1.0;
        weight[(1, 1)] = 1.0;
        let net = DenseNetwork::from_layers(
            topo,
            vec![DenseLayer {
                weight,
                bias: DVector::zeros(4),
            }],
        )
        .unwrap();
        let post = encode(&[0.3, -0.8], &net).unwrap();
        assert_eq!(post.m().as_slice(), &[0.3, -0.8]);
        assert_eq!(post.s().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nets = EmbeddingNetworks::new(6, 2, &[5, 3], &mut rng).unwrap();
        assert_eq!(nets.decoder.topology().hidden, vec![3, 5]);
        assert_eq!(nets.data_width(), 6);
        assert_eq!(nets.embedding_dim(), 2);
        let enc = DenseNetwork::zeros(Topology::new(6, vec![], 4).unwrap());
        let dec = DenseNetwork::zeros(Topology::new(2, vec![], 5).unwrap());
        assert!(EmbeddingNetworks::from_parts(enc, dec).is_err());
        let odd = DenseNetwork::zeros(Topology::new(6, vec![], 3).unwrap());
        assert!(encode(&[0.0; 6], &odd).is_err());
        assert!(encode(&[0.0; 5], &nets.encoder).is_err());
    }

    #[test]
    fn decoder_output_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nets = EmbeddingNetworks::new(3, 2, &[4], &mut rng).unwrap();
        let u = DMatrix::from_row_slice(2, 2, &[1e6, -1e6, 0.0, 0.0]);
        let lambda = nets.decode_rows(&u).unwrap();
        assert!(lambda.iter().all(|&l| (LAMBDA_MIN..=1.0 - LAMBDA_MIN).contains(&l)));
    }
}
