//! View-dependent expression representation.
//!
//! A local-feature network turns the expression code into a bank `Z` of
//! `N_lf × D_lf` region features (once per frame). A spatial-attention
//! network maps the encoded ray plus the code to sigmoid weights
//! `W ∈ (0, 1)^{N_lf}`. The representation fed to the light field is `W · Z`.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::linalg::{Mat, Real};
use crate::model::ArchConfig;
use crate::nn::{sigmoid, ResMlp};
use crate::ray_geometry::positional_encode_into;

/// Expression code `e` (one per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionCode(pub Vec<f64>);

impl ExpressionCode {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `N_lf × D_lf` local feature bank `Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank<T>(pub Mat<T>);

/// Sigmoid attention weights `W` over the bank rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T>(pub Vec<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionEncoder<T> {
    pub local_feature: ResMlp<T>,
    pub attention: ResMlp<T>,
    pub bank_rows: usize,
    pub bank_dim: usize,
    pub expr_dim: usize,
    /// Octaves applied to the code before both networks, if any.
    pub code_pe: Option<usize>,
}

impl<T: Real> ExpressionEncoder<T> {
    pub fn new<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Self {
        ExpressionEncoder {
            local_feature: ResMlp::new("local_feature", arch.local_feature_mlp(), None, rng),
            attention: ResMlp::new("attention", arch.attention_mlp(), None, rng),
            bank_rows: arch.bank_rows,
            bank_dim: arch.bank_dim,
            expr_dim: arch.expr_dim,
            code_pe: arch.encode_expression.then_some(arch.expr_pe_freqs),
        }
    }

    pub fn ray_dim(&self) -> usize {
        self.attention.input_dim() - self.local_feature.input_dim()
    }

    /// Code as fed to the networks (raw, or positionally encoded).
    pub fn code_features(&self, e: &[f64]) -> Result<Vec<T>> {
        ensure!(
            e.len() == self.expr_dim,
            Validation,
            "expression code has {} entries, model expects {}",
            e.len(),
            self.expr_dim
        );
        let raw: Vec<T> = e.iter().map(|&v| T::from_f64_lossy(v)).collect();
        Ok(match self.code_pe {
            None => raw,
            Some(freqs) => {
                let mut out = vec![T::zero(); self.local_feature.input_dim()];
                positional_encode_into(&raw, freqs, true, &mut out);
                out
            }
        })
    }

    /// Feature bank for one frame.
    pub fn local_feature_bank(&self, e: &[f64]) -> Result<FeatureBank<T>> {
        let code = self.code_features(e)?;
        let flat = self.local_feature.forward(&Mat::from_vec(1, code.len(), code));
        Ok(FeatureBank(Mat::from_vec(self.bank_rows, self.bank_dim, flat.data)))
    }

    /// Attention weights for one encoded ray representation.
    pub fn spatial_attention(&self, ray_encoded: &[T], e: &[f64]) -> Result<AttentionWeights<T>> {
        ensure!(
            ray_encoded.len() == self.ray_dim(),
            Validation,
            "encoded ray has {} entries, attention network expects {}",
            ray_encoded.len(),
            self.ray_dim()
        );
        let code = self.code_features(e)?;
        let mut input = ray_encoded.to_vec();
        input.extend(code);
        let logits = self.attention.forward(&Mat::from_vec(1, input.len(), input));
        Ok(AttentionWeights(logits.data.into_iter().map(sigmoid).collect()))
    }
}

/// `I_exp = W · Z`.
pub fn expression_representation<T: Real>(w: &AttentionWeights<T>, z: &FeatureBank<T>) -> Result<Vec<T>> {
    ensure!(
        w.0.len() == z.0.rows,
        Validation,
        "attention has {} weights but the bank has {} rows",
        w.0.len(),
        z.0.rows
    );
    let mut out = vec![T::zero(); z.0.cols];
    for (r, &wr) in w.0.iter().enumerate() {
        for (o, &zv) in out.iter_mut().zip(z.0.row(r)) {
            *o = *o + wr * zv;
        }
    }
    Ok(out)
}
