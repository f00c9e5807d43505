//! Shared-basis decomposition of one matrix family across layers.
//!
//! The `L` layer matrices `W_i (d1 × d2)` are placed side by side into
//! `W = [W_1 | … | W_L]` (`d1 × L·d2`) and factored as `W = U Σ Vᵀ` (thin,
//! `r = min(d1, L·d2)`). Column block `i` of `Vᵀ` is the coefficient matrix
//! `V_i (r × d2)`, and `W_i = U Σ V_i`: every layer is a combination of the
//! shared scaled basis `UΣ`.

use std::path::Path;

use serde_json::json;

use crate::checkpoint::{MatrixFamily, TransformerCheckpoint};
use crate::error::{Error, Result};
use crate::lfck;
use crate::numkernel::{svd_thin, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SvdSpace {
    pub family: MatrixFamily,
    pub d1: usize,
    pub d2: usize,
    pub n_layers: usize,
    /// `d1 × r`
    pub u: Tensor,
    pub sigma: Vec<f32>,
    /// One `r × d2` coefficient block per layer.
    pub coeffs: Vec<Tensor>,
}

/// `[m_1 | m_2 | … | m_L]`.
pub fn concat_layers(mats: &[&Tensor]) -> Result<Tensor> {
    if mats.len() < 2 {
        return Err(Error::arg(format!(
            "concatenation needs at least 2 layers, got {}",
            mats.len()
        )));
    }
    let (d1, d2) = mats[0].dims2()?;
    for (i, m) in mats.iter().enumerate() {
        if m.dims2()? != (d1, d2) {
            return Err(Error::dim(format!(
                "layer {i} has shape {:?}, expected [{d1}, {d2}]",
                m.shape()
            )));
        }
    }
    let l = mats.len();
    let mut out = Vec::with_capacity(d1 * l * d2);
    for row in 0..d1 {
        for m in mats {
            out.extend_from_slice(m.row(row));
        }
    }
    Tensor::new([d1, l * d2], out)
}

impl SvdSpace {
    pub fn decompose(family: MatrixFamily, mats: &[&Tensor]) -> Result<Self> {
        let w = concat_layers(mats)?;
        let (d1, d2) = mats[0].dims2()?;
        let svd = svd_thin(&w)?;
        let coeffs = (0..mats.len())
            .map(|i| svd.vt.slice_cols(i * d2, (i + 1) * d2))
            .collect::<Result<Vec<_>>>()?;
        Ok(SvdSpace {
            family,
            d1,
            d2,
            n_layers: mats.len(),
            u: svd.u,
            sigma: svd.sigma,
            coeffs,
        })
    }

    /// Decomposes one family of a checkpoint (layers in model order).
    pub fn of_checkpoint(model: &TransformerCheckpoint, family: MatrixFamily) -> Result<Self> {
        let mats: Vec<&Tensor> = model.layers.iter().map(|l| l.matrix(family)).collect();
        Self::decompose(family, &mats)
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Reassembles `Vᵀ = [V_1 | … | V_L]`.
    pub fn vt(&self) -> Result<Tensor> {
        let refs: Vec<&Tensor> = self.coeffs.iter().collect();
        concat_layers(&refs)
    }

    /// `U · diag(σ) · coeffs`.
    pub fn reconstruct_layer(&self, coeffs: &Tensor) -> Result<Tensor> {
        let r = self.rank();
        if coeffs.shape() != [r, self.d2] {
            return Err(Error::dim(format!(
                "coefficients {:?} do not match space rank {r} × d2 {}",
                coeffs.shape(),
                self.d2
            )));
        }
        // (U Σ) computed in f64, then multiplied against the coefficients.
        let u = self.u.data();
        let mut us = vec![0.0f64; self.d1 * r];
        for i in 0..self.d1 {
            for k in 0..r {
                us[i * r + k] = u[i * r + k] as f64 * self.sigma[k] as f64;
            }
        }
        let c: Vec<f64> = coeffs.data().iter().map(|&v| v as f64).collect();
        let mut out = vec![0.0f64; self.d1 * self.d2];
        crate::numkernel::gemm::gemm(
            crate::numkernel::gemm::Op::N,
            &us,
            self.d1,
            r,
            crate::numkernel::gemm::Op::N,
            &c,
            r,
            self.d2,
            1.0,
            0.0,
            &mut out,
        );
        Tensor::from_f64([self.d1, self.d2], &out)
    }

    /// Writes `u`, `sigma` and `coeffs.{i}` to an LFCK container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let sigma = Tensor::new([self.rank()], self.sigma.clone())?;
        let mut named: Vec<(String, &Tensor)> = vec![("u".into(), &self.u), ("sigma".into(), &sigma)];
        for (i, c) in self.coeffs.iter().enumerate() {
            named.push((format!("coeffs.{i}"), c));
        }
        let cfg = json!({
            "family": self.family,
            "d1": self.d1,
            "d2": self.d2,
            "n_layers": self.n_layers,
            "rank": self.rank(),
        });
        lfck::write(path, &cfg, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = lfck::read(path)?;
        let family: MatrixFamily = serde_json::from_value(f.config["family"].clone())
            .map_err(|e| Error::validation(format!("svd space family: {e}")))?;
        let get_usize = |k: &str| {
            f.config[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::validation(format!("svd space config lacks {k}")))
        };
        let (d1, d2, n_layers) = (get_usize("d1")?, get_usize("d2")?, get_usize("n_layers")?);
        let u = f.get("u").cloned().ok_or_else(|| Error::validation("missing u"))?;
        let sigma = f
            .get("sigma")
            .ok_or_else(|| Error::validation("missing sigma"))?
            .data()
            .to_vec();
        let coeffs = (0..n_layers)
            .map(|i| {
                f.get(&format!("coeffs.{i}"))
                    .cloned()
                    .ok_or_else(|| Error::validation(format!("missing coeffs.{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let space = SvdSpace {
            family,
            d1,
            d2,
            n_layers,
            u,
            sigma,
            coeffs,
        };
        let r = space.rank();
        if space.u.shape() != [d1, r] || space.coeffs.iter().any(|c| c.shape() != [r, d2]) {
            return Err(Error::validation("svd space tensors inconsistent with header"));
        }
        Ok(space)
    }
}
