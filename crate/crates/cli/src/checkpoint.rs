//! Versioned JSON checkpoint holding everything `eval` needs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sphgp_core::data_io::{Schema, Standardizer};
use sphgp_core::harmonics::HarmonicBasis;
use sphgp_core::kernels::Spectrum;
use sphgp_core::vargp::{AdamState, InducingModel, Likelihood, Link, VariationalState};
use sphgp_core::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "sphgp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    /// Effective configuration text of the run.
    pub config: String,
    /// Trained basis in its text form.
    pub basis: String,
    /// Spectrum the model was built with (initial hyper-parameters).
    pub spectrum: Spectrum,
    pub state: VariationalState,
    pub likelihood: String,
    pub optimizer: AdamState,
    pub iterations: usize,
    pub standardizer: Standardizer,
    pub bias: f64,
    /// Columns the model was trained on; used when `eval` gets no schema.
    pub schema: Schema,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config_hash: String,
        config: String,
        model: &InducingModel,
        state: VariationalState,
        likelihood: Likelihood,
        optimizer: AdamState,
        iterations: usize,
        standardizer: Standardizer,
        bias: f64,
        schema: Schema,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash,
            config,
            basis: model.basis().to_text(),
            spectrum: model.base_spectrum().clone(),
            state,
            likelihood: likelihood.name().into(),
            optimizer,
            iterations,
            standardizer,
            bias,
            schema,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint",
                path.display()
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn likelihood(&self) -> Result<Likelihood> {
        match self.likelihood.as_str() {
            "gaussian" => Ok(Likelihood::Gaussian),
            "bernoulli-probit" => Ok(Likelihood::Bernoulli(Link::Probit)),
            "bernoulli-logit" => Ok(Likelihood::Bernoulli(Link::Logit)),
            other => Err(Error::Checkpoint(format!("unknown likelihood '{other}'"))),
        }
    }

    /// Rebuild the trained model.
    pub fn model(&self) -> Result<InducingModel> {
        InducingModel::new(
            HarmonicBasis::from_text(&self.basis)?,
            self.spectrum.clone(),
        )
    }
}
