//! NOMA baselines: private streams only, with SIC at the `G^P` user.
//!
//! The `G^P` user decodes and cancels the `G^N` user's stream before its own,
//! so the `G^N` rate is limited by the weaker of its two decoding SINRs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::estimation::{EstimatedCsi, PilotMode};
use crate::rates::Scheme;
use crate::sca::{solve_scheme_block, BlockSolution, OptimizerParams};

/// A block solution whose common beamformer is identically zero.
pub type NomaSolution = BlockSolution;

/// Solves one NOMA block. `csi_mode` must match the CSI actually available:
/// `Full` needs both cascaded channels, `Half` exactly one.
pub fn solve_noma_block<R: Rng + ?Sized>(
    csi: &EstimatedCsi,
    params: &OptimizerParams,
    csi_mode: PilotMode,
    rng: &mut R,
) -> Result<NomaSolution> {
    let known = csi.cascaded.iter().filter(|h| h.is_some()).count();
    let consistent = match csi_mode {
        PilotMode::Full => known == 2 || csi.elements() == 0,
        PilotMode::Half => known == 1,
    };
    if !consistent {
        return Err(Error::invalid(format!(
            "{csi_mode:?} CSI mode with {known} estimated cascaded channels"
        )));
    }
    solve_scheme_block(Scheme::Noma, csi, params, None, rng)
}
