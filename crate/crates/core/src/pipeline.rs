//! End-to-end composition: features to basis, and a pair of bases plus
//! descriptors to a point map.

use crate::eigensolver::{lobpcg_smallest, LobpcgOptions, SpectralBasis};
use crate::error::Result;
use crate::fmap_optimizer::{optimize_pair_with_report, FunctionalMap, OptimizationReport, OptimizerConfig};
use crate::interchange::{resize_feature_grid, FeatureGrid};
use crate::laplacian::{grid_laplacian, SigmaMode};
use crate::pointmap_transfer::{fmap_to_pointmap, CorrespondenceField};

#[derive(Debug, Clone)]
pub struct BasisResult {
    pub basis: SpectralBasis,
    pub sigma: f64,
}

/// Laplacian eigenbasis of a feature grid. `opts.k` is clamped to `n − 1`.
pub fn compute_basis(grid: &FeatureGrid, mode: SigmaMode, opts: &LobpcgOptions) -> Result<BasisResult> {
    let (l, sigma) = grid_laplacian(grid, mode)?;
    let opts = LobpcgOptions {
        k: opts.clamped_k(l.n()),
        ..opts.clone()
    };
    let basis = lobpcg_smallest(&l, &opts)?.with_grid(grid.height(), grid.width())?;
    Ok(BasisResult { basis, sigma })
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub fmap: FunctionalMap,
    pub correspondence: CorrespondenceField,
}

/// Optimizes the map for one pair and extracts the point map. Descriptor
/// grids are resampled onto the basis grids when their sizes differ. The
/// report is returned even when a stage fails.
pub fn match_pair(
    basis_m: &SpectralBasis,
    basis_n: &SpectralBasis,
    desc_m: &FeatureGrid,
    desc_n: &FeatureGrid,
    config: &OptimizerConfig,
) -> (Result<MatchOutcome>, OptimizationReport) {
    let resized = resize_feature_grid(desc_m, basis_m.height, basis_m.width)
        .and_then(|m| Ok((m, resize_feature_grid(desc_n, basis_n.height, basis_n.width)?)));
    let (dm, dn) = match resized {
        Ok(v) => v,
        Err(e) => {
            let mut report = OptimizationReport::empty(config, basis_m.k());
            report.failure = Some(e.to_string());
            return (Err(e), report);
        }
    };
    let (fmap, report) = optimize_pair_with_report(basis_m, basis_n, &dm, &dn, config);
    let result = fmap.and_then(|fmap| {
        let correspondence = fmap_to_pointmap(&fmap.c, basis_m, basis_n)?;
        Ok(MatchOutcome { fmap, correspondence })
    });
    (result, report)
}
