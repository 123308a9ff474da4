use fmap_core::eigensolver::LobpcgOptions;
use fmap_core::fmap_optimizer::OptimizerConfig;
use fmap_core::grad_engine::attention_forward;
use fmap_core::interchange::FeatureGrid;
use fmap_core::laplacian::{build_laplacian, edge_weights_with, SigmaMode};
use fmap_core::par::Execution;
use fmap_core::pipeline::{compute_basis, match_pair};
use fmap_core::pointmap_transfer::fmap_to_pointmap_with;
use nalgebra::DMatrix;

fn grid(h: usize, w: usize, d: usize, phase: f32) -> FeatureGrid {
    FeatureGrid::from_fn(h, w, d, |y, x, c| {
        2.0 + ((y as f32 * 0.6 + phase) * (c as f32 * 0.3 + 1.0)).sin() + ((x as f32 * 0.5) * (c as f32 * 0.2 + 1.0)).cos()
    })
    .unwrap()
}

fn wave(r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |i, j| ((i * 13 + j * 7) as f64 * s).sin())
}

#[test]
fn execution_policies_agree_bitwise() {
    let g = grid(9, 11, 6, 0.2);
    let a = edge_weights_with(&g, 1.3, Execution::Sequential).unwrap();
    let b = edge_weights_with(&g, 1.3, Execution::Parallel).unwrap();
    assert_eq!(a, b);

    let l = build_laplacian(&a);
    let x = wave(l.n(), 7, 0.31);
    assert_eq!(l.mul_block_with(&x, Execution::Sequential), l.mul_block_with(&x, Execution::Parallel));

    let (q, k, v) = (wave(150, 8, 0.17), wave(150, 8, 0.23), wave(150, 5, 0.29));
    assert_eq!(
        attention_forward(&q, &k, &v, 0.35, Execution::Sequential),
        attention_forward(&q, &k, &v, 0.35, Execution::Parallel)
    );

    let basis = compute_basis(&g, SigmaMode::Values, &LobpcgOptions { k: 12, ..Default::default() })
        .unwrap()
        .basis;
    let c = DMatrix::identity(12, 12) + wave(12, 12, 0.41) * 0.2;
    assert_eq!(
        fmap_to_pointmap_with(&c, &basis, &basis, Execution::Sequential).unwrap(),
        fmap_to_pointmap_with(&c, &basis, &basis, Execution::Parallel).unwrap()
    );
}

#[test]
fn pair_matching_runs_end_to_end() {
    let (gm, gn) = (grid(8, 8, 6, 0.0), grid(8, 8, 6, 0.4));
    let opts = LobpcgOptions { k: 16, ..Default::default() };
    let bm = compute_basis(&gm, SigmaMode::Values, &opts).unwrap().basis;
    let bn = compute_basis(&gn, SigmaMode::Values, &opts).unwrap().basis;
    let config = OptimizerConfig {
        iterations: 40,
        latent_r: 4,
        refine: None,
        ..Default::default()
    };
    let (outcome, report) = match_pair(&bm, &bn, &gm, &gn, &config);
    let outcome = outcome.unwrap();
    assert_eq!(outcome.fmap.c.shape(), (16, 16));
    assert_eq!(outcome.correspondence.targets.len(), 64);
    assert!(outcome.correspondence.targets.iter().all(|&t| t < 64));
    assert_eq!(report.loss_trace.len(), 40);
    assert!(report.failure.is_none());

    // Descriptors at a different resolution are resampled onto the basis grid.
    let coarse = grid(4, 4, 6, 0.0);
    let (resized, _) = match_pair(&bm, &bn, &coarse, &coarse, &config);
    assert!(resized.is_ok());
}
