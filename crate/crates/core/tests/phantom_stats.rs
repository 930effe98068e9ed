use betafact::models::{check_constraints, ModelKind};
use betafact::phantom::{add_noise, generate, NoiseModel, PhantomSpec};
use ndarray::{Array2, Axis};

fn small(kind: ModelKind, noise: NoiseModel) -> PhantomSpec {
    PhantomSpec { voxels: 400, kind, noise, seed: 3, ..PhantomSpec::default() }
}

fn rel_frob(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).sum().sqrt() / b.mapv(|v| v * v).sum().sqrt()
}

#[test]
fn large_poisson_scale_is_nearly_noiseless() {
    let p = generate(&small(ModelKind::Lmm, NoiseModel::Poisson { scale: 1e6 })).unwrap();
    assert!(rel_frob(p.data.values(), &p.truth.x) <= 1e-2);
}

#[test]
fn truth_is_feasible_for_every_model() {
    for kind in [ModelKind::Nmf, ModelKind::Lmm, ModelKind::Slmm] {
        let p = generate(&small(kind, NoiseModel::Gamma { shape: 10.0 })).unwrap();
        assert!(check_constraints(kind, &p.truth.theta()).is_empty(), "{kind}");
        assert!(p.data.values().iter().all(|&v| v > 0.0));
    }
}

/// Column means over 10^4 replicate draws of one voxel stay within three
/// standard errors of the clean value.
#[test]
fn noise_is_unbiased() {
    let p = generate(&small(ModelKind::Lmm, NoiseModel::Gaussian { sigma: 0.0 })).unwrap();
    let voxel = p.truth.x.column(123).to_owned();
    let peak = voxel.fold(0.0f64, |a, &b| a.max(b));
    let reps = 10_000;
    let x = Array2::from_shape_fn((voxel.len(), reps), |(l, _)| voxel[l]);
    let sigma = 0.02 * peak;
    for (i, noise) in
        [NoiseModel::Gaussian { sigma }, NoiseModel::Poisson { scale: 50.0 / peak }, NoiseModel::Gamma { shape: 4.0 }]
            .into_iter()
            .enumerate()
    {
        let y = add_noise(&x, &noise, 40 + i as u64).unwrap();
        let mean = y.mean_axis(Axis(1)).unwrap();
        let var = y.var_axis(Axis(1), 1.0);
        for l in 0..voxel.len() {
            // Clamping at zero biases the Gaussian mean where x is within a few σ of 0.
            if matches!(noise, NoiseModel::Gaussian { .. }) && voxel[l] < 5.0 * sigma {
                continue;
            }
            let se = (var[l] / reps as f64).sqrt();
            assert!(
                (mean[l] - voxel[l]).abs() <= 3.0 * se + 1e-12,
                "{noise} frame {l}: mean {} vs {} (se {se})",
                mean[l],
                voxel[l]
            );
        }
    }
}

#[test]
fn noise_seed_changes_only_the_noise() {
    let spec = small(ModelKind::Slmm, NoiseModel::Poisson { scale: 100.0 });
    let a = generate(&PhantomSpec { noise_seed: Some(1), ..spec.clone() }).unwrap();
    let b = generate(&PhantomSpec { noise_seed: Some(2), ..spec }).unwrap();
    assert_eq!(a.truth, b.truth);
    assert_ne!(a.data, b.data);
}
