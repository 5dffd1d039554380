use geoerm::manifold::orthonormality_residual;
use geoerm::objective::LossKind;
use geoerm::synthdata::*;
use nalgebra::{DMatrix, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(tasks: usize, n: usize, p: usize, r: usize, h: f64, eps: f64, seed: u64) -> ExperimentConfig {
    ExperimentConfig { tasks, n, p, r, h, eps, seed, ..ExperimentConfig::default() }
}

#[test]
fn perturbation_is_uniform_by_ks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draws: Vec<f64> = Vec::new();
    while draws.len() < 10_000 {
        draws.extend(gen_perturbation(30, 5, 0.5, &mut rng).iter());
    }
    draws.truncate(10_000);
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let d = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = (x + 0.5).clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max);
    // asymptotic 1% critical value
    assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
    assert!(draws.iter().all(|x| (-0.5..0.5).contains(x)));
}

#[test]
fn zero_heterogeneity_reproduces_center() {
    let c = cfg(4, 10, 12, 3, 0.0, 0.0, 3);
    let (_, truth) = gen_suite(&c).unwrap();
    for a in truth.a_true.iter().flatten() {
        assert!((a.matrix() - truth.center.matrix()).norm() <= 1e-12);
    }
}

#[test]
fn regular_tasks_are_orthonormal_and_isometric() {
    let c = cfg(20, 5, 15, 4, 0.9, 0.2, 8);
    let (_, truth) = gen_suite(&c).unwrap();
    assert_eq!(truth.outliers, vec![16, 17, 18, 19]);
    for &t in &truth.regular {
        let a = truth.a_true[t].as_ref().unwrap();
        assert!(orthonormality_residual(a.matrix()) <= 1e-8);
        let theta = a.matrix().tr_mul(&truth.beta_true[t]);
        assert!((theta.norm() - truth.beta_true[t].norm()).abs() <= 1e-10);
        assert!(theta.iter().all(|v| v.abs() < c.coef_range + 1e-12));
    }
}

fn mean_principal_angle(h: f64) -> f64 {
    let c = cfg(100, 1, 30, 5, h, 0.0, 21);
    let (_, truth) = gen_suite(&c).unwrap();
    let mut total = 0.0;
    let mut count = 0.0;
    for a in truth.a_true.iter().flatten() {
        let cos = SVD::new(truth.center.matrix().tr_mul(a.matrix()), false, false).singular_values;
        for v in cos.iter() {
            total += v.clamp(-1.0, 1.0).acos();
            count += 1.0;
        }
    }
    total / count
}

#[test]
fn heterogeneity_is_monotone() {
    let angles: Vec<f64> = [0.05, 0.1, 0.3, 0.5, 0.9].iter().map(|&h| mean_principal_angle(h)).collect();
    assert!(angles.windows(2).all(|w| w[0] < w[1]), "{angles:?}");
}

#[test]
fn regression_noise_has_unit_variance() {
    let c = cfg(10, 10_000, 3, 2, 0.3, 0.0, 4);
    let (data, truth) = gen_suite(&c).unwrap();
    let resid: Vec<f64> = data
        .iter()
        .zip(&truth.beta_true)
        .flat_map(|(d, b)| (d.y() - d.x() * b).iter().copied().collect::<Vec<_>>())
        .collect();
    let n = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / n;
    let var = resid.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var - 1.0).abs() <= 0.05, "{var}");
}

#[test]
fn outlier_moments() {
    let c = cfg(1, 100_000, 1, 1, 0.5, 0.0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (task, _) = gen_outlier_task(&c, &mut rng).unwrap();
    let xs: Vec<f64> = task.x().iter().copied().collect();
    let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
    assert!((var - 2.0).abs() <= 0.1, "{var}");

    let wide = cfg(1, 1, 10_000, 1, 0.5, 0.0, 0);
    let (_, beta) = gen_outlier_task(&wide, &mut rng).unwrap();
    assert!(beta.iter().all(|b| b.abs() < 3.0));
    assert!(beta.mean().abs() <= 0.05, "{}", beta.mean());
}

#[test]
fn classification_labels_are_binary() {
    let c = ExperimentConfig { loss: LossKind::Classification, ..cfg(5, 400, 6, 2, 0.3, 0.2, 2) };
    let (data, truth) = gen_suite(&c).unwrap();
    for (d, b) in data.iter().zip(&truth.beta_true) {
        assert!(d.y().iter().all(|&y| y == 0.0 || y == 1.0));
        let expected: f64 = (d.x() * b).iter().map(|&z| geoerm::objective::sigmoid(z)).sum();
        assert!((d.y().sum() - expected).abs() <= 4.0 * (d.n() as f64).sqrt());
    }
}

#[test]
fn suites_are_deterministic_and_nested() {
    let small = cfg(50, 20, 8, 2, 0.4, 0.0, 77);
    let (a, ta) = gen_suite(&small).unwrap();
    let (b, tb) = gen_suite(&small).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);

    let (big, tbig) = gen_suite(&ExperimentConfig { tasks: 60, ..small.clone() }).unwrap();
    assert_eq!(&big[..50], &a[..]);
    assert_eq!(&tbig.beta_true[..50], &ta.beta_true[..]);

    // with outliers only the indices regular in both runs coincide
    let eps = ExperimentConfig { eps: 0.1, ..small };
    let (a, _) = gen_suite(&eps).unwrap();
    let (big, _) = gen_suite(&ExperimentConfig { tasks: 60, ..eps }).unwrap();
    assert_eq!(&big[..45], &a[..45]);
    assert_ne!(big[45], a[45]);
}

#[test]
fn default_hyperparams_follow_formula() {
    let c = cfg(50, 100, 50, 5, 0.5, 0.1, 0);
    let hp = c.hyperparams();
    assert!((hp.lambda - 16.4183).abs() < 1e-4);
    assert!((hp.gamma - 7.3425).abs() < 1e-4);
    let fixed = ExperimentConfig { lambda: Some(1.5), ..c };
    assert_eq!(fixed.hyperparams().lambda, 1.5);
}

#[test]
fn suite_dump_round_trips() {
    let c = cfg(3, 4, 5, 2, 0.3, 0.34, 12);
    let (data, truth) = gen_suite(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_suite(dir.path(), &data, &truth).unwrap();

    let text = std::fs::read_to_string(dir.path().join("task_1.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x_0,x_1,x_2,x_3,x_4,y");
    let parsed: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    let x = DMatrix::from_fn(4, 5, |i, j| parsed[i][j]);
    assert_eq!(&x, data[1].x());
    assert_eq!(parsed[2][5], data[1].y()[2]);

    let truth_csv = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    let rows: Vec<&str> = truth_csv.lines().collect();
    assert!(rows[0].starts_with("t,is_outlier,beta_0"));
    assert!(rows[3].starts_with("2,1,"));
    assert!(rows[1].starts_with("0,0,"));

    let back: ExperimentConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(back, c);
}
