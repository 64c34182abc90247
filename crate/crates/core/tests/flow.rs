use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unvp::checkpoint;
use unvp::data::two_gaussians_2d;
use unvp::flow::{fit_flow, gaussian_log_density, ClassPrior, FlowConfig, FlowModel};
use unvp::gradcheck::random_flow;
use unvp::{Error, Tape, Tensor};

/// Central-difference Jacobian of the flow at one point, step 1e-6.
fn jacobian(flow: &FlowModel, x: &[f64]) -> Vec<Vec<f64>> {
    let d = x.len();
    fd_jacobian(|p| flow.forward(&Tensor::new(vec![1, d], p.to_vec()).unwrap()).unwrap().0.into_data(), x)
}

fn fd_jacobian(eval: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Vec<Vec<f64>> {
    let h = 1e-6;
    let d = x.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut plus = x.to_vec();
        plus[j] += h;
        let mut minus = x.to_vec();
        minus[j] -= h;
        let (fp, fm) = (eval(&plus), eval(&minus));
        for i in 0..d {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// ln|det| by Gaussian elimination with partial pivoting.
fn log_abs_det(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut total = 0.0;
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        total += p.abs().ln();
        for row in col + 1..n {
            let factor = m[row][col] / p;
            for k in col..n {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    total
}

fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn single_layer_log_det_matches_jacobian() {
    let flow = random_flow(4, 2, 11).unwrap();
    let layer = |p: &[f64]| {
        let tape = Tape::new();
        let bound = flow.params().bind_frozen(&tape);
        let (y, ld) = flow.layers()[1].forward(&bound, tape.constant(Tensor::new(vec![1, 4], p.to_vec()).unwrap())).unwrap();
        (y.value().into_data(), ld.value().data()[0])
    };
    for x in random_points(10, 4, 1) {
        let ld = layer(&x).1;
        assert!(ld.abs() > 1e-3, "layer should not be volume preserving");
        assert!((ld - log_abs_det(fd_jacobian(|p| layer(p).0, &x))).abs() < 1e-5);
    }
}

#[test]
fn total_log_det_matches_jacobian_in_low_dimensions() {
    for d in 2..=6 {
        let flow = random_flow(d, 4, 20 + d as u64).unwrap();
        for x in random_points(100, d, d as u64) {
            let (_, ld) = flow.forward(&Tensor::new(vec![1, d], x.clone()).unwrap()).unwrap();
            let err = (ld[0] - log_abs_det(jacobian(&flow, &x))).abs();
            assert!(err < 1e-5, "d={d} error {err:e}");
        }
    }
}

#[test]
fn thousand_round_trips() {
    let flow = random_flow(8, 4, 3).unwrap();
    let x = Tensor::new(vec![1000, 8], random_points(1000, 8, 9).concat()).unwrap();
    let (z, _) = flow.forward(&x).unwrap();
    assert!(flow.inverse(&z).unwrap().max_abs_diff(&x) < 1e-9);
    // And the other way round.
    let back = flow.forward(&flow.inverse(&x).unwrap()).unwrap().0;
    assert!(back.max_abs_diff(&x) < 1e-9);
}

#[test]
fn analytic_likelihoods_of_identity_flow() {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let flow = FlowModel::new(&[2], 2, FlowConfig::default(), 0).unwrap();
    // Class 0 has prior N((3, 0), I); x = (4, 0) sits one unit from the mean.
    let ll = flow.log_likelihood(&Tensor::new(vec![1, 2], vec![4.0, 0.0]).unwrap(), &[0]).unwrap();
    assert!((ll[0] - (-ln_2pi - 0.5)).abs() < 1e-12);
    let ll = flow.log_likelihood(&Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap(), &[1]).unwrap();
    assert!((ll[0] + ln_2pi).abs() < 1e-12);

    let unit = ClassPrior::new(vec![0.0], vec![1.0]).unwrap();
    let one = gaussian_log_density(&[1.0], &unit).unwrap();
    assert!((one - (-0.5 * ln_2pi - 0.5)).abs() < 1e-15);
    assert!((one + 1.41894).abs() < 1e-5);

    let d = 5;
    let prior = ClassPrior::new(vec![0.0; d], vec![1.0; d]).unwrap();
    let at_mode = gaussian_log_density(&[0.0; 5], &prior).unwrap();
    assert!((at_mode + d as f64 / 2.0 * ln_2pi).abs() < 1e-12);
    let prior = ClassPrior::new(vec![1.0], vec![4.0]).unwrap();
    let expected = -0.5 * (ln_2pi + 4f64.ln() + 1.0);
    assert!((gaussian_log_density(&[3.0], &prior).unwrap() - expected).abs() < 1e-12);
    assert!(ClassPrior::new(vec![0.0], vec![1e-9]).is_err());
}

#[test]
fn likelihood_input_gradient_matches_finite_differences() {
    let flow = random_flow(4, 4, 5).unwrap();
    let x = Tensor::new(vec![2, 4], random_points(2, 4, 6).concat()).unwrap();
    let labels = [0, 1];
    let tape = Tape::new();
    let bound = flow.params().bind_frozen(&tape);
    let xv = tape.leaf(x.clone());
    let ll = flow.log_likelihood_on(&bound, xv, &labels).unwrap().sum().unwrap();
    let grads = tape.backward(ll).unwrap();
    let analytic = grads.get(xv).unwrap();
    let h = 1e-5;
    for i in 0..x.len() {
        let shifted = |delta: f64| {
            let mut p = x.clone();
            p.data_mut()[i] += delta;
            flow.log_likelihood(&p, &labels).unwrap().iter().sum::<f64>()
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let a = analytic.data()[i];
        assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3) < 1e-4);
    }
}

#[test]
fn trained_density_integrates_to_one() {
    let data = two_gaussians_2d(2000, 7).unwrap();
    let cfg = FlowConfig {
        hidden: 32,
        ..FlowConfig::default()
    };
    let mut flow = FlowModel::new(&[2], 2, cfg, 7).unwrap();
    let initial = flow.dataset_log_likelihood(&data).unwrap();
    let initial_nll = -initial.iter().sum::<f64>() / initial.len() as f64;
    let trace = fit_flow(&mut flow, &data, 50, 1e-3, 100, 7).unwrap();
    assert_eq!(trace.len(), 50);
    let last = *trace.last().unwrap();
    assert!(last <= 0.7 * initial_nll, "initial {initial_nll}, final {last}");

    // Midpoint rule on a 200×200 grid over [−6, 6]².
    let n = 200;
    let step = 12.0 / n as f64;
    let points: Vec<f64> = (0..n * n)
        .flat_map(|k| [-6.0 + (k / n) as f64 * step + step / 2.0, -6.0 + (k % n) as f64 * step + step / 2.0])
        .collect();
    let grid = Tensor::new(vec![n * n, 2], points).unwrap();
    let mass: f64 = flow.log_likelihood(&grid, &vec![0; n * n]).unwrap().iter().map(|l| l.exp()).sum::<f64>() * step * step;
    assert!((mass - 1.0).abs() <= 1e-2, "mass {mass}");
}

#[test]
fn zero_epochs_and_divergence() {
    let data = two_gaussians_2d(20, 1).unwrap();
    let mut flow = random_flow(2, 2, 1).unwrap();
    let before = flow.to_entries();
    assert!(fit_flow(&mut flow, &data, 0, 1e-3, 8, 0).unwrap().is_empty());
    assert_eq!(flow.to_entries(), before);

    let mut bad = data.clone();
    bad.images.data_mut()[3] = f64::NAN;
    let err = fit_flow(&mut flow, &bad, 2, 1e-3, 8, 0).unwrap_err();
    assert!(matches!(err, Error::TrainingDiverged { epoch: 0, .. }), "{err}");
}

#[test]
fn overflow_names_the_layer() {
    let flow = random_flow(4, 4, 2).unwrap();
    let x = Tensor::new(vec![1, 4], vec![1e308, -1e308, 1e308, 1e308]).unwrap();
    match flow.forward(&x) {
        Err(Error::NumericOverflow { layer }) => assert!(layer < 4),
        other => panic!("expected overflow, got {other:?}"),
    }
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.ckpt");
    let flow = random_flow(6, 4, 8).unwrap();
    checkpoint::save(&path, &flow.to_entries()).unwrap();
    let back = FlowModel::from_entries(&checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.to_entries(), flow.to_entries());
    let x = Tensor::new(vec![3, 6], random_points(3, 6, 2).concat()).unwrap();
    assert_eq!(back.forward(&x).unwrap(), flow.forward(&x).unwrap());
    for (a, b) in back.layers().iter().zip(flow.layers()) {
        assert_eq!(a.mask(), b.mask());
    }
}
