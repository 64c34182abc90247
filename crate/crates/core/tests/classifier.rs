use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unvp::classifier::{ClassifierConfig, ClassifierModel, Evaluation, FeatureLayer};
use unvp::data::generate_glyphs;
use unvp::gradcheck::randomize_params;
use unvp::{Error, Tape, Tensor};

fn model(classes: usize, seed: u64) -> ClassifierModel {
    let cfg = ClassifierConfig {
        conv1_channels: 4,
        conv2_channels: 6,
        kernel: 3,
        hidden: 12,
        ..ClassifierConfig::default()
    };
    ClassifierModel::new(&[1, 8, 8], classes, cfg, seed).unwrap()
}

fn randomized(classes: usize, seed: u64) -> ClassifierModel {
    let mut m = model(classes, seed);
    randomize_params(m.params_mut(), 0.4, &mut ChaCha8Rng::seed_from_u64(seed));
    m
}

fn cross_entropy(clf: &ClassifierModel, logits: Tensor, labels: &[usize]) -> Vec<f64> {
    let tape = Tape::new();
    clf.cross_entropy_on(tape.constant(logits), labels).unwrap().value().into_data()
}

#[test]
fn cross_entropy_oracles() {
    let clf = model(10, 0);
    let uniform = cross_entropy(&clf, Tensor::zeros(&[3, 10]), &[0, 4, 9]);
    for l in uniform {
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.302585).abs() < 1e-6);
    }
    let mut saturated = Tensor::zeros(&[1, 10]);
    saturated.data_mut()[7] = 50.0;
    assert!(cross_entropy(&clf, saturated, &[7])[0] < 1e-8);

    // Scalar-loop oracle on a 2-class, 2-sample batch.
    let clf = model(2, 0);
    let logits = [[0.3, -1.2], [2.5, 0.7]];
    let labels = [1, 0];
    let naive: Vec<f64> = logits
        .iter()
        .zip(labels)
        .map(|(row, y)| {
            let norm: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            -(row[y].exp() / norm).ln()
        })
        .collect();
    let got = cross_entropy(&clf, Tensor::new(vec![2, 2], logits.concat()).unwrap(), &labels);
    for (g, n) in got.iter().zip(&naive) {
        assert!((g - n).abs() < 1e-12);
    }
    let err = clf.loss(&Tensor::zeros(&[1, 1, 8, 8]), &[2]).unwrap_err();
    assert!(matches!(err, Error::Domain(_)), "{err}");
}

#[test]
fn shifting_logits_changes_nothing() {
    let clf = model(5, 0);
    let logits = Tensor::from_fn(&[4, 5], |i| ((i * 37) % 11) as f64 - 5.0);
    let labels = [0, 3, 4, 1];
    let base = cross_entropy(&clf, logits.clone(), &labels);
    let shifted = cross_entropy(&clf, logits.map(|v| v + 123.25), &labels);
    for (a, b) in base.iter().zip(&shifted) {
        assert!((a - b).abs() < 1e-10);
        assert!(*a >= 0.0);
    }
}

#[test]
fn fresh_model_has_zero_logits_and_features() {
    let clf = model(10, 3);
    let images = Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 7) as f64 / 7.0);
    assert!(clf.forward_logits(&images).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(clf.features(&Tensor::zeros(&[1, 8, 8])).unwrap().iter().all(|&v| v == 0.0));
    assert_eq!(clf.features(&Tensor::zeros(&[1, 8, 8])).unwrap().len(), 12);
    assert!((clf.loss(&images, &[1, 2]).unwrap() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn rows_are_independent_and_features_deterministic() {
    let clf = randomized(3, 4);
    let one = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.11).sin().abs());
    let mut two = one.clone();
    two.append_rows(&one).unwrap();
    let (l1, l2) = (clf.forward_logits(&one).unwrap(), clf.forward_logits(&two).unwrap());
    assert_eq!(l2.shape(), &[2, 3]);
    assert_eq!(&l2.data()[..3], l1.data());
    assert_eq!(&l2.data()[3..], l1.data());
    let image = one.reshape(&[1, 8, 8]).unwrap();
    assert_eq!(clf.features(&image).unwrap(), clf.features(&image.clone()).unwrap());
    let logits_cfg = ClassifierConfig {
        feature_layer: FeatureLayer::Logits,
        ..*clf.config()
    };
    let mut as_logits = ClassifierModel::new(&[1, 8, 8], 3, logits_cfg, 0).unwrap();
    as_logits.params_mut().load_entries(&clf.to_entries()).unwrap();
    assert_eq!(as_logits.features(&image).unwrap(), l1.data());
    assert!(matches!(clf.forward_logits(&Tensor::zeros(&[1, 1, 8, 9])), Err(Error::Shape { .. })));
}

#[test]
fn softmax_of_logits_sums_to_one() {
    let clf = randomized(6, 9);
    let images = Tensor::from_fn(&[5, 1, 8, 8], |i| ((i * 13) % 17) as f64 / 17.0);
    let tape = Tape::new();
    let p = tape.constant(clf.forward_logits(&images).unwrap()).softmax().unwrap().value();
    for row in p.data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn evaluation_examples() {
    let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
    let zeros = Evaluation::from_predictions(&vec![0; 100], &labels, 10).unwrap();
    assert_eq!(zeros.accuracy, 0.1);
    assert_eq!(Evaluation::from_predictions(&labels, &labels, 10).unwrap().accuracy, 1.0);
    assert!(matches!(Evaluation::from_predictions(&[], &[], 10), Err(Error::Domain(_))));

    let clf = randomized(10, 5);
    let ds = generate_glyphs(60, 10, 8, 2).unwrap();
    let eval = clf.evaluate(&ds).unwrap();
    let trace: usize = (0..10).map(|c| eval.confusion[c][c]).sum();
    let total: usize = eval.confusion.iter().flatten().sum();
    assert_eq!(total, 60);
    assert_eq!(eval.accuracy, trace as f64 / total as f64);

    // Order of the dataset does not matter.
    let mut order: Vec<usize> = (0..60).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let shuffled = ds.subset(&order).unwrap();
    assert_eq!(clf.evaluate(&shuffled).unwrap().accuracy, eval.accuracy);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let clf = randomized(3, 6);
    let images = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f64 * 0.23).cos().abs());
    let labels = [2, 0];
    let tape = Tape::new();
    let bound = clf.params().bind(&tape);
    let loss = clf.loss_on(&bound, tape.constant(images.clone()), &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for (id, _, value) in clf.params().iter() {
        let analytic = grads.get(bound[id]).unwrap();
        for i in (0..value.len()).step_by(7) {
            let at = |delta: f64| {
                let mut m = clf.clone();
                let mut v = value.clone();
                v.data_mut()[i] += delta;
                m.params_mut().set(id, v).unwrap();
                m.loss(&images, &labels).unwrap()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3) < 1e-4);
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn checkpoint_entries_restore_predictions() {
    let clf = randomized(4, 8);
    let back = ClassifierModel::from_entries(&clf.to_entries()).unwrap();
    let images = Tensor::from_fn(&[3, 1, 8, 8], |i| (i % 5) as f64 / 5.0);
    assert_eq!(back.forward_logits(&images).unwrap(), clf.forward_logits(&images).unwrap());
    let mut entries = clf.to_entries();
    entries.retain(|(k, _)| k != "clf.config");
    assert!(ClassifierModel::from_entries(&entries).is_err());
}
