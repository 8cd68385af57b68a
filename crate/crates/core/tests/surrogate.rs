use monosem::cohort::{generate_cohort, ClassSet, Cohort, Distribution, Split, PAD};
use monosem::surrogate::{train_classifier, Classifier, ClassifierConfig, TrainConfig};
use monosem::{jacobian, Tensor};

fn split(c: &Cohort, seed: u64) -> (Cohort, Cohort, Cohort) {
    let p = c.partition(seed);
    (
        c.subset(&p.train, Split::Train),
        c.subset(&p.val, Split::Val),
        c.subset(&p.test, Split::Test),
    )
}

fn trained(seed: u64) -> (Classifier, Cohort, Cohort) {
    let c = generate_cohort(seed, 200, ClassSet::Binary, Distribution::Iid).unwrap();
    let (tr, va, te) = split(&c, seed);
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (m, rep) = train_classifier(&tr, &va, ClassifierConfig::new(2, seed), &cfg).unwrap();
    eprintln!("trained in {:?}: {:?}", t0.elapsed(), rep.val_accuracy);
    (m, va, te)
}

#[test]
fn binary_cohort_reaches_ninety_percent() {
    let (m, va, te) = trained(1);
    assert!(m.accuracy(&va).unwrap() >= 0.9);
    assert!(m.accuracy(&te).unwrap() >= 0.9);
}

#[test]
fn zero_epochs_returns_initial_model() {
    let c = generate_cohort(2, 40, ClassSet::Binary, Distribution::Iid).unwrap();
    let (tr, va, _) = split(&c, 2);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (m, _) = train_classifier(&tr, &va, ClassifierConfig::new(2, 5), &cfg).unwrap();
    assert_eq!(m, Classifier::new(ClassifierConfig::new(2, 5)).unwrap());
    let acc = m.accuracy(&c).unwrap();
    assert!((acc - 0.5).abs() < 0.2);
}

#[test]
fn zero_lr_leaves_parameters() {
    let c = generate_cohort(2, 40, ClassSet::Binary, Distribution::Iid).unwrap();
    let (tr, _, _) = split(&c, 2);
    let empty = tr.subset(&[], Split::Val);
    let cfg = TrainConfig {
        epochs: 2,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let (m, rep) = train_classifier(&tr, &empty, ClassifierConfig::new(2, 5), &cfg).unwrap();
    assert!(rep.steps == 0 || m == Classifier::new(ClassifierConfig::new(2, 5)).unwrap());
    assert_eq!(m, Classifier::new(ClassifierConfig::new(2, 5)).unwrap());
}

#[test]
fn probabilities_sum_to_one_and_pads_are_ignored() {
    let c = generate_cohort(3, 20, ClassSet::ThreeClass.clone(), Distribution::Iid).unwrap_or_else(
        |_| generate_cohort(3, 30, ClassSet::ThreeClass, Distribution::Iid).unwrap(),
    );
    let m = Classifier::new(ClassifierConfig::new(3, 1)).unwrap();
    for s in &c.samples {
        let p = m.predict(s).unwrap();
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    // shortening the pad tail or re-padding a sample never changes the output
    let s = &c.samples[0];
    let mut shorter = s.clone();
    shorter.tokens.truncate(300);
    let mut longer = s.clone();
    longer.tokens.extend(std::iter::repeat(PAD).take(10));
    let a = m.layer_activations(s).unwrap();
    assert_eq!(a, m.layer_activations(&shorter).unwrap());
    assert_eq!(a, m.layer_activations(&longer).unwrap());
}

#[test]
fn all_pad_input_differs_from_content() {
    let c = generate_cohort(3, 20, ClassSet::Binary, Distribution::Iid).unwrap();
    let m = Classifier::new(ClassifierConfig::new(2, 1)).unwrap();
    let mut blank = c.samples[0].clone();
    blank.tokens[1..].iter_mut().for_each(|t| *t = PAD);
    assert_ne!(
        m.layer_activations(&blank).unwrap(),
        m.layer_activations(&c.samples[0]).unwrap()
    );
}

#[test]
fn trained_model_has_a_gradient_path_to_embeddings() {
    let (m, va, _) = trained(4);
    let e = m.embed(&va.samples[0]);
    let j = jacobian(&e.embeddings, |t, x| {
        let p = m.bind(t, false);
        let a = m.activation_from(&p, x, &e.positions)?;
        m.head_probs(&p, a)
    })
    .unwrap();
    assert!(j.is_finite());
    assert!(j.data().iter().any(|&v| v != 0.0));
}

#[test]
fn checkpoint_round_trip() {
    let m = Classifier::new(ClassifierConfig::new(2, 9)).unwrap();
    let back = Classifier::from_checkpoint_bytes(&m.checkpoint_bytes().unwrap()).unwrap();
    assert_eq!(m, back);
    let _ = Tensor::scalar(0.0);
}
