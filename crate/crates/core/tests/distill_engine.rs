use indexmap::IndexMap;
use segdistill::data::{gen_dense_scene, gen_unlabeled_scene, BatchPlan, Domain, Sample, SceneParams};
use segdistill::distill::*;
use segdistill::model::{build_tnet, Model, ModelConfig};
use segdistill::train::{train, RunStatus, Strategy, TrainConfig, TrainData};
use segdistill::{Error, RngState, Tensor};

fn tiny_samples(n: usize, side: usize, seed: u64, domain: Domain) -> Vec<Sample> {
    let mut rng = RngState::new(seed);
    (0..n)
        .map(|i| {
            let image = Tensor::new(&[3, side, side], (0..3 * side * side).map(|_| rng.index(256) as f32).collect()).unwrap();
            let labels = (domain != Domain::Unlabeled).then(|| (0..side * side).map(|_| rng.index(4) as u8).collect());
            Sample { id: format!("{domain}-{seed}-{i}"), image, labels, domain }
        })
        .collect()
}

/// Distribution with `label` at 0.55 and the rest spread randomly.
fn peaked(label: usize, classes: usize, rng: &mut RngState) -> Vec<f32> {
    let rest: Vec<f64> = (0..classes).map(|_| rng.uniform_range(0.1, 1.0)).collect();
    let others: f64 = rest.iter().enumerate().filter(|(c, _)| *c != label).map(|(_, v)| v).sum();
    (0..classes).map(|c| if c == label { 0.55 } else { (0.45 * rest[c] / others) as f32 }).collect()
}

fn cache_from_labels(samples: &[Sample], classes: usize, label_of: impl Fn(usize, usize) -> u8, one_hot: bool) -> TeacherCache {
    let mut rng = RngState::new(99);
    let mut entries = IndexMap::new();
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.height(), s.width());
        let labels: Vec<u8> = (0..h * w).map(|p| label_of(i, p)).collect();
        let mut probs = vec![0f32; classes * h * w];
        for (p, &l) in labels.iter().enumerate() {
            let dist = if one_hot { (0..classes).map(|c| if c == l as usize { 1.0 } else { 0.0 }).collect() } else { peaked(l as usize, classes, &mut rng) };
            for c in 0..classes {
                probs[c * h * w + p] = dist[c];
            }
        }
        entries.insert(s.id.clone(), TeacherEntry { probs: Tensor::new(&[classes, h, w], probs).unwrap(), labels });
    }
    TeacherCache::from_entries("test", entries).unwrap()
}

fn student(seed: u64) -> Model<f32> {
    build_tnet(&ModelConfig::tnet(2, 4, 3, 4), &mut RngState::new(seed)).unwrap()
}

fn transfer(method: Method, plan: BatchPlan, steps: usize) -> TransferConfig {
    TransferConfig { method, batch: plan, epochs: 1, steps_per_epoch: steps, seed: 3, ..TransferConfig::default() }
}

#[test]
fn label_transfer_from_a_perfect_teacher_is_supervised_training() {
    let samples = tiny_samples(10, 8, 1, Domain::Dense);
    let truth: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone().unwrap()).collect();
    let cache = cache_from_labels(&samples, 4, |i, p| truth[i][p], true);
    let plan = BatchPlan { n_dense: 3, n_sparse: 0, lambda: 0.25 };

    let mut a = student(1);
    let set = TransferSet::from_samples(&samples).unwrap();
    let distilled = distill(&mut a, &cache, &set, &transfer(Method::TkL, plan, 6)).unwrap();

    let mut b = student(1);
    let cfg = TrainConfig {
        strategy: Strategy::Bgc,
        epochs: 1,
        steps_per_epoch: 6,
        batch: plan,
        seed: 3,
        class_weighting: false,
        snapshot_samples: 0,
        ..TrainConfig::default()
    };
    let trained = train(&mut b, TrainData { dense: &samples, ..Default::default() }, &cfg).unwrap();
    let la = distilled.outcome.log.losses();
    assert_eq!(la.len(), 6);
    assert_eq!(la, trained.log.losses());
    assert_eq!(a.params(), b.params());
}

#[test]
fn weighted_transfer_with_a_balanced_teacher_is_scaled_plain_transfer() {
    let mut samples = tiny_samples(8, 8, 2, Domain::Dense);
    samples.extend(tiny_samples(4, 8, 3, Domain::Unlabeled));
    // every image predicts each of the 4 classes on exactly 16 pixels
    let cache = cache_from_labels(&samples, 4, |i, p| ((p + i) % 4) as u8, false);
    let set = TransferSet::from_samples(&samples).unwrap();
    let plan = BatchPlan { n_dense: 2, n_sparse: 1, lambda: 0.5 };
    let mut a = student(4);
    let plain = distill(&mut a, &cache, &set, &transfer(Method::TkSmp, plan, 5)).unwrap();
    let mut b = student(4);
    let weighted = distill(&mut b, &cache, &set, &transfer(Method::TkSmpWce, plan, 5)).unwrap();
    for (p, w) in plain.outcome.log.losses().iter().zip(weighted.outcome.log.losses()) {
        assert!((w - p / 16.0).abs() <= 1e-12 * p.abs(), "{w} vs {p}/16");
    }
    assert_eq!(a.params(), b.params());
}

fn street(n: u64, seed: u64, unlabeled: bool) -> Vec<Sample> {
    let p = SceneParams { width: 16, height: 16, ..SceneParams::default() };
    (0..n)
        .map(|i| {
            let mut rng = RngState::new(seed * 1000 + i);
            if unlabeled {
                gen_unlabeled_scene(&mut rng, &p).unwrap()
            } else {
                gen_dense_scene(&mut rng, &p).unwrap()
            }
        })
        .collect()
}

fn teacher(seed: u64) -> Model<f32> {
    build_tnet(&ModelConfig::tnet(2, 6, 3, 8), &mut RngState::new(seed)).unwrap()
}

#[test]
fn copied_student_starts_at_the_teacher_entropy() {
    let mut samples = street(6, 1, false);
    samples.extend(street(3, 2, true));
    let t = teacher(7);
    let cache = teacher_predict_cache(&t, &samples, None, "k").unwrap();
    let mut entropy = 0.0;
    let mut pixels = 0usize;
    for (_, e) in cache.iter() {
        let plane = e.labels.len();
        for p in 0..plane {
            entropy -= (0..8).map(|c| e.probs.data()[c * plane + p] as f64).filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
            pixels += 1;
        }
    }
    entropy /= pixels as f64;
    let set = TransferSet::from_samples(&samples).unwrap();
    let mut s = t.clone();
    let out = distill(&mut s, &cache, &set, &transfer(Method::TkSmp, BatchPlan::default(), 1)).unwrap();
    assert!((out.initial_loss - entropy).abs() <= 1e-5, "{} vs {entropy}", out.initial_loss);
}

#[test]
fn cache_is_deterministic_consistent_and_roundtrips() {
    let mut samples = street(5, 3, false);
    samples.extend(street(3, 4, true));
    let t = teacher(8);
    let dir = tempfile::tempdir().unwrap();
    let a = teacher_predict_cache(&t, &samples, Some(dir.path()), "key-1").unwrap();
    let b = teacher_predict_cache(&t, &samples, None, "key-1").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
    for (id, e) in a.iter() {
        let plane = e.labels.len();
        assert_eq!(segdistill::loss::argmax_channels(e.probs.data(), 1, 8, plane), e.labels, "{id}");
        for p in 0..plane {
            let s: f64 = (0..8).map(|c| e.probs.data()[c * plane + p] as f64).sum();
            assert!((s - 1.0).abs() <= 1e-3);
        }
    }
    let back = TeacherCache::load(dir.path()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.key(), "key-1");

    // probabilities plus labels, both as 4-byte floats
    let size: u64 = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().metadata().unwrap().len()).sum();
    let probs = 8 * 8 * 16 * 16 * 4;
    let with_labels = 8 * 9 * 16 * 16 * 4;
    assert!(size >= probs && size <= with_labels + 8 * 512, "{size}");
}

#[test]
fn cache_errors() {
    let t = teacher(0);
    let mut odd = street(1, 5, false);
    odd[0].image = Tensor::zeros(&[3, 9, 9]);
    odd[0].labels = Some(vec![0; 81]);
    let e = teacher_predict_cache(&t, &odd, None, "k");
    assert!(matches!(e, Err(Error::Dimension(_))), "{e:?}");

    let samples = street(3, 6, false);
    let cache = teacher_predict_cache(&t, &samples[..2], None, "k").unwrap();
    let set = TransferSet::from_samples(&samples).unwrap();
    let err = distill(&mut teacher(1), &cache, &set, &TransferConfig { epochs: 1, ..TransferConfig::default() }).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains(&samples[2].id)), "{err}");

    let mut entries = IndexMap::new();
    entries.insert("x".to_string(), TeacherEntry { probs: Tensor::full(&[2, 1, 1], 0.7f32), labels: vec![0] });
    assert!(matches!(TeacherCache::from_entries("k", entries), Err(Error::Data(_))));
}

#[test]
fn transfer_never_sees_ground_truth() {
    let mut samples = street(6, 7, false);
    samples.extend(street(2, 8, true));
    let t = teacher(9);
    let cache = teacher_predict_cache(&t, &samples, None, "k").unwrap();
    let stripped: Vec<Sample> = samples
        .iter()
        .map(|s| Sample { labels: s.labels.as_ref().map(|l| vec![0; l.len()]), ..s.clone() })
        .collect();
    let cfg = transfer(Method::TkSmpWce, BatchPlan::default(), 3);
    let mut a = teacher(10);
    let mut b = teacher(10);
    let oa = distill(&mut a, &cache, &TransferSet::from_samples(&samples).unwrap(), &cfg).unwrap();
    let ob = distill(&mut b, &cache, &TransferSet::from_samples(&stripped).unwrap(), &cfg).unwrap();
    assert_eq!(oa, ob);
    assert_eq!(a.params(), b.params());
}

#[test]
fn every_method_is_reproducible() {
    let mut samples = street(6, 11, false);
    samples.extend(street(3, 12, true));
    let t = teacher(13);
    let cache = teacher_predict_cache(&t, &samples, None, "k").unwrap();
    let set = TransferSet::from_samples(&samples).unwrap();
    for m in Method::ALL {
        let cfg = transfer(m, BatchPlan::default(), 3);
        let run = || {
            let mut s = teacher(14);
            let out = distill(&mut s, &cache, &set, &cfg).unwrap();
            (s, out)
        };
        let (sa, oa) = run();
        let (sb, ob) = run();
        assert_eq!(oa.outcome.status, RunStatus::Completed, "{m}");
        assert_eq!(oa.outcome.log.losses(), ob.outcome.log.losses(), "{m}");
        assert_eq!(sa.params(), sb.params());
        if m == Method::TkSmpDrop {
            assert_eq!(sa.config().dropout_p, cfg.dropout_p);
        }
    }
    let no_dropout = TransferConfig { dropout_p: 0.0, ..transfer(Method::TkSmpDrop, BatchPlan::default(), 1) };
    assert!(matches!(no_dropout.validate(), Err(Error::Config(_))));
}

#[test]
fn method_names_parse() {
    for m in Method::ALL {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
    }
    assert_eq!("tk_smp_wce".parse::<Method>().unwrap(), Method::TkSmpWce);
    assert!("tk-x".parse::<Method>().is_err());
}

#[test]
fn report_agreement() {
    let test = street(4, 15, false);
    let (a, b) = (teacher(16), teacher(17));
    let same = transfer_report(&a, &a, &test).unwrap();
    assert_eq!(same.agreement, 100.0);
    assert_eq!(same.student, same.teacher);
    let ab = transfer_report(&a, &b, &test).unwrap();
    let ba = transfer_report(&b, &a, &test).unwrap();
    assert_eq!(ab.agreement, ba.agreement);
    assert_eq!(ab.student, ba.teacher);
    let names: Vec<String> = SceneParams::default().palette;
    let csv = ab.to_csv(&names);
    assert!(csv.starts_with("class,student,teacher,gap\n") && csv.contains("agreement"));
}
