//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 7 to 10 train on the synthetic benchmark and take most of the
//! runtime (about 45 minutes on one core).

use std::time::{Duration, Instant};

use indexmap::IndexMap;
use segdistill::data::*;
use segdistill::distill::*;
use segdistill::gradcheck::grad_check;
use segdistill::graph::{Graph, Mode, Padding, RunningStats, Target};
use segdistill::loss::*;
use segdistill::metrics::{metrics, ConfusionMatrix};
use segdistill::model::*;
use segdistill::train::*;
use segdistill::{NodeId, RngState, Tensor};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = RngState::new(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

fn projected_sum(g: &mut Graph<f64>, x: NodeId, seed: u64) -> segdistill::Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let w = g.leaf(random64(&shape, seed));
    let p = g.mul(x, w)?;
    g.sum(p)
}

// 1 ---------------------------------------------------------------------

fn gradient_correctness() -> Check {
    let t = Instant::now();
    let mut worst_plain = 0.0f64;
    let mut worst_bn = 0.0f64;
    let mut gc = |bn: bool, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> segdistill::Result<NodeId>| {
        let e = grad_check(f, &inputs).map_err(|e| e.to_string())?;
        if bn {
            worst_bn = worst_bn.max(e);
        } else {
            worst_plain = worst_plain.max(e);
        }
        Ok::<(), String>(())
    };
    let x = random64(&[2, 3, 4, 4], 1).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    gc(false, vec![x.clone(), random64(&[2, 3, 4, 4], 2)], &|g, i| {
        let a = g.add(i[0], i[1])?;
        let s = g.sub(a, i[1])?;
        let m = g.mul(s, i[1])?;
        let m = g.scale(m, 1.3)?;
        let r = g.relu(i[0])?;
        let y = g.add(m, r)?;
        projected_sum(g, y, 3)
    })?;
    gc(false, vec![random64(&[1, 2, 2, 2], 4).map(|v| 0.4 + 0.3 * v)], &|g, i| {
        let l = g.log_stable(i[0])?;
        projected_sum(g, l, 5)
    })?;
    for stride in [1, 2] {
        gc(false, vec![x.clone(), random64(&[2, 3, 3, 3], 6), random64(&[2], 7)], &move |g, i| {
            let y = g.conv2d(i[0], i[1], Some(i[2]), stride, Padding::Same)?;
            projected_sum(g, y, 8)
        })?;
    }
    gc(false, vec![x.clone(), random64(&[2, 3, 2, 2], 9)], &|g, i| {
        let (p, idx) = g.maxpool2_indices(i[0])?;
        let u = g.unpool2(i[1], &idx)?;
        let a = projected_sum(g, p, 10)?;
        let b = projected_sum(g, u, 11)?;
        g.add(a, b)
    })?;
    let gamma = random64(&[3], 12).map(|v| 1.0 + 0.4 * v);
    gc(true, vec![x.clone(), gamma.clone(), random64(&[3], 13)], &|g, i| {
        let y = g.batchnorm2d(i[0], i[1], i[2], Mode::Train, &mut RunningStats::new(3))?;
        projected_sum(g, y, 14)
    })?;
    gc(false, vec![x.clone(), gamma, random64(&[3], 13)], &|g, i| {
        let mut stats = RunningStats { mean: vec![0.1, 0.0, -0.2], var: vec![0.7, 1.2, 2.0] };
        let y = g.batchnorm2d(i[0], i[1], i[2], Mode::Eval, &mut stats)?;
        projected_sum(g, y, 15)
    })?;
    gc(false, vec![x.clone(), random64(&[2, 1, 4, 4], 16)], &|g, i| {
        let d = g.dropout(i[0], 0.3, &mut RngState::new(17), Mode::Train)?;
        let s = g.softmax_channels(d)?;
        let c = g.concat_channels(&[s, i[1]])?;
        let m = g.mean(c)?;
        let p = projected_sum(g, c, 18)?;
        g.add(m, p)
    })?;
    gc(false, vec![random64(&[1, 2, 2, 2], 19)], &|g, i| {
        let u = g.bilinear_upsample(i[0], 4)?;
        projected_sum(g, u, 20)
    })?;
    let labels: Vec<usize> = (0..32).map(|i| (i * 5) % 3).collect();
    let weights: Vec<f64> = (0..32).map(|i| 0.02 + 0.001 * i as f64).collect();
    let soft: Vec<f64> = {
        let mut g = Graph::new();
        let t = g.leaf(random64(&[2, 3, 4, 4], 21));
        let s = g.softmax_channels(t).map_err(|e| e.to_string())?;
        g.value(s).data().to_vec()
    };
    gc(false, vec![random64(&[2, 3, 4, 4], 22)], &|g, i| {
        let a = g.cross_entropy(i[0], Target::Hard(labels.clone()), weights.clone())?;
        let b = g.cross_entropy(i[0], Target::Soft(soft.clone()), weights.clone())?;
        g.add(a, b)
    })?;

    // full T-Net forward (train-mode batch norm) and weighted cross-entropy
    let model = build_tnet::<f64>(&ModelConfig::tnet(2, 4, 3, 3), &mut RngState::new(23)).map_err(|e| e.to_string())?;
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = model.params().values().cloned().collect();
    inputs.push(random64(&[2, 3, 8, 8], 24));
    let y: Vec<u8> = (0..128).map(|i| ((i * 7) % 3) as u8).collect();
    let omega = wce_weights(&class_frequencies([y.as_slice()], 3, VOID).map_err(|e| e.to_string())?);
    gc(true, inputs, &|g, ids| {
        let bound: Bound = names.iter().cloned().zip(ids.iter().copied()).collect();
        let mut m = model.clone();
        let x = ids[ids.len() - 1];
        let logits = m.forward_graph(g, &bound, x, Mode::Train, &mut RngState::new(25), false)?;
        loss_wce(g, logits, &y, &omega, VOID)
    })?;
    let took = t.elapsed();
    ensure(
        worst_plain <= 1e-4 && worst_bn <= 1e-3 && took < Duration::from_secs(120),
        format!("max rel err {worst_plain:.1e} (≤1e-4), with train-mode batch norm {worst_bn:.1e} (≤1e-3), {took:.1?}"),
    )
}

// 2 ---------------------------------------------------------------------

fn weight_oracle() -> Check {
    let mut rng = RngState::new(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let l = 2 + rng.index(9);
        let counts: Vec<u64> = (0..l).map(|_| 1 + rng.index(100_000) as u64).collect();
        let total: u64 = counts.iter().sum();
        let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let got = ClassStats::from_counts(counts, VOID, WCE_EPSILON).map_err(|e| e.to_string())?.weights;
        let mut denom_sum = 0.0;
        let mut denom_min = f64::MAX;
        for f in &freqs {
            denom_sum += 1.0 / f;
            denom_min = denom_min.min(1.0 / f);
        }
        for (i, f) in freqs.iter().enumerate() {
            let want = ((1.0 / f) / (denom_sum * denom_min)).max(WCE_EPSILON);
            worst = worst.max((got[i] - want).abs());
        }
    }
    let two = ClassStats::from_counts(vec![9, 1], VOID, WCE_EPSILON).map_err(|e| e.to_string())?.weights;
    let ok_two = (two[0] - 0.09).abs() <= 1e-4 && (two[1] - 0.81).abs() <= 1e-4;
    ensure(worst <= 1e-9 && ok_two, format!("max |Δ| {worst:.1e} over 100 vectors (≤1e-9); (0.9,0.1) → ({:.4},{:.4})", two[0], two[1]))
}

// 3 ---------------------------------------------------------------------

fn contrast_oracle() -> Check {
    let mut worst = 0.0f64;
    for k in [1, 3, 7] {
        for seed in 0..5 {
            let mut rng = RngState::new(100 + seed);
            let x = Tensor::new(&[3, 9, 9], (0..243).map(|_| rng.uniform_range(-3.0, 3.0)).collect()).unwrap();
            let got = contrast_normalize(&x, k, 1.0, 0.5).map_err(|e| e.to_string())?;
            let at = |f: usize, i: usize, j: usize| if i < 9 && j < 9 { x.data()[(f * 9 + i) * 9 + j] } else { 0.0 };
            for f in 0..3 {
                for i in 0..9 {
                    for j in 0..9 {
                        let mut s = 0.0;
                        for di in 0..k {
                            for dj in 0..k {
                                s += at(f, i + di, j + dj).powi(2);
                            }
                        }
                        let want = at(f, i, j) / (1.0 + s / (k * k) as f64).sqrt();
                        worst = worst.max((got.data()[(f * 9 + i) * 9 + j] - want).abs());
                    }
                }
            }
        }
    }
    let scalar = contrast_normalize(&Tensor::new(&[1, 1, 1], vec![7.0f64]).unwrap(), 7, 1.0, 0.5).map_err(|e| e.to_string())?.item();
    let want = 7.0 / 2f64.sqrt();
    ensure(
        worst <= 1e-6 && (scalar - want).abs() <= 1e-12,
        format!("max |Δ| {worst:.1e} for k∈{{1,3,7}} (≤1e-6); scalar case {scalar} vs 7/√2 (≤1e-12)"),
    )
}

// 4 ---------------------------------------------------------------------

fn metrics_oracle() -> Check {
    let m = metrics(&ConfusionMatrix::from_rows(&[vec![8, 2], vec![1, 9]]).unwrap()).map_err(|e| e.to_string())?;
    let exact = m.per_class == 85.0 && m.global == 85.0;
    let mut rng = RngState::new(11);
    let mut failures = 0;
    for _ in 0..50 {
        let l = 2 + rng.index(6);
        let n = 50 + rng.index(100);
        let labels: Vec<u8> = (0..n).map(|_| if rng.bernoulli(0.1) { VOID } else { rng.index(l) as u8 }).collect();
        let preds: Vec<u8> = (0..n).map(|_| rng.index(l) as u8).collect();
        let cut = rng.index(n);
        let mut whole = ConfusionMatrix::new(l);
        whole.accumulate(&preds, &labels, VOID).unwrap();
        let (mut a, mut b) = (ConfusionMatrix::new(l), ConfusionMatrix::new(l));
        a.accumulate(&preds[..cut], &labels[..cut], VOID).unwrap();
        b.accumulate(&preds[cut..], &labels[cut..], VOID).unwrap();
        a.merge(&b).unwrap();
        if a != whole {
            failures += 1;
        }
        let mut perm: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            perm.swap(i, rng.index(i + 1));
        }
        let rows: Vec<Vec<u64>> = (0..l).map(|i| (0..l).map(|j| whole.get(i, j)).collect()).collect();
        let permuted: Vec<Vec<u64>> = (0..l).map(|i| (0..l).map(|j| rows[perm[i]][perm[j]]).collect()).collect();
        let (p, q) = (metrics(&whole).unwrap(), metrics(&ConfusionMatrix::from_rows(&permuted).unwrap()).unwrap());
        let same = (p.per_class - q.per_class).abs() < 1e-9
            && (p.global - q.global).abs() < 1e-9
            && (0..l).all(|i| p.per_class_breakdown[perm[i]] == q.per_class_breakdown[i]);
        if !same {
            failures += 1;
        }
    }
    ensure(exact && failures == 0, format!("[[8,2],[1,9]] → {}/{}; {failures} property failures over 50 matrices", m.per_class, m.global))
}

// 5 ---------------------------------------------------------------------

fn bgc_structure() -> Check {
    let logits = |shape: [usize; 4], seed| random64(&shape, seed).map(|v| 3.0 * v);
    let labels = |n: usize, seed| {
        let mut r = RngState::new(seed);
        (0..n).map(|_| if r.bernoulli(0.2) { VOID } else { r.index(4) as u8 }).collect::<Vec<u8>>()
    };
    let (d, s) = (logits([2, 4, 3, 3], 31), logits([2, 4, 3, 3], 32));
    let (dl, sl) = (labels(18, 33), labels(18, 34));
    let (wd, ws) = ([0.1, 0.2, 0.3, 0.4], [0.4, 0.1, 0.3, 0.2]);
    let value = |lambda: f64| {
        let mut g = Graph::new();
        let (x, y) = (g.leaf(d.clone()), g.leaf(s.clone()));
        let l = loss_bgc(&mut g, x, &dl, Some(y), &sl, lambda, &wd, &ws).unwrap();
        g.value(l).item()
    };
    let wce = |t: &Tensor<f64>, y: &[u8], w: &[f64]| {
        let mut g = Graph::new();
        let x = g.leaf(t.clone());
        let l = loss_wce(&mut g, x, y, w, VOID).unwrap();
        g.value(l).item()
    };
    let (ld, ls) = (wce(&d, &dl, &wd), wce(&s, &sl, &ws));
    let worst = [0.0, 0.5, 1.0, 2.0].iter().map(|&lam| (value(lam) - (ld + lam * ls)).abs()).fold(0.0, f64::max);
    let reduction = value(0.0) == ld;
    ensure(worst <= 1e-6 && reduction, format!("max linearity error {worst:.1e} (≤1e-6); λ=0 equals the dense loss exactly: {reduction}"))
}

// 6 ---------------------------------------------------------------------

fn roundtrips() -> Check {
    let mut bad_pool = 0;
    for seed in 0..1000u64 {
        let mut rng = RngState::new(seed);
        let (n, c, h, w) = (1 + rng.index(2), 1 + rng.index(3), 2 * (1 + rng.index(4)), 2 * (1 + rng.index(4)));
        // positive values: unpooled zeros never win a window
        let x = random64(&[n, c, h, w], seed).map(|v| v + 2.0);
        let mut g = Graph::<f64>::new();
        let xi = g.leaf(x);
        let (p, idx) = g.maxpool2_indices(xi).unwrap();
        let u = g.unpool2(p, &idx).unwrap();
        let (p2, idx2) = g.maxpool2_indices(u).unwrap();
        if !g.value(p2).bitwise_eq(g.value(p)) || idx2 != idx {
            bad_pool += 1;
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bad_ckpt = 0;
    for seed in 0..5u64 {
        let mut rng = RngState::new(seed);
        let cfg = ModelConfig::tnet(2 * (1 + rng.index(3)), 2 + rng.index(6), [1, 3, 5][rng.index(3)], 2 + rng.index(9));
        let m = build_tnet::<f32>(&cfg, &mut rng).unwrap();
        let path = dir.path().join(format!("{seed}.sdnc"));
        save_checkpoint(&m, &path).map_err(|e| e.to_string())?;
        let back = load_checkpoint::<f32>(&path).map_err(|e| e.to_string())?;
        let same = back.config() == m.config()
            && back.named_tensors().len() == m.named_tensors().len()
            && back.named_tensors().iter().zip(m.named_tensors()).all(|(a, b)| a.0 == b.0 && a.1.bitwise_eq(&b.1));
        if !same {
            bad_ckpt += 1;
        }
    }
    ensure(bad_pool == 0 && bad_ckpt == 0, format!("pool/unpool mismatches {bad_pool}/1000, checkpoint mismatches {bad_ckpt}/5"))
}

// 11 --------------------------------------------------------------------

type Map = IndexMap<String, Tensor<f64>>;

struct Quadratic {
    a: Vec<f64>,
    calls: usize,
}

fn pmap(v: &[f64]) -> Map {
    let mut m = IndexMap::new();
    m.insert("p".to_string(), Tensor::from_f64(&[v.len()], v).unwrap());
    m
}

impl Objective<f64> for Quadratic {
    fn evaluate(&mut self, params: &Map, need_grad: bool) -> segdistill::Result<(f64, Option<Map>)> {
        self.calls += 1;
        let p = params["p"].data();
        let f = p.iter().zip(&self.a).map(|(x, a)| a * x * x).sum();
        let g: Vec<f64> = p.iter().zip(&self.a).map(|(x, a)| 2.0 * a * x).collect();
        Ok((f, need_grad.then(|| pmap(&g))))
    }
}

fn scgd_contract() -> Check {
    let mut p = pmap(&[3.0]);
    let mut state = ScgdState::new(ScgdParams::default());
    let mut f = Quadratic { a: vec![1.0], calls: 0 };
    let r = scgd_step(&mut p, &mut state, &mut f).map_err(|e| e.to_string())?;
    let chain = r.accepted && r.step_size == 0.5 && p["p"].data()[0] == 0.0;
    let mut max_evals = 0;
    let mut rng = RngState::new(5);
    for _ in 0..200 {
        let n = 1 + rng.index(4);
        let a: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.01, 200.0)).collect();
        let mut p = pmap(&(0..n).map(|_| rng.uniform_range(-5.0, 5.0)).collect::<Vec<_>>());
        let mut state = ScgdState::new(ScgdParams::default());
        let mut f = Quadratic { a, calls: 0 };
        for _ in 0..10 {
            let before = f.calls;
            let r = scgd_step(&mut p, &mut state, &mut f).map_err(|e| e.to_string())?;
            max_evals = max_evals.max(r.evaluations).max(f.calls - before);
        }
    }
    ensure(chain && max_evals <= 4, format!("p=3 → α={} p={} accepted={}; max evaluations per step {max_evals} (≤4)", r.step_size, p["p"].data()[0], r.accepted))
}

// 7 to 9: the synthetic benchmark ----------------------------------------

const SEEDS: [u64; 3] = [0, 1, 2];
const DENSE_STEPS: usize = 300;
const SPARSE_STEPS: usize = 250;
const FUSION_STEPS: usize = 100;
const TRANSFER_STEPS: usize = 300;

struct Pools {
    dense: Vec<Sample>,
    sparse: Vec<Sample>,
    test: Vec<Sample>,
    unlabeled: Vec<Sample>,
}

fn pools(seed: u64) -> Pools {
    let p = SceneParams::default();
    let root = RngState::new(seed);
    type Gen = fn(&mut RngState, &SceneParams) -> segdistill::Result<Sample>;
    let gen = |k: u64, n: u64, f: Gen| (0..n).map(|i| f(&mut root.split(k).split(i), &p).unwrap()).collect::<Vec<_>>();
    Pools {
        dense: gen(1, 200, gen_dense_scene),
        sparse: gen(2, 200, gen_sparse_scene),
        test: gen(3, 100, gen_test_scene),
        unlabeled: gen(4, 100, gen_unlabeled_scene),
    }
}

/// The student architecture: 4+4 blocks, 64 maps.
fn student(seed: u64) -> Model<f32> {
    build_tnet(&ModelConfig::tnet(8, 64, 3, 8), &mut RngState::new(seed).split(10)).unwrap()
}

fn per_class(model: &Model<f32>, test: &[Sample]) -> f64 {
    metrics(&evaluate(model, test).unwrap()).unwrap().per_class
}

fn train_cfg(strategy: Strategy, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { strategy, epochs: 1, steps_per_epoch: steps, snapshot_samples: 0, seed, ..TrainConfig::default() }
}

#[derive(Debug, Default, Clone)]
struct SeedResult {
    dense: f64,
    ensemble: f64,
    tk_l: f64,
    tk_smp: f64,
    tk_smp_wce: f64,
    teacher_time: Duration,
    transfer_time: Duration,
}

fn run_seed(seed: u64) -> SeedResult {
    let p = pools(seed);
    let data = TrainData { dense: &p.dense, sparse: &p.sparse, eval: &[] };
    let t = Instant::now();
    let mut dense = student(seed);
    train(&mut dense, data, &train_cfg(Strategy::E2eDense, DENSE_STEPS, seed)).unwrap();

    let mut scfg = ModelConfig::tnet(6, 64, 3, 4);
    scfg.class_alignment = vec![None, Some(5), Some(6), Some(7)];
    let mut sparse = build_tnet::<f32>(&scfg, &mut RngState::new(seed).split(11)).unwrap();
    train(&mut sparse, data, &train_cfg(Strategy::E2eSparse, SPARSE_STEPS, seed)).unwrap();

    let mut ensemble = build_ensemble(dense.clone(), sparse, &[16, 16], &mut RngState::new(seed).split(12)).unwrap();
    let fusion = TrainConfig {
        class_weighting: false,
        line_search: ScgdParams { initial_step: 0.1, ..ScgdParams::default() },
        ..train_cfg(Strategy::EnsembleFusion, FUSION_STEPS, seed)
    };
    train(&mut ensemble, data, &fusion).unwrap();
    let teacher_time = t.elapsed();

    let t = Instant::now();
    let all: Vec<Sample> = p.dense.iter().chain(&p.sparse).chain(&p.unlabeled).cloned().collect();
    let cache = teacher_predict_cache(&ensemble, &all, None, "bench").unwrap();
    let set = TransferSet::from_samples(&all).unwrap();
    let cache_time = t.elapsed();
    let mut scores = [0.0; 3];
    let mut transfer_time = Duration::ZERO;
    for (slot, method) in [Method::TkL, Method::TkSmp, Method::TkSmpWce].into_iter().enumerate() {
        let t = Instant::now();
        let mut s = student(seed);
        let cfg = TransferConfig {
            method,
            epochs: 1,
            steps_per_epoch: TRANSFER_STEPS,
            seed,
            batch: BatchPlan { n_dense: 6, n_sparse: 2, lambda: 1.0 },
            ..TransferConfig::default()
        };
        distill(&mut s, &cache, &set, &cfg).unwrap();
        if method == Method::TkSmpWce {
            transfer_time = cache_time + t.elapsed();
        }
        scores[slot] = per_class(&s, &p.test);
    }
    SeedResult {
        dense: per_class(&dense, &p.test),
        ensemble: per_class(&ensemble, &p.test),
        tk_l: scores[0],
        tk_smp: scores[1],
        tk_smp_wce: scores[2],
        teacher_time,
        transfer_time,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// 10 --------------------------------------------------------------------

const DIVERGENCE_STEPS: usize = 120;

fn divergence_behaviour() -> Check {
    let mut lines = Vec::new();
    let (mut ratio_ok, mut fired, mut bgc_done) = (0, 0, 0);
    for seed in SEEDS {
        let p = pools(seed);
        let data = TrainData { dense: &p.dense, sparse: &p.sparse, eval: &[] };
        let run = |strategy| {
            let mut m = student(seed);
            train(&mut m, data, &train_cfg(strategy, DIVERGENCE_STEPS, seed)).unwrap()
        };
        // the mixed pool is 200 dense + 200 sparse: 50/50 in expectation
        let mixed = run(Strategy::E2eMixed);
        let bgc = run(Strategy::Bgc);
        let ((mm, vm), (mb, vb)) = (mixed.log.grad_norm_stats(), bgc.log.grad_norm_stats());
        ratio_ok += usize::from(vm >= 2.0 * vb);
        fired += usize::from(mixed.status == RunStatus::Diverged);
        bgc_done += usize::from(bgc.status == RunStatus::Completed);
        lines.push(format!(
            "seed {seed}: var mixed {vm:.3e} bgc {vb:.3e}, std/mean mixed {:.2} bgc {:.2}, mixed {}",
            vm.sqrt() / mm,
            vb.sqrt() / mb,
            mixed.status.as_str()
        ));
    }
    ensure(
        ratio_ok == SEEDS.len() && fired >= 2 && bgc_done == SEEDS.len(),
        format!(
            "variance ratio ≥2 on {ratio_ok}/3 seeds, guard fired {fired}/3 (need ≥2), bgc completed {bgc_done}/3 [{}]",
            lines.join("; ")
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Check, Duration)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let r = f();
        let took = t.elapsed();
        let (tag, msg) = match &r {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("criterion {n:>2} {name}: {tag} ({msg}) [{took:.1?}]");
        results.push((n, name, r, took));
    };
    record(1, "gradient correctness", &mut gradient_correctness);
    record(2, "class weight oracle", &mut weight_oracle);
    record(3, "contrast normalization oracle", &mut contrast_oracle);
    record(4, "metrics oracle", &mut metrics_oracle);
    record(5, "balanced loss structure", &mut bgc_structure);
    record(6, "pool/unpool and checkpoint roundtrips", &mut roundtrips);
    record(11, "line search contract", &mut scgd_contract);

    let bench: Vec<SeedResult> = SEEDS
        .iter()
        .map(|&s| {
            let r = run_seed(s);
            println!(
                "  benchmark seed {s}: dense {:.1}, ensemble {:.1}, tk-l {:.1}, tk-smp {:.1}, tk-smp-wce {:.1} (teacher {:.0?}, tk-smp-wce transfer {:.0?})",
                r.dense, r.ensemble, r.tk_l, r.tk_smp, r.tk_smp_wce, r.teacher_time, r.transfer_time
            );
            r
        })
        .collect();
    let avg = |f: fn(&SeedResult) -> f64| mean(bench.iter().map(f));
    let (dense, ens, tkl, smp, wce) = (avg(|r| r.dense), avg(|r| r.ensemble), avg(|r| r.tk_l), avg(|r| r.tk_smp), avg(|r| r.tk_smp_wce));
    let teacher_time: Duration = bench.iter().map(|r| r.teacher_time).sum();
    let transfer_time: Duration = bench.iter().map(|r| r.transfer_time).sum();
    record(7, "ensemble beats single domain", &mut || {
        ensure(
            ens >= dense + 3.0 && teacher_time <= Duration::from_secs(20 * 60),
            format!("ensemble {ens:.2} vs dense {dense:.2} + 3; bases plus fusion {teacher_time:.0?} (≤20 min)"),
        )
    });
    record(8, "distillation unlocks the student", &mut || {
        ensure(
            wce >= dense + 5.0 && wce >= ens - 5.0 && transfer_time <= Duration::from_secs(30 * 60),
            format!("tk-smp-wce {wce:.2} vs dense {dense:.2} + 5 and teacher {ens:.2} − 5; cache plus tk-smp-wce training {transfer_time:.0?} (≤30 min)"),
        )
    });
    record(9, "method ordering", &mut || {
        ensure(
            wce >= smp - 1.0 && smp - 1.0 >= tkl - 2.0,
            format!("tk-smp-wce {wce:.2} ≥ tk-smp {smp:.2} − 1 ≥ tk-l {tkl:.2} − 2"),
        )
    });
    record(10, "divergence behaviour", &mut divergence_behaviour);

    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
