//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p pqlab --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use pqlab::attack::{
    aod_loss, apd_loss, basic_loss, entropy, kl_divergence, AttackConfig, AttackLoss, AttackObjective,
};
use pqlab::dataio::{self, LabeledDataset, SyntheticSpec, VectorFormat};
use pqlab::dpqtrain::{init_codebook, train, triplet_gradients, TrainConfig};
use pqlab::evalkit::{
    ap_from_flags, average_precision, bits_transfer_experiment, model_transfer_experiment, whitebox_experiment,
    AttackStats, EvalData, ExperimentGrid, RelevanceJudge, RelevanceMode, TargetModel, TransferCell, WhiteboxCell,
};
use pqlab::featnet::FeatureNet;
use pqlab::kmeans::{train_kmeans, KMeansConfig};
use pqlab::numkit::{derive_seed, Rng};
use pqlab::pq::{
    decode, encode, read_codebook, read_index, search, train_codebooks, write_codebook, write_index, CoarseQuantizer,
    Codebook, PqIndex, SearchMode,
};
use pqlab::softpq::{
    centroid_gradient, hard_assign_cosine, input_gradient, soft_distribution, soft_quantize, SoftPqConfig,
};
use pqlab::DenseVector;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn gaussian_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gaussian()).collect()
}

fn dv(v: Vec<f64>) -> DenseVector {
    DenseVector::new(v).unwrap()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    l2(&diff) / l2(analytic).max(l2(numeric)).max(1e-12)
}

/// Central differences of `f` at `x` with step `h`.
fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn unit_codebook(rng: &mut Rng, m: usize, k: usize, sub: usize) -> Codebook {
    let mut cb = Codebook::new(m, k, sub, gaussian_vec(rng, m * k * sub)).unwrap();
    cb.normalize_centroids();
    cb
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (n, d, m, k) = (1000, 32, 4, 16);
    let mut max_dev = 0.0f64;
    let mut queries_checked = 0;
    for inst in 0..20u64 {
        let mut rng = Rng::new(derive_seed(inst, "acceptance/c1"));
        let data: Vec<DenseVector> = (0..n).map(|_| dv(gaussian_vec(&mut rng, d))).collect();
        let cb = ok(train_codebooks(&data, m, k, &KMeansConfig::new(k).with_seed(inst).with_max_iters(25)))?;
        let index = ok(PqIndex::build(cb.clone(), &data, (0..n as u32).collect(), None))?;
        let decoded: Vec<Vec<f64>> = index.codes().iter().map(|c| decode(c, &cb).unwrap().into_inner()).collect();
        for _ in 0..5 {
            let q = gaussian_vec(&mut rng, d);
            let q_rec = ok(decode(&ok(encode(&q, &cb))?, &cb))?;
            for mode in [SearchMode::Adc, SearchMode::Sdc] {
                let probe: &[f64] = if mode == SearchMode::Adc { &q } else { &q_rec };
                let mut oracle: Vec<(f64, u32)> =
                    decoded.iter().enumerate().map(|(i, x)| (dist(probe, x), i as u32)).collect();
                oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let hits = ok(search(&q, &index, n, mode))?;
                ensure!(hits.len() == n, "{mode}: {} hits for {n} records", hits.len());
                for (rank, (h, o)) in hits.iter().zip(&oracle).enumerate() {
                    ensure!(
                        h.id == o.1,
                        "instance {inst} {mode}: rank {rank} has id {} but the oracle has {}",
                        h.id,
                        o.1
                    );
                    max_dev = max_dev.max((h.distance - o.0).abs());
                }
                queries_checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(max_dev <= 1e-9, "distance deviation {max_dev:e} > 1e-9");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{queries_checked} rankings identical, max distance deviation {max_dev:.1e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- criterion 2

fn subspace_gap_ok(z: &[f64], cb: &Codebook) -> bool {
    (0..cb.m()).all(|sub| {
        let x = &z[sub * cb.sub_dim()..(sub + 1) * cb.sub_dim()];
        let n = l2(x);
        let mut ips: Vec<f64> =
            (0..cb.k()).map(|j| x.iter().zip(cb.centroid(sub, j)).map(|(a, c)| a * c).sum::<f64>() / n).collect();
        ips.sort_by(|a, b| b.total_cmp(a));
        ips[0] - ips[1] > 0.01
    })
}

fn criterion_2() -> Outcome {
    let mut rng = Rng::new(derive_seed(2, "acceptance/c2"));
    let (m, k, sub) = (4, 16, 8);
    let cb = unit_codebook(&mut rng, m, k, sub);
    let alphas = [0.5, 1.0, 10.0, 100.0, 1000.0];
    let mut features = Vec::new();
    while features.len() < 100 {
        let mut z = gaussian_vec(&mut rng, m * sub);
        let n = l2(&z);
        z.iter_mut().for_each(|v| *v /= n);
        if subspace_gap_ok(&z, &cb) {
            features.push(z);
        }
    }
    let mut worst_final = 0.0f64;
    for (i, z) in features.iter().enumerate() {
        let hard = ok(hard_assign_cosine(z, &cb))?;
        let hard_vec = ok(decode(&hard, &cb))?;
        let mut prev = f64::INFINITY;
        for &alpha in &alphas {
            let cfg = SoftPqConfig::default().with_alpha(alpha);
            if alpha <= 100.0 {
                let p = ok(soft_distribution(z, &cb, &cfg))?;
                for s in 0..m {
                    ensure!(
                        p.argmax(s) == hard.indices()[s] as usize,
                        "feature {i}, alpha {alpha}, subspace {s}: soft argmax {} vs hard {}",
                        p.argmax(s),
                        hard.indices()[s]
                    );
                }
            }
            let gap = dist(&ok(soft_quantize(z, &cb, &cfg))?, &hard_vec);
            ensure!(gap <= prev, "feature {i}: distance to hard decode grew from {prev:e} to {gap:e} at alpha {alpha}");
            prev = gap;
        }
        worst_final = worst_final.max(prev);
    }
    ensure!(worst_final < 1e-3, "distance at alpha 1000 is {worst_final:e}");
    Ok(format!("100 features, argmax agrees for alpha <= 100, max distance at alpha 1000 = {worst_final:.1e}"))
}

// ---------------------------------------------------------------- criterion 3

const H: f64 = 1e-5;

struct GradCase {
    net: FeatureNet,
    cb: Codebook,
    soft: SoftPqConfig,
    y: Vec<f64>,
    y_hat: Vec<f64>,
}

fn grad_case(seed: u64) -> GradCase {
    let mut rng = Rng::new(derive_seed(seed, "acceptance/c3"));
    let (d_in, m, k, sub) = (10, 2, 8, 4);
    let net = FeatureNet::mlp(d_in, &[12], m * sub, &mut rng).unwrap();
    let cb = unit_codebook(&mut rng, m, k, sub);
    let y = gaussian_vec(&mut rng, d_in);
    let y_hat = y.iter().map(|v| v + 0.3 * rng.gaussian()).collect();
    GradCase { net, cb, soft: SoftPqConfig::default().with_alpha(2.0), y, y_hat }
}

fn net_params(net: &FeatureNet) -> Vec<(usize, usize)> {
    net.layers().iter().enumerate().flat_map(|(l, layer)| (0..layer.num_parameters()).map(move |i| (l, i))).collect()
}

fn flatten_grads(g: &pqlab::featnet::ParamGrads) -> Vec<f64> {
    g.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
}

fn check_family(
    name: &str,
    tol: f64,
    worst: &mut Vec<String>,
    errs: impl Fn(u64) -> Result<f64, String>,
) -> Result<(), String> {
    let mut max_err = 0.0f64;
    for seed in 0..20 {
        let e = errs(seed)?;
        ensure!(e <= tol, "{name}: instance {seed} relative error {e:e} > {tol:e}");
        max_err = max_err.max(e);
    }
    worst.push(format!("{name} {max_err:.1e}"));
    Ok(())
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut summary = Vec::new();
    type LossFn = fn(&[f64], &[f64], &FeatureNet, &Codebook, &SoftPqConfig) -> pqlab::Result<(f64, DenseVector)>;
    let attack_losses: [(&str, LossFn); 3] =
        [("basic_loss", |y, yh, net, _, _| basic_loss(y, yh, net)), ("apd_loss", apd_loss), ("aod_loss", aod_loss)];
    for (name, f) in attack_losses {
        check_family(name, 1e-4, &mut summary, |seed| {
            let c = grad_case(seed);
            let (_, g) = ok(f(&c.y, &c.y_hat, &c.net, &c.cb, &c.soft))?;
            let num = numeric_grad(|x| f(&c.y, x, &c.net, &c.cb, &c.soft).unwrap().0, &c.y_hat, H);
            Ok(rel_err(&g, &num))
        })?;
    }
    check_family("input_gradient", 1e-4, &mut summary, |seed| {
        let c = grad_case(seed);
        let mut rng = Rng::new(seed + 100);
        let z = gaussian_vec(&mut rng, c.cb.dim());
        let up = gaussian_vec(&mut rng, c.cb.m() * c.cb.k());
        let g = ok(input_gradient(&z, &c.cb, &c.soft, &up))?;
        let f = |x: &[f64]| {
            let p = soft_distribution(x, &c.cb, &c.soft).unwrap();
            p.probs().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        Ok(rel_err(&g, &numeric_grad(f, &z, H)))
    })?;
    check_family("centroid_gradient", 1e-4, &mut summary, |seed| {
        let c = grad_case(seed);
        let mut rng = Rng::new(seed + 200);
        let x = gaussian_vec(&mut rng, c.cb.dim());
        let up = gaussian_vec(&mut rng, c.cb.dim());
        let g = ok(centroid_gradient(&x, &c.cb, &c.soft, &up))?;
        let f = |flat: &[f64]| {
            let cb = Codebook::new(c.cb.m(), c.cb.k(), c.cb.sub_dim(), flat.to_vec()).unwrap();
            soft_quantize(&x, &cb, &c.soft).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        Ok(rel_err(&g, &numeric_grad(f, c.cb.as_flat(), H)))
    })?;
    check_family("backward_input", 1e-4, &mut summary, |seed| {
        let c = grad_case(seed);
        let up = gaussian_vec(&mut Rng::new(seed + 300), c.net.output_dim());
        let (_, cache) = ok(c.net.forward(&c.y))?;
        let g = ok(c.net.backward_input(&cache, &up))?;
        let f = |x: &[f64]| c.net.features(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        Ok(rel_err(&g, &numeric_grad(f, &c.y, H)))
    })?;
    check_family("backward_params", 1e-4, &mut summary, |seed| {
        let c = grad_case(seed);
        let up = gaussian_vec(&mut Rng::new(seed + 400), c.net.output_dim());
        let (_, cache) = ok(c.net.forward(&c.y))?;
        let g = flatten_grads(&ok(c.net.backward_params(&cache, &up))?);
        let params = net_params(&c.net);
        let theta: Vec<f64> = params.iter().map(|&(l, i)| c.net.parameter(l, i)).collect();
        let f = |t: &[f64]| {
            let mut net = c.net.clone();
            params.iter().zip(t).for_each(|(&(l, i), v)| net.set_parameter(l, i, *v));
            net.features(&c.y).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        Ok(rel_err(&g, &numeric_grad(f, &theta, H)))
    })?;
    check_family("dpqtrain end-to-end", 1e-3, &mut summary, |seed| {
        let c = grad_case(seed);
        let mut rng = Rng::new(seed + 500);
        let (a, p, n) = (c.y.clone(), gaussian_vec(&mut rng, c.y.len()), gaussian_vec(&mut rng, c.y.len()));
        let tg = ok(triplet_gradients(&c.net, &c.cb, &c.soft, &a, &p, &n))?;
        let params = net_params(&c.net);
        let n_net = params.len();
        let mut analytic = flatten_grads(&tg.net);
        analytic.extend_from_slice(&tg.centroids);
        let mut theta: Vec<f64> = params.iter().map(|&(l, i)| c.net.parameter(l, i)).collect();
        theta.extend_from_slice(c.cb.as_flat());
        let f = |t: &[f64]| {
            let mut net = c.net.clone();
            params.iter().zip(t).for_each(|(&(l, i), v)| net.set_parameter(l, i, *v));
            let cb = Codebook::new(c.cb.m(), c.cb.k(), c.cb.sub_dim(), t[n_net..].to_vec()).unwrap();
            triplet_gradients(&net, &cb, &c.soft, &a, &p, &n).unwrap().loss
        };
        Ok(rel_err(&analytic, &numeric_grad(f, &theta, H)))
    })?;
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("max relative errors: {} ({elapsed:.2?})", summary.join(", ")))
}

// ------------------------------------------------------------ criteria 4 to 7

const SIGMA: f64 = 1.0;
const ALPHA: f64 = 5.0;
const ETA: f64 = 2.0 * SIGMA;
const PGD_ITERS: usize = 20;

struct Protocol {
    elapsed: Duration,
    eta: f64,
    clip: (f64, f64),
    queries: LabeledDataset,
    whitebox: Vec<WhiteboxCell>,
    /// Adversarial queries of model A at 32 bits, one entry per loss.
    reports: Vec<(AttackLoss, Vec<pqlab::attack::AttackReport>)>,
    bits: Vec<TransferCell>,
    models: Vec<TransferCell>,
}

fn train_model(name: &str, seed: u64, db: &LabeledDataset) -> pqlab::Result<TargetModel> {
    let mut rng = Rng::new(derive_seed(seed, "acceptance/net"));
    let net = FeatureNet::default_architecture(db.dim(), 24, &mut rng)?;
    let km = |m: usize| KMeansConfig::new(256).with_seed(derive_seed(seed, &format!("acceptance/codebook/{m}")));
    let cb = init_codebook(&net, db.vectors(), 4, 256, &km(4))?;
    let cfg = TrainConfig { epochs: 30, alpha: ALPHA, seed, ..TrainConfig::default() };
    let out = train(db.vectors(), db.labels(), net, cb, &cfg)?;
    // shorter codes share the trained net and get k-means codebooks on its features
    let mut codebooks = vec![out.codebook];
    for m in [2, 3] {
        codebooks.push(init_codebook(&out.net, db.vectors(), m, 256, &km(m))?);
    }
    Ok(TargetModel { name: name.into(), net: out.net, codebooks })
}

fn run_protocol() -> pqlab::Result<Protocol> {
    let start = Instant::now();
    let spec = SyntheticSpec { classes: 10, per_class: 220, dim: 64, separation: 20.0, sigma: SIGMA, seed: 7 };
    let ds = dataio::generate_synthetic(&spec)?;
    let split = dataio::split(&ds, 200, 7, true)?;
    let (lo, hi) = ds.value_range().expect("non-empty dataset");
    let clip = (lo - ETA, hi + ETA);
    let model_a = train_model("A", 11, &split.database)?;
    let model_b = train_model("B", 23, &split.database)?;
    let soft = SoftPqConfig::default().with_alpha(ALPHA);
    let attacks: Vec<AttackConfig> = AttackLoss::ALL
        .iter()
        .map(|&l| {
            AttackConfig::new(l)
                .with_budget(ETA, PGD_ITERS)
                .with_box(clip.0, clip.1)
                .with_random_start(true)
                .with_seed(5)
        })
        .collect();
    let aod = attacks.iter().find(|a| a.loss == AttackLoss::Aod).unwrap().clone();
    let modes = vec![SearchMode::Sdc, SearchMode::Adc];
    let data = EvalData { database: &split.database, queries: &split.queries };
    let grid = ExperimentGrid {
        bit_lengths: vec![32],
        models: vec![model_a.clone()],
        attacks: attacks.clone(),
        modes: modes.clone(),
        soft,
    };
    let whitebox = whitebox_experiment(&grid, data)?;
    let cb32 = model_a.codebook_for_bits(32)?;
    let reports = attacks
        .iter()
        .map(|a| {
            pqlab::attack::attack_batch(split.queries.vectors(), split.queries.ids(), &model_a.net, cb32, &soft, a)
                .map(|r| (a.loss, r))
        })
        .collect::<pqlab::Result<Vec<_>>>()?;
    let bits = bits_transfer_experiment(16, &[24, 32], &model_a, data, &aod, &soft, &modes)?;
    let models = [model_a, model_b];
    let transfer = model_transfer_experiment(&models, &models, 32, data, &aod, &soft, &modes)?;
    Ok(Protocol {
        elapsed: start.elapsed(),
        eta: ETA,
        clip,
        queries: split.queries,
        whitebox,
        reports,
        bits,
        models: transfer,
    })
}

fn protocol() -> Result<&'static Protocol, String> {
    static CELL: OnceLock<Result<Protocol, String>> = OnceLock::new();
    CELL.get_or_init(|| run_protocol().map_err(|e| format!("protocol failed: {e}"))).as_ref().map_err(Clone::clone)
}

fn whitebox_map(p: &Protocol, attack: &str, mode: SearchMode) -> f64 {
    p.whitebox.iter().find(|c| c.attack == attack && c.mode == mode).map(|c| c.map).expect("cell present")
}

fn criterion_4() -> Outcome {
    let p = protocol()?;
    let mut parts = Vec::new();
    for mode in [SearchMode::Sdc, SearchMode::Adc] {
        let [clean, basic, apd, aod] = ["clean", "basic", "apd", "aod"].map(|a| whitebox_map(p, a, mode));
        ensure!(clean >= 0.80, "{mode}: clean mAP {clean:.4} < 0.80");
        ensure!(aod <= 0.5 * clean, "{mode}: AOD mAP {aod:.4} > half of clean {clean:.4}");
        ensure!(aod <= apd + 0.05, "{mode}: AOD mAP {aod:.4} > APD {apd:.4} + 0.05");
        ensure!(apd <= basic + 0.05, "{mode}: APD mAP {apd:.4} > Basic {basic:.4} + 0.05");
        parts.push(format!("{mode} clean {clean:.3} basic {basic:.3} apd {apd:.3} aod {aod:.3}"));
    }
    ensure!(p.elapsed < Duration::from_secs(300), "protocol took {:?}", p.elapsed);
    Ok(format!("{} ({:.1?})", parts.join("; "), p.elapsed))
}

fn criterion_5() -> Outcome {
    let p = protocol()?;
    let (lo, hi) = p.clip;
    let mut aod_positive = 0;
    let mut aod_total = 0;
    let mut checked = 0;
    for (loss, reports) in &p.reports {
        ensure!(reports.len() == p.queries.len(), "{loss}: {} reports for {} queries", reports.len(), p.queries.len());
        for (i, (r, y)) in reports.iter().zip(p.queries.vectors()).enumerate() {
            for (a, b) in r.adversarial.iter().zip(y.iter()) {
                ensure!((a - b).abs() <= p.eta, "{loss} query {i}: |{a} - {b}| exceeds eta {}", p.eta);
                ensure!(*a >= lo && *a <= hi, "{loss} query {i}: {a} outside the box [{lo}, {hi}]");
            }
            checked += 1;
        }
        if *loss == AttackLoss::Aod {
            let stats = AttackStats::from_reports(reports);
            aod_positive += stats.kl_positive;
            aod_total += stats.count;
        }
    }
    let frac = aod_positive as f64 / aod_total.max(1) as f64;
    ensure!(frac >= 0.95, "kl_to_clean > 0 for only {aod_positive}/{aod_total} AOD attacks");
    Ok(format!("{checked} attacks within eta and box, AOD kl > 0 for {aod_positive}/{aod_total}"))
}

fn criterion_6() -> Outcome {
    let p = protocol()?;
    let mut parts = Vec::new();
    for c in &p.bits {
        let drop = 1.0 - c.map / c.clean_map;
        ensure!(
            drop >= 0.30,
            "16 -> {} bits {}: mAP {:.4} vs clean {:.4} is a {:.1}% drop",
            c.target,
            c.mode,
            c.map,
            c.clean_map,
            100.0 * drop
        );
        parts.push(format!("{}b {} -{:.0}%", c.target, c.mode, 100.0 * drop));
    }
    ensure!(
        p.bits.iter().any(|c| c.target == "24") && p.bits.iter().any(|c| c.target == "32"),
        "missing target code length"
    );
    Ok(parts.join(", "))
}

fn criterion_7() -> Outcome {
    let p = protocol()?;
    let mut parts = Vec::new();
    for mode in [SearchMode::Sdc, SearchMode::Adc] {
        let cell = |s: &str, t: &str| {
            p.models
                .iter()
                .find(|c| c.source == s && c.target == t && c.mode == mode)
                .map(|c| c.map)
                .expect("cell present")
        };
        let diag = [cell("A", "A"), cell("B", "B")];
        let off = [cell("A", "B"), cell("B", "A")];
        let worst_diag = diag[0].max(diag[1]);
        let best_off = off[0].min(off[1]);
        ensure!(worst_diag < best_off, "{mode}: white-box {diag:?} not strictly below transfer {off:?}");
        parts.push(format!("{mode} diag {:.3}/{:.3} off {:.3}/{:.3}", diag[0], diag[1], off[0], off[1]));
    }
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut iters = 0;
    for seed in 0..50u64 {
        let mut rng = Rng::new(derive_seed(seed, "acceptance/c8"));
        let centers: Vec<Vec<f64>> =
            (0..6).map(|_| gaussian_vec(&mut rng, 8).iter().map(|v| 4.0 * v).collect()).collect();
        let points: Vec<DenseVector> =
            (0..400).map(|i| dv(centers[i % 6].iter().map(|c| c + rng.gaussian()).collect())).collect();
        let cfg = KMeansConfig::new(8).with_seed(seed);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train_kmeans(&points, &cfg))
        };
        let base = ok(run(1))?;
        for w in base.inertia_history.windows(2) {
            ensure!(w[1] <= w[0], "seed {seed}: inertia rose from {} to {}", w[0], w[1]);
        }
        iters += base.inertia_history.len();
        for threads in [2, 4, 8] {
            let other = ok(run(threads))?;
            let same = other.assignments == base.assignments
                && other.inertia.to_bits() == base.inertia.to_bits()
                && other
                    .centroids
                    .iter()
                    .flat_map(|c| c.iter())
                    .zip(base.centroids.iter().flat_map(|c| c.iter()))
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "seed {seed}: result with {threads} threads differs from 1 thread");
        }
    }
    Ok(format!("50 runs, {iters} inertia values non-increasing, identical at 1/2/4/8 threads"))
}

// ---------------------------------------------------------------- criterion 9

/// Precision at every relevant rank, recomputed from scratch each time.
fn brute_force_ap(flags: &[bool]) -> f64 {
    let relevant: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
    if relevant.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in &relevant {
        let hits_in_prefix = flags[..=i].iter().filter(|f| **f).count();
        total += hits_in_prefix as f64 / (i + 1) as f64;
    }
    total / relevant.len() as f64
}

fn criterion_9() -> Outcome {
    let mut rng = Rng::new(derive_seed(9, "acceptance/c9"));
    for case in 0..50 {
        let n = 1 + rng.index(10);
        let flags: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
        let ids: Vec<u32> = (0..n as u32).collect();
        let labels: Vec<Vec<u32>> = flags.iter().map(|&f| vec![u32::from(!f)]).collect();
        let judge = ok(RelevanceJudge::new(RelevanceMode::SingleLabel, &ids, &labels))?;
        let mut ranked = ids.clone();
        rng.shuffle(&mut ranked);
        let ranked_flags: Vec<bool> = ranked.iter().map(|&i| flags[i as usize]).collect();
        let got = ok(average_precision(&ranked, &judge, &[0]))?;
        let want = brute_force_ap(&ranked_flags);
        ensure!(got == want, "case {case} {ranked_flags:?}: {got} != {want}");
    }
    let ap = ap_from_flags(&[true, false, true]);
    ensure!((ap - 5.0 / 6.0).abs() <= 1e-9, "AP(1,0,1) = {ap}");
    Ok(format!("50 random rankings exact, AP(1,0,1) = {ap:.10}"))
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let c = grad_case(seed);
        let (aod, _) = ok(aod_loss(&c.y, &c.y_hat, &c.net, &c.cb, &c.soft))?;
        let p = ok(soft_distribution(&ok(c.net.features(&c.y))?, &c.cb, &c.soft))?;
        let p_hat = ok(soft_distribution(&ok(c.net.features(&c.y_hat))?, &c.cb, &c.soft))?;
        let identity = -entropy(&p) - ok(kl_divergence(&p, &p_hat))?;
        ensure!((aod - identity).abs() <= 1e-9, "seed {seed}: aod {aod} vs -H - KL {identity}");
        worst = worst.max((aod - identity).abs());

        let code = ok(hard_assign_cosine(&ok(c.net.features(&c.y))?, &c.cb))?;
        let one_hot = ok(pqlab::softpq::CentroidDistribution::one_hot(&code, c.cb.k()))?;
        let (via_aod, _) = ok(ok(AttackObjective::with_target(&c.net, &c.cb, &c.soft, one_hot))?.evaluate(&c.y_hat))?;
        let (apd, _) = ok(apd_loss(&c.y, &c.y_hat, &c.net, &c.cb, &c.soft))?;
        ensure!((apd - via_aod).abs() <= 1e-12, "seed {seed}: apd {apd} vs one-hot aod {via_aod}");
    }
    Ok(format!("50 instances, max |aod + H + KL| = {worst:.1e}, apd equals one-hot aod"))
}

// --------------------------------------------------------------- criterion 11

/// Every single-byte corruption of the first `header` bytes and every
/// truncation must yield an error or a value, never a panic; bad magic must
/// produce a message naming the file kind.
fn corruption_sweep<T>(
    name: &str,
    bytes: &[u8],
    header: usize,
    kind: &str,
    read: impl Fn(&[u8]) -> pqlab::Result<T>,
) -> Result<(), String> {
    let mut bad = bytes.to_vec();
    bad[0] ^= 0xFF;
    match read(&bad) {
        Err(e) => ensure!(e.to_string().contains(kind), "{name}: bad-magic error does not name the {kind}: {e}"),
        Ok(_) => return Err(format!("{name}: corrupted magic accepted")),
    }
    for pos in 0..header.min(bytes.len()) {
        for flip in [0x01u8, 0x80, 0xFF] {
            let mut b = bytes.to_vec();
            b[pos] ^= flip;
            let r = catch_unwind(AssertUnwindSafe(|| read(&b).map(|_| ())));
            ensure!(r.is_ok(), "{name}: panic with byte {pos} xor {flip:#x}");
        }
    }
    for len in 0..bytes.len() {
        let r = catch_unwind(AssertUnwindSafe(|| read(&bytes[..len]).is_err()));
        ensure!(matches!(r, Ok(true)), "{name}: truncation to {len} bytes was accepted or panicked");
    }
    Ok(())
}

fn criterion_11() -> Outcome {
    let mut rng = Rng::new(derive_seed(11, "acceptance/c11"));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let cb = unit_codebook(&mut rng, 4, 16, 3);
    let cb_bytes = ok(write_codebook(&cb))?;
    ensure!(ok(write_codebook(&ok(read_codebook(&cb_bytes))?))? == cb_bytes, "codebook bytes changed on round trip");
    corruption_sweep("codebook", &cb_bytes, 18, "codebook", read_codebook)?;

    let vectors: Vec<DenseVector> = (0..60).map(|_| dv(gaussian_vec(&mut rng, 12))).collect();
    let ids: Vec<u32> = (0..60).map(|i| 1000 + 3 * i).collect();
    let labels: Vec<u32> = (0..60).map(|i| i % 5).collect();
    let index = ok(PqIndex::build(cb.clone(), &vectors, ids.clone(), Some(labels.clone())))?;
    let coarse = ok(CoarseQuantizer::train(&vectors, &KMeansConfig::new(4).with_seed(1)))?;
    let residual = ok(PqIndex::build_residual(cb.clone(), coarse, &vectors, ids.clone(), Some(labels.clone())))?;
    for (name, idx) in [("index", &index), ("residual index", &residual)] {
        let bytes = ok(write_index(idx))?;
        ensure!(ok(write_index(&ok(read_index(&bytes))?))? == bytes, "{name} bytes changed on round trip");
        corruption_sweep(name, &bytes, 40, "index", read_index)?;
    }

    let net = ok(FeatureNet::default_architecture(12, 6, &mut rng))?;
    let w = ok(net.to_bytes())?;
    ensure!(ok(ok(FeatureNet::from_bytes(&w))?.to_bytes())? == w, "weights bytes changed on round trip");
    corruption_sweep("weights", &w, 32, "weights", FeatureNet::from_bytes)?;

    let ds = ok(LabeledDataset::new(ids, vectors, labels.iter().map(|&l| vec![l]).collect()))?;
    let multi = ok(LabeledDataset::new(
        ds.ids().to_vec(),
        ds.vectors().to_vec(),
        ds.labels().iter().map(|l| vec![l[0], l[0] + 7]).collect(),
    ))?;
    for (tag, data) in [("single", &ds), ("multi", &multi)] {
        for fmt in [VectorFormat::Fvecs, VectorFormat::Csv] {
            let first = dir.path().join(format!("{tag}_a.{}", fmt.extension()));
            let second = dir.path().join(format!("{tag}_b.{}", fmt.extension()));
            ok(dataio::save_vectors(data, &first, fmt))?;
            let loaded = ok(dataio::load_vectors(&first, fmt))?;
            ok(dataio::save_vectors(&loaded, &second, fmt))?;
            let files = |p: &std::path::Path| {
                let (a, b, c) = dataio::sidecar_paths(p);
                [p.to_path_buf(), a, b, c].map(|f| std::fs::read(f).ok())
            };
            ensure!(files(&first) == files(&second), "{tag} {fmt:?} dataset files changed on round trip");
            ensure!(
                loaded.labels() == data.labels() && loaded.ids() == data.ids(),
                "{tag} {fmt:?} labels or ids changed"
            );
        }
    }
    let fv = ok(dataio::write_fvecs(ds.vectors()))?;
    // fvecs carries no record count: a cut on a record boundary is a shorter
    // valid file, any other cut must be rejected
    let record = 4 + 4 * ds.dim();
    for len in 1..fv.len() {
        let r = catch_unwind(|| dataio::read_fvecs(&fv[..len]).map(|v| v.len()).ok());
        let expect = (len % record == 0).then_some(len / record);
        ensure!(
            matches!(r, Ok(got) if got == expect),
            "fvecs truncated to {len} bytes: got {r:?}, expected {expect:?}"
        );
    }
    let cut = dir.path().join("single_a.fvecs");
    std::fs::write(&cut, &fv[..fv.len() - record]).map_err(|e| e.to_string())?;
    ensure!(dataio::load_vectors(&cut, VectorFormat::Fvecs).is_err(), "fvecs shorter than its sidecars was accepted");
    let csv_path = dir.path().join("broken.csv");
    std::fs::write(&csv_path, "id,label,v0\n1,0,0.5\n2,zero,0.1\n").map_err(|e| e.to_string())?;
    match dataio::load_vectors(&csv_path, VectorFormat::Csv) {
        Err(e) => ensure!(e.to_string().contains("line 3"), "CSV error does not name the line: {e}"),
        Ok(_) => return Err("malformed CSV accepted".into()),
    }
    Ok("codebook, index, residual index, weights, fvecs and CSV datasets round-trip; corruption gives named errors"
        .into())
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "retrieval matches brute-force oracle", criterion_1),
        (2, "soft assignment approaches hard assignment", criterion_2),
        (3, "gradients match finite differences", criterion_3),
        (4, "white-box attack effectiveness", criterion_4),
        (5, "attack constraint compliance", criterion_5),
        (6, "bits transferability", criterion_6),
        (7, "model transferability", criterion_7),
        (8, "Lloyd monotonicity and thread determinism", criterion_8),
        (9, "average precision correctness", criterion_9),
        (10, "attack loss identities", criterion_10),
        (11, "persistence round trips", criterion_11),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let result = catch_unwind(run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("PASS criterion {id:>2} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} ({name}): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
