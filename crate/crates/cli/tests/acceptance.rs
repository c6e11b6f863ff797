//! Acceptance suite: one PASS/FAIL line per criterion on stderr, then a
//! single assertion over all of them.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use zonefuse::annotate::{zone_g, zone_profiles};
use zonefuse::cluster::{
    crf_fit, energy, exhaustive_map, icm_map, Adjacency, CrfOptions, IcmSchedule, ZoneModel,
    DEFAULT_VARIANCE_FLOOR,
};
use zonefuse::config::PipelineConfig;
use zonefuse::fusion::{
    fit, gradients, objective, soft_threshold_matrix, step, FusionInput, Hyperparams, LatentFactors, UpdateOrder,
};
use zonefuse::geo::{encode, GeoPoint};
use zonefuse::metrics::adjusted_rand_index;
use zonefuse::pipeline::Pipeline;
use zonefuse::sparse::SparseMatrix;
use zonefuse::synth::{gen_synthetic_city, synthetic_config_text, SynthCity, SynthCitySpec};

/// Criteria that cannot pass as stated; see the README.
const KNOWN_UNATTAINABLE: [usize; 1] = [10];

struct Verdict {
    id: usize,
    pass: bool,
}

fn report(id: usize, title: &str, pass: bool, detail: &str) -> Verdict {
    let tag = match (pass, KNOWN_UNATTAINABLE.contains(&id)) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FAIL (known)",
    };
    // Written past the test harness capture so the lines always reach the log.
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance {id:>2} {tag}: {title} | {detail}");
    Verdict { id, pass }
}

// ---------------------------------------------------------------- fusion

const P_CAT: usize = 5;
const REGIONS: usize = 7;
const K: usize = 3;

fn random_input(p: usize, r: usize, seed: u64) -> FusionInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = 48 * r;
    let mut observed: Vec<bool> = (0..r).map(|_| rng.random_bool(0.6)).collect();
    observed[0] = true;
    let pm = DMatrix::from_fn(p, r, |_, j| if observed[j] { rng.random_range(0..6) as f64 } else { 0.0 });
    let mask = DMatrix::from_fn(p, r, |_, j| if observed[j] { 1.0 } else { 0.0 });
    let mut trips = Vec::new();
    for j in 0..r {
        let rows: BTreeSet<usize> = (0..6).map(|_| rng.random_range(0..q)).collect();
        trips.extend(rows.into_iter().map(|i| (i, j, rng.random_range(1..4) as f64)));
    }
    let t = SparseMatrix::from_triplets(q, r, trips).unwrap();
    FusionInput::new(pm, mask, t).unwrap()
}

fn block_mut(f: &mut LatentFactors, b: usize) -> &mut DMatrix<f64> {
    match b {
        0 => &mut f.u,
        1 => &mut f.v,
        2 => &mut f.q,
        3 => &mut f.z,
        4 => &mut f.a,
        _ => &mut f.w,
    }
}

const BLOCKS: [&str; 6] = ["U", "V", "Q", "Z", "A", "W"];

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let h_fd = 1e-5;
    let mut worst = (0.0f64, "", 0u64);
    for seed in 0..20u64 {
        let x = random_input(P_CAT, REGIONS, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let h = Hyperparams {
            lambda1: rng.random_range(0.1..2.0),
            lambda2: rng.random_range(0.1..2.0),
            lambda3: rng.random_range(0.1..2.0),
            lambda4: rng.random_range(0.1..2.0),
            lambda5: rng.random_range(0.01..0.5),
            k: K,
            ..Hyperparams::default()
        };
        let f0 = LatentFactors::random(P_CAT, REGIONS, 48 * REGIONS, K, 1.0, seed);
        let g = gradients(&f0, &x, &h).unwrap();
        let analytic = [&g.u, &g.v, &g.q, &g.z, &g.a, &g.w];
        let mut f = f0.clone();
        for b in 0..6 {
            let len = block_mut(&mut f, b).len();
            let mut fd = DMatrix::zeros(analytic[b].nrows(), analytic[b].ncols());
            for idx in 0..len {
                let orig = block_mut(&mut f, b)[idx];
                block_mut(&mut f, b)[idx] = orig + h_fd;
                let plus = objective(&f, &x, &h).unwrap().smooth();
                block_mut(&mut f, b)[idx] = orig - h_fd;
                let minus = objective(&f, &x, &h).unwrap().smooth();
                block_mut(&mut f, b)[idx] = orig;
                fd[idx] = (plus - minus) / (2.0 * h_fd);
            }
            let scale = analytic[b].norm().max(fd.norm()).max(1e-12);
            let rel = (analytic[b] - &fd).norm() / scale;
            if rel > worst.0 {
                worst = (rel, BLOCKS[b], seed);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient blocks vs central differences",
        worst.0 <= 1e-4 && secs < 10.0,
        &format!("max relative error {:.2e} (block {}, seed {}), {secs:.2}s", worst.0, worst.1, worst.2),
    )
}

fn criterion_2() -> Verdict {
    let mut worst_rise = f64::NEG_INFINITY;
    let mut all_ran = true;
    for seed in 0..20u64 {
        let x = random_input(P_CAT, REGIONS, seed);
        let h = Hyperparams {
            k: K,
            max_iter: 500,
            epsilon: 0.0,
            seed,
            ..Hyperparams::default()
        };
        let (_, trace) = fit(&x, &h).unwrap();
        all_ran &= trace.iterations == 500;
        let obj = trace.objectives();
        for w in obj.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
    }
    report(
        2,
        "objective non-increasing over 500 iterations",
        all_ran && worst_rise <= 1e-9,
        &format!("largest per-iteration change {worst_rise:.3e}, all 500 iterations run: {all_ran}"),
    )
}

fn criterion_3() -> Verdict {
    let (p, r) = (8, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let u = DMatrix::from_fn(p, K, |_, _| normal.sample(&mut rng));
    let v = DMatrix::from_fn(K, r, |_, _| normal.sample(&mut rng));
    let planted = &u * &v;
    let t = random_input(p, r, 3).t;
    let x = FusionInput::new(planted.clone(), DMatrix::from_element(p, r, 1.0), t).unwrap();
    let h = Hyperparams {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
        k: K,
        alpha0: 0.02,
        rho: 1.0,
        max_iter: 2000,
        ..Hyperparams::default()
    };
    let (f, trace) = fit(&x, &h).unwrap();
    let rmse = ((&planted - &f.u * &f.v).norm_squared() / (p * r) as f64).sqrt();
    report(
        3,
        "planted rank-k recovery",
        rmse < 1e-2 && trace.iterations <= 2000,
        &format!("RMSE {rmse:.2e} after {} iterations ({})", trace.iterations, trace.stop_reason),
    )
}

fn criterion_4() -> Verdict {
    let x = random_input(P_CAT, REGIONS, 4);
    let mut exact = true;
    for update in [UpdateOrder::GaussSeidel, UpdateOrder::Jacobi] {
        let h = Hyperparams {
            lambda2: 0.0,
            lambda3: 0.5,
            k: K,
            update,
            ..Hyperparams::default()
        };
        let mut f = LatentFactors::random(P_CAT, REGIONS, 48 * REGIONS, K, 1.0, 4);
        let before = f.a.clone();
        let alpha = 0.3;
        step(&mut f, &x, &h, alpha).unwrap();
        let expected = soft_threshold_matrix(&before, alpha * h.lambda3);
        exact &= f.a.iter().zip(expected.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let mut nnz = Vec::new();
    for lambda3 in [0.01, 0.1, 1.0] {
        let h = Hyperparams {
            lambda3,
            k: K,
            max_iter: 20_000,
            seed: 4,
            ..Hyperparams::default()
        };
        let (f, trace) = fit(&x, &h).unwrap();
        nnz.push((f.a.iter().filter(|v| **v != 0.0).count(), trace.stop_reason));
    }
    let monotone = nnz.windows(2).all(|w| w[1].0 <= w[0].0);
    let counts: Vec<String> = nnz.iter().map(|(n, s)| format!("{n} ({s})")).collect();
    report(
        4,
        "proximal A-step and sparsity path",
        exact && monotone,
        &format!("soft-threshold bitwise equal: {exact}; nnz(A) over lambda3 0.01/0.1/1: {}", counts.join(", ")),
    )
}

// ---------------------------------------------------------------- crf

fn planted_grid(rows: usize, cols: usize, c: usize, sep: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = rows * cols;
    let labels: Vec<usize> = loop {
        let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        if l.iter().collect::<BTreeSet<_>>().len() == c {
            break l;
        }
    };
    let mut data = DMatrix::zeros(2, n);
    for (i, &l) in labels.iter().enumerate() {
        let angle = std::f64::consts::TAU * l as f64 / c as f64;
        // Means on a circle whose chord between neighbours is `sep`.
        let radius = sep / (2.0 * (std::f64::consts::PI / c as f64).sin());
        data[(0, i)] = radius * angle.cos() + normal.sample(&mut rng);
        data[(1, i)] = radius * angle.sin() + normal.sample(&mut rng);
    }
    data
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let adj = Adjacency::lattice(3, 3);
    let (mut optimal, mut above_init) = (0, 0);
    for seed in 0..100u64 {
        let data = planted_grid(3, 3, 2, 5.0, seed);
        let fit = crf_fit(&data, &adj, 2, 1.0, seed, &CrfOptions::default()).unwrap();
        let (_, best) = exhaustive_map(&data, &fit.model, &adj).unwrap();
        let tol = 1e-9 * (1.0 + best.abs());
        if fit.final_energy <= best + tol {
            optimal += 1;
        }
        if fit.final_energy > fit.init_energy + 1e-9 * (1.0 + fit.init_energy.abs()) {
            above_init += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        5,
        "CRF vs exhaustive enumeration on 3x3 grids",
        optimal >= 90 && above_init == 0 && secs < 30.0,
        &format!("{optimal}/100 at the global minimum, {above_init} above the K-means energy, {secs:.2}s"),
    )
}

fn criterion_6() -> Verdict {
    let adj = Adjacency::lattice(6, 6);
    let mut argmax_ok = 0;
    for seed in 0..20u64 {
        let data = planted_grid(6, 6, 3, 3.0, 600 + seed);
        let opts = CrfOptions::default();
        let fit = crf_fit(&data, &adj, 3, 0.0, seed, &opts).unwrap();
        let m = &fit.model;
        let argmax: Vec<usize> = (0..data.ncols())
            .map(|i| (0..m.c).min_by(|&a, &b| m.nll(&data, i, a).total_cmp(&m.nll(&data, i, b))).unwrap())
            .collect();
        if fit.rounds < opts.max_rounds && argmax == m.labels {
            argmax_ok += 1;
        }
    }
    let mut icm_ok = 0;
    let mut runs = 0;
    for seed in 0..20u64 {
        let data = planted_grid(6, 6, 3, 2.0, 700 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init: Vec<usize> = (0..data.ncols()).map(|_| rng.random_range(0..3)).collect();
        for beta in [0.5, 2.0] {
            let model = ZoneModel::fit_gaussians(&data, init.clone(), 3, beta, DEFAULT_VARIANCE_FLOOR);
            for schedule in [IcmSchedule::Sequential, IcmSchedule::Colored] {
                runs += 1;
                let res = icm_map(init.clone(), &data, &model, &adj, 100, schedule).unwrap();
                let e_final = energy(&res.labels, &data, &model, &adj).unwrap();
                let monotone = res.energies.windows(2).all(|w| w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()));
                if monotone && (e_final - res.energies.last().unwrap()).abs() <= 1e-9 * (1.0 + e_final.abs()) {
                    icm_ok += 1;
                }
            }
        }
    }
    report(
        6,
        "CRF degeneracies",
        argmax_ok == 20 && icm_ok == runs,
        &format!("beta=0 labels equal per-region argmax in {argmax_ok}/20; ICM monotone in {icm_ok}/{runs} runs"),
    )
}

// ---------------------------------------------------------------- synthetic city

struct CityRun {
    latent_ari: f64,
    baseline_ari: f64,
    latent_lost: usize,
    baseline_lost: usize,
    annotation_ok: bool,
}

/// Observed regions carrying the label of the planted POI-free zone.
fn lost_regions(labels: &[usize], city: &SynthCity, no_poi_zone: usize) -> usize {
    let mut counts = vec![0usize; labels.iter().max().map_or(0, |m| m + 1)];
    for (i, &l) in labels.iter().enumerate() {
        if city.truth[i] == no_poi_zone {
            counts[l] += 1;
        }
    }
    let default = (0..counts.len()).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap();
    (0..labels.len()).filter(|&i| city.observed[i] && labels[i] == default).count()
}

fn annotation_algebra(p: &Pipeline) -> bool {
    let labels = p.load_labels().unwrap();
    let poi = p.load_poi().unwrap();
    let profiles = zone_profiles(&labels, &poi, p.config().c).unwrap();
    let npr_ok = profiles
        .iter()
        .filter_map(|z| z.npr.as_ref())
        .all(|npr| npr.iter().copied().fold(f64::NEG_INFINITY, f64::max) == 1.0);
    let gs: Vec<&Vec<f64>> = profiles.iter().filter_map(|z| z.g.as_ref()).collect();
    let sum_ok = gs.is_empty()
        || (0..gs[0].len()).all(|c| gs.iter().map(|g| g[c]).sum::<f64>().abs() <= 1e-12);
    npr_ok && sum_ok
}

fn run_city(seed: u64, root: &Path) -> CityRun {
    let spec = SynthCitySpec::four_zone(32, 32, 2000, 0.10, seed);
    let city = gen_synthetic_city(&spec).unwrap();
    let dir = root.join(format!("seed{seed}"));
    city.write(&dir).unwrap();
    let no_poi_zone = (0..spec.zones).find(|&z| spec.poi_weights[z].iter().all(|w| *w == 0.0)).unwrap();

    let cfg = PipelineConfig::parse_str(&synthetic_config_text(&spec).unwrap(), &dir).unwrap();
    let mut latent = Pipeline::new(cfg.clone()).unwrap();
    latent.run_all().unwrap();
    let latent_labels = latent.load_labels().unwrap();

    let mut base_cfg = cfg;
    for (k, v) in [("feature", "raw_poi"), ("method", "kmeans"), ("feature_scaling", "none")] {
        base_cfg.set(k, v).unwrap();
    }
    base_cfg.output = dir.join("baseline");
    let mut baseline = Pipeline::new(base_cfg).unwrap();
    baseline.run_all().unwrap();
    let baseline_labels = baseline.load_labels().unwrap();

    CityRun {
        latent_ari: adjusted_rand_index(&latent_labels, &city.truth).unwrap(),
        baseline_ari: adjusted_rand_index(&baseline_labels, &city.truth).unwrap(),
        latent_lost: lost_regions(&latent_labels, &city, no_poi_zone),
        baseline_lost: lost_regions(&baseline_labels, &city, no_poi_zone),
        annotation_ok: annotation_algebra(&latent) && annotation_algebra(&baseline),
    }
}

fn criteria_7_to_9() -> Vec<Verdict> {
    let root = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let runs: Vec<CityRun> = pool.install(|| (1..=5).map(|seed| run_city(seed, root.path())).collect());
    let secs = start.elapsed().as_secs_f64();

    let aris: Vec<String> = runs.iter().map(|r| format!("{:.3}/{:.3}", r.latent_ari, r.baseline_ari)).collect();
    let recovered = runs.iter().all(|r| r.latent_ari >= 0.7 && r.latent_ari > r.baseline_ari);
    let v7 = report(
        7,
        "synthetic-city recovery",
        recovered && secs < 300.0,
        &format!("ARI latent/baseline per seed [{}], {secs:.1}s single-threaded", aris.join(", ")),
    );

    let latent_lost: Vec<usize> = runs.iter().map(|r| r.latent_lost).collect();
    let baseline_lost: Vec<usize> = runs.iter().map(|r| r.baseline_lost).collect();
    let v8 = report(
        8,
        "information preservation",
        latent_lost.iter().all(|&n| n == 0) && baseline_lost.iter().any(|&n| n >= 1),
        &format!("observed regions in the no-POI zone: latent {latent_lost:?}, baseline {baseline_lost:?}"),
    );

    let hand = zone_g(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let hand_ok = hand == vec![vec![1.0, -2.0], vec![-2.0, 1.0], vec![1.0, 1.0]];
    let runs_ok = runs.iter().all(|r| r.annotation_ok);
    let v9 = report(
        9,
        "annotation algebra",
        hand_ok && runs_ok,
        &format!("sum of G and max NPR hold on all 10 runs: {runs_ok}; three-zone example exact: {hand_ok}"),
    );
    vec![v7, v8, v9]
}

// ---------------------------------------------------------------- geohash

fn criterion_10() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut contained, mut refined, mut total) = (0, 0, 0);
    for _ in 0..1000 {
        let p = GeoPoint::new(rng.random_range(-90.0..90.0), rng.random_range(-180.0..180.0)).unwrap();
        for level in 1..=12 {
            total += 1;
            let cell = encode(p, level).unwrap();
            let b = cell.bbox();
            if b.contains(p) {
                contained += 1;
            }
            if level < 12 {
                let child = encode(p, level + 1).unwrap();
                let cb = child.bbox();
                if child.code().starts_with(cell.code())
                    && cb.min_lat >= b.min_lat
                    && cb.max_lat <= b.max_lat
                    && cb.min_lon >= b.min_lon
                    && cb.max_lon <= b.max_lon
                {
                    refined += 1;
                }
            } else {
                refined += 1;
            }
        }
    }
    let raleigh = GeoPoint::new(35.7796, -78.6382).unwrap();
    let (width, height) = encode(raleigh, 6).unwrap().bbox().dimensions_m();
    let width_err = (width - 1200.0).abs() / 1200.0;
    let height_err = (height - 609.4).abs() / 609.4;
    report(
        10,
        "geohash round trip, refinement and level-6 size",
        contained == total && refined == total && width_err <= 0.01 && height_err <= 0.01,
        &format!(
            "contained {contained}/{total}, refined {refined}/{total}; level-6 cell {width:.1} m x {height:.1} m \
             (off by {:.1}% and {:.2}%)",
            100.0 * width_err,
            100.0 * height_err
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn zonefuse(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_zonefuse")).args(args).output().unwrap();
    assert!(out.status.success(), "zonefuse {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn criterion_11() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let city = root.path().join("city");
    let city_s = city.to_str().unwrap();
    zonefuse(&["synth", "--out", city_s, "--width", "16", "--height", "16", "--users", "300", "--days", "5", "--seed", "11"]);
    let config = city.join("config.txt");
    let mut outputs = Vec::new();
    for run in ["first", "second"] {
        let out = root.path().join(run);
        zonefuse(&[
            "--deterministic",
            "run",
            "--config",
            config.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
            "--set",
            "max_iter=500",
        ]);
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        outputs.push((read("labels.csv"), read("report.csv")));
    }
    let same = outputs[0] == outputs[1];
    report(
        11,
        "deterministic runs are byte-identical",
        same,
        &format!("labels.csv and report.csv identical across two runs: {same}"),
    )
}

#[test]
fn acceptance() {
    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_6()];
    verdicts.extend(criteria_7_to_9());
    verdicts.push(criterion_10());
    verdicts.push(criterion_11());
    let passed = verdicts.iter().filter(|v| v.pass).count();
    let _ = writeln!(std::io::stderr(), "acceptance: {passed}/{} criteria pass", verdicts.len());
    let unexpected: Vec<usize> = verdicts
        .iter()
        .filter(|v| !v.pass && !KNOWN_UNATTAINABLE.contains(&v.id))
        .map(|v| v.id)
        .collect();
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}
