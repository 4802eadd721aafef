use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use traitscale_core::cwm::{
    build_training_set, haversine_km, pixel_cwm, read_training_csv, CwmConfig, CwmRecord,
    CwmRecords,
};
use traitscale_core::forest::*;
use traitscale_core::gapfill::{
    gapfill_trait, CellSource, GapfillParams, GapfillReport, HyperGrid, ImputedTable,
};
use traitscale_core::pft::{AbundanceGrid, Agreement, ConfusionMatrix};
use traitscale_core::pipeline::synth::DEFAULT_MISSING;
use traitscale_core::pipeline::*;
use traitscale_core::raster::{read_tsr, FeatureRaster, Geometry, RasterGrid, DEFAULT_NODATA};
use traitscale_core::regress::*;
use traitscale_core::seed::rng_for;
use traitscale_core::stats::compute_metrics;
use traitscale_core::trait_table::*;

const SEED: u64 = 2024;

#[derive(Default)]
struct Shared {
    gapfill_reports: Vec<GapfillReport>,
    run_dir: Option<PathBuf>,
    comparisons: Vec<ComparisonReport>,
}

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn within(start: Instant, limit: Duration) -> String {
    let took = start.elapsed();
    assert!(took < limit, "took {took:.1?}, limit {limit:?}");
    format!("{:.1}s", took.as_secs_f64())
}

// 1

const VALIDATION_COUNTS: [[u64; 7]; 7] = [
    [870, 5, 7, 4, 3, 2, 0],
    [3, 971, 0, 2, 0, 0, 0],
    [15, 1, 406, 0, 0, 2, 0],
    [3, 2, 1, 992, 0, 2, 0],
    [4, 4, 10, 4, 737, 78, 15],
    [1, 1, 4, 4, 30, 934, 20],
    [0, 0, 0, 0, 4, 17, 965],
];

fn confusion_recomputation(_: &mut Shared) -> String {
    let start = Instant::now();
    let a = Agreement::from_matrix(ConfusionMatrix {
        counts: VALIDATION_COUNTS,
    })
    .unwrap();
    assert_eq!(a.matrix.total(), 6123);
    assert_eq!(a.matrix.trace(), 5875);
    assert!(
        (a.overall_accuracy - 0.9595).abs() <= 0.0005,
        "{}",
        a.overall_accuracy
    );
    // expanding the matrix into label pairs must give the same answer
    let mut refs = Vec::new();
    let mut preds = Vec::new();
    for (i, row) in VALIDATION_COUNTS.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            for _ in 0..c {
                refs.push(PftClass::from_index(i).unwrap());
                preds.push(PftClass::from_index(j).unwrap());
            }
        }
    }
    let b = traitscale_core::pft::confusion_and_kappa(&refs, &preds).unwrap();
    assert_eq!(b.overall_accuracy, a.overall_accuracy);
    assert_eq!(b.kappa, a.kappa);
    let t = within(start, Duration::from_secs(1));
    format!(
        "accuracy {:.4}, kappa {:.4}, {t}",
        a.overall_accuracy,
        a.kappa.unwrap()
    )
}

// 2

fn random_x(n: usize, f: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, f, |_, _| rng.random_range(-2.0..2.0))
}

fn kernel_algebra(_: &mut Shared) -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let n = 2 + i % 49;
        let f = 1 + i % 3;
        let x = random_x(n, f, &mut rng);
        let y: Vec<f64> = (0..n)
            .map(|i| (x[(i, 0)] * 1.3).sin() + 0.2 * rng.random::<f64>())
            .collect();
        let theta = ArdParams {
            nu: rng.random_range(0.2..3.0),
            sigmas: (0..f).map(|_| rng.random_range(0.3..3.0)).collect(),
            sigma_n: rng.random_range(0.01..1.0),
        };
        let g = fit_gpr_fixed(&x, &y, &theta).unwrap();
        let k = fit_krr(&x, &y, &theta).unwrap();
        let xt = random_x(9, f, &mut rng);
        for ((gm, var), km) in g
            .predict_with_variance(&xt)
            .unwrap()
            .iter()
            .zip(k.predict(&xt))
        {
            let d = (gm - km).abs() / km.abs().max(1.0);
            worst = worst.max(d);
            assert!(d <= 1e-10, "n={n}: gpr {gm} krr {km}");
            assert!(*var >= 0.0);
        }
    }

    // N = 3 against an explicit cofactor inverse of K + sigma_n^2 I
    let x = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.5, -0.2, 1.5, 0.3]);
    let y = [1.0, -0.5, 2.0];
    let theta = ArdParams {
        nu: 1.7,
        sigmas: vec![0.9, 1.3],
        sigma_n: 0.3,
    };
    let m = fit_krr(&x, &y, &theta).unwrap();
    let k = DMatrix::from_fn(3, 3, |i, j| {
        let d0 = (x[(i, 0)] - x[(j, 0)]) / 0.9;
        let d1 = (x[(i, 1)] - x[(j, 1)]) / 1.3;
        1.7 * (-(d0 * d0 + d1 * d1) / 2.0).exp() + if i == j { 0.09 } else { 0.0 }
    });
    let cof = |r: usize, c: usize| {
        let rs: Vec<usize> = (0..3).filter(|&i| i != r).collect();
        let cs: Vec<usize> = (0..3).filter(|&j| j != c).collect();
        let d = k[(rs[0], cs[0])] * k[(rs[1], cs[1])] - k[(rs[0], cs[1])] * k[(rs[1], cs[0])];
        if (r + c).is_multiple_of(2) {
            d
        } else {
            -d
        }
    };
    let det: f64 = (0..3).map(|j| k[(0, j)] * cof(0, j)).sum();
    let inv = DMatrix::from_fn(3, 3, |i, j| cof(j, i) / det);
    let mean = (1.0 - 0.5 + 2.0) / 3.0;
    let alpha = inv * DVector::from_iterator(3, y.iter().map(|v| v - mean));
    for i in 0..3 {
        assert!(
            (m.alphas[i] - alpha[i]).abs() < 1e-10,
            "alpha {i}: {} vs {}",
            m.alphas[i],
            alpha[i]
        );
    }
    let t = within(start, Duration::from_secs(5));
    format!("50 problems, worst relative gap {worst:.1e}, {t}")
}

// 3

fn gradient_check(_: &mut Shared) -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let x = random_x(30, 3, &mut rng);
    let y: Vec<f64> = (0..30)
        .map(|i| (x[(i, 0)]).sin() + 0.5 * x[(i, 1)] * x[(i, 2)] + 0.1 * rng.random::<f64>())
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let theta = ArdParams {
            nu: rng.random_range(0.3..3.0),
            sigmas: (0..3).map(|_| rng.random_range(0.3..3.0)).collect(),
            sigma_n: rng.random_range(0.1..1.0),
        };
        let e = log_marginal_likelihood(&x, &y, &theta).unwrap();
        let base = theta.to_log();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut up = base.clone();
            up[k] += h;
            let mut dn = base.clone();
            dn[k] -= h;
            let fd = (log_marginal_likelihood(&x, &y, &ArdParams::from_log(&up))
                .unwrap()
                .value
                - log_marginal_likelihood(&x, &y, &ArdParams::from_log(&dn))
                    .unwrap()
                    .value)
                / (2.0 * h);
            let rel = (fd - e.gradient[k]).abs() / fd.abs().max(e.gradient[k].abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel < 1e-5,
                "component {k}: analytic {} vs fd {fd}",
                e.gradient[k]
            );
        }
    }
    let t = within(start, Duration::from_secs(10));
    format!("10 points x 5 components, worst relative error {worst:.1e}, {t}")
}

// 4

fn sse(y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - m).powi(2)).sum()
}

/// Best SSE decrease over every threshold and every category subset.
fn exhaustive_decrease(data: &Dataset, y: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for j in 0..data.n_cols() {
        let present: Vec<usize> = (0..data.n_rows())
            .filter(|&r| !data.value(r, j).is_nan())
            .collect();
        let parent = sse(&present.iter().map(|&r| y[r]).collect::<Vec<_>>());
        let mut values: Vec<f64> = present.iter().map(|&r| data.value(r, j)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let mut score = |goes_left: &dyn Fn(f64) -> bool| {
            let (l, r): (Vec<usize>, Vec<usize>) =
                present.iter().partition(|&&i| goes_left(data.value(i, j)));
            let yl: Vec<f64> = l.iter().map(|&i| y[i]).collect();
            let yr: Vec<f64> = r.iter().map(|&i| y[i]).collect();
            best = best.max(parent - sse(&yl) - sse(&yr));
        };
        match data.schema().columns[j].kind {
            ColumnKind::Numeric => {
                for w in values.windows(2) {
                    let t = 0.5 * (w[0] + w[1]);
                    score(&|v| v < t);
                }
            }
            ColumnKind::Categorical { .. } => {
                let m = values.len();
                for mask in 1..(1u32 << m).saturating_sub(1) {
                    let left: Vec<f64> = (0..m)
                        .filter(|b| mask & (1 << b) != 0)
                        .map(|b| values[b])
                        .collect();
                    score(&|v| left.contains(&v));
                }
            }
        }
    }
    best
}

fn split(predictor: usize, threshold: f64) -> SplitRule {
    SplitRule {
        predictor,
        kind: SplitKind::NumericThreshold { threshold },
    }
}

fn leaf(v: f64) -> Node {
    Node {
        branch: None,
        value: LeafValue::Mean(v),
        gain: 0.0,
        n_samples: 1,
    }
}

fn branch(
    rule: SplitRule,
    surrogates: Vec<Surrogate>,
    default_direction: Direction,
    left: u32,
    right: u32,
) -> Node {
    Node {
        branch: Some(Branch {
            rule,
            surrogates,
            default_direction,
            left,
            right,
        }),
        value: LeafValue::Mean(0.0),
        gain: 1.0,
        n_samples: 2,
    }
}

/// Root on x0 < 5 with surrogates x1 < 3 and flipped x2 < 7, default right.
/// Left child on categorical x3 in {0, 2} | {1}, surrogate x1 < 1, default left.
fn traced_tree() -> Tree {
    Tree {
        nodes: vec![
            branch(
                split(0, 5.0),
                vec![
                    Surrogate {
                        rule: split(1, 3.0),
                        agreement: 0.9,
                        flipped: false,
                    },
                    Surrogate {
                        rule: split(2, 7.0),
                        agreement: 0.8,
                        flipped: true,
                    },
                ],
                Direction::Right,
                1,
                2,
            ),
            branch(
                SplitRule {
                    predictor: 3,
                    kind: SplitKind::CategoricalSubset {
                        left: vec![0, 2],
                        right: vec![1],
                    },
                },
                vec![Surrogate {
                    rule: split(1, 1.0),
                    agreement: 0.7,
                    flipped: false,
                }],
                Direction::Left,
                3,
                4,
            ),
            leaf(30.0),
            leaf(10.0),
            leaf(20.0),
        ],
    }
}

fn forest_oracle(_: &mut Shared) -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let mut checked = 0;
    for n in 2..=8usize {
        for p in 1..=3usize {
            for _ in 0..60 {
                let columns: Vec<Column> = (0..p)
                    .map(|j| Column {
                        name: format!("x{j}"),
                        kind: if rng.random::<bool>() {
                            ColumnKind::Categorical { levels: 4 }
                        } else {
                            ColumnKind::Numeric
                        },
                    })
                    .collect();
                let cols: Vec<Vec<f64>> = (0..p)
                    .map(|_| {
                        (0..n)
                            .map(|_| {
                                if rng.random::<f64>() < 0.15 {
                                    f64::NAN
                                } else {
                                    f64::from(rng.random_range(0u8..4))
                                }
                            })
                            .collect()
                    })
                    .collect();
                let y: Vec<f64> = (0..n)
                    .map(|_| f64::from(rng.random_range(-5i32..5)))
                    .collect();
                let data = Dataset::from_columns(FeatureSchema { columns }, cols).unwrap();
                let params = TreeParams {
                    max_splits: 1,
                    min_node_size: 2,
                    mtry: Some(p),
                    task: Task::Regression,
                };
                let tree = fit_tree(&data, &y, &params, &mut rng_for(SEED, &[])).unwrap();
                let oracle = exhaustive_decrease(&data, &y);
                let got = tree.root().gain * n as f64;
                assert!(
                    (got - oracle).abs() <= 1e-9 * (1.0 + oracle),
                    "n={n} p={p}: got {got}, oracle {oracle}"
                );
                checked += 1;
            }
        }
    }

    let tree = traced_tree();
    let nan = f64::NAN;
    // (row, leaf) traced by hand through the rules above
    let cases: [([f64; 4], usize); 24] = [
        ([1.0, 9.0, 9.0, 0.0], 3),
        ([1.0, 9.0, 9.0, 1.0], 4),
        ([1.0, 0.0, 0.0, 2.0], 3),
        ([6.0, 0.0, 0.0, 0.0], 2),
        ([5.0, 0.0, 0.0, 0.0], 2),
        ([4.999, 0.0, 0.0, 1.0], 4),
        ([nan, 2.0, 0.0, 0.0], 3),
        ([nan, 2.0, 0.0, 1.0], 4),
        ([nan, 3.0, 0.0, 0.0], 2),
        ([nan, nan, 8.0, 0.0], 3),
        ([nan, nan, 7.0, 1.0], 4),
        ([nan, nan, 6.9, 0.0], 2),
        ([nan, nan, nan, 0.0], 2),
        ([nan, 0.5, nan, 0.0], 3),
        ([1.0, 0.5, 0.0, nan], 3),
        ([1.0, 2.0, 0.0, nan], 4),
        ([1.0, nan, 0.0, nan], 3),
        ([1.0, 0.5, 0.0, 3.0], 3),
        ([1.0, 1.5, 0.0, 3.0], 4),
        ([1.0, nan, 0.0, 3.0], 3),
        ([nan, 2.5, 9.0, nan], 4),
        ([nan, nan, 9.0, nan], 3),
        ([nan, 0.2, 0.0, 1.0], 4),
        ([9.0, nan, nan, nan], 2),
    ];
    for (row, want) in cases {
        assert_eq!(tree.leaf_index(&row), want, "row {row:?}");
    }
    let t = within(start, Duration::from_secs(30));
    format!("{checked} datasets, {} traced rows, {t}", cases.len())
}

// 5

/// Traits from family, genus and species effects, climate and trait-trait
/// structure; every cell is known.
fn gapfill_truth(n: usize, seed: u64) -> TraitTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
    let n_species = 240;
    let fam: Vec<f64> = (0..n_species / 24).map(|_| z()).collect();
    let gen: Vec<f64> = (0..n_species / 6).map(|_| 0.7 * z()).collect();
    let sp: Vec<f64> = (0..n_species).map(|_| 0.5 * z()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let records = (0..n)
        .map(|i| {
            let s = rng.random_range(0..n_species);
            let e = fam[s / 24] + gen[s / 6] + sp[s];
            let bio1: f64 = rng.random_range(-5.0..25.0);
            let bio12: f64 = rng.random_range(200.0..2000.0);
            let mut noise = || -> f64 { StandardNormal.sample(&mut rng) };
            let sla = (15.0 + 3.5 * e + 0.2 * (bio1 - 10.0) + 0.8 * noise()).max(0.5);
            let ldmc = (0.35 - 0.008 * (sla - 15.0) + 0.01 * noise()).clamp(0.05, 0.95);
            let lnc = (20.0 + 0.5 * (sla - 15.0) + 0.002 * bio12 + noise()).max(1.0);
            let lpc = (1.3 + 0.1 * e + 0.05 * noise()).max(0.1);
            let mut climate = [None; N_BIO];
            climate[0] = Some(bio1);
            climate[4] = Some(bio1 + 12.0 + 2.0 * noise());
            climate[11] = Some(bio12);
            TraitRecord {
                record_id: format!("g{i:05}"),
                species: format!("sp{s}"),
                genus: format!("ge{}", s / 6),
                family: format!("fa{}", s / 24),
                growth_form: [GrowthForm::Tree, GrowthForm::Shrub, GrowthForm::Grass][(s / 24) % 3],
                leaf_type: if s % 24 < 12 {
                    LeafType::Broadleaf
                } else {
                    LeafType::Needleleaf
                },
                leaf_phenology: if s % 2 == 0 {
                    Phenology::Deciduous
                } else {
                    Phenology::Evergreen
                },
                latitude: None,
                longitude: None,
                climate,
                traits: [Some(sla), Some(ldmc), Some(lnc), Some(lpc), Some(lnc / lpc)],
            }
        })
        .collect();
    TraitTable::new(records).unwrap()
}

fn gapfill_recovery(shared: &mut Shared) -> String {
    let start = Instant::now();
    let truth = gapfill_truth(10_000, SEED + 5);
    let mut masked = truth.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 55);
    for r in &mut masked.records {
        for (k, frac) in DEFAULT_MISSING.iter().enumerate() {
            if rng.random::<f64>() < *frac {
                r.traits[k] = None;
            }
        }
    }
    let params = GapfillParams {
        grid: HyperGrid {
            n_trees: vec![50, 100],
            learning_rate: vec![0.1],
            max_splits: vec![15, 63],
        },
        folds: 5,
        seed: SEED,
        ..GapfillParams::default()
    };
    let (imputed, report) = gapfill_trait(
        &ImputedTable::from_table(masked.clone()),
        LeafTrait::Sla,
        &params,
    )
    .unwrap();
    assert!(
        (report.missing_fraction - 0.47).abs() < 0.02,
        "{}",
        report.missing_fraction
    );
    let mut pred = Vec::new();
    let mut obs = Vec::new();
    for (i, r) in imputed.table.records.iter().enumerate() {
        match imputed.provenance[i][0] {
            CellSource::Imputed => {
                pred.push(r.traits[0].unwrap());
                obs.push(truth.records[i].traits[0].unwrap());
            }
            CellSource::Observed => {
                assert_eq!(
                    r.traits[0].map(f64::to_bits),
                    masked.records[i].traits[0].map(f64::to_bits)
                )
            }
            CellSource::Missing => panic!("SLA cell left missing"),
        }
    }
    let m = compute_metrics(&pred, &obs).unwrap();
    let mean_sla = traitscale_core::stats::mean(&obs);
    shared.gapfill_reports.push(report.clone());
    let r = m.r.unwrap();
    assert!(r > 0.9, "held-out R {r}");
    assert!(
        m.me.abs() < 0.05 * mean_sla,
        "ME {} vs mean {mean_sla}",
        m.me
    );
    let t = within(start, Duration::from_secs(120));
    format!(
        "{} held-out cells, R {r:.3}, ME {:.3} (mean {mean_sla:.2}), {t}",
        pred.len(),
        m.me
    )
}

// 6

fn cwm_rec(id: &str, pft: PftClass, lat: f64, lon: f64, sla: f64) -> CwmRecord {
    CwmRecord {
        record_id: id.into(),
        pft,
        lat,
        lon,
        traits: [
            sla,
            0.2 + sla / 100.0,
            18.0 + sla / 3.0,
            1.1 + sla / 50.0,
            sla / 2.0,
        ],
    }
}

fn shifted_mean(v: &[f64]) -> f64 {
    let x0 = v[0];
    x0 + v.iter().map(|x| x - x0).sum::<f64>() / v.len() as f64
}

/// Brute-force CWM: scan every record, sort, average, weight.
fn brute_cwm(
    center: (f64, f64),
    ab: &[f64; N_PFT],
    recs: &[CwmRecord],
    cfg: &CwmConfig,
) -> Option<[f64; N_TRAITS]> {
    let (mut vegetated, mut represented) = (0.0, 0.0);
    let mut weighted = [0.0; N_TRAITS];
    for pft in PftClass::VEGETATED {
        let a = ab[pft.index()];
        vegetated += a;
        if a <= 0.0 {
            continue;
        }
        let mut near: Vec<(&CwmRecord, f64)> = recs
            .iter()
            .filter(|r| r.pft == pft)
            .map(|r| (r, haversine_km(center, (r.lat, r.lon))))
            .filter(|(_, d)| *d <= cfg.max_km)
            .collect();
        near.sort_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then_with(|| a.0.record_id.cmp(&b.0.record_id))
        });
        near.truncate(cfg.k);
        if near.is_empty() {
            continue;
        }
        for t in 0..N_TRAITS {
            let v: Vec<f64> = near.iter().map(|(r, _)| r.traits[t]).collect();
            weighted[t] += a * shifted_mean(&v);
        }
        represented += a;
    }
    let frac = if vegetated > 0.0 {
        represented / vegetated
    } else {
        0.0
    };
    (frac > cfg.min_represented && represented > 0.0).then(|| weighted.map(|w| w / represented))
}

fn cwm_oracle(_: &mut Shared) -> String {
    let start = Instant::now();
    let cfg = CwmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 6);
    let mut compared = 0;
    for case in 0..200 {
        let w = rng.random_range(1..=5);
        let h = rng.random_range(1..=5);
        let g = Geometry::new(w, h, 6.0, 46.0, 0.4, "EPSG:4326");
        let n = rng.random_range(0..=50);
        let recs: Vec<CwmRecord> = (0..n)
            .map(|i| {
                cwm_rec(
                    &format!("r{i:02}"),
                    PftClass::from_index(rng.random_range(0..N_PFT)).unwrap(),
                    rng.random_range(43.5..46.5),
                    rng.random_range(5.5..8.5),
                    rng.random_range(1.0..40.0),
                )
            })
            .collect();
        let fractions: Vec<Option<[f64; N_PFT]>> = (0..w * h)
            .map(|_| {
                (rng.random::<f64>() > 0.1).then(|| {
                    let mut a = [0.0; N_PFT];
                    for v in &mut a {
                        if rng.random::<f64>() < 0.5 {
                            *v = rng.random::<f64>();
                        }
                    }
                    a
                })
            })
            .collect();
        let ab = AbundanceGrid {
            geometry: g.clone(),
            fractions: fractions.clone(),
        };
        let feats = FeatureRaster {
            geometry: g.clone(),
            names: vec!["f0".into()],
            bands: vec![RasterGrid::new(
                g.clone(),
                (0..w * h).map(|i| i as f64).collect(),
                DEFAULT_NODATA,
            )
            .unwrap()],
            lst_supplied: false,
        };
        let set =
            build_training_set(&ab, &feats, &CwmRecords::from_records(recs.clone()), &cfg).unwrap();
        let mut row = 0;
        for (i, a) in fractions.iter().enumerate() {
            let Some(a) = a else { continue };
            let (x, y) = g.center(i % w, i / w);
            let direct =
                pixel_cwm(i, (y, x), a, &CwmRecords::from_records(recs.clone()), &cfg).unwrap();
            match brute_cwm((y, x), a, &recs, &cfg) {
                Some(want) => {
                    let s = direct.accepted().expect("oracle accepts the pixel");
                    assert_eq!(set.samples[row].pixel_id, i, "case {case}");
                    for t in 0..N_TRAITS {
                        assert_eq!(
                            set.y[(row, t)].to_bits(),
                            want[t].to_bits(),
                            "case {case} pixel {i}"
                        );
                        assert_eq!(s.trait_values[t].to_bits(), want[t].to_bits());
                    }
                    row += 1;
                    compared += 1;
                }
                None => assert!(
                    direct.accepted().is_none(),
                    "case {case} pixel {i}: oracle rejects"
                ),
            }
        }
        assert_eq!(row, set.len());
    }

    let c = (50.0, 10.0);
    let index = CwmRecords::from_records(vec![
        cwm_rec("g1", PftClass::Grl, 50.1, 10.0, 18.0),
        cwm_rec("g2", PftClass::Grl, 50.0, 10.2, 22.0),
        cwm_rec("s1", PftClass::Shl, 49.9, 10.0, 15.0),
        cwm_rec("e1", PftClass::Enf, 50.05, 10.0, 4.0),
        cwm_rec("e2", PftClass::Enf, 50.0, 9.9, 5.0),
        cwm_rec("e3", PftClass::Enf, 49.95, 10.1, 9.0),
        cwm_rec("far", PftClass::Ebf, 53.0, 10.0, 30.0),
    ]);
    let ab = |pairs: &[(PftClass, f64)]| {
        let mut a = [0.0; N_PFT];
        for (p, v) in pairs {
            a[p.index()] = *v;
        }
        a
    };
    let sla = |a: [f64; N_PFT], idx: &CwmRecords| {
        pixel_cwm(0, c, &a, idx, &cfg)
            .unwrap()
            .accepted()
            .map(|s| s.trait_values[0])
    };
    use PftClass::*;
    let edge: Vec<(&str, Option<f64>)> = vec![
        (
            "both represented",
            sla(ab(&[(Grl, 0.5), (Shl, 0.5)]), &index),
        ),
        (
            "unrepresented share renormalized",
            sla(ab(&[(Grl, 0.6), (Ebf, 0.4)]), &index),
        ),
        (
            "exactly half rejected",
            sla(ab(&[(Grl, 0.5), (Ebf, 0.5)]), &index),
        ),
        (
            "just over half accepted",
            sla(ab(&[(Grl, 0.51), (Ebf, 0.49)]), &index),
        ),
        (
            "just under half rejected",
            sla(ab(&[(Grl, 0.49), (Ebf, 0.51)]), &index),
        ),
        (
            "barren outside denominator",
            sla(ab(&[(Barren, 0.9), (Grl, 0.1)]), &index),
        ),
        ("all barren rejected", sla(ab(&[(Barren, 1.0)]), &index)),
        (
            "unnormalized abundance",
            sla(ab(&[(Grl, 1.0), (Shl, 1.0)]), &index),
        ),
        (
            "no records rejected",
            sla(ab(&[(Grl, 1.0)]), &CwmRecords::default()),
        ),
        ("far records ignored", sla(ab(&[(Ebf, 1.0)]), &index)),
        (
            "three pfts, one missing",
            sla(ab(&[(Grl, 0.3), (Enf, 0.4), (Ebf, 0.3)]), &index),
        ),
        (
            "zero share contributes nothing",
            sla(ab(&[(Enf, 1.0), (Grl, 0.0)]), &index),
        ),
    ];
    let want: Vec<Option<f64>> = vec![
        Some(0.5 * 20.0 + 0.5 * 15.0),
        Some(20.0),
        None,
        Some(20.0),
        None,
        Some(20.0),
        None,
        Some((20.0 + 15.0) / 2.0),
        None,
        None,
        Some((0.3 * 20.0 + 0.4 * 6.0) / 0.7),
        Some(6.0),
    ];
    for ((name, got), want) in edge.iter().zip(&want) {
        match (got, want) {
            (Some(g), Some(w)) => assert!((g - w).abs() <= 1e-12 * w.abs(), "{name}: {g} vs {w}"),
            (None, None) => {}
            _ => panic!("{name}: got {got:?}, want {want:?}"),
        }
    }
    let t = within(start, Duration::from_secs(5));
    format!(
        "{compared} pixels bit-identical over 200 grids, {} edge cases, {t}",
        edge.len()
    )
}

// 7

fn e2e_world() -> SynthConfig {
    SynthConfig {
        width: 64,
        height: 64,
        ratio: 4,
        pixel_deg: 0.0625,
        patch_pixels: 8.0,
        ..SynthConfig::default()
    }
}

/// Reduced search grids for desk-scale runs.
fn desk_scale(cfg: &mut PipelineConfig) {
    cfg.gapfill.grid = HyperGrid {
        n_trees: vec![50, 100],
        learning_rate: vec![0.1],
        max_splits: vec![15, 63],
    };
    cfg.gapfill.folds = 5;
    cfg.train.realizations = 5;
    cfg.train.grids.rf_trees = 100;
    cfg.train.grids.rf_min_node_size = vec![5];
}

fn end_to_end(shared: &mut Shared) -> String {
    let start = Instant::now();
    let dir = workdir("e2e");
    let world = synth_world(&e2e_world(), SEED).unwrap();
    write_world(&world, &dir).unwrap();
    let mut cfg = PipelineConfig::load(&dir.join("pipeline.toml")).unwrap();
    desk_scale(&mut cfg);
    let manifest = run_pipeline(&cfg).unwrap();
    assert!(manifest.complete);
    shared.run_dir = Some(cfg.output_dir.clone());
    let layout = RunLayout::new(&cfg.output_dir);
    let features = FeatureRaster::load(&layout.coarse_features()).unwrap();
    let mut rs = Vec::new();
    let mut agreeing = 0;
    for t in LeafTrait::ALL {
        let rep: TrainReport = read_json(&layout.train_report(t)).unwrap();
        let r = rep.evaluation.r_mean.unwrap();
        assert!(r > 0.7, "{}: R {r}", t.label());
        rs.push(format!("{} {r:.3}", t.label()));

        let model = TrainedModel::load(&layout.model(t)).unwrap();
        let ModelBody::Forest(forest) = &model.body else {
            panic!("expected RF")
        };
        let se = read_tsr(&layout.stderr_map(t)).unwrap();
        let f = features.select(&model.feature_names).unwrap();
        let mut valid = 0;
        for i in 0..se.values.len() {
            let row = f.pixel(i);
            if !row.iter().all(|v| v.is_finite()) {
                assert!(se.valid(i).is_none());
                continue;
            }
            valid += 1;
            let s = se.valid(i).expect("stderr where the trait is predicted");
            assert!(s >= 0.0);
            let trees = forest.tree_predictions(&row);
            if trees.iter().all(|v| *v == trees[0]) {
                assert_eq!(s, 0.0);
                agreeing += 1;
            } else {
                assert!(s > 0.0);
            }
        }
        assert!(valid > 0);

        // a forest of identical trees agrees everywhere
        let mut same = model.clone();
        if let ModelBody::Forest(fm) = &mut same.body {
            let first = fm.trees[0].clone();
            fm.trees.iter_mut().for_each(|tr| *tr = first.clone());
        }
        let (_, se_same) = predict_raster(&same, &features).unwrap();
        for i in 0..se_same.values.len() {
            if let Some(s) = se_same.valid(i) {
                assert_eq!(s, 0.0);
            }
        }
    }
    let t = within(start, Duration::from_secs(300));
    format!(
        "RF test R: {}; {agreeing} agreeing pixels, {t}",
        rs.join(", ")
    )
}

// 8

fn method_comparison(shared: &mut Shared) -> String {
    let start = Instant::now();
    let run = shared.run_dir.clone().expect("end-to-end run available");
    let set = read_training_csv(&RunLayout::new(&run).cwm()).unwrap();
    let mut train = TrainSection::default();
    desk_scale_train(&mut train);
    let section = EvaluateSection {
        robustness_fractions: vec![0.1, 0.8],
        ..EvaluateSection::default()
    };
    let mut lines = Vec::new();
    for t in [LeafTrait::Sla, LeafTrait::Ldmc] {
        let rep = compare_methods(&set, t, &train, &section, SEED).unwrap();
        let r = |m: Method| {
            let e = rep.reports.iter().find(|e| e.method == m).unwrap();
            (e.r_mean.unwrap(), e.r_std.unwrap())
        };
        let best = rep
            .reports
            .iter()
            .map(|e| e.r_mean.unwrap())
            .fold(f64::MIN, f64::max);
        let (best_std, _) = rep
            .reports
            .iter()
            .filter(|e| e.r_mean == Some(best))
            .map(|e| (e.r_std.unwrap(), ()))
            .next()
            .unwrap();
        for m in [Method::Rf, Method::Krr, Method::Gpr] {
            assert!(
                best - r(m).0 <= 0.05,
                "{}: {} R {:.3} vs best {best:.3}",
                t.label(),
                m.label(),
                r(m).0
            );
        }
        for m in [Method::Rlr, Method::Elm] {
            let (rm, sm) = r(m);
            let pooled = (sm * sm + best_std * best_std).sqrt();
            assert!(
                best - rm > pooled,
                "{}: {} R {rm:.3} vs best {best:.3} (pooled std {pooled:.3})",
                t.label(),
                m.label()
            );
        }
        for m in Method::ALL {
            let row = |f: f64| {
                rep.robustness
                    .iter()
                    .find(|x| x.method == m && x.train_fraction == f)
                    .map(|x| (x.r_mean.unwrap(), x.r_std.unwrap()))
                    .unwrap()
            };
            let (lo, slo) = row(0.1);
            let (hi, shi) = row(0.8);
            assert!(
                hi > lo - 2.0 * (slo * slo + shi * shi).sqrt(),
                "{} {}: R(0.8) {hi:.3} vs R(0.1) {lo:.3}",
                t.label(),
                m.label()
            );
        }
        lines.push(format!(
            "{}: {}",
            t.label(),
            Method::ALL
                .iter()
                .map(|&m| format!("{} {:.3}", m.label(), r(m).0))
                .collect::<Vec<_>>()
                .join(" ")
        ));
        shared.comparisons.push(rep);
    }
    let t = within(start, Duration::from_secs(600));
    format!("{}; {t}", lines.join("; "))
}

fn desk_scale_train(train: &mut TrainSection) {
    train.realizations = 5;
    train.grids.rf_trees = 100;
    train.grids.rf_min_node_size = vec![5];
}

// 9

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_traitscale"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "traitscale {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .replace('\\', "/");
            let hash = if p.file_name().unwrap() == MANIFEST_FILE {
                let mut m = Manifest::load(p.parent().unwrap()).unwrap();
                m.stages.iter_mut().for_each(|s| s.wall_seconds = 0.0);
                traitscale_core::pipeline::manifest::sha256_hex(
                    serde_json::to_string(&m).unwrap().as_bytes(),
                )
            } else {
                hash_file(&p).unwrap()
            };
            out.insert(rel, hash);
        }
    }
    out
}

fn cli_session(dir: &Path) {
    let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
    let write = |p: &str, text: &str| std::fs::write(dir.join(p), text).unwrap();
    let seed = "7";
    write(
        "synth.toml",
        "width = 32\nheight = 32\nratio = 4\npixel_deg = 0.125\npatch_pixels = 6.0\nn_records = 600\n",
    );
    cli(&[
        "synth",
        "--out",
        &d("world"),
        "--seed",
        seed,
        "--config",
        &d("synth.toml"),
    ]);
    write(
        "gapfill.toml",
        "folds = 3\n[grid]\nn_trees = [20]\nlearning_rate = [0.1]\nmax_splits = [15]\n",
    );
    cli(&[
        "gapfill",
        "--in",
        &d("world/traits.csv"),
        "--out",
        &d("imputed.csv"),
        "--report",
        &d("gapfill.json"),
        "--seed",
        seed,
        "--params",
        &d("gapfill.toml"),
    ]);
    for (name, stack) in [("fine", "fine_stack"), ("coarse", "coarse_stack")] {
        write(
            &format!("features_{name}.toml"),
            &format!(
                "stack = \"world/{stack}/index.json\"\nout = \"{name}\"\nelevation = \"world/elevation.tsr\"\nclimate_dir = \"world/climate\"\n"
            ),
        );
        cli(&["features", "--config", &d(&format!("features_{name}.toml"))]);
    }
    write(
        "classify.toml",
        "per_class = 40\n[classifier]\nn_trees = 20\nmax_splits = 63\n",
    );
    cli(&[
        "classify",
        "--features",
        &d("fine"),
        "--reference",
        &d("world/reference.tsr"),
        "--quality",
        &d("world/quality.tsr"),
        "--out",
        &d("classes.tsr"),
        "--abundance",
        &d("abundance.tsr"),
        "--seed",
        seed,
        "--report",
        &d("classify.json"),
        "--coarse-features",
        &d("coarse"),
        "--params",
        &d("classify.toml"),
    ]);
    cli(&[
        "cwm",
        "--abundance",
        &d("abundance.tsr"),
        "--records",
        &d("imputed.csv"),
        "--features",
        &d("coarse"),
        "--out",
        &d("cwm.csv"),
        "--max-km",
        "100",
        "--k",
        "10",
    ]);
    write(
        "train.toml",
        "realizations = 2\n[grids]\nrf_trees = 20\nrf_min_node_size = [5]\n",
    );
    cli(&[
        "train",
        "--cwm",
        &d("cwm.csv"),
        "--method",
        "rf",
        "--trait",
        "sla",
        "--out",
        &d("model.bin"),
        "--report",
        &d("train.json"),
        "--seed",
        seed,
        "--params",
        &d("train.toml"),
    ]);
    cli(&[
        "predict",
        "--model",
        &d("model.bin"),
        "--features",
        &d("coarse"),
        "--out",
        &d("sla.tsr"),
        "--stderr",
        &d("sla_se.tsr"),
    ]);
    write(
        "evaluate.toml",
        "[train]\nrealizations = 2\n[train.grids]\nrf_trees = 20\nkrr_lengthscale = [1.0]\n",
    );
    cli(&[
        "evaluate",
        "--cwm",
        &d("cwm.csv"),
        "--trait",
        "ldmc",
        "--out",
        &d("comparison.json"),
        "--robustness",
        &d("robustness.csv"),
        "--methods",
        "rlr,elm,krr,rf",
        "--fractions",
        "0.5,0.8",
        "--seed",
        seed,
        "--params",
        &d("evaluate.toml"),
    ]);
    let mut cfg = PipelineConfig::load(&dir.join("world/pipeline.toml")).unwrap();
    cfg.output_dir = "run".into();
    cfg.inputs = InputPaths {
        table: Some("world/traits.csv".into()),
        imputed: None,
        fine_stack: Some("world/fine_stack/index.json".into()),
        coarse_stack: Some("world/coarse_stack/index.json".into()),
        reference: Some("world/reference.tsr".into()),
        quality: Some("world/quality.tsr".into()),
        elevation: Some("world/elevation.tsr".into()),
        climate_dir: Some("world/climate".into()),
    };
    cfg.gapfill.grid = HyperGrid {
        n_trees: vec![20],
        learning_rate: vec![0.1],
        max_splits: vec![15],
    };
    cfg.gapfill.folds = 3;
    cfg.classify.per_class = 40;
    cfg.classify.classifier.n_trees = 20;
    cfg.train.traits = vec![LeafTrait::Sla, LeafTrait::Lnc];
    cfg.train.realizations = 2;
    cfg.train.grids.rf_trees = 20;
    cfg.train.grids.rf_min_node_size = vec![5];
    cfg.stages.evaluate = true;
    cfg.evaluate.methods = vec![Method::Rlr, Method::Rf];
    cfg.evaluate.robustness_fractions = vec![0.5, 0.8];
    std::fs::write(dir.join("run.toml"), cfg.to_toml_string().unwrap()).unwrap();
    cli(&["run", "--config", &d("run.toml")]);
    std::fs::remove_dir_all(dir.join("run/report")).unwrap();
    cli(&["report", "--run", &d("run"), "--traits", "sla,lnc"]);
    cli(&["verify", "--run", &d("run")]);
}

fn cli_determinism(_: &mut Shared) -> String {
    let start = Instant::now();
    let dir = workdir("cli");
    cli_session(&dir);
    let first = hash_tree(&dir);
    std::fs::remove_dir_all(&dir).unwrap();
    std::fs::create_dir_all(&dir).unwrap();
    cli_session(&dir);
    let second = hash_tree(&dir);
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    let differing: Vec<&String> = first.keys().filter(|k| first[*k] != second[*k]).collect();
    assert!(differing.is_empty(), "differing outputs: {differing:?}");
    let m = Manifest::load(&dir.join("run")).unwrap();
    assert!(m.complete);
    let t = within(start, Duration::from_secs(300));
    format!("{} files identical across reruns, {t}", first.len())
}

// 10

fn check_metrics(what: &str, me: f64, rmse: f64, r: Option<f64>) {
    assert!(rmse >= me.abs(), "{what}: RMSE {rmse} < |ME| {}", me.abs());
    if let Some(r) = r {
        assert!((-1.0..=1.0).contains(&r), "{what}: R {r}");
    }
}

fn check_eval(what: &str, e: &EvalReport) {
    check_metrics(what, e.me_mean, e.rmse_mean, e.r_mean);
    for (i, x) in e.realizations.iter().enumerate() {
        check_metrics(&format!("{what} realization {i}"), x.me, x.rmse, x.r);
    }
}

fn check_gapfill(what: &str, g: &GapfillReport) {
    check_metrics(what, g.me, g.rmse, g.r);
    for s in &g.grid {
        check_metrics(
            &format!("{what} grid"),
            s.metrics.me,
            s.metrics.rmse,
            s.metrics.r,
        );
    }
}

fn metric_identities(shared: &mut Shared) -> String {
    let start = Instant::now();
    let mut n_eval = 0;
    let mut n_gap = 0;
    for g in &shared.gapfill_reports {
        check_gapfill("gap-fill", g);
        n_gap += 1;
    }
    for c in &shared.comparisons {
        for e in &c.reports {
            check_eval(&format!("{} {}", c.leaf_trait.label(), e.method.label()), e);
            n_eval += 1;
        }
        for r in &c.robustness {
            check_metrics("robustness", 0.0, r.rmse_mean, r.r_mean);
        }
    }
    let run = shared.run_dir.clone().expect("end-to-end run available");
    let layout = RunLayout::new(&run);
    let stage: GapfillStageReport = read_json(&layout.gapfill_report()).unwrap();
    for g in &stage.reports {
        check_gapfill(&format!("run gap-fill {}", g.leaf_trait.label()), g);
        n_gap += 1;
    }
    let summary: ReportSummary = read_json(&layout.report_dir().join("summary.json")).unwrap();
    let mut groups = 0;
    for t in LeafTrait::ALL {
        let rep: TrainReport = read_json(&layout.train_report(t)).unwrap();
        check_eval(&format!("run {}", t.label()), &rep.evaluation);
        n_eval += 1;
        let resid: Vec<f64> = rep
            .evaluation
            .scatter
            .iter()
            .map(|p| p.predicted - p.observed)
            .collect();
        let global = resid.iter().sum::<f64>() / resid.len() as f64;
        let ts = summary.traits.iter().find(|s| s.leaf_trait == t).unwrap();
        let n: usize = ts.residual_groups.iter().map(|g| g.n).sum();
        assert_eq!(n, resid.len());
        let recombined = ts
            .residual_groups
            .iter()
            .map(|g| g.me * g.n as f64)
            .sum::<f64>()
            / n as f64;
        let scale = resid.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        assert!(
            (recombined - global).abs() <= 4.0 * f64::EPSILON * scale,
            "{}: recombined {recombined} vs global {global}",
            t.label()
        );
        for g in &ts.residual_groups {
            check_metrics(
                &format!("{} {}", t.label(), g.pft.label()),
                g.me,
                g.rmse,
                None,
            );
            groups += 1;
        }
    }
    let t = within(start, Duration::from_secs(10));
    format!("{n_eval} evaluation reports, {n_gap} gap-fill reports, {groups} residual groups, {t}")
}

#[test]
fn acceptance() {
    type Criterion = fn(&mut Shared) -> String;
    let criteria: [(&str, Criterion); 10] = [
        ("confusion-matrix recomputation", confusion_recomputation),
        ("kernel algebra", kernel_algebra),
        ("gradient check", gradient_check),
        ("surrogate-forest oracle", forest_oracle),
        ("gap-fill recovery", gapfill_recovery),
        ("CWM oracle", cwm_oracle),
        ("end-to-end synthetic pipeline", end_to_end),
        ("method-comparison protocol", method_comparison),
        ("CLI determinism", cli_determinism),
        ("metric identities", metric_identities),
    ];
    let mut shared = Shared::default();
    let mut lines = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut shared)));
        let line = match outcome {
            Ok(detail) => format!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                format!("criterion {:>2} {name}: FAIL ({msg})", i + 1)
            }
        };
        println!("{line}");
        lines.push(line);
    }
    let failed: Vec<&String> = lines.iter().filter(|l| l.contains(": FAIL")).collect();
    assert!(failed.is_empty(), "{} criteria failed", failed.len());
}
