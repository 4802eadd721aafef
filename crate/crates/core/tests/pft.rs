use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use traitscale_core::forest::{Dataset, FeatureSchema};
use traitscale_core::pft::*;
use traitscale_core::raster::*;
use traitscale_core::trait_table::{PftClass, N_PFT};

const VALIDATION_COUNTS: [[u64; 7]; 7] = [
    [870, 5, 7, 4, 3, 2, 0],
    [3, 971, 0, 2, 0, 0, 0],
    [15, 1, 406, 0, 0, 2, 0],
    [3, 2, 1, 992, 0, 2, 0],
    [4, 4, 10, 4, 737, 78, 15],
    [1, 1, 4, 4, 30, 934, 20],
    [0, 0, 0, 0, 4, 17, 965],
];

/// Kappa with exact integer marginals.
fn kappa_oracle(m: &[[u64; 7]; 7]) -> f64 {
    let t: u64 = m.iter().flatten().sum();
    let diag: u64 = (0..7).map(|i| m[i][i]).sum();
    let chance: u128 = (0..7)
        .map(|i| {
            let row: u64 = m[i].iter().sum();
            let col: u64 = (0..7).map(|r| m[r][i]).sum();
            u128::from(row) * u128::from(col)
        })
        .sum();
    let t2 = u128::from(t) * u128::from(t);
    // (po - pe)/(1 - pe) = (diag*t - chance)/(t^2 - chance)
    (u128::from(diag) * u128::from(t) - chance) as f64 / (t2 - chance) as f64
}

#[test]
fn validation_matrix_recomputation() {
    let m = ConfusionMatrix { counts: VALIDATION_COUNTS };
    let a = Agreement::from_matrix(m).unwrap();
    assert_eq!(a.matrix.total(), 6123);
    assert_eq!(a.matrix.trace(), 5875);
    assert!((a.overall_accuracy - 0.9595).abs() <= 0.0005);
    assert!((a.overall_accuracy - 0.96).abs() <= 0.005);
    let k = a.kappa.unwrap();
    assert!((k - kappa_oracle(&VALIDATION_COUNTS)).abs() < 1e-12);
    assert!((k - 0.952_354_229_820_94).abs() < 1e-12);
}

#[test]
fn agreement_examples() {
    let refs: Vec<PftClass> = PftClass::ALL.iter().flat_map(|c| [*c; 3]).collect();
    let a = confusion_and_kappa(&refs, &refs).unwrap();
    assert_eq!((a.overall_accuracy, a.kappa), (1.0, Some(1.0)));

    let refs = [PftClass::Enf, PftClass::Enf, PftClass::Grl, PftClass::Grl];
    let preds = [PftClass::Enf; 4];
    let a = confusion_and_kappa(&refs, &preds).unwrap();
    assert_eq!((a.overall_accuracy, a.kappa), (0.5, Some(0.0)));

    let same = [PftClass::Shl; 5];
    assert_eq!(confusion_and_kappa(&same, &same).unwrap().kappa, None);
    assert!(confusion_and_kappa(&refs, &preds[..3]).is_err());
    assert!(confusion_and_kappa(&[], &[]).is_err());
}

proptest! {
    #[test]
    fn kappa_properties(pairs in prop::collection::vec((0usize..7, 0usize..7), 1..200), perm_seed in any::<u64>()) {
        let r: Vec<PftClass> = pairs.iter().map(|p| PftClass::from_index(p.0).unwrap()).collect();
        let p: Vec<PftClass> = pairs.iter().map(|p| PftClass::from_index(p.1).unwrap()).collect();
        let a = confusion_and_kappa(&r, &p).unwrap();
        prop_assert_eq!(a.matrix.total(), pairs.len() as u64);
        if let Some(k) = a.kappa {
            prop_assert!(k <= a.overall_accuracy + 1e-12);
            let mut perm: Vec<usize> = (0..7).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let map = |c: &PftClass| PftClass::from_index(perm[c.index()]).unwrap();
            let b = confusion_and_kappa(&r.iter().map(map).collect::<Vec<_>>(), &p.iter().map(map).collect::<Vec<_>>()).unwrap();
            prop_assert!((b.kappa.unwrap() - k).abs() < 1e-12);
        }
    }

    #[test]
    fn abundance_sums_to_one(codes in prop::collection::vec(prop::option::of(1u8..=7), 64)) {
        let fine = RasterGrid::new(
            Geometry::new(8, 8, 0.0, 8.0, 1.0, "t"),
            codes.iter().map(|c| c.map_or(DEFAULT_NODATA, f64::from)).collect(),
            DEFAULT_NODATA,
        ).unwrap();
        let ab = aggregate_abundance(&fine, &Geometry::new(2, 2, 0.0, 8.0, 4.0, "t")).unwrap();
        for f in ab.fractions.iter().flatten() {
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

fn reference_and_quality(w: usize, h: usize, seed: u64) -> (RasterGrid, RasterGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Geometry::new(w, h, 0.0, h as f64, 1.0, "t");
    let refs: Vec<f64> = (0..w * h).map(|i| ((i % N_PFT) + 1) as f64).collect();
    let q: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
    (
        RasterGrid::new(g.clone(), refs, DEFAULT_NODATA).unwrap(),
        RasterGrid::new(g, q, DEFAULT_NODATA).unwrap(),
    )
}

#[test]
fn sample_selection() {
    let (r, _) = reference_and_quality(20, 20, 1);
    let ones = RasterGrid::filled(r.geometry.clone(), 1.0);
    let s = select_training_samples(&r, &ones, 10, 0.85, 3).unwrap();
    for c in PftClass::ALL {
        assert_eq!(s.samples.iter().filter(|x| x.class == c).count(), 10);
    }
    assert!(s.shortfalls.is_empty());
    assert_eq!(s, select_training_samples(&r, &ones, 10, 0.85, 3).unwrap());
    assert_ne!(s, select_training_samples(&r, &ones, 10, 0.85, 4).unwrap());

    // quality exactly at the threshold does not qualify
    let mut q = RasterGrid::filled(r.geometry.clone(), 0.85);
    for i in [0usize, 7, 14] {
        q.values[i] = 0.9;
    }
    let s = select_training_samples(&r, &q, 10, 0.85, 3).unwrap();
    assert_eq!(s.samples.len(), 3);
    assert!(s.samples.iter().all(|x| x.class == PftClass::Enf));
    let enf = s.shortfalls.iter().find(|x| x.class == PftClass::Enf).unwrap();
    assert_eq!((enf.requested, enf.available), (10, 3));
    assert_eq!(s.shortfalls.len(), N_PFT);
}

fn two_class(n: usize, seed: u64, separable: bool) -> (Dataset, Vec<PftClass>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let x: f64 = rng.random();
        let z: f64 = rng.random();
        let c = if separable {
            if x < 0.5 { PftClass::Dbf } else { PftClass::Grl }
        } else if rng.random::<bool>() {
            PftClass::Dbf
        } else {
            PftClass::Grl
        };
        a.push(if separable { if x < 0.5 { x * 0.8 } else { 0.6 + x * 0.4 } } else { x });
        b.push(z);
        labels.push(c);
    }
    let data = Dataset::from_columns(FeatureSchema::numeric(&["a", "b"]), vec![a, b]).unwrap();
    (data, labels, (0..n as u64).collect())
}

fn params() -> ClassifierParams {
    ClassifierParams {
        n_trees: 50,
        max_splits: 63,
        ..ClassifierParams::default()
    }
}

#[test]
fn separable_classes_validate_perfectly() {
    let (data, labels, ids) = two_class(300, 1, true);
    let t = train_classifier_on(&data, &labels, &ids, &params(), 7).unwrap();
    assert_eq!(t.validation.overall_accuracy, 1.0);
    assert_eq!(t.n_train + t.n_validation, 300);
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let (data, labels, ids) = two_class(600, 2, false);
    let t = train_classifier_on(&data, &labels, &ids, &params(), 7).unwrap();
    assert!((t.validation.overall_accuracy - 0.5).abs() <= 0.1, "{}", t.validation.overall_accuracy);
}

#[test]
fn duplicated_column_keeps_vote_outcomes() {
    let (data, labels, ids) = two_class(300, 3, true);
    let dup = Dataset::from_columns(
        FeatureSchema::numeric(&["a", "b", "a2"]),
        vec![data.column(0).to_vec(), data.column(1).to_vec(), data.column(0).to_vec()],
    )
    .unwrap();
    let t1 = train_classifier_on(&data, &labels, &ids, &params(), 9).unwrap();
    let t2 = train_classifier_on(&dup, &labels, &ids, &params(), 9).unwrap();
    assert_eq!(t1.validation.matrix, t2.validation.matrix);
}

#[test]
fn single_class_rejected() {
    let (data, _, ids) = two_class(50, 4, true);
    let labels = vec![PftClass::Enf; 50];
    assert!(train_classifier_on(&data, &labels, &ids, &params(), 1).is_err());
}

#[test]
fn stratified_split_halves_each_class() {
    let labels: Vec<PftClass> = (0..101).map(|i| if i < 61 { PftClass::Enf } else { PftClass::Shl }).collect();
    let ids: Vec<u64> = (0..101).collect();
    let (tr, va) = stratified_half_split(&ids, &labels, 3);
    assert_eq!(tr.iter().filter(|&&k| labels[k] == PftClass::Enf).count(), 31);
    assert_eq!(va.iter().filter(|&&k| labels[k] == PftClass::Shl).count(), 20);
}

/// Feature stack where each class has a distinct spectral signature.
fn separable_scene(w: usize, h: usize) -> (FeatureRaster, RasterGrid) {
    let g = Geometry::new(w, h, 0.0, h as f64, 1.0, "t");
    let classes: Vec<f64> = (0..w * h).map(|i| (((i / w) / 3 + (i % w) / 4) % N_PFT + 1) as f64).collect();
    let f1 = classes.iter().enumerate().map(|(i, c)| c * 0.1 + 0.001 * (i % 5) as f64).collect();
    let f2 = classes.iter().map(|c| (c * 1.7).sin()).collect();
    let bands = vec![
        RasterGrid::new(g.clone(), f1, DEFAULT_NODATA).unwrap(),
        RasterGrid::new(g.clone(), f2, DEFAULT_NODATA).unwrap(),
    ];
    (
        FeatureRaster {
            geometry: g.clone(),
            names: vec!["f1".into(), "f2".into()],
            bands,
            lst_supplied: false,
        },
        RasterGrid::new(g, classes, DEFAULT_NODATA).unwrap(),
    )
}

#[test]
fn classify_map_reproduces_reference() {
    let (mut fr, reference) = separable_scene(40, 30);
    let quality = RasterGrid::filled(reference.geometry.clone(), 1.0);
    let s = select_training_samples(&reference, &quality, 40, DEFAULT_QUALITY_THRESHOLD, 1).unwrap();
    let t = train_classifier(&fr, &s, &params(), 2).unwrap();
    let dbf_pixel = s.samples.iter().find(|x| x.class == PftClass::Dbf).unwrap().pixel;
    fr.bands[0].values[5] = DEFAULT_NODATA;
    fr.bands[1].values[5] = DEFAULT_NODATA;
    let map = classify_map(&t.model, &fr).unwrap();
    assert_eq!(map.values[dbf_pixel], f64::from(PftClass::Dbf.code()));
    assert_eq!(map.values[5], DEFAULT_NODATA);
    let agree = (0..map.values.len()).filter(|&i| map.values[i] == reference.values[i]).count();
    assert!(agree as f64 >= 0.95 * (map.values.len() - 1) as f64);

    let mut wrong = fr.clone();
    wrong.names[0] = "other".into();
    assert!(classify_map(&t.model, &wrong).is_err());
}

#[test]
fn aggregate_examples() {
    let fine_g = Geometry::new(32, 16, 0.0, 16.0, 1.0, "t");
    let mut vals = vec![f64::from(PftClass::Grl.code()); 256];
    vals.extend((0..256).map(|i| {
        if (i % 32) % 16 < 8 { f64::from(PftClass::Enf.code()) } else { f64::from(PftClass::Shl.code()) }
    }));
    // rows 0..8 are GRL, rows 8..16 alternate ENF/SHL per 8 columns
    let mut fine = RasterGrid::new(fine_g.clone(), vals, DEFAULT_NODATA).unwrap();
    let coarse = Geometry::new(2, 1, 0.0, 16.0, 16.0, "t");
    let ab = aggregate_abundance(&fine, &coarse).unwrap();
    let f = ab.fractions[0].unwrap();
    assert_eq!(f[PftClass::Grl.index()], 0.5);
    assert_eq!(f[PftClass::Enf.index()], 0.25);
    assert_eq!(f[PftClass::Shl.index()], 0.25);

    for v in fine.values.iter_mut() {
        *v = f64::from(PftClass::Grl.code());
    }
    let ab = aggregate_abundance(&fine, &coarse).unwrap();
    let f = ab.fractions[1].unwrap();
    assert_eq!(f[PftClass::Grl.index()], 1.0);
    assert_eq!(f.iter().sum::<f64>(), 1.0);

    // 128 ENF + 128 SHL
    for (i, v) in fine.values.iter_mut().enumerate() {
        if i % 32 < 16 {
            *v = if i / 32 < 8 { 1.0 } else { 5.0 };
        }
    }
    let f = aggregate_abundance(&fine, &coarse).unwrap().fractions[0].unwrap();
    assert_eq!((f[0], f[4]), (0.5, 0.5));

    for (i, v) in fine.values.iter_mut().enumerate() {
        if i % 32 >= 16 {
            *v = DEFAULT_NODATA;
        }
    }
    let ab = aggregate_abundance(&fine, &coarse).unwrap();
    assert!(ab.fractions[1].is_none());
    assert_eq!(ab.dominant(0), Some(PftClass::Enf));

    let round = AbundanceGrid::from_bands(&ab.to_bands()).unwrap();
    assert_eq!(round, ab);

    assert!(aggregate_abundance(&fine, &Geometry::new(2, 1, 0.0, 16.0, 15.5, "t")).is_err());
    assert!(aggregate_abundance(&fine, &Geometry::new(2, 1, 0.5, 16.0, 16.0, "t")).is_err());
}
