use proptest::prelude::*;
use traitscale_core::cwm::*;
use traitscale_core::pft::AbundanceGrid;
use traitscale_core::raster::{FeatureRaster, Geometry, RasterGrid, DEFAULT_NODATA};
use traitscale_core::trait_table::*;

fn rec(id: &str, pft: PftClass, lat: f64, lon: f64, sla: f64) -> CwmRecord {
    CwmRecord {
        record_id: id.into(),
        pft,
        lat,
        lon,
        traits: [sla, 0.3, 20.0, 1.5, sla / 2.0],
    }
}

#[test]
fn haversine_examples() {
    assert_eq!(haversine_km((12.0, 34.0), (12.0, 34.0)), 0.0);
    let half = haversine_km((0.0, 0.0), (0.0, 180.0));
    assert!((half - std::f64::consts::PI * 6371.0088).abs() < 1e-6);
    assert!((half - 20015.1).abs() < 0.1);
    let deg = haversine_km((0.0, 0.0), (0.0, 1.0));
    assert!((deg - 6371.0088 * std::f64::consts::PI / 180.0).abs() < 1e-9);
    assert!((deg - 111.195).abs() < 1e-3);
}

#[test]
fn neighbor_select_examples() {
    let recs: Vec<CwmRecord> = (0..15)
        .map(|i| rec(&format!("d{i:02}"), PftClass::Dbf, 45.0 + 0.02 * (15 - i) as f64, 7.0, 10.0))
        .collect();
    let index = CwmRecords::from_records(recs);
    let got = neighbor_select((45.0, 7.0), &index, PftClass::Dbf, 100.0, 10);
    let ids: Vec<&str> = got.iter().map(|(r, _)| r.record_id.as_str()).collect();
    assert_eq!(ids, (5..15).rev().map(|i| format!("d{i:02}")).collect::<Vec<_>>());
    assert!(got.windows(2).all(|w| w[0].1 <= w[1].1));
    assert!(neighbor_select((45.0, 7.0), &index, PftClass::Enf, 100.0, 10).is_empty());

    let far = CwmRecords::from_records(vec![rec("x", PftClass::Dbf, 47.0, 7.0, 1.0)]);
    assert!(neighbor_select((45.0, 7.0), &far, PftClass::Dbf, 100.0, 10).is_empty());

    let tie = CwmRecords::from_records(vec![
        rec("b", PftClass::Grl, 0.0, 0.1, 1.0),
        rec("a", PftClass::Grl, 0.0, -0.1, 2.0),
        rec("c", PftClass::Grl, 0.0, 0.05, 3.0),
    ]);
    let got = neighbor_select((0.0, 0.0), &tie, PftClass::Grl, 100.0, 2);
    assert_eq!(got[0].0.record_id, "c");
    assert_eq!(got[1].0.record_id, "a");
}

/// Exhaustive selection with no spatial index.
fn brute_select(center: (f64, f64), recs: &[CwmRecord], pft: PftClass, max_km: f64, k: usize) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = recs
        .iter()
        .filter(|r| r.pft == pft)
        .map(|r| (r.record_id.clone(), haversine_km(center, (r.lat, r.lon))))
        .filter(|x| x.1 <= max_km)
        .collect();
    v.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

/// Exhaustive CWM of one pixel.
fn brute_cwm(center: (f64, f64), ab: &[f64; 7], recs: &[CwmRecord], cfg: &CwmConfig) -> Option<[f64; 5]> {
    let mut num = [0.0; 5];
    let (mut rep, mut veg) = (0.0, 0.0);
    for pft in PftClass::VEGETATED {
        let a = ab[pft.index()];
        veg += a;
        if a == 0.0 {
            continue;
        }
        let sel = brute_select(center, recs, pft, cfg.max_km, cfg.k);
        if sel.is_empty() {
            continue;
        }
        rep += a;
        for t in 0..5 {
            let vals: Vec<f64> = sel
                .iter()
                .map(|(id, _)| recs.iter().find(|r| &r.record_id == id).unwrap().traits[t])
                .collect();
            num[t] += a * vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    (veg > 0.0 && rep / veg > cfg.min_represented).then(|| num.map(|x| x / rep))
}

fn arb_records(n: std::ops::Range<usize>, lat: (f64, f64), lon: (f64, f64)) -> impl Strategy<Value = Vec<CwmRecord>> {
    prop::collection::vec((0usize..7, lat.0..lat.1, lon.0..lon.1, 1.0f64..40.0), n).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (p, la, lo, s))| rec(&format!("r{i:03}"), PftClass::from_index(p).unwrap(), la, lo, s))
            .collect()
    })
}

proptest! {
    #[test]
    fn select_matches_brute_force(
        recs in arb_records(0..60, (-90.0, 90.0), (-180.0, 180.0)),
        clat in -90.0f64..90.0,
        clon in -180.0f64..180.0,
        max_km in prop::sample::select(vec![50.0, 100.0, 1500.0, 12000.0]),
        k in 1usize..12,
    ) {
        let index = CwmRecords::from_records(recs.clone());
        for pft in PftClass::ALL {
            let got: Vec<(String, f64)> = neighbor_select((clat, clon), &index, pft, max_km, k)
                .into_iter().map(|(r, d)| (r.record_id.clone(), d)).collect();
            prop_assert_eq!(got, brute_select((clat, clon), &recs, pft, max_km, k));
        }
    }

    #[test]
    fn select_near_poles_and_dateline(
        recs in arb_records(0..60, (85.0, 90.0), (-180.0, 180.0)),
        clat in 88.0f64..90.0,
        clon in prop::sample::select(vec![-180.0, -179.9, 0.0, 179.95, 180.0]),
    ) {
        let index = CwmRecords::from_records(recs.clone());
        for pft in PftClass::ALL {
            let got: Vec<String> = neighbor_select((clat, clon), &index, pft, 300.0, 10)
                .into_iter().map(|(r, _)| r.record_id.clone()).collect();
            let want: Vec<String> = brute_select((clat, clon), &recs, pft, 300.0, 10).into_iter().map(|x| x.0).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn out_of_range_records_are_irrelevant(recs in arb_records(1..40, (40.0, 42.0), (10.0, 12.0))) {
        let center = (41.0, 11.0);
        let index = CwmRecords::from_records(recs.clone());
        let mut pruned = recs.clone();
        pruned.retain(|r| haversine_km(center, (r.lat, r.lon)) <= 100.0);
        let pruned = CwmRecords::from_records(pruned);
        for pft in PftClass::ALL {
            let a: Vec<_> = neighbor_select(center, &index, pft, 100.0, 10).into_iter().map(|x| x.0.clone()).collect();
            let b: Vec<_> = neighbor_select(center, &pruned, pft, 100.0, 10).into_iter().map(|x| x.0.clone()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn cwm_is_convex_and_scale_free(
        recs in arb_records(5..50, (40.0, 42.0), (10.0, 12.0)),
        ab in prop::array::uniform7(0.0f64..1.0),
        scale in 0.01f64..100.0,
    ) {
        let index = CwmRecords::from_records(recs);
        let cfg = CwmConfig::default();
        let center = (41.0, 11.0);
        if let CwmOutcome::Accepted(s) = pixel_cwm(0, center, &ab, &index, &cfg).unwrap() {
            for t in 0..5 {
                let means: Vec<f64> = s.contributing_records.iter().map(|c| c.trait_means[t]).collect();
                let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let tol = 1e-12 * hi.abs().max(1.0);
                prop_assert!(s.trait_values[t] >= lo - tol && s.trait_values[t] <= hi + tol);
            }
            for c in &s.contributing_records {
                prop_assert!(c.neighbors.iter().all(|n| n.distance_km <= cfg.max_km));
            }
            let veg: f64 = PftClass::VEGETATED.iter().map(|p| ab[p.index()]).sum();
            let rep: f64 = s.contributing_records.iter().map(|c| ab[c.pft.index()]).sum();
            prop_assert!((s.represented_fraction - rep / veg).abs() < 1e-12);
            let scaled = ab.map(|a| a * scale);
            let s2 = pixel_cwm(0, center, &scaled, &index, &cfg).unwrap().accepted().unwrap();
            for t in 0..5 {
                prop_assert!((s2.trait_values[t] - s.trait_values[t]).abs() <= 1e-12 * s.trait_values[t].abs().max(1.0));
            }
        }
    }

    #[test]
    fn training_set_matches_exhaustive_oracle(
        w in 1usize..=5,
        h in 1usize..=5,
        recs in arb_records(0..51, (43.5, 46.5), (5.5, 8.5)),
        abs in prop::collection::vec(prop::option::of(prop::array::uniform7(0.0f64..1.0)), 25),
    ) {
        let g = Geometry::new(w, h, 6.0, 46.0, 0.4, "EPSG:4326");
        let ab = AbundanceGrid { geometry: g.clone(), fractions: abs[..w * h].to_vec() };
        let feats = feature_raster(&g);
        let cfg = CwmConfig::default();
        let set = build_training_set(&ab, &feats, &CwmRecords::from_records(recs.clone()), &cfg).unwrap();
        let mut row = 0;
        for i in 0..w * h {
            let Some(a) = ab.fractions[i] else { continue };
            let (x, y) = g.center(i % w, i / w);
            if let Some(want) = brute_cwm((y, x), &a, &recs, &cfg) {
                prop_assert_eq!(set.samples[row].pixel_id, i);
                for t in 0..5 {
                    prop_assert!((set.y[(row, t)] - want[t]).abs() <= 1e-12 * want[t].abs().max(1.0));
                }
                prop_assert_eq!(set.x.row(row).iter().cloned().collect::<Vec<_>>(), feats.pixel(i));
                row += 1;
            }
        }
        prop_assert_eq!(row, set.len());
    }
}

fn feature_raster(g: &Geometry) -> FeatureRaster {
    let n = g.n_pixels();
    let bands = vec![
        RasterGrid::new(g.clone(), (0..n).map(|i| i as f64).collect(), DEFAULT_NODATA).unwrap(),
        RasterGrid::new(g.clone(), (0..n).map(|i| (i * i) as f64 * 0.5).collect(), DEFAULT_NODATA).unwrap(),
    ];
    FeatureRaster {
        geometry: g.clone(),
        names: vec!["NDVImax".into(), "BIO1".into()],
        bands,
        lst_supplied: false,
    }
}

fn one_hot(pft: PftClass) -> [f64; 7] {
    let mut a = [0.0; 7];
    a[pft.index()] = 1.0;
    a
}

#[test]
fn pixel_cwm_examples() {
    let cfg = CwmConfig::default();
    let c = (50.0, 10.0);
    let index = CwmRecords::from_records(vec![
        rec("g1", PftClass::Grl, 50.1, 10.0, 18.0),
        rec("g2", PftClass::Grl, 50.0, 10.2, 22.0),
        rec("s1", PftClass::Shl, 49.9, 10.0, 15.0),
        rec("e1", PftClass::Enf, 50.05, 10.0, 4.0),
        rec("e2", PftClass::Enf, 50.0, 9.9, 5.0),
        rec("e3", PftClass::Enf, 49.95, 10.1, 9.0),
        rec("b1", PftClass::Ebf, 53.0, 10.0, 30.0),
    ]);
    let mut ab = [0.0; 7];
    ab[PftClass::Grl.index()] = 0.6;
    ab[PftClass::Shl.index()] = 0.4;
    let s = pixel_cwm(3, c, &ab, &index, &cfg).unwrap().accepted().unwrap();
    assert!((s.trait_values[0] - 18.0).abs() < 1e-12);
    assert_eq!(s.represented_fraction, 1.0);

    let s = pixel_cwm(3, c, &one_hot(PftClass::Enf), &index, &cfg).unwrap().accepted().unwrap();
    assert_eq!(s.trait_values[0], 6.0);
    assert_eq!(s.contributing_records.len(), 1);
    assert_eq!(s.contributing_records[0].neighbors.len(), 3);

    let mut ab = [0.0; 7];
    ab[PftClass::Ebf.index()] = 0.6;
    ab[PftClass::Grl.index()] = 0.4;
    match pixel_cwm(3, c, &ab, &index, &cfg).unwrap() {
        CwmOutcome::Rejected { represented_fraction, .. } => assert!((represented_fraction - 0.4).abs() < 1e-15),
        o => panic!("expected rejection, got {o:?}"),
    }
    // exactly half is not more than half
    let mut ab = [0.0; 7];
    ab[PftClass::Ebf.index()] = 0.5;
    ab[PftClass::Grl.index()] = 0.5;
    assert!(pixel_cwm(3, c, &ab, &index, &cfg).unwrap().accepted().is_none());

    // BARREN is outside the denominator
    let mut ab = one_hot(PftClass::Barren);
    ab[PftClass::Grl.index()] = 0.1;
    let s = pixel_cwm(3, c, &ab, &index, &cfg).unwrap().accepted().unwrap();
    assert_eq!(s.represented_fraction, 1.0);
    assert!(pixel_cwm(3, c, &one_hot(PftClass::Barren), &index, &cfg).unwrap().accepted().is_none());

    let mut bad = one_hot(PftClass::Grl);
    bad[0] = -0.1;
    assert!(pixel_cwm(3, c, &bad, &index, &cfg).is_err());
}

#[test]
fn training_set_boundaries() {
    let g = Geometry::new(3, 3, 6.0, 46.0, 0.4, "EPSG:4326");
    let feats = feature_raster(&g);
    let cfg = CwmConfig::default();
    let empty = AbundanceGrid { geometry: g.clone(), fractions: vec![Some(one_hot(PftClass::Dbf)); 9] };
    let none = CwmRecords::default();
    let set = build_training_set(&empty, &feats, &none, &cfg).unwrap();
    assert!(set.is_empty());
    assert_eq!((set.x.nrows(), set.x.ncols(), set.y.ncols()), (0, 2, 5));
    assert_eq!((set.n_candidates, set.n_rejected), (9, 9));

    let (x, y) = g.center(1, 1);
    let index = CwmRecords::from_records(vec![rec("d", PftClass::Dbf, y, x, 12.5)]);
    let mut fr = vec![None; 9];
    fr[4] = Some(one_hot(PftClass::Dbf));
    let ab = AbundanceGrid { geometry: g.clone(), fractions: fr };
    let set = build_training_set(&ab, &feats, &index, &cfg).unwrap();
    let direct = pixel_cwm(4, (y, x), &one_hot(PftClass::Dbf), &index, &cfg).unwrap().accepted().unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.samples[0], direct);
    assert_eq!(set.y.row(0).iter().cloned().collect::<Vec<_>>(), direct.trait_values.to_vec());
    assert_eq!(set.x.row(0).iter().cloned().collect::<Vec<_>>(), vec![4.0, 8.0]);

    let mut holey = feats.clone();
    holey.bands[1].values[4] = DEFAULT_NODATA;
    let set = build_training_set(&ab, &holey, &index, &cfg).unwrap();
    assert!(set.is_empty());
    assert_eq!(set.n_dropped_nodata, 1);

    let other = feature_raster(&Geometry::new(3, 3, 6.0, 46.0, 0.5, "EPSG:4326"));
    assert!(matches!(
        build_training_set(&ab, &other, &index, &cfg),
        Err(traitscale_core::Error::GeometryMismatch(_))
    ));
}

#[test]
fn csv_round_trip() {
    let g = Geometry::new(3, 3, 6.0, 46.0, 0.4, "EPSG:4326");
    let feats = feature_raster(&g);
    let recs: Vec<CwmRecord> = (0..20)
        .map(|i| {
            let p = PftClass::VEGETATED[i % 6];
            rec(&format!("r{i}"), p, 45.0 + 0.03 * i as f64, 6.3 + 0.04 * i as f64, 5.0 + i as f64 * 0.37)
        })
        .collect();
    let ab = AbundanceGrid {
        geometry: g.clone(),
        fractions: (0..9)
            .map(|i| {
                let mut a = [0.0; 7];
                a[i % 6] = 0.7;
                a[(i + 1) % 6] = 0.3;
                Some(a)
            })
            .collect(),
    };
    let set = build_training_set(&ab, &feats, &CwmRecords::from_records(recs), &CwmConfig::default()).unwrap();
    assert!(!set.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cwm.csv");
    write_training_csv(&p, &set).unwrap();
    let back = read_training_csv(&p).unwrap();
    assert_eq!(back.x, set.x);
    assert_eq!(back.y, set.y);
    assert_eq!(back.feature_names, set.feature_names);
    assert_eq!(back.samples[0].represented_fraction, set.samples[0].represented_fraction);
    let header = std::fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("pixel_id,lat,lon,ENF,EBF,DNF,DBF,SHL,GRL,BARREN,represented_fraction,SLA,LDMC,LNC,LPC,LNPR,"));
}

#[test]
fn records_without_coordinates_or_traits_are_skipped() {
    let mk = |id: &str, lat: Option<f64>, sla: Option<f64>, form: GrowthForm| TraitRecord {
        record_id: id.into(),
        species: "s".into(),
        genus: "g".into(),
        family: "f".into(),
        growth_form: form,
        leaf_type: LeafType::Broadleaf,
        leaf_phenology: Phenology::Deciduous,
        latitude: lat,
        longitude: lat.map(|_| 10.0),
        climate: [None; N_BIO],
        traits: [sla, Some(0.3), Some(20.0), Some(1.0), Some(20.0)],
    };
    let table = TraitTable::new(vec![
        mk("a", Some(45.0), Some(10.0), GrowthForm::Tree),
        mk("b", None, Some(10.0), GrowthForm::Tree),
        mk("c", Some(45.0), None, GrowthForm::Tree),
        mk("d", Some(45.0), Some(10.0), GrowthForm::Other),
        mk("e", Some(45.0), Some(10.0), GrowthForm::Grass),
    ])
    .unwrap();
    let idx = CwmRecords::from_table(&table);
    assert_eq!((idx.len(), idx.skipped), (2, 3));
    assert_eq!(idx.records(PftClass::Dbf)[0].record_id, "a");
    assert_eq!(idx.records(PftClass::Grl)[0].record_id, "e");
}
