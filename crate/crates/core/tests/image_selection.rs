use chrono::{DateTime, Duration, TimeZone, Utc};
use mobsat_core::geo::BoundingBox;
use mobsat_core::imagery::{
    coverage_fraction, select_image_pair, utility_from_parts, EventSpec, ImageRecord,
    ImageryError, SelectionParams, UtilityForm,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn event() -> EventSpec {
    EventSpec {
        name: "oracle".into(),
        event_time: Utc.with_ymd_and_hms(2020, 5, 15, 18, 0, 0).unwrap(),
        roi: BoundingBox::new(0.0, 0.0, 1000.0, 1000.0, 15).unwrap(),
    }
}

/// Coarse steps for footprints, times and clouds so that utility ties are
/// frequent and the tie-break rules actually get exercised.
fn random_catalog(rng: &mut ChaCha8Rng, n: usize) -> Vec<ImageRecord> {
    let evt = event();
    (0..n)
        .map(|i| {
            let x0 = rng.random_range(-4..4) as f64 * 250.0;
            let y0 = rng.random_range(-4..4) as f64 * 250.0;
            let w = rng.random_range(1..8) as f64 * 250.0;
            let h = rng.random_range(1..8) as f64 * 250.0;
            let hours = rng.random_range(-10 * 24..10 * 24) / 6 * 6;
            ImageRecord {
                image_id: format!("img-{:02}", rng.random_range(0..40) * 100 + i),
                capture_time: evt.event_time + Duration::hours(hours),
                footprint: BoundingBox::new(x0, y0, x0 + w, y0 + h, 15).unwrap(),
                cloud_fraction: rng.random_range(0..10) as f64 / 10.0,
                band_layout: vec!["R".into(), "G".into(), "B".into()],
                pixel_size_m: 3.0,
                file_path: PathBuf::from(format!("img-{i}.tif")),
            }
        })
        .collect()
}

/// Exhaustive argmax: sort all eligible candidates of one side by the full
/// preference key and take the head.
fn brute_force(
    catalog: &[ImageRecord],
    evt: &EventSpec,
    params: &SelectionParams,
    before: bool,
) -> Option<ImageRecord> {
    let mut keyed: Vec<(f64, f64, String, &ImageRecord)> = Vec::new();
    for r in catalog {
        let cov = coverage_fraction(r, &evt.roi).unwrap();
        let side_ok = if before {
            r.capture_time < evt.event_time
        } else {
            r.capture_time >= evt.event_time
        };
        if !(r.cloud_fraction < params.cloud_max && cov > 0.0 && side_ok) {
            continue;
        }
        let days = (r.capture_time - evt.event_time).num_seconds().abs() as f64 / 86400.0;
        let u = utility_from_parts(cov, days, params.phi, params.form);
        keyed.push((u, days, r.image_id.clone(), r));
    }
    keyed.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then(a.2.cmp(&b.2))
    });
    keyed.first().map(|k| k.3.clone())
}

fn check_against_oracle(catalog: &[ImageRecord], params: &SelectionParams) {
    let evt = event();
    let want_before = brute_force(catalog, &evt, params, true);
    let want_after = brute_force(catalog, &evt, params, false);
    match select_image_pair(catalog, &evt, params) {
        Ok(res) => {
            assert_eq!(Some(res.before), want_before);
            assert_eq!(Some(res.after), want_after);
        }
        Err(ImageryError::NoBeforeImage) => assert!(want_before.is_none()),
        Err(ImageryError::NoAfterImage) => {
            assert!(want_before.is_some());
            assert!(want_after.is_none());
        }
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn fifty_image_catalogs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let catalog = random_catalog(&mut rng, 50);
        for form in [UtilityForm::Calibrated, UtilityForm::Printed] {
            for cloud_max in [0.3, 0.5, 1.0] {
                let params = SelectionParams {
                    cloud_max,
                    phi: 0.25,
                    form,
                };
                check_against_oracle(&catalog, &params);
            }
        }
    }
}

#[test]
fn zero_cloud_max_empties_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let catalog = random_catalog(&mut rng, 50);
    let params = SelectionParams {
        cloud_max: 0.0,
        ..SelectionParams::default()
    };
    assert!(matches!(
        select_image_pair(&catalog, &event(), &params),
        Err(ImageryError::NoBeforeImage)
    ));
}

fn ts(secs: i64) -> DateTime<Utc> {
    event().event_time + Duration::seconds(secs)
}

proptest! {
    #[test]
    fn permutation_invariant(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let catalog = random_catalog(&mut rng, n);
        let mut shuffled = catalog.clone();
        shuffled.shuffle(&mut rng);
        let params = SelectionParams::default();
        let a = select_image_pair(&catalog, &event(), &params);
        let b = select_image_pair(&shuffled, &event(), &params);
        match (a, b) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(x), Err(y)) => prop_assert_eq!(x.code(), y.code()),
            (x, y) => prop_assert!(false, "{:?} vs {:?}", x, y),
        }
    }

    #[test]
    fn selected_images_are_eligible(seed in any::<u64>(), cloud_max in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let catalog = random_catalog(&mut rng, 30);
        let evt = event();
        let params = SelectionParams { cloud_max, ..SelectionParams::default() };
        if let Ok(res) = select_image_pair(&catalog, &evt, &params) {
            for r in [&res.before, &res.after] {
                prop_assert!(r.cloud_fraction < cloud_max);
                prop_assert!(coverage_fraction(r, &evt.roi).unwrap() > 0.0);
            }
            prop_assert!(res.before.capture_time < evt.event_time);
            prop_assert!(res.after.capture_time >= evt.event_time);
        }
    }

    #[test]
    fn lowering_cloud_max_never_improves(seed in any::<u64>(), hi in 0.1f64..1.0, frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let catalog = random_catalog(&mut rng, 30);
        let lo = hi * frac;
        let p_hi = SelectionParams { cloud_max: hi, ..SelectionParams::default() };
        let p_lo = SelectionParams { cloud_max: lo, ..SelectionParams::default() };
        let r_hi = select_image_pair(&catalog, &event(), &p_hi);
        let r_lo = select_image_pair(&catalog, &event(), &p_lo);
        if let Ok(l) = r_lo {
            let h = r_hi.expect("a looser filter cannot lose a pair");
            prop_assert!(l.u_before <= h.u_before);
            prop_assert!(l.u_after <= h.u_after);
        }
    }

    #[test]
    fn utility_monotone(c1 in 0.0f64..1.0, c2 in 0.0f64..1.0, d1 in 0.0f64..30.0, d2 in 0.0f64..30.0, phi in 0.01f64..2.0) {
        for form in [UtilityForm::Calibrated, UtilityForm::Printed] {
            let (clo, chi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            prop_assert!(utility_from_parts(clo, d1, phi, form) <= utility_from_parts(chi, d1, phi, form));
            if d1 != d2 {
                let (dlo, dhi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
                prop_assert!(utility_from_parts(c1, dlo, phi, form) > utility_from_parts(c1, dhi, phi, form));
            }
        }
    }

    #[test]
    fn before_strictly_precedes_event(offset in -86_400i64..86_400) {
        let evt = event();
        let img = ImageRecord {
            image_id: "x".into(),
            capture_time: ts(offset),
            footprint: evt.roi,
            cloud_fraction: 0.0,
            band_layout: vec!["R".into()],
            pixel_size_m: 1.0,
            file_path: PathBuf::from("x.tif"),
        };
        let res = select_image_pair(&[img], &evt, &SelectionParams::default());
        let code = res.unwrap_err().code().unwrap();
        prop_assert_eq!(code, if offset < 0 { "no-after-image" } else { "no-before-image" });
    }
}
