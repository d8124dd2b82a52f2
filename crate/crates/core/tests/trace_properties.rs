use chrono::{TimeZone, Utc};
use mobsat_core::geo::{BoundingBox, Hemisphere, ProjPoint};
use mobsat_core::trace::{parse_traces, spatial_filter, SchemaConfig, TracePoint};
use proptest::prelude::*;

fn point(e: f64, n: f64) -> TracePoint {
    let p = ProjPoint::new(e, n, 15, Hemisphere::North);
    TracePoint {
        device_id: "d".into(),
        timestamp: Utc.with_ymd_and_hms(2020, 5, 15, 12, 0, 0).unwrap(),
        location: mobsat_core::geo::inverse_utm(p).unwrap(),
        precision_m: 5.0,
        projected: Some(p),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn spatial_filter_is_containment_and_idempotent(
        coords in prop::collection::vec((0.0f64..3000.0, 0.0f64..3000.0), 1000),
        x0 in 0.0f64..1500.0,
        y0 in 0.0f64..1500.0,
        side in 1.0f64..1500.0,
    ) {
        let bbox = BoundingBox::new(
            280_000.0 + x0, 3_950_000.0 + y0, 280_000.0 + x0 + side, 3_950_000.0 + y0 + side, 15,
        ).unwrap();
        let pts: Vec<TracePoint> = coords
            .iter()
            .map(|(e, n)| point(280_000.0 + e, 3_950_000.0 + n))
            .collect();
        let kept = spatial_filter(&pts, &bbox).unwrap();
        let brute: Vec<TracePoint> = pts
            .iter()
            .filter(|p| {
                let q = p.projected.unwrap();
                q.easting >= bbox.min_e && q.easting <= bbox.max_e
                    && q.northing >= bbox.min_n && q.northing <= bbox.max_n
            })
            .cloned()
            .collect();
        prop_assert_eq!(&kept, &brute);
        prop_assert_eq!(spatial_filter(&kept, &bbox).unwrap(), kept);
    }

    #[test]
    fn every_row_is_a_point_or_a_reject(kinds in prop::collection::vec(0u8..6, 0..300)) {
        let mut csv = String::from("device_id,timestamp,lat,lon,precision_m,extra\n");
        for (i, k) in kinds.iter().enumerate() {
            let row = match k {
                0 => format!("d{i},2020-05-15T12:00:00Z,35.7,-95.3,8,x"),
                1 => format!("d{i},2020-05-15 12:00,35.7,-95.3,8,x"),
                2 => format!("d{i},2020-05-15T12:00:00Z,91,-95.3,8,x"),
                3 => format!(",2020-05-15T12:00:00Z,35.7,-95.3,8,x"),
                4 => format!("d{i},2020-05-15T12:00:00Z,35.7,abc,8,x"),
                _ => format!("d{i},2020-05-15T12:00:00Z,35.7,-95.3,-1,x"),
            };
            csv.push_str(&row);
            csv.push('\n');
        }
        let out = parse_traces(csv.as_bytes(), &SchemaConfig::default()).unwrap();
        prop_assert_eq!(out.rows_read, kinds.len());
        prop_assert_eq!(out.points.len() + out.rejects.len(), out.rows_read);
        prop_assert_eq!(out.points.len(), kinds.iter().filter(|k| **k == 0).count());
    }
}
