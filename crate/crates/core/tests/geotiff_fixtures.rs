//! Reader checks against GeoTIFFs produced by an independent writer
//! (tifffile; see data/geotiff/gen_fixtures.py).

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use mobsat_core::geo::Hemisphere;
use mobsat_core::raster::geotiff::{read_geotiff, zone_from_epsg};
use mobsat_core::raster::{load_raster, RasterError};
use serde_json::Value;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/geotiff")
}

fn read(name: &str) -> Result<mobsat_core::raster::RasterGrid, RasterError> {
    read_geotiff(BufReader::new(File::open(data_dir().join(name)).unwrap()))
}

fn expected() -> Value {
    let text = std::fs::read_to_string(data_dir().join("expected.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn independent_fixtures_decode_exactly() {
    let exp = expected();
    for name in ["u16_tiled_deflate.tif", "u8_strips_be.tif", "f32_point_south.tif"] {
        let e = &exp[name];
        let g = read(name).unwrap_or_else(|err| panic!("{name}: {err}"));
        assert_eq!(g.width() as u64, e["width"].as_u64().unwrap(), "{name}");
        assert_eq!(g.height() as u64, e["height"].as_u64().unwrap(), "{name}");
        assert_eq!(g.bands().len() as u64, e["bands"].as_u64().unwrap(), "{name}");
        for (b, band) in g.bands().iter().enumerate() {
            let sum: f64 = band.data.iter().sum();
            let want = e["band_sums"][b].as_f64().unwrap();
            assert!(close(sum, want), "{name} band {b}: {sum} vs {want}");
            assert_eq!(band.data[0], e["first_pixel"][b].as_f64().unwrap(), "{name}");
            assert_eq!(*band.data.last().unwrap(), e["last_pixel"][b].as_f64().unwrap(), "{name}");
        }
        let (zone, hemi) = zone_from_epsg(e["epsg"].as_u64().unwrap() as u16).unwrap();
        let o = g.origin();
        assert_eq!((o.zone, o.hemisphere), (zone, hemi));
        let scale = e["scale"].as_f64().unwrap();
        assert_eq!(g.pixel_size_m(), scale);
        let half = if e["raster_type"].as_u64() == Some(2) { scale / 2.0 } else { 0.0 };
        assert_eq!(o.easting, e["tie"][0].as_f64().unwrap() - half);
        assert_eq!(o.northing, e["tie"][1].as_f64().unwrap() + half);
    }
}

#[test]
fn nodata_and_southern_origin() {
    let g = read("f32_point_south.tif").unwrap();
    assert_eq!(g.nodata(), Some(-9999.0));
    assert_eq!(g.origin().hemisphere, Hemisphere::South);
    let v = g.values()[4 * g.width() + 5];
    assert!(g.is_nodata(v));
}

#[test]
fn error_codes() {
    assert_eq!(read("plain.tif").unwrap_err().code(), Some("no-georef"));
    assert_eq!(read("geographic.tif").unwrap_err().code(), Some("no-georef"));
    assert_eq!(read("lzma.tif").unwrap_err().code(), Some("unsupported-raster"));
}

#[test]
fn manifest_band_layout_names_bands() {
    let layout: Vec<String> = ["R", "G", "B", "NIR"].iter().map(|s| s.to_string()).collect();
    let g = load_raster(&data_dir().join("u16_tiled_deflate.tif"), &layout).unwrap();
    assert_eq!(g.band_names(), ["R", "G", "B", "NIR"]);
    let err = load_raster(&data_dir().join("u8_strips_be.tif"), &layout).unwrap_err();
    assert!(err.to_string().contains("band layout"));
}
