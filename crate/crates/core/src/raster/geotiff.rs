//! GeoTIFF subset.
//!
//! Read: baseline TIFF (little or big endian), one image, chunky samples,
//! strips or tiles, no compression or deflate, no predictor; 8/16-bit
//! unsigned or 32-bit float samples. Georeferencing comes from
//! ModelPixelScale (33550) with square pixels, ModelTiepoint (33922) and a
//! GeoKeyDirectory (34735) whose ProjectedCSType is a WGS84 UTM code
//! (326zz north, 327zz south). GDAL_NODATA (42113) is honoured.
//!
//! Write: the same subset with strips only.

use std::io::{Read, Seek, Write};

use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::colortype::ColorType;
use tiff::encoder::compression::DeflateLevel;
use tiff::encoder::{Compression, TiffEncoder, TiffValue};
use tiff::tags::{PhotometricInterpretation, SampleFormat, Tag};
use tiff::TiffError;

use super::{Band, RasterError, RasterGrid};
use crate::geo::{Hemisphere, ProjPoint};

const TAG_PIXEL_SCALE: u16 = 33550;
const TAG_TIEPOINT: u16 = 33922;
const TAG_GEOKEYS: u16 = 34735;
const TAG_GDAL_NODATA: u16 = 42113;

const KEY_MODEL_TYPE: u16 = 1024;
const KEY_RASTER_TYPE: u16 = 1025;
const KEY_PROJECTED_CS: u16 = 3072;
const MODEL_PROJECTED: u16 = 1;
const PIXEL_IS_AREA: u16 = 1;
const PIXEL_IS_POINT: u16 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleType {
    U8,
    U16,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub sample: SampleType,
    pub deflate: bool,
}

impl WriteOptions {
    pub fn new(sample: SampleType) -> Self {
        Self {
            sample,
            deflate: true,
        }
    }
}

fn unsupported(msg: impl Into<String>) -> RasterError {
    RasterError::Unsupported(msg.into())
}

fn from_tiff(e: TiffError) -> RasterError {
    match e {
        TiffError::IoError(io) => RasterError::Io(io),
        other => unsupported(other.to_string()),
    }
}

pub fn utm_epsg(zone: u8, hemisphere: Hemisphere) -> u16 {
    match hemisphere {
        Hemisphere::North => 32600 + zone as u16,
        Hemisphere::South => 32700 + zone as u16,
    }
}

pub fn zone_from_epsg(code: u16) -> Option<(u8, Hemisphere)> {
    match code {
        32601..=32660 => Some(((code - 32600) as u8, Hemisphere::North)),
        32701..=32760 => Some(((code - 32700) as u8, Hemisphere::South)),
        _ => None,
    }
}

/// Looks up a SHORT-valued key in a GeoKeyDirectory.
fn geo_key(dir: &[u16], key: u16) -> Option<u16> {
    let count = *dir.get(3)? as usize;
    dir[4..]
        .chunks_exact(4)
        .take(count)
        .find(|k| k[0] == key && k[1] == 0)
        .map(|k| k[3])
}

pub fn read_geotiff<R: Read + Seek>(input: R) -> Result<RasterGrid, RasterError> {
    let mut dec = Decoder::new(input)
        .map_err(from_tiff)?
        .with_limits(Limits::unlimited());
    let (width, height) = dec.dimensions().map_err(from_tiff)?;

    let compression = dec
        .find_tag_unsigned::<u16>(Tag::Compression)
        .map_err(from_tiff)?
        .unwrap_or(1);
    if !matches!(compression, 1 | 8 | 32946) {
        return Err(unsupported(format!("compression {compression}")));
    }
    let predictor = dec
        .find_tag_unsigned::<u16>(Tag::Predictor)
        .map_err(from_tiff)?
        .unwrap_or(1);
    if predictor != 1 {
        return Err(unsupported(format!("predictor {predictor}")));
    }
    let planar = dec
        .find_tag_unsigned::<u16>(Tag::PlanarConfiguration)
        .map_err(from_tiff)?
        .unwrap_or(1);
    if planar != 1 {
        return Err(unsupported("planar (band-separate) layout"));
    }
    let samples = dec
        .find_tag_unsigned::<u16>(Tag::SamplesPerPixel)
        .map_err(from_tiff)?
        .unwrap_or(1) as usize;
    let bits = dec
        .find_tag_unsigned_vec::<u16>(Tag::BitsPerSample)
        .map_err(from_tiff)?
        .unwrap_or_else(|| vec![1]);
    let formats = dec
        .find_tag_unsigned_vec::<u16>(Tag::SampleFormat)
        .map_err(from_tiff)?
        .unwrap_or_else(|| vec![1]);
    let bits0 = bits[0];
    let format0 = formats[0];
    if bits.iter().any(|b| *b != bits0) || formats.iter().any(|f| *f != format0) {
        return Err(unsupported("mixed sample types"));
    }
    if !matches!((bits0, format0), (8, 1) | (16, 1) | (32, 3)) {
        return Err(unsupported(format!(
            "{bits0}-bit samples with sample format {format0}"
        )));
    }

    let origin_and_size = georef(&mut dec)?;

    let nodata = match dec
        .find_tag(Tag::Unknown(TAG_GDAL_NODATA))
        .map_err(from_tiff)?
    {
        Some(v) => {
            let s = v.into_string().map_err(from_tiff)?;
            let s = s.trim_matches(char::from(0)).trim();
            Some(
                s.parse::<f64>()
                    .map_err(|_| unsupported(format!("unreadable nodata value {s:?}")))?,
            )
        }
        None => None,
    };

    let values: Vec<f64> = match dec.read_image().map_err(from_tiff)? {
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        _ => return Err(unsupported("sample type")),
    };
    let (w, h) = (width as usize, height as usize);
    if values.len() != w * h * samples {
        return Err(unsupported(format!(
            "decoded {} samples, expected {}",
            values.len(),
            w * h * samples
        )));
    }
    let bands = (0..samples)
        .map(|s| Band {
            name: format!("b{}", s + 1),
            data: values.iter().skip(s).step_by(samples).copied().collect(),
        })
        .collect();
    let (origin, pixel_size) = origin_and_size;
    RasterGrid::new(w, h, origin, pixel_size, nodata, bands)
}

fn georef<R: Read + Seek>(dec: &mut Decoder<R>) -> Result<(ProjPoint, f64), RasterError> {
    let mut f64_tag = |tag: u16| -> Result<Option<Vec<f64>>, RasterError> {
        dec.find_tag(Tag::Unknown(tag))
            .map_err(from_tiff)?
            .map(|v| v.into_f64_vec().map_err(from_tiff))
            .transpose()
    };
    let scale = f64_tag(TAG_PIXEL_SCALE)?
        .ok_or_else(|| RasterError::NoGeoref("no pixel scale tag".into()))?;
    let tie = f64_tag(TAG_TIEPOINT)?
        .ok_or_else(|| RasterError::NoGeoref("no tiepoint tag".into()))?;
    if scale.len() < 2 || tie.len() < 6 {
        return Err(RasterError::NoGeoref("truncated georeferencing tags".into()));
    }
    let (sx, sy) = (scale[0], scale[1]);
    if !(sx > 0.0) || !(sy > 0.0) {
        return Err(RasterError::NoGeoref(format!("pixel scale {sx} x {sy}")));
    }
    if (sx - sy).abs() > 1e-9 * sx {
        return Err(unsupported(format!("non-square pixels {sx} x {sy}")));
    }
    let keys = dec
        .find_tag(Tag::Unknown(TAG_GEOKEYS))
        .map_err(from_tiff)?
        .map(|v| v.into_u16_vec().map_err(from_tiff))
        .transpose()?
        .ok_or_else(|| RasterError::NoGeoref("no GeoKeyDirectory".into()))?;
    let epsg = geo_key(&keys, KEY_PROJECTED_CS)
        .ok_or_else(|| RasterError::NoGeoref("no projected CRS key".into()))?;
    let (zone, hemisphere) = zone_from_epsg(epsg)
        .ok_or_else(|| RasterError::NoGeoref(format!("EPSG:{epsg} is not a WGS84 UTM zone")))?;
    let mut e0 = tie[3] - tie[0] * sx;
    let mut n0 = tie[4] + tie[1] * sy;
    if geo_key(&keys, KEY_RASTER_TYPE) == Some(PIXEL_IS_POINT) {
        e0 -= sx / 2.0;
        n0 += sy / 2.0;
    }
    Ok((ProjPoint::new(e0, n0, zone, hemisphere), sx))
}

/// Chunky multi-sample pixel layout with `N` samples of `T`.
struct Samples<T, const N: usize>(std::marker::PhantomData<T>);

macro_rules! samples_color {
    ($inner:ty, $bits:expr, $fmt:expr) => {
        impl<const N: usize> ColorType for Samples<$inner, N> {
            type Inner = $inner;
            const TIFF_VALUE: PhotometricInterpretation = PhotometricInterpretation::BlackIsZero;
            const BITS_PER_SAMPLE: &'static [u16] = &[$bits; N];
            const SAMPLE_FORMAT: &'static [SampleFormat] = &[$fmt; N];

            fn horizontal_predict(row: &[Self::Inner], result: &mut Vec<Self::Inner>) {
                result.extend_from_slice(row);
            }
        }
    };
}

samples_color!(u8, 8, SampleFormat::Uint);
samples_color!(u16, 16, SampleFormat::Uint);
samples_color!(f32, 32, SampleFormat::IEEEFP);

fn encode<W, T, const N: usize>(
    out: W,
    grid: &RasterGrid,
    opts: &WriteOptions,
    data: &[T],
) -> Result<(), RasterError>
where
    W: Write + Seek,
    Samples<T, N>: ColorType<Inner = T>,
    [T]: TiffValue,
{
    let compression = if opts.deflate {
        Compression::Deflate(DeflateLevel::Balanced)
    } else {
        Compression::Uncompressed
    };
    let mut enc = TiffEncoder::new(out)
        .map_err(from_tiff)?
        .with_compression(compression);
    let mut img = enc
        .new_image::<Samples<T, N>>(grid.width() as u32, grid.height() as u32)
        .map_err(from_tiff)?;
    let d = img.encoder();
    if N > 1 {
        d.write_tag(Tag::ExtraSamples, &[0u16; N][1..])
            .map_err(from_tiff)?;
    }
    let o = grid.origin();
    let ps = grid.pixel_size_m();
    d.write_tag(Tag::Unknown(TAG_PIXEL_SCALE), &[ps, ps, 0.0][..])
        .map_err(from_tiff)?;
    d.write_tag(
        Tag::Unknown(TAG_TIEPOINT),
        &[0.0, 0.0, 0.0, o.easting, o.northing, 0.0][..],
    )
    .map_err(from_tiff)?;
    let keys: [u16; 16] = [
        1, 1, 0, 3,
        KEY_MODEL_TYPE, 0, 1, MODEL_PROJECTED,
        KEY_RASTER_TYPE, 0, 1, PIXEL_IS_AREA,
        KEY_PROJECTED_CS, 0, 1, utm_epsg(o.zone, o.hemisphere),
    ];
    d.write_tag(Tag::Unknown(TAG_GEOKEYS), &keys[..])
        .map_err(from_tiff)?;
    if let Some(nd) = grid.nodata() {
        let text = if nd.is_nan() { "nan".to_string() } else { nd.to_string() };
        d.write_tag(Tag::Unknown(TAG_GDAL_NODATA), text.as_str())
            .map_err(from_tiff)?;
    }
    img.write_data(data).map_err(from_tiff)
}

fn interleave<T>(grid: &RasterGrid, convert: impl Fn(f64) -> Result<T, RasterError>) -> Result<Vec<T>, RasterError> {
    let n = grid.width() * grid.height();
    let bands = grid.bands();
    let mut out = Vec::with_capacity(n * bands.len());
    for i in 0..n {
        for b in bands {
            out.push(convert(b.data[i])?);
        }
    }
    Ok(out)
}

fn integral(v: f64, max: f64) -> Result<f64, RasterError> {
    if v.fract() != 0.0 || !(0.0..=max).contains(&v) {
        return Err(RasterError::InvalidInput(format!(
            "value {v} does not fit the integer sample type"
        )));
    }
    Ok(v)
}

macro_rules! dispatch_bands {
    ($n:expr, $out:expr, $grid:expr, $opts:expr, $data:expr) => {
        match $n {
            1 => encode::<_, _, 1>($out, $grid, $opts, $data),
            2 => encode::<_, _, 2>($out, $grid, $opts, $data),
            3 => encode::<_, _, 3>($out, $grid, $opts, $data),
            4 => encode::<_, _, 4>($out, $grid, $opts, $data),
            5 => encode::<_, _, 5>($out, $grid, $opts, $data),
            6 => encode::<_, _, 6>($out, $grid, $opts, $data),
            7 => encode::<_, _, 7>($out, $grid, $opts, $data),
            8 => encode::<_, _, 8>($out, $grid, $opts, $data),
            n => Err(RasterError::InvalidInput(format!(
                "cannot write {n} bands; at most 8 are supported"
            ))),
        }
    };
}

/// Writes every band, in order, as one chunky GeoTIFF image. Integer sample
/// types require whole in-range values (nodata included).
pub fn write_geotiff<W: Write + Seek>(
    out: W,
    grid: &RasterGrid,
    opts: &WriteOptions,
) -> Result<(), RasterError> {
    let n = grid.bands().len();
    match opts.sample {
        SampleType::U8 => {
            let data = interleave(grid, |v| integral(v, u8::MAX as f64).map(|v| v as u8))?;
            dispatch_bands!(n, out, grid, opts, &data)
        }
        SampleType::U16 => {
            let data = interleave(grid, |v| integral(v, u16::MAX as f64).map(|v| v as u16))?;
            dispatch_bands!(n, out, grid, opts, &data)
        }
        SampleType::F32 => {
            let data = interleave(grid, |v| Ok(v as f32))?;
            dispatch_bands!(n, out, grid, opts, &data)
        }
    }
}

pub fn write_geotiff_file(
    path: &std::path::Path,
    grid: &RasterGrid,
    opts: &WriteOptions,
) -> Result<(), RasterError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    write_geotiff(&mut buf, grid, opts)?;
    std::fs::write(path, buf.into_inner())?;
    Ok(())
}
