"""Writes GeoTIFF reader fixtures with tifffile and records expected values."""
import json

import numpy as np
import tifffile

rng = np.random.default_rng(20200515)
expected = {}


def geokeys(epsg, raster_type=1):
    return (1, 1, 0, 3, 1024, 0, 1, 1, 1025, 0, 1, raster_type, 3072, 0, 1, epsg)


def write(name, data, *, scale, tie, epsg, raster_type=1, nodata=None, **kw):
    extratags = [
        (33550, "d", 3, (scale, scale, 0.0), True),
        (33922, "d", 6, (0.0, 0.0, 0.0, tie[0], tie[1], 0.0), True),
        (34735, "H", 16, geokeys(epsg, raster_type), True),
    ]
    if nodata is not None:
        extratags.append((42113, "s", 0, nodata, True))
    tifffile.imwrite(name, data, photometric="minisblack", planarconfig="contig",
                     extratags=extratags, metadata=None, **kw)
    bands = data.reshape(data.shape[0], data.shape[1], -1)
    expected[name] = {
        "width": int(data.shape[1]),
        "height": int(data.shape[0]),
        "bands": int(bands.shape[2]),
        "band_sums": [float(bands[:, :, b].astype(np.float64).sum()) for b in range(bands.shape[2])],
        "first_pixel": [float(v) for v in bands[0, 0, :]],
        "last_pixel": [float(v) for v in bands[-1, -1, :]],
        "scale": scale,
        "tie": list(tie),
        "epsg": epsg,
        "raster_type": raster_type,
    }


# 16-bit, 4 bands, deflate, tiled with partial edge tiles
write("u16_tiled_deflate.tif", rng.integers(0, 65536, size=(37, 45, 4), dtype=np.uint16),
      scale=3.0, tie=(285000.0, 3959000.0), epsg=32615, compression="zlib", tile=(16, 16))
# 8-bit, 3 bands, uncompressed strips of 5 rows, big-endian
write("u8_strips_be.tif", rng.integers(0, 256, size=(12, 7, 3), dtype=np.uint8),
      scale=10.0, tie=(500000.0, 4000000.0), epsg=32614, byteorder=">", rowsperstrip=5)
# float32 single band, deflate strips, southern hemisphere, pixel-is-point, nodata
f = rng.normal(size=(9, 11)).astype(np.float32)
f[4, 5] = -9999.0
write("f32_point_south.tif", f, scale=0.5, tie=(300000.25, 7000000.25), epsg=32733,
      raster_type=2, nodata="-9999", compression="zlib", rowsperstrip=4)
# no georeferencing at all
tifffile.imwrite("plain.tif", np.arange(6, dtype=np.uint8).reshape(2, 3), photometric="minisblack")
# geographic CRS (EPSG:4326) rather than UTM
write("geographic.tif", np.zeros((2, 2), dtype=np.uint8), scale=0.001, tie=(-95.0, 35.0), epsg=4326)
# LZMA compression is outside the supported subset
tifffile.imwrite("lzma.tif", np.zeros((4, 4), dtype=np.uint8), photometric="minisblack",
                 compression="lzma")

with open("expected.json", "w") as fh:
    json.dump(expected, fh, indent=1, sort_keys=True)
    fh.write("\n")
