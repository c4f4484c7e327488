"""Regenerate the reference MRC files in tests/data with the ``mrcfile`` package.

The files are checked in; this script only documents how they were
made.  ``mrcfile`` is not a dependency of the package itself.

    pip install mrcfile
    python scripts/make_reference_maps.py
"""

from pathlib import Path

import mrcfile
import numpy as np

OUT = Path(__file__).resolve().parents[1] / "tests" / "data"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(2024)

    # float32, 5 x 6 x 7 (X, Y, Z), 2.5 A voxels, non-zero origin
    vol = rng.standard_normal((7, 6, 5)).astype(np.float32)  # mrcfile arrays are (Z, Y, X)
    with mrcfile.new(OUT / "ref_float32.mrc", overwrite=True) as m:
        m.set_data(vol)
        m.voxel_size = 2.5
        m.header.origin = (10.0, -5.0, 2.5)
        m.update_header_stats()
    np.save(OUT / "ref_float32_xyz.npy", vol.transpose(2, 1, 0))

    # int16, 4 x 3 x 2, 1 A voxels, with a 160-byte extended header
    vol16 = np.arange(24, dtype=np.int16).reshape(2, 3, 4) - 7
    with mrcfile.new(OUT / "ref_int16.mrc", overwrite=True) as m:
        m.set_data(vol16)
        m.voxel_size = 1.0
        m.set_extended_header(np.zeros(160, dtype="V1"))
        m.update_header_stats()
    np.save(OUT / "ref_int16_xyz.npy", vol16.transpose(2, 1, 0).astype(np.float64))


if __name__ == "__main__":
    main()
