"""Synthetic fixtures with known ground truth.

``python -m ldeqd.fixtures DIR`` writes the full set (including the two
2.5 um height maps, which are too large to ship) into DIR.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from . import geometry, specfit

# planted sample statistics
HOLE_DEPTH = 8.45
HOLE_DEPTH_STD = 2.2
HOLE_SIDE = 51.0
HOLE_SIDE_STD = 8.7
RESIDUAL_DEPTH = 3.32
N_HOLES = 24
AFM_PIXELS = 512
AFM_PITCH = 4.8828125  # 2500 nm / 512


def _recentre(v, mean, lo, hi):
    """Clip to [lo, hi] and shift to an exact sample mean."""
    v = np.clip(v, lo, hi)
    for _ in range(20):
        v = np.clip(v + (mean - v.mean()), lo, hi)
    return v


def planted_sample_pair(seed: int = 0, noise_rms: float = 0.05, tilt=(0.01, -0.006)):
    """Unfilled / filled 2.5x2.5 um^2 maps with 24 co-registered holes.

    Hole centres sit on pixel centres of a jittered 5x5 lattice (one site
    empty), so the apex is sampled exactly. The residual pit of each filled
    hole scales with its depth, giving a fill height of depth*(1 - 3.32/8.45):
    5.13 nm on average. Returns (h0, hf, truth) with truth a dict of arrays.
    """
    rng = np.random.default_rng(seed)
    n, p = AFM_PIXELS, AFM_PITCH
    cell = n // 5
    sites = [(i, j) for i in range(5) for j in range(5)]
    sites.pop(int(rng.integers(len(sites))))
    depth = _recentre(rng.normal(HOLE_DEPTH, HOLE_DEPTH_STD, N_HOLES), HOLE_DEPTH, 4.0, 13.0)
    side = _recentre(rng.normal(HOLE_SIDE, HOLE_SIDE_STD, N_HOLES), HOLE_SIDE, 35.0, 70.0)
    centres = []
    for i, j in sites:
        ix = i * cell + cell // 2 + int(rng.integers(-cell // 6, cell // 6 + 1))
        iy = j * cell + cell // 2 + int(rng.integers(-cell // 6, cell // 6 + 1))
        centres.append(((ix + 0.5) * p, (iy + 0.5) * p))
    residual = depth * RESIDUAL_DEPTH / HOLE_DEPTH
    common = dict(noise_rms=noise_rms, tilt=tilt)
    h0 = geometry.synthetic_heightmap(
        n, p, [dict(x=x, y=y, depth=d, lateral=s) for (x, y), d, s in zip(centres, depth, side)],
        seed=seed, **common,
    )
    hf = geometry.synthetic_heightmap(
        n, p, [dict(x=x, y=y, depth=r, lateral=s) for (x, y), r, s in zip(centres, residual, side)],
        seed=seed + 1, **common,
    )
    truth = dict(centres=np.array(centres), depth=depth, side=side, residual=residual, fill=depth - residual)
    return h0, hf, truth


def single_dot_pair(n: int = 96, pitch: float = 1.0):
    """Noise-free unfilled / filled maps of one hole (depth 8.45, residual 3.32, side 51)."""
    c = (n // 2 + 0.5) * pitch
    h0 = geometry.synthetic_heightmap(n, pitch, [dict(x=c, y=c, depth=HOLE_DEPTH, lateral=HOLE_SIDE)])
    hf = geometry.synthetic_heightmap(n, pitch, [dict(x=c, y=c, depth=RESIDUAL_DEPTH, lateral=HOLE_SIDE)])
    return h0, hf


# name -> (synthetic model, overrides, noise); the ideal emitter is noiseless
# so its central peak is empty rather than fed by Poisson tails
DATASETS = {
    "peak_390.csv": ("gaussian-peak", {}, "default"),
    "pl_alpha13.csv": ("power-law", {}, "default"),
    "dolp_006.csv": ("dolp", {}, "default"),
    "trpl_152.csv": ("monoexp", {}, "default"),
    "hbt_141.csv": ("two-level-hbt", {}, "default"),
    "hbt_ideal.csv": ("two-level-hbt", {"g2_zero": 0.0, "background": 0.0}, "none"),
}


def write_datasets(out, seed: int = 0) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (model, params, noise) in DATASETS.items():
        ds = specfit.generate_synthetic(model, params, noise=noise, seed=seed)
        specfit.save_dataset(ds, out / name)
        written.append(out / name)
    h0, hf = single_dot_pair()
    for name, hm in (("afm_dot_h0.txt", h0), ("afm_dot_hf.txt", hf)):
        geometry.save_heightmap(hm, out / name, precision=6)
        written.append(out / name)
    return written


def write_all(out, seed: int = 0) -> list[Path]:
    written = write_datasets(out, seed)
    h0, hf, _ = planted_sample_pair(seed)
    for name, hm in (("sample_a.txt", h0), ("sample_b.txt", hf)):
        geometry.save_heightmap(hm, Path(out) / name, precision=5)
        written.append(Path(out) / name)
    geometry.save_heightmap(geometry.HeightMap(np.zeros((64, 64)), AFM_PITCH, AFM_PITCH), Path(out) / "flat.txt")
    written.append(Path(out) / "flat.txt")
    return written


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: python -m ldeqd.fixtures DIR")
    for path in write_all(sys.argv[1]):
        print(path)
