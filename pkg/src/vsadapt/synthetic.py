"""Toy head-like volumes for demos and smoke tests.

Each case has one bright VS sphere on one side, two small dark cochleas and
background noise. ``real`` cases get an extra small bright blob on the
opposite side, the kind of false positive the largest-component step removes.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .volume import LabelVolume, Volume, write_nifti


def _ball(shape, centre, radius):
    x, y, z = np.indices(shape)
    return (x - centre[0]) ** 2 + (y - centre[1]) ** 2 + (z - centre[2]) ** 2 <= radius**2


def make_case(seed: int, shape=(24, 24, 12), real: bool = False) -> tuple[Volume, LabelVolume]:
    rng = np.random.default_rng(seed)
    nx, ny, nz = shape
    side = 1 if rng.uniform() < 0.5 else -1
    cx = nx // 2 + side * nx // 4
    vs_centre = (cx + rng.integers(-1, 2), ny // 2 + rng.integers(-2, 3), nz // 2)
    vs_radius = float(rng.uniform(2.5, 3.5))
    labels = np.zeros(shape, dtype=np.uint8)
    labels[_ball(shape, vs_centre, vs_radius)] = 1
    for sgn in (-1, 1):
        labels[_ball(shape, (nx // 2 + sgn * (nx // 3), ny // 4, nz // 2), 1.2)] = 2

    image = rng.normal(0.0, 0.25, size=shape)
    image[labels == 1] += 3.0
    image[labels == 2] -= 3.0
    if real:
        decoy = (nx // 2 - side * nx // 4, 3 * ny // 4, nz // 2)
        image[_ball(shape, decoy, 1.0)] += 3.0
    return Volume(image.astype(np.float32)), LabelVolume(labels)


def write_pools(root, n_fake: int, n_real: int, seed: int = 0, shape=(24, 24, 12)):
    """Write fake (labelled) and real (unlabelled) cases under ``root``.

    Returns ``(fake_pool, real_pool, real_truth)``; ``real_truth`` maps case
    id to the reference label path, for evaluation only.
    """
    root = Path(root)
    for sub in ("fake", "real", "truth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    fake, real, truth = [], [], {}
    for i in range(n_fake):
        img, lbl = make_case(seed * 100_003 + i, shape)
        cid = f"fake{i:03d}"
        write_nifti(img, root / "fake" / f"{cid}.nii.gz")
        write_nifti(lbl, root / "fake" / f"{cid}_label.nii.gz")
        fake.append({"case_id": cid, "image": str(root / "fake" / f"{cid}.nii.gz"),
                     "label": str(root / "fake" / f"{cid}_label.nii.gz")})
    for i in range(n_real):
        img, lbl = make_case(seed * 100_003 + 50_000 + i, shape, real=True)
        cid = f"real{i:03d}"
        write_nifti(img, root / "real" / f"{cid}.nii.gz")
        write_nifti(lbl, root / "truth" / f"{cid}.nii.gz")
        real.append({"case_id": cid, "image": str(root / "real" / f"{cid}.nii.gz")})
        truth[cid] = str(root / "truth" / f"{cid}.nii.gz")
    return fake, real, truth
