"""Binary PGM export of input-resolution relevance maps."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from columbus import attribution as A
from columbus.errors import UsageError
from columbus.model import ModelGraph


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max scale a 2-D map to uint8; a constant map becomes mid-gray (128)."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.rint((values - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def pgm_bytes(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def write_pgm(values: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(pgm_bytes(normalize(values)))


def input_maps(model: ModelGraph, images: np.ndarray, y: np.ndarray, method: A.Method) -> np.ndarray:
    """One (H, W) relevance map per image.

    Signed gradient maps are shown as magnitudes summed over channels;
    Grad-CAM runs at the deepest level and is upsampled to the input grid.
    """
    _, _, h, w = images.shape
    if method is A.Method.GRAD_CAM:
        cam = A.grad_cam(model, images, y, model.num_blocks).values
        return A.upsample_nearest(cam, h, w)
    return np.abs(A.attribute(model, images, y, 0, method).values).sum(axis=1)


def parse_methods(names: Sequence[str]) -> list[A.Method]:
    out = []
    for name in names:
        try:
            out.append(A.Method(name))
        except ValueError:
            known = ", ".join(m.value for m in A.Method)
            raise UsageError(f"unknown attribution method {name!r} (known: {known})") from None
    return out


def export_heatmaps(
    model: ModelGraph,
    images: np.ndarray,
    labels: np.ndarray,
    image_ids: Sequence[str],
    methods: Sequence[str | A.Method],
    out_dir: str | Path,
) -> list[Path]:
    """Write ``<imgid>_<method>.pgm`` for every image and method; returns the paths."""
    resolved = parse_methods([m.value if isinstance(m, A.Method) else m for m in methods])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    y = np.eye(model.num_classes)[labels]
    written = []
    for method in resolved:
        maps = input_maps(model, images, y, method)
        for img_id, m in zip(image_ids, maps):
            path = out / f"{img_id}_{method.value}.pgm"
            write_pgm(m, path)
            written.append(path)
    return written
