"""Grad-CAM heatmaps from the last convolutional activation, plus overlays.

Works with any model exposing ``forward(x, train=False)`` that returns an
object with ``logits`` and ``activation`` tensors, where ``activation`` is an
[N,F,h,w] tensor on the path to the logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .dataset import resize
from .imageio import to_uint8, write_pnm


class GradCamError(ValueError):
    pass


@dataclass
class Heatmap:
    values: np.ndarray        # [S,S] in [0,1]
    image_id: str
    target_class: int
    raw_min: float            # of the upsampled map before normalization
    raw_max: float
    coarse: np.ndarray        # [h,w] ReLU-weighted activation map
    predicted_class: int = -1
    degenerate: bool = False

    def sidecar(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in (
            ("image_id", self.image_id),
            ("target_class", self.target_class),
            ("predicted_class", self.predicted_class),
            ("raw_min", f"{self.raw_min:.9g}"),
            ("raw_max", f"{self.raw_max:.9g}"),
            ("degenerate", str(self.degenerate).lower()),
        ))


def class_activation(activation: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean of dA_k."""
    alpha = grad.mean(axis=(-2, -1))
    return np.maximum(np.tensordot(alpha, activation, axes=(0, 0)), 0.0)


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.zeros_like(m) if hi == 0 else np.ones_like(m)
    out = (m - lo) / (hi - lo)
    out[m == hi] = 1.0
    return np.clip(out, 0.0, 1.0)


def upsample(m: np.ndarray, size: int, mode: str = "bilinear") -> np.ndarray:
    if mode == "bilinear":
        return np.maximum(resize(m, size, size), 0.0)
    if mode == "nearest":
        rows = (np.arange(size) * m.shape[0]) // size
        cols = (np.arange(size) * m.shape[1]) // size
        return m[rows][:, cols].astype(np.float64)
    raise GradCamError(f"unknown upsample mode {mode!r}")


def gradcam(model, image, target_class: int | None = None, image_id: str = "",
            upsample_mode: str = "bilinear") -> Heatmap:
    """Heatmap for one [1,1,S,S] (or [S,S]) image.

    ``target_class=None`` uses the predicted class. The model runs in eval
    mode; its parameters are left untouched apart from gradient buffers.
    """
    if not getattr(model, "is_trained", True):
        raise GradCamError("Grad-CAM needs a trained model")
    x = np.asarray(image)
    if x.ndim == 2:
        x = x[None, None]
    if x.ndim != 4 or x.shape[:2] != (1, 1) or x.shape[2] != x.shape[3]:
        raise GradCamError(f"expected a single [1,1,S,S] image, got shape {x.shape}")
    if target_class is not None and target_class not in (0, 1):
        raise GradCamError("target class must be 0 or 1")
    with E.enable_grad():
        out = model.forward(x, train=False)
        predicted = int(np.argmax(out.logits.data[0]))
        c = predicted if target_class is None else int(target_class)
        score = out.logits[0, c]
        E.backward(score)
    A = out.activation
    grad = A.grad if A.grad is not None else np.zeros_like(A.data)
    coarse = class_activation(A.data[0].astype(np.float64), grad[0].astype(np.float64))
    big = upsample(coarse, x.shape[-1], upsample_mode)
    for t in getattr(model, "parameters", lambda: [])():
        t.grad = None
    degenerate = not np.any(coarse > 0)
    return Heatmap(normalize_map(big), image_id, c, float(big.min()), float(big.max()),
                   coarse, predicted, degenerate)


def jet(values: np.ndarray) -> np.ndarray:
    """Piecewise-linear jet ramp: 0 -> dark blue, 1 -> dark red. Returns [...,3]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)[..., None]
    centers = np.array([3.0, 2.0, 1.0])
    return np.clip(1.5 - np.abs(4.0 * v - centers), 0.0, 1.0)


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend jet(heatmap) over a grayscale image in [0,1]; returns [S,S,3] in [0,1].

    Each pixel's blend weight is ``alpha * heatmap``, so cold regions keep the
    underlying image.
    """
    image = np.asarray(image, dtype=np.float64)
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if image.shape != heatmap.shape or image.ndim != 2:
        raise GradCamError(f"image {image.shape} and heatmap {heatmap.shape} must be equal 2-D shapes")
    if not 0.0 <= alpha <= 1.0:
        raise GradCamError("alpha must be in [0, 1]")
    w = (alpha * heatmap)[..., None]
    gray = np.repeat(image[..., None], 3, axis=-1)
    return (1.0 - w) * gray + w * jet(heatmap)


def write_outputs(out_dir, stem: str, heatmap: Heatmap, image: np.ndarray, alpha: float = 0.5) -> list[Path]:
    """``stem.heatmap.pgm``, ``stem.overlay.ppm`` and ``stem.gradcam.txt``."""
    out_dir = Path(out_dir)
    paths = [out_dir / f"{stem}.heatmap.pgm", out_dir / f"{stem}.overlay.ppm", out_dir / f"{stem}.gradcam.txt"]
    write_pnm(paths[0], to_uint8(heatmap.values))
    write_pnm(paths[1], to_uint8(overlay(np.squeeze(image), heatmap.values, alpha)))
    paths[2].write_bytes(heatmap.sidecar().encode("utf-8"))
    return paths
