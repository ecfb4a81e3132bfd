"""Desk-scale analogs of the evaluation metrics.

PSNR/SSIM are standard. The Fréchet proxy replaces Inception features
with flattened codec latents. Audio-visual sync is scored as the
regression coefficient of measured mouth openness on audio amplitude
(amplitude-normalized correlation, clipped to [-1, 1]): unlike plain
correlation it collapses to ~0 when the mouth barely moves, which is
what a synchronization confidence must do for a silenced portrait.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .config import ParameterError
from .diffusion import ShapeError
from .faces import AudioTrack, FaceParams, VideoClip, measure_openness

PSNR_CAP_DB = 100.0


def _to_f64(x: torch.Tensor) -> np.ndarray:
    return x.detach().to(torch.float64).cpu().numpy()


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(np.mean((_to_f64(a) - _to_f64(b)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    x = np.arange(size) - half
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _valid_conv2d_separable(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid-mode 2-D convolution with a separable kernel, per channel."""
    n = k.size
    out = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ k
    out = np.lib.stride_tricks.sliding_window_view(out, n, axis=1) @ k
    return out


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity with a Gaussian window, data range 1.

    Local statistics use the E[xy] - E[x]E[y] form so identical inputs
    produce numerator == denominator bitwise and SSIM exactly 1.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    x = _to_f64(a)
    y = _to_f64(b)
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    win = min(window, x.shape[0], x.shape[1])
    if win % 2 == 0:
        win -= 1
    if win < 1:
        raise ParameterError("image too small for any SSIM window")
    k = _gaussian_window(win, sigma)
    c1 = 0.01**2
    c2 = 0.03**2
    vals = []
    for ch in range(x.shape[2]):
        xc, yc = x[:, :, ch], y[:, :, ch]
        mu_x = _valid_conv2d_separable(xc, k)
        mu_y = _valid_conv2d_separable(yc, k)
        xx = _valid_conv2d_separable(xc * xc, k) - mu_x * mu_x
        yy = _valid_conv2d_separable(yc * yc, k) - mu_y * mu_y
        xy = _valid_conv2d_separable(xc * yc, k) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def mask_bbox(mask: torch.Tensor) -> tuple[int, int, int, int]:
    m = mask.detach().cpu().numpy().astype(bool)
    if not m.any():
        raise ParameterError("mask is empty")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def region_metrics(
    a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor
) -> tuple[float, float]:
    """(PSNR, SSIM) restricted to the bounding box of the face mask."""
    r0, r1, c0, c1 = mask_bbox(mask)
    return psnr(a[r0:r1, c0:c1], b[r0:r1, c0:c1]), ssim(a[r0:r1, c0:c1], b[r0:r1, c0:c1])


def gaussian_frechet(
    mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray
) -> tuple[float, bool]:
    """Fréchet distance between Gaussians; returns (value, regularized).

    tr((Sa Sb)^1/2) is computed through the symmetric form
    (Sa^1/2 Sb Sa^1/2)^1/2 via eigendecompositions. Singular covariances
    (common when samples < dims) get 1e-6 I added, and that is reported.
    """
    regularized = False
    eps = 1e-6
    for cov in (cov_a, cov_b):
        if np.linalg.eigvalsh(cov).min() < 1e-10:
            regularized = True
    if regularized:
        cov_a = cov_a + eps * np.eye(cov_a.shape[0])
        cov_b = cov_b + eps * np.eye(cov_b.shape[0])
    w, v = np.linalg.eigh(cov_a)
    root_a = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    inner = root_a @ cov_b @ root_a
    w_inner = np.linalg.eigvalsh(inner)
    trace_term = float(np.sqrt(np.clip(w_inner, 0.0, None)).sum())
    d2 = float(((mu_a - mu_b) ** 2).sum())
    value = d2 + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * trace_term
    return value, regularized


def frechet_proxy(
    set_a: list[torch.Tensor], set_b: list[torch.Tensor], codec
) -> float:
    """Fréchet distance over flattened codec latents of two image sets."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise ParameterError("each set needs at least 2 images")
    with torch.no_grad():
        feats_a = np.stack([_to_f64(codec.encode(x)).reshape(-1) for x in set_a])
        feats_b = np.stack([_to_f64(codec.encode(x)).reshape(-1) for x in set_b])
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.cov(feats_a, rowvar=False)
    cov_b = np.cov(feats_b, rowvar=False)
    value, _ = gaussian_frechet(mu_a, cov_a, mu_b, cov_b)
    return value


def openness_series(clip: VideoClip, params: FaceParams | None = None) -> np.ndarray:
    ident = params if params is not None else clip.identity
    if ident is None:
        raise ParameterError("clip carries no identity parameters for mouth measurement")
    return np.array([measure_openness(f, ident) for f in clip.frames], dtype=np.float64)


def sync_proxy(clip: VideoClip, audio: AudioTrack) -> float:
    """Audio-visual synchronization score in [-1, 1].

    Regression coefficient of measured mouth openness on the audio
    amplitudes: correlation scaled by how much the mouth actually moves
    relative to the audio. 0 when either sequence has no variance, so a
    frozen mouth scores as unsynchronized no matter the residual noise.
    """
    if len(clip) != len(audio):
        raise ParameterError(f"clip frames {len(clip)} != audio frames {len(audio)}")
    if len(clip) < 2:
        raise ParameterError("need at least 2 frames")
    o = openness_series(clip)
    a = audio.amplitudes.to(torch.float64).numpy()
    var_a = float(np.var(a))
    var_o = float(np.var(o))
    if var_a < 1e-12 or var_o < 1e-12:
        return 0.0
    beta = float(np.mean((o - o.mean()) * (a - a.mean())) / var_a)
    return float(np.clip(beta, -1.0, 1.0))


def mlmd_proxy(clip: VideoClip, audio: AudioTrack, params: FaceParams) -> float:
    """Mean absolute mouth-openness deviation from the driving amplitudes,
    in units of the identity's maximal opening (openness is already
    normalized by max_open, so this is the mean |openness - amplitude|)."""
    if len(clip) != len(audio):
        raise ParameterError(f"clip frames {len(clip)} != audio frames {len(audio)}")
    o = openness_series(clip, params)
    a = audio.amplitudes.to(torch.float64).numpy()
    return float(np.mean(np.abs(o - a)))


def mlmd_vs_reference(clip: VideoClip, reference_openness: np.ndarray, params: FaceParams) -> float:
    """Mouth-landmark distance analog against a reference clip's measured
    openness series (the benchmark's ground-truth row compares a clip
    against itself and scores exactly 0)."""
    o = openness_series(clip, params)
    if o.shape != reference_openness.shape:
        raise ParameterError("openness series length mismatch")
    return float(np.mean(np.abs(o - reference_openness)))


__all__ = [
    "PSNR_CAP_DB",
    "frechet_proxy",
    "gaussian_frechet",
    "mask_bbox",
    "mlmd_proxy",
    "mlmd_vs_reference",
    "openness_series",
    "psnr",
    "region_metrics",
    "ssim",
    "sync_proxy",
]
