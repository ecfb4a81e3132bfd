"""Purification adversaries: JPEG, median smoothing, and diffusion-based
noise-and-denoise purification (whole-image and overlapping-grid).

All purifiers preserve shape and [0,1] range. Diffusion purification
reuses the victim model conditioned on the input image itself, with a
neutral (zero) audio amplitude.
"""

from __future__ import annotations

import io

import numpy as np
import torch
from PIL import Image

from .config import ParameterError, PurifierConfig
from .diffusion import Conditioning, _ddim_transport, add_noise, timestep_ladder
from .util import generator, stable_seed
from .victim import TalkingHeadModel

DIFFPURE_MAX_STEPS = 10


def jpeg_purify(x: torch.Tensor, quality: int) -> torch.Tensor:
    """Baseline JPEG encode/decode round trip at the given quality."""
    if not (1 <= quality <= 100):
        raise ParameterError(f"quality must be in [1,100], got {quality}")
    arr = (x.detach().cpu().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    back = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(back)


def smooth_purify(x: torch.Tensor, kernel: int) -> torch.Tensor:
    """Median filter with reflective borders, applied per channel."""
    if kernel < 1 or kernel % 2 == 0:
        raise ParameterError(f"kernel must be odd >= 1, got {kernel}")
    if kernel == 1:
        return x.detach().clone()
    pad = kernel // 2
    arr = x.detach().cpu().numpy()
    padded = np.pad(arr, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(0, 1))
    out = np.median(windows, axis=(-2, -1)).astype(arr.dtype)
    return torch.from_numpy(out)


def diffpure(
    x: torch.Tensor, model: TalkingHeadModel, t_star: int, seed: int = 0
) -> torch.Tensor:
    """Encode, noise to t*, deterministically denoise back, decode.

    t*=0 degenerates to the codec round trip. The DDIM descent uses at
    most DIFFPURE_MAX_STEPS uniform rungs over [0, t*].
    """
    if t_star > model.sched.T:
        raise ParameterError(f"t_star={t_star} exceeds schedule T={model.sched.T}")
    if t_star < 0:
        raise ParameterError("t_star must be >= 0")
    with torch.no_grad():
        z0 = model.encode(x)
        if t_star == 0:
            return model.decode(z0)
        cond = Conditioning(ref_latent=z0, audio=0.0)
        gen = generator(stable_seed(seed, "diffpure"))
        eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        z = add_noise(z0, t_star, eps, model.sched)
        steps = min(DIFFPURE_MAX_STEPS, t_star)
        ladder = [round(k * t_star / steps) for k in range(steps + 1)]
        for k in range(steps, 0, -1):
            eps_pred = model.predict_eps(z, ladder[k], cond)
            z = _ddim_transport(z, eps_pred, ladder[k], ladder[k - 1], model.sched)
        return model.decode(z).clamp(0.0, 1.0)


def _grid_starts(size: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def _patch_seed(seed: int, iteration: int, r: int, c: int) -> int:
    # iteration 0's top-left patch reuses the base seed so a degenerate
    # single-patch grid reproduces plain diffpure exactly
    if iteration == 0 and r == 0 and c == 0:
        return seed
    return stable_seed(seed, "gridpure", iteration, r, c)


def gridpure(x: torch.Tensor, model: TalkingHeadModel, cfg: PurifierConfig) -> torch.Tensor:
    """Iterated overlapping-patch diffusion purification with uniform
    per-pixel averaging of overlapping outputs."""
    h, w = int(x.shape[0]), int(x.shape[1])
    if cfg.grid_patch > min(h, w):
        raise ParameterError(f"grid_patch={cfg.grid_patch} larger than image {h}x{w}")
    rows = _grid_starts(h, cfg.grid_patch, cfg.grid_stride)
    cols = _grid_starts(w, cfg.grid_patch, cfg.grid_stride)
    img = x.detach().clone()
    for it in range(cfg.grid_iters):
        acc = torch.zeros_like(img)
        cnt = torch.zeros((h, w, 1), dtype=img.dtype)
        for r in rows:
            for c in cols:
                patch = img[r : r + cfg.grid_patch, c : c + cfg.grid_patch]
                out = diffpure(patch, model, cfg.t_star, seed=_patch_seed(cfg.seed, it, r, c))
                acc[r : r + cfg.grid_patch, c : c + cfg.grid_patch] += out
                cnt[r : r + cfg.grid_patch, c : c + cfg.grid_patch] += 1.0
        img = (acc / cnt).clamp(0.0, 1.0)
    return img


def run_purifier(
    x: torch.Tensor, cfg: PurifierConfig, model: TalkingHeadModel | None = None
) -> torch.Tensor:
    """Dispatch a purifier config onto an image."""
    if cfg.kind == "jpeg":
        return jpeg_purify(x, cfg.jpeg_quality)
    if cfg.kind == "smooth":
        return smooth_purify(x, cfg.kernel)
    if model is None:
        raise ParameterError(f"purifier {cfg.kind!r} needs the victim model")
    if cfg.kind == "diffpure":
        return diffpure(x, model, cfg.t_star, cfg.seed)
    if cfg.kind == "gridpure":
        return gridpure(x, model, cfg)
    raise ParameterError(f"unknown purifier kind {cfg.kind!r}")


__all__ = [
    "DIFFPURE_MAX_STEPS",
    "diffpure",
    "gridpure",
    "jpeg_purify",
    "run_purifier",
    "smooth_purify",
]
