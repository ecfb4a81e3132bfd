"""Procedural face/audio corpus: the ground truth the victim model learns.

Identities are parametric (head ellipse, eyes, skin tone, mouth box);
frames are rasterized at 4x supersampling so edges are smooth enough
for a small autoencoder, then snapped to the 8-bit grid so in-memory
pixels survive PNG round-trips bit-exactly. The mouth is the only
animated part: a dark aperture that opens downward proportionally to
the per-frame audio amplitude, which makes mouth openness exactly
measurable without any landmark detector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ParameterError

IMAGE_SIZE = 64
FPS = 25
_SS = 4  # supersampling factor for rasterization

_MOUTH_COLOR = (0.1, 0.04, 0.06)
_EYE_COLOR = (0.08, 0.07, 0.1)
_BACKGROUND = (0.12, 0.13, 0.18)

# 5-tap separable Gaussian (sigma=1) softens edges to ~3px transitions,
# which a small codec reconstructs far better than hard silhouettes
_BLUR_KERNEL = np.exp(-(np.arange(-2, 3) ** 2) / 2.0)
_BLUR_KERNEL /= _BLUR_KERNEL.sum()


def _soft_blur(img: np.ndarray) -> np.ndarray:
    pad = np.pad(img, ((2, 2), (2, 2), (0, 0)), mode="edge")
    out = np.zeros_like(pad)
    for off, w in zip(range(-2, 3), _BLUR_KERNEL):
        out += w * np.roll(pad, off, axis=0)
    pad, out = out, np.zeros_like(out)
    for off, w in zip(range(-2, 3), _BLUR_KERNEL):
        out += w * np.roll(pad, off, axis=1)
    return out[2:-2, 2:-2]


@dataclass(frozen=True)
class FaceParams:
    """Deterministic identity parameters, all in pixel units at 64x64."""

    seed: int
    center: tuple[float, float]  # (cx, cy)
    axes: tuple[float, float]  # ellipse semi-axes (ax, ay)
    skin: tuple[float, float, float]
    eye_y: float
    eye_dx: float
    eye_r: float
    mouth_cx: float
    mouth_top: float
    mouth_w: float
    max_open: float  # maximal vertical aperture, pixels

    def mouth_roi(self, size: int = IMAGE_SIZE) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1) box that always contains the aperture."""
        pad = 2
        r0 = max(0, int(math.floor(self.mouth_top)) - pad)
        r1 = min(size, int(math.ceil(self.mouth_top + self.max_open)) + pad)
        c0 = max(0, int(math.floor(self.mouth_cx - self.mouth_w / 2)) - pad)
        c1 = min(size, int(math.ceil(self.mouth_cx + self.mouth_w / 2)) + pad)
        return r0, r1, c0, c1


@dataclass
class Portrait:
    """One RGB frame in [0,1] with the identity's face mask and params."""

    pixels: torch.Tensor  # (H, W, 3) float32 in [0, 1]
    face_mask: torch.Tensor | None = None  # (H, W) bool
    identity: FaceParams | None = None

    def __post_init__(self) -> None:
        if self.pixels.dim() != 3 or self.pixels.shape[-1] != 3:
            raise ParameterError(f"portrait pixels must be (H, W, 3), got {tuple(self.pixels.shape)}")


@dataclass
class AudioTrack:
    """Per-frame amplitude envelope at 25 fps, values in [0,1]."""

    amplitudes: torch.Tensor  # (F,) float32
    source: str = "synthetic"

    def __post_init__(self) -> None:
        if self.amplitudes.dim() != 1 or self.amplitudes.numel() < 1:
            raise ParameterError("amplitudes must be a non-empty 1-D sequence")
        lo, hi = float(self.amplitudes.min()), float(self.amplitudes.max())
        if lo < 0.0 or hi > 1.0:
            raise ParameterError(f"amplitudes must lie in [0,1], got [{lo}, {hi}]")

    def __len__(self) -> int:
        return int(self.amplitudes.numel())


@dataclass
class VideoClip:
    """Frames paired 1:1 with an audio track."""

    frames: list[Portrait]
    audio: AudioTrack
    identity: FaceParams | None = None

    def __post_init__(self) -> None:
        if len(self.frames) != len(self.audio):
            raise ParameterError(
                f"frame count {len(self.frames)} != audio frame count {len(self.audio)}"
            )

    def __len__(self) -> int:
        return len(self.frames)

    def pixel_stack(self) -> torch.Tensor:
        return torch.stack([f.pixels for f in self.frames])


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap floats to the 8-bit grid (k/255) so PNG round-trips are exact."""
    return np.round(img * 255.0) / np.float32(255.0)


def synth_identity(seed: int) -> FaceParams:
    """Sample one identity's parameters from fixed ranges, deterministically."""
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFFFFFFFFFF, 0xFACE])
    u = rng.uniform
    s = IMAGE_SIZE
    cx = u(0.47, 0.53) * s
    cy = u(0.47, 0.52) * s
    ax = u(0.30, 0.37) * s
    ay = u(0.41, 0.47) * s
    skin = np.round(np.array([u(0.62, 0.9), u(0.55, 0.8), u(0.5, 0.72)]) * 255) / 255.0
    eye_y = cy - u(0.36, 0.46) * ay
    eye_dx = u(0.35, 0.5) * ax
    eye_r = u(1.6, 2.6)
    mouth_cx = cx + u(-1.5, 1.5)
    mouth_f = u(0.10, 0.16)
    mouth_top = cy + mouth_f * ay
    # mouth box + 2px measurement pad + 2px blur radius must stay inside
    # the head ellipse (and clear of the eyes), so the known-ROI openness
    # measurement only ever sees skin/mouth mixtures
    max_open = min(u(12.0, 16.0), (0.80 - mouth_f) * ay - 4.5)
    half_w_limit = 0.6 * ax - 4.5 - abs(mouth_cx - cx)
    mouth_w = min(u(0.55, 0.8) * ax, 2.0 * half_w_limit)
    return FaceParams(
        seed=seed,
        center=(float(cx), float(cy)),
        axes=(float(ax), float(ay)),
        skin=tuple(float(v) for v in skin),
        eye_y=float(eye_y),
        eye_dx=float(eye_dx),
        eye_r=float(eye_r),
        mouth_cx=float(mouth_cx),
        mouth_top=float(mouth_top),
        mouth_w=float(mouth_w),
        max_open=float(max_open),
    )


def _coverage_grids(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Supersampled pixel-center coordinates (row, col) for rasterization."""
    n = size * _SS
    coords = (np.arange(n) + 0.5) / _SS
    rr, cc = np.meshgrid(coords, coords, indexing="ij")
    return rr, cc


def render_frame(params: FaceParams, openness: float, size: int = IMAGE_SIZE) -> Portrait:
    """Rasterize the identity with the mouth opened to ``openness`` in [0,1]."""
    if not (0.0 <= openness <= 1.0):
        raise ParameterError(f"openness must be in [0,1], got {openness}")
    rr, cc = _coverage_grids(size)
    cx, cy = params.center
    ax, ay = params.axes

    img = np.empty((size * _SS, size * _SS, 3), dtype=np.float64)
    img[:] = _BACKGROUND
    head = ((cc - cx) / ax) ** 2 + ((rr - cy) / ay) ** 2 <= 1.0
    img[head] = params.skin

    for sx in (-1.0, 1.0):
        ex = cx + sx * params.eye_dx
        eye = (cc - ex) ** 2 + (rr - params.eye_y) ** 2 <= params.eye_r**2
        img[eye] = _EYE_COLOR

    aperture = openness * params.max_open
    if aperture > 0.0:
        half_w = params.mouth_w / 2
        mouth = (
            (np.abs(cc - params.mouth_cx) <= half_w)
            & (rr >= params.mouth_top)
            & (rr < params.mouth_top + aperture)
        )
        img[mouth] = _MOUTH_COLOR

    # supersample -> box filter -> soften -> 8-bit grid
    img = img.reshape(size, _SS, size, _SS, 3).mean(axis=(1, 3))
    img = _quantize(_soft_blur(img)).astype(np.float32)

    rr1, cc1 = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    mask = ((cc1 - cx) / ax) ** 2 + ((rr1 - cy) / ay) ** 2 <= 1.0
    return Portrait(
        pixels=torch.from_numpy(img),
        face_mask=torch.from_numpy(mask),
        identity=params,
    )


def reference_portrait(params: FaceParams) -> Portrait:
    """The closed-mouth portrait that attacks protect and animation conditions on."""
    return render_frame(params, 0.0)


def measure_openness(frame: torch.Tensor | Portrait, params: FaceParams) -> float:
    """Recover mouth openness in [0,1] from a frame.

    Integrates a darkness ramp over the identity's known mouth box and
    divides by the fully open aperture's area. The ramp is linear
    between the identity's skin luminance and the mouth luminance, so an
    anti-aliased boundary pixel contributes exactly its coverage
    fraction; blurry generated frames degrade gracefully.
    """
    pixels = frame.pixels if isinstance(frame, Portrait) else frame
    arr = pixels.detach().to(torch.float64).numpy()
    r0, r1, c0, c1 = params.mouth_roi(arr.shape[0])
    lum = arr[r0:r1, c0:c1].mean(axis=2)
    skin_lum = sum(params.skin) / 3.0
    mouth_lum = sum(_MOUTH_COLOR) / 3.0
    dark = np.clip((skin_lum - lum) / (skin_lum - mouth_lum), 0.0, 1.0)
    full_area = params.mouth_w * params.max_open
    return float(np.clip(dark.sum() / full_area, 0.0, 1.0))


def synth_clip(params: FaceParams, audio: AudioTrack) -> VideoClip:
    """Ground-truth clip: frame i rendered with openness = amplitudes[i]."""
    frames = [render_frame(params, float(a)) for a in audio.amplitudes.tolist()]
    return VideoClip(frames=frames, audio=audio, identity=params)


def synth_audio_envelope(seed: int, n_frames: int) -> AudioTrack:
    """Smooth speech-like amplitude envelope normalized to peak 1.0."""
    if n_frames < 1:
        raise ParameterError("need at least one frame")
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFFFFFFFFFF, 0xA0D10])
    t = np.arange(n_frames) / FPS
    env = np.zeros(n_frames)
    for _ in range(3):
        freq = rng.uniform(0.6, 2.8)
        phase = rng.uniform(0, 2 * np.pi)
        weight = rng.uniform(0.5, 1.0)
        env += weight * (0.5 + 0.5 * np.sin(2 * np.pi * freq * t + phase))
    env -= env.min()
    peak = env.max()
    if peak <= 1e-9:
        env = np.full(n_frames, 0.5)
    else:
        env /= peak
    env = np.round(env * 255) / 255.0  # survive 16-bit PCM + RMS extraction cleanly
    return AudioTrack(amplitudes=torch.from_numpy(env.astype(np.float32)), source=f"synth:{seed}")


def envelope_from_samples(samples: np.ndarray, sample_rate: int, fps: int = FPS) -> AudioTrack:
    """RMS-window envelope of mono samples, max-normalized to [0,1]."""
    if samples.ndim != 1 or samples.size == 0:
        raise ParameterError("samples must be non-empty mono")
    window = sample_rate // fps
    if window < 1:
        raise ParameterError(f"sample_rate {sample_rate} too low for {fps} fps")
    n_frames = samples.size // window
    if n_frames < 1:
        raise ParameterError("audio shorter than one frame window")
    trimmed = samples[: n_frames * window].astype(np.float64).reshape(n_frames, window)
    rms = np.sqrt((trimmed**2).mean(axis=1))
    peak = rms.max()
    env = rms / peak if peak > 1e-9 else np.zeros_like(rms)
    return AudioTrack(
        amplitudes=torch.from_numpy(env.astype(np.float32)), source=f"wav:{sample_rate}Hz"
    )


def carrier_samples(env: AudioTrack, sample_rate: int = 16000, freq: float = 220.0) -> np.ndarray:
    """Amplitude-modulated sine whose RMS envelope reproduces ``env``.

    The modulation is piecewise constant per frame so RMS windows recover
    the envelope exactly up to PCM quantization.
    """
    window = sample_rate // FPS
    amps = env.amplitudes.numpy().astype(np.float64)
    n = amps.size * window
    t = np.arange(n) / sample_rate
    carrier = np.sin(2 * np.pi * freq * t)
    gain = np.repeat(amps, window)
    return (0.9 * gain * carrier).astype(np.float64)


__all__ = [
    "AudioTrack",
    "FaceParams",
    "Portrait",
    "VideoClip",
    "IMAGE_SIZE",
    "FPS",
    "carrier_samples",
    "envelope_from_samples",
    "measure_openness",
    "reference_portrait",
    "render_frame",
    "synth_audio_envelope",
    "synth_clip",
    "synth_identity",
]
