"""Attack losses and the projected-gradient driver (protection stage I).

Loss conventions: squared L2 norms are sums over latent elements,
averaged over the Monte-Carlo (t, eps) draws, so a denoiser emitting
zeros scores about the latent dimensionality. Gradients are exact
autograd gradients w.r.t. the input image, except for the score-
distillation variants which deliberately skip the denoiser Jacobian.

The PGD iterate keeps two invariants bit-exactly at every step: pixels
stay in [0,1] and the l-inf distance to the original never exceeds the
budget, including under float32 rounding (see `project_linf`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import torch

from .config import ParameterError, PGDConfig, TimestepRange
from .diffusion import Conditioning, add_noise, uniform_timesteps
from .faces import AudioTrack, FaceParams, Portrait
from .util import generator, stable_seed
from .victim import TalkingHeadModel, VAECodec


class AttackError(RuntimeError):
    """Attack produced a non-finite loss or gradient; carries the iteration."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass
class AttackContext:
    """Everything a loss may consult besides the image being optimized.

    The static part (model, audio track, texture target, window sizes)
    is supplied by the caller; `pgd` fills in the per-iteration fields.
    """

    model: TalkingHeadModel | None = None
    audio: AudioTrack | None = None
    texture_target: torch.Tensor | None = None
    t_range: TimestepRange = field(default_factory=TimestepRange)
    eot_samples: int = 1
    iteration: int = 0
    seed: int = 0

    def audio_amp(self) -> float:
        """Round-robin amplitude for the current iteration (0.0 when silent)."""
        if self.audio is None or len(self.audio) == 0:
            return 0.0
        return float(self.audio.amplitudes[self.iteration % len(self.audio)])


class AttackLoss(Protocol):
    def __call__(self, x: torch.Tensor, ctx: AttackContext) -> tuple[float, torch.Tensor]: ...


# ---------------------------------------------------------------------------
# loss cores: differentiable scalars on the live autograd graph


def _draws(
    n: int, t_range: TimestepRange, shape: tuple[int, ...], seed: int, dtype: torch.dtype
) -> list[tuple[int, torch.Tensor]]:
    gen = generator(seed)
    ts = uniform_timesteps(n, (t_range.t_lo, t_range.t_hi), gen)
    return [(int(t), torch.randn(shape, generator=gen, dtype=dtype)) for t in ts]


def semantic_loss_value(
    model: TalkingHeadModel,
    x: torch.Tensor,
    t_range: TimestepRange,
    seed: int,
    eot_samples: int = 1,
    audio: float = 0.0,
) -> torch.Tensor:
    """Denoising training loss of the image under neutral conditioning.

    The reference pathway is detached: this is the audio-unaware attack
    surface, which only sees the model through the noised target.
    """
    t_range.validate_for(model.sched.T)
    z0 = model.encode(x)
    ref = z0.detach()
    total = x.new_zeros(())
    for t, eps in _draws(eot_samples, t_range, tuple(z0.shape), seed, x.dtype):
        z_t = add_noise(z0, t, eps, model.sched)
        pred = model.predict_eps(z_t, t, Conditioning(ref_latent=ref, audio=audio))
        total = total + torch.sum((eps - pred) ** 2)
    return total / eot_samples


def nullifying_loss_value(
    model: TalkingHeadModel,
    p: torch.Tensor,
    a_i: float,
    t_range: TimestepRange,
    seed: int,
    eot_samples: int = 1,
) -> torch.Tensor:
    """Audio-aware loss with the portrait as its own denoising target.

    The portrait's latent is both the noised target and the reference
    conditioning, so gradients flow through both pathways.
    """
    t_range.validate_for(model.sched.T)
    zp = model.encode(p)
    total = p.new_zeros(())
    for t, eps in _draws(eot_samples, t_range, tuple(zp.shape), seed, p.dtype):
        z_t = add_noise(zp, t, eps, model.sched)
        pred = model.predict_eps(z_t, t, Conditioning(ref_latent=zp, audio=float(a_i)))
        total = total + torch.sum((eps - pred) ** 2)
    return total / eot_samples


def texture_loss_value(x: torch.Tensor, y: torch.Tensor, codec: VAECodec) -> torch.Tensor:
    """Negated squared latent distance to the target image."""
    if x.shape != y.shape:
        raise ParameterError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return -torch.sum((codec.encode(x) - codec.encode(y)) ** 2)


def sds_semantic_parts(
    model: TalkingHeadModel,
    x: torch.Tensor,
    t_range: TimestepRange,
    seed: int,
    eot_samples: int = 1,
    audio: float = 0.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(true loss value, gradient proxy) for the score-distillation variant.

    The proxy's gradient w.r.t. x equals the semantic-loss gradient with
    the eps-residual held constant, i.e. the denoiser Jacobian skipped;
    only the encoder path is differentiated.
    """
    t_range.validate_for(model.sched.T)
    z0 = model.encode(x)
    ref = z0.detach()
    value = x.new_zeros(())
    proxy = x.new_zeros(())
    for t, eps in _draws(eot_samples, t_range, tuple(z0.shape), seed, x.dtype):
        z_t = add_noise(z0, t, eps, model.sched)
        with torch.no_grad():
            pred = model.predict_eps(z_t.detach(), t, Conditioning(ref_latent=ref, audio=audio))
            value = value + torch.sum((eps - pred) ** 2)
        proxy = proxy + torch.sum(2.0 * (pred - eps) * z_t)
    return value / eot_samples, proxy / eot_samples


def _grad_of(x: torch.Tensor, fn: Callable[[torch.Tensor], torch.Tensor]) -> tuple[float, torch.Tensor]:
    leaf = x.detach().clone().requires_grad_(True)
    value = fn(leaf)
    (grad,) = torch.autograd.grad(value, leaf)
    return float(value.detach()), grad


# ---------------------------------------------------------------------------
# public (loss, gradient) operations


def semantic_loss(
    model: TalkingHeadModel,
    x: torch.Tensor,
    t_range: TimestepRange,
    seed: int,
    eot_samples: int = 1,
) -> tuple[float, torch.Tensor]:
    return _grad_of(x, lambda leaf: semantic_loss_value(model, leaf, t_range, seed, eot_samples))


def nullifying_loss(
    model: TalkingHeadModel,
    p: torch.Tensor,
    a_i: float,
    t_range: TimestepRange,
    seed: int,
    eot_samples: int = 1,
) -> tuple[float, torch.Tensor]:
    return _grad_of(
        p, lambda leaf: nullifying_loss_value(model, leaf, a_i, t_range, seed, eot_samples)
    )


def texture_loss(
    x: torch.Tensor, y: torch.Tensor, codec: VAECodec
) -> tuple[float, torch.Tensor]:
    return _grad_of(x, lambda leaf: texture_loss_value(leaf, y, codec))


# ---------------------------------------------------------------------------
# AttackLoss adapters used by the PGD driver


def _require_model(ctx: AttackContext) -> TalkingHeadModel:
    if ctx.model is None:
        raise ParameterError("attack context is missing the victim model")
    return ctx.model


@dataclass
class NullifyingAttackLoss:
    """Stage-I objective: nullifying loss with round-robin audio frames."""

    def __call__(self, x: torch.Tensor, ctx: AttackContext) -> tuple[float, torch.Tensor]:
        model = _require_model(ctx)
        return nullifying_loss(model, x, ctx.audio_amp(), ctx.t_range, ctx.seed, ctx.eot_samples)


@dataclass
class SemanticAttackLoss:
    def __call__(self, x: torch.Tensor, ctx: AttackContext) -> tuple[float, torch.Tensor]:
        model = _require_model(ctx)
        return semantic_loss(model, x, ctx.t_range, ctx.seed, ctx.eot_samples)


@dataclass
class TextureAttackLoss:
    """Latent distance to the context's texture target (mid-gray default)."""

    def __call__(self, x: torch.Tensor, ctx: AttackContext) -> tuple[float, torch.Tensor]:
        model = _require_model(ctx)
        y = ctx.texture_target
        if y is None:
            y = torch.full_like(x, 0.5)
        return texture_loss(x, y, model.codec)


@dataclass
class SDSAttackLoss:
    """Semantic loss value with the denoiser Jacobian skipped in the gradient."""

    def __call__(self, x: torch.Tensor, ctx: AttackContext) -> tuple[float, torch.Tensor]:
        model = _require_model(ctx)
        leaf = x.detach().clone().requires_grad_(True)
        value, proxy = sds_semantic_parts(model, leaf, ctx.t_range, ctx.seed, ctx.eot_samples)
        (grad,) = torch.autograd.grad(proxy, leaf)
        return float(value), grad


@dataclass
class CompositeAttackLoss:
    """Signed sum of component losses (loss, weight) evaluated jointly."""

    parts: list[tuple[AttackLoss, float]]

    def __call__(self, x: torch.Tensor, ctx: AttackContext) -> tuple[float, torch.Tensor]:
        total = 0.0
        grad = torch.zeros_like(x)
        for loss, weight in self.parts:
            value, g = loss(x, ctx)
            total += weight * value
            grad = grad + weight * g
        return total, grad


# ---------------------------------------------------------------------------
# projected gradient descent


def project_linf(x: torch.Tensor, x0: torch.Tensor, delta: float) -> torch.Tensor:
    """Project onto the l-inf ball around x0 intersected with [0,1].

    Float32 re-rounding can report |(x0 + d) - x0| one ulp above d, so
    after the closed-form projection any violating pixels are nudged one
    ulp toward x0 until both invariants hold under verification
    arithmetic. The [0,1] clamp is exactness-safe on its own.
    """
    d = torch.clamp(x - x0, -delta, delta)
    out = torch.clamp(x0 + d, 0.0, 1.0)
    for _ in range(4):
        err = out - x0
        bad = torch.abs(err) > delta
        if not bool(bad.any()):
            break
        out = torch.where(bad, torch.nextafter(out, x0), out)
    return out


def sign_step(grad: torch.Tensor, eta: float, ascent: bool) -> torch.Tensor:
    """The raw update term: every pixel moves by exactly 0 or +/-eta."""
    step = eta * torch.sign(grad)
    return step if ascent else -step


@dataclass
class AdversarialPortrait:
    """PGD output: perturbed pixels plus provenance for manifests."""

    pixels: torch.Tensor
    base: torch.Tensor
    config: dict
    loss_trace: list[float]
    identity: FaceParams | None = None
    face_mask: torch.Tensor | None = None

    def as_portrait(self) -> Portrait:
        return Portrait(pixels=self.pixels, face_mask=self.face_mask, identity=self.identity)

    def check_invariants(self, delta: float) -> None:
        dev = torch.abs(self.pixels - self.base).max()
        if float(dev) > delta:
            raise AssertionError(f"l-inf deviation {float(dev)} exceeds {delta}")
        if float(self.pixels.min()) < 0.0 or float(self.pixels.max()) > 1.0:
            raise AssertionError("pixels escaped [0,1]")


def pgd(
    x0: torch.Tensor,
    loss: AttackLoss,
    cfg: PGDConfig,
    context: AttackContext | None = None,
    on_step: Callable[[int, torch.Tensor], None] | None = None,
) -> AdversarialPortrait:
    """Iterated sign-gradient attack with exact l-inf/[0,1] projection."""
    if float(x0.min()) < 0.0 or float(x0.max()) > 1.0:
        raise ParameterError("x0 must lie in [0,1]")
    ctx = context if context is not None else AttackContext()
    ctx = replace(ctx, t_range=cfg.t_range, eot_samples=cfg.eot_samples)
    ascent = cfg.direction == "ascent"
    x = x0.detach().clone()
    trace: list[float] = []
    for i in range(cfg.n):
        ctx_i = replace(ctx, iteration=i, seed=stable_seed(cfg.seed, "pgd", i))
        value, grad = loss(x, ctx_i)
        if not (torch.isfinite(grad).all() and math.isfinite(value)):
            raise AttackError("non-finite loss or gradient", i)
        x = project_linf(x + sign_step(grad, cfg.eta, ascent), x0, cfg.delta)
        trace.append(value)
        if on_step is not None:
            on_step(i, x)
    return AdversarialPortrait(
        pixels=x,
        base=x0.detach().clone(),
        config={
            "delta": cfg.delta,
            "eta": cfg.eta,
            "n": cfg.n,
            "direction": cfg.direction,
            "t_range": [cfg.t_range.t_lo, cfg.t_range.t_hi],
            "eot_samples": cfg.eot_samples,
            "seed": cfg.seed,
        },
        loss_trace=trace,
    )


def protect_stage1(
    portrait: Portrait,
    audio: AudioTrack,
    model: TalkingHeadModel,
    cfg: PGDConfig,
) -> AdversarialPortrait:
    """Stage I: descend the nullifying loss inside the l-inf ball.

    Audio frames are consumed round-robin across PGD iterations so the
    perturbation sees varied amplitudes.
    """
    if cfg.direction != "descent":
        raise ParameterError("stage-I protection descends the nullifying loss")
    ctx = AttackContext(model=model, audio=audio)
    adv = pgd(portrait.pixels, NullifyingAttackLoss(), cfg, context=ctx)
    adv.identity = portrait.identity
    adv.face_mask = portrait.face_mask
    return adv


BASELINE_NAMES = (
    "advdm_plus",
    "advdm_minus",
    "photoguard",
    "mist",
    "sds_plus",
    "sds_minus",
    "sdts_minus",
)


def make_baseline(name: str, seed: int = 0) -> tuple[AttackLoss, PGDConfig]:
    """Documented loss/direction combos sharing the stage-I budget.

    advdm+/- : semantic loss, ascent/descent
    photoguard: texture loss, ascent (latent driven toward the target)
    mist      : semantic + texture, ascent
    sds+/-    : semantic value with encoder-path-only gradient, ascent/descent
    sdts-     : sds descent combined with the texture pull toward the target
    """
    base = dict(delta=16 / 255, eta=2 / 255, n=100, seed=seed)
    if name == "advdm_plus":
        return SemanticAttackLoss(), PGDConfig(direction="ascent", **base)
    if name == "advdm_minus":
        return SemanticAttackLoss(), PGDConfig(direction="descent", **base)
    if name == "photoguard":
        return TextureAttackLoss(), PGDConfig(direction="ascent", **base)
    if name == "mist":
        loss = CompositeAttackLoss([(SemanticAttackLoss(), 1.0), (TextureAttackLoss(), 1.0)])
        return loss, PGDConfig(direction="ascent", **base)
    if name == "sds_plus":
        return SDSAttackLoss(), PGDConfig(direction="ascent", **base)
    if name == "sds_minus":
        return SDSAttackLoss(), PGDConfig(direction="descent", **base)
    if name == "sdts_minus":
        loss = CompositeAttackLoss([(SDSAttackLoss(), 1.0), (TextureAttackLoss(), -1.0)])
        return loss, PGDConfig(direction="descent", **base)
    raise ParameterError(f"unknown baseline {name!r}")


__all__ = [
    "AdversarialPortrait",
    "AttackContext",
    "AttackError",
    "AttackLoss",
    "BASELINE_NAMES",
    "CompositeAttackLoss",
    "NullifyingAttackLoss",
    "SDSAttackLoss",
    "SemanticAttackLoss",
    "TextureAttackLoss",
    "make_baseline",
    "nullifying_loss",
    "nullifying_loss_value",
    "pgd",
    "project_linf",
    "protect_stage1",
    "semantic_loss",
    "semantic_loss_value",
    "sds_semantic_parts",
    "sign_step",
    "texture_loss",
    "texture_loss_value",
]
