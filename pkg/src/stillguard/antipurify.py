"""Protection stage II: optimize the DDIM-inverted latent of a stage-I
portrait against the anti-purification objective.

The stage-I output is inverted along the DDIM ladder; the deepest
`optimize_last_k` trajectory latents become trainable (as residuals on
the recorded rungs, so initialization reproduces the inversion
exactly). Each iteration regenerates the image through the remaining
ladder + decoder, evaluates

    lambda1 * (audio-nullifying loss of the decoded image, which serves
               as both denoising target and reference)
  + lambda2 * ||E(decoded) - E(stage-I portrait)||^2

and takes an AdamW step on the latent residuals. No l-inf projection is
applied, only the [0,1] decode range. After iteration `s` the facial
region is frozen to a snapshot: losses see the composite with gradients
blocked through the mask, and the final output's face pixels are
bit-identical to that snapshot.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from .config import ParameterError, Stage2Config
from .diffusion import Conditioning, _ddim_transport
from .faces import AudioTrack, Portrait
from .attacks import AdversarialPortrait, nullifying_loss_value
from .util import generator, stable_seed
from .victim import TalkingHeadModel, ddim_invert


class OptimizationError(RuntimeError):
    """Stage-II loss went non-finite; carries the iteration index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


# L_N amplitudes cycled when no audio track is supplied
_DEFAULT_AUDIO_CYCLE = (0.0, 0.25, 0.5, 0.75, 1.0)


def anti_purification_loss(
    model: TalkingHeadModel,
    decoded: torch.Tensor,
    p_n: torch.Tensor,
    audio_frame: float,
    cfg: Stage2Config,
    seed: int,
    latent_leaves: tuple[torch.Tensor, ...] | None = None,
) -> tuple[float, tuple[torch.Tensor, ...] | None]:
    """Evaluate the stage-II objective; optionally return latent gradients.

    `decoded` must sit on a live autograd graph rooted at the optimized
    latents when gradients are requested. The nullifying term treats the
    decoded image as both the noised target and the conditioning
    reference; the anchor term pulls its latent toward the stage-I
    portrait's latent.
    """
    value = anti_purification_loss_value(model, decoded, p_n, audio_frame, cfg, seed)
    if latent_leaves is None:
        return float(value.detach()), None
    grads = torch.autograd.grad(value, latent_leaves, allow_unused=False)
    return float(value.detach()), grads


def anti_purification_loss_value(
    model: TalkingHeadModel,
    decoded: torch.Tensor,
    p_n: torch.Tensor,
    audio_frame: float,
    cfg: Stage2Config,
    seed: int,
) -> torch.Tensor:
    nullify = nullifying_loss_value(
        model, decoded, audio_frame, cfg.t_range, seed, cfg.eot_samples
    )
    anchor = torch.sum((model.encode(decoded) - model.encode(p_n).detach()) ** 2)
    return cfg.lambda1 * nullify + cfg.lambda2 * anchor


class _SavedBytesTracker:
    """Counts bytes of tensors saved for backward during a forward pass."""

    def __init__(self) -> None:
        self.iteration_bytes = 0
        self.peak_bytes = 0

    def begin_iteration(self) -> None:
        self.iteration_bytes = 0

    def end_iteration(self) -> None:
        self.peak_bytes = max(self.peak_bytes, self.iteration_bytes)

    def pack(self, t: torch.Tensor) -> torch.Tensor:
        if isinstance(t, torch.Tensor):
            self.iteration_bytes += t.numel() * t.element_size()
        return t

    @staticmethod
    def unpack(t: torch.Tensor) -> torch.Tensor:
        return t


@dataclass
class Stage2Result:
    """Stage-II output with provenance for manifests and scope reports."""

    portrait: Portrait
    snapshot: torch.Tensor
    loss_trace: list[float]
    seconds: float
    peak_tracked_bytes: int
    optimizer_state_bytes: int
    config: dict = field(default_factory=dict)


def _as_pixels(p: AdversarialPortrait | Portrait | torch.Tensor) -> torch.Tensor:
    if isinstance(p, (AdversarialPortrait, Portrait)):
        return p.pixels
    return p


def protect_stage2(
    p_n: AdversarialPortrait | Portrait,
    model: TalkingHeadModel,
    mask: torch.Tensor,
    cfg: Stage2Config,
    audio: AudioTrack | None = None,
    return_details: bool = False,
) -> Portrait | Stage2Result:
    """Run the inverted-latent optimization; returns the final portrait.

    `mask` is the boolean facial region (True inside the face). When an
    audio track is given its amplitudes drive the nullifying term
    round-robin; otherwise a fixed amplitude cycle is used.
    """
    pixels = _as_pixels(p_n).detach()
    if mask.shape != pixels.shape[:2]:
        raise ParameterError("mask must match portrait dimensions")
    if not bool(mask.any()):
        raise ParameterError("face mask is empty")
    cfg.t_range.validate_for(model.sched.T)
    if cfg.optimize_last_k > cfg.invert_steps:
        raise ParameterError("optimize_last_k cannot exceed invert_steps")

    t0 = time.monotonic()
    with torch.no_grad():
        ref_lat = model.encode(pixels)
    cond = Conditioning(ref_latent=ref_lat, audio=0.0)
    traj = ddim_invert(pixels, model, cond, cfg.invert_steps)

    k = cfg.optimize_last_k
    n_rungs = len(traj)
    base_latents = [z.detach() for z in traj.latents]
    # residual parameters on the deepest k rungs; index 0 is the deepest.
    # Residuals are optimized in noise-normalized coordinates: a raw unit
    # at rung t is amplified ~1/sqrt(abar_t) into the image through the
    # x0 recovery, which at abar_T ~ 4e-5 turns fixed-size optimizer
    # steps into image-scale jumps. The sqrt(abar_t) preconditioner keeps
    # one optimizer step at lr ~ one lr-sized image move.
    deltas = [torch.zeros_like(base_latents[-1 - j], requires_grad=True) for j in range(k)]
    precond = [
        float(torch.sqrt(model.sched.alpha_bar[traj.timesteps[n_rungs - 1 - j]]))
        for j in range(k)
    ]
    opt = torch.optim.AdamW(deltas, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)

    mask3 = mask.unsqueeze(-1)

    def generate() -> torch.Tensor:
        z = base_latents[-1] + precond[0] * deltas[0]
        for j in range(n_rungs - 1, 0, -1):
            t_from, t_to = traj.timesteps[j], traj.timesteps[j - 1]
            eps = model.predict_eps(z, t_from, cond)
            z = _ddim_transport(z, eps, t_from, t_to, model.sched)
            rung = j - 1
            depth = n_rungs - 1 - rung
            if 1 <= depth < k:
                z = z + precond[depth] * deltas[depth]
        return model.decode(z)

    def audio_amp(i: int) -> float:
        if audio is not None and len(audio) > 0:
            return float(audio.amplitudes[i % len(audio)])
        return _DEFAULT_AUDIO_CYCLE[i % len(_DEFAULT_AUDIO_CYCLE)]

    tracker = _SavedBytesTracker()
    snapshot: torch.Tensor | None = None
    trace: list[float] = []
    for i in range(cfg.iters):
        if i == cfg.s:
            with torch.no_grad():
                snapshot = generate().detach()
        tracker.begin_iteration()
        with torch.autograd.graph.saved_tensors_hooks(tracker.pack, tracker.unpack):
            decoded = generate()
            img = decoded if snapshot is None else torch.where(mask3, snapshot, decoded)
            loss = anti_purification_loss_value(
                model, img, pixels, audio_amp(i), cfg, stable_seed(cfg.seed, "stage2", i)
            )
        tracker.end_iteration()
        if not torch.isfinite(loss):
            raise OptimizationError("non-finite stage-II loss", i)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))

    with torch.no_grad():
        decoded = generate()
    if snapshot is None:  # s == iters: freeze the face at the final state
        snapshot = decoded.detach()
    out = torch.where(mask3, snapshot, decoded).clamp(0.0, 1.0)

    identity = p_n.identity if isinstance(p_n, (AdversarialPortrait, Portrait)) else None
    portrait = Portrait(pixels=out, face_mask=mask, identity=identity)
    if not return_details:
        return portrait
    state_bytes = sum(4 * d.numel() * d.element_size() for d in deltas)
    return Stage2Result(
        portrait=portrait,
        snapshot=snapshot,
        loss_trace=trace,
        seconds=time.monotonic() - t0,
        peak_tracked_bytes=tracker.peak_bytes + state_bytes,
        optimizer_state_bytes=state_bytes,
        config={
            "lambda1": cfg.lambda1,
            "lambda2": cfg.lambda2,
            "iters": cfg.iters,
            "lr": cfg.lr,
            "s": cfg.s,
            "invert_steps": cfg.invert_steps,
            "optimize_last_k": cfg.optimize_last_k,
            "seed": cfg.seed,
        },
    )


@dataclass
class ScopeReport:
    """Side-by-side record of stage-II runs differing only in how many
    trajectory latents were optimized."""

    runs: list[dict]

    def delta(self, key: str) -> float:
        return self.runs[1][key] - self.runs[0][key]


def compare_inverted_scopes(
    p_n: AdversarialPortrait | Portrait,
    model: TalkingHeadModel,
    cfg: Stage2Config,
    audio: AudioTrack | None = None,
) -> ScopeReport:
    """Run stage II with optimize_last_k in {1, 2} under identical seeds
    and report per-run quality, time and tracked peak memory."""
    from dataclasses import replace as _replace

    from .metrics import psnr, ssim

    mask = p_n.face_mask
    if mask is None:
        raise ParameterError("portrait carries no face mask")
    base = _as_pixels(p_n)
    runs = []
    for k in (1, 2):
        result = protect_stage2(
            p_n, model, mask, _replace(cfg, optimize_last_k=k), audio=audio, return_details=True
        )
        runs.append(
            {
                "optimize_last_k": k,
                "psnr_vs_stage1": psnr(base, result.portrait.pixels),
                "ssim_vs_stage1": ssim(base, result.portrait.pixels),
                "final_loss": result.loss_trace[-1],
                "seconds": result.seconds,
                "peak_tracked_bytes": result.peak_tracked_bytes,
                "optimizer_state_bytes": result.optimizer_state_bytes,
            }
        )
    return ScopeReport(runs=runs)


__all__ = [
    "OptimizationError",
    "ScopeReport",
    "Stage2Result",
    "anti_purification_loss",
    "anti_purification_loss_value",
    "compare_inverted_scopes",
    "protect_stage2",
]
