"""The trainable latent-diffusion talking-head victim.

A fully convolutional autoencoder codec (64x64x3 <-> 4x8x8 latents)
plus a small conditioned noise predictor. Conditioning follows two
pathways: the reference portrait's latent is concatenated to the noisy
latent channels, and the per-frame audio amplitude enters through a
sinusoidal embedding added to the timestep embedding. Frames are
generated independently per audio frame.

Training is two-phase: reconstruction for the codec, then the standard
noise-prediction objective for the denoiser on frozen-codec latents.
Everything is deterministic given the config seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import torch
from torch import nn

from .config import ParameterError, TrainConfig
from .diffusion import (
    Conditioning,
    LatentTrajectory,
    NoiseSchedule,
    ShapeError,
    add_noise,
    ddim_invert_latent,
    ddim_sample,
    make_schedule,
    timestep_ladder,
)
from .faces import AudioTrack, Portrait, VideoClip
from .util import generator, stable_seed

T_DEFAULT = 1000
BETA_START = 1e-4
BETA_END = 0.02


class TrainingError(RuntimeError):
    """Training diverged; carries the phase/epoch/step where loss went non-finite."""


class UntrainedModelWarning(UserWarning):
    pass


def _hwc_to_bchw(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.permute(2, 0, 1).unsqueeze(0), True
    if x.dim() == 4:
        return x.permute(0, 3, 1, 2), False
    raise ShapeError(f"expected (H,W,3) or (B,H,W,3), got {tuple(x.shape)}")


def _bchw_to_hwc(x: torch.Tensor, squeeze: bool) -> torch.Tensor:
    out = x.permute(0, 2, 3, 1)
    return out[0] if squeeze else out


class ConvEncoder(nn.Module):
    """Strided conv stack 64x64x3 -> 4x8x8; fully convolutional so the
    purifiers can encode smaller patches with the same weights.

    Replicate padding keeps patch borders in-distribution: grid
    purification feeds the codec 32x32 interior crops whose true context
    is nothing like zeros.
    """

    def __init__(self, base: int = 16, latent_channels: int = 4):
        super().__init__()
        pm = dict(padding=1, padding_mode="replicate")
        self.net = nn.Sequential(
            nn.Conv2d(3, base, 3, stride=2, **pm),
            nn.SiLU(),
            nn.Conv2d(base, base * 2, 3, stride=2, **pm),
            nn.SiLU(),
            nn.Conv2d(base * 2, base * 4, 3, stride=2, **pm),
            nn.SiLU(),
            nn.Conv2d(base * 4, base * 4, 3, **pm),
            nn.SiLU(),
            nn.Conv2d(base * 4, latent_channels, 3, **pm),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ConvDecoder(nn.Module):
    def __init__(self, base: int = 16, latent_channels: int = 4):
        super().__init__()
        pm = dict(padding=1, padding_mode="replicate")
        self.net = nn.Sequential(
            nn.Conv2d(latent_channels, base * 4, 3, **pm),
            nn.SiLU(),
            nn.Conv2d(base * 4, base * 4, 3, **pm),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(base * 4, base * 2, 3, **pm),
            nn.SiLU(),
            nn.Conv2d(base * 2, base * 2, 3, **pm),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(base * 2, base, 3, **pm),
            nn.SiLU(),
            nn.Conv2d(base, base, 3, **pm),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(base, 3, 3, **pm),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(z))


class VAECodec(nn.Module):
    """Plain autoencoder behind the encode/decode contract.

    Latents handed to callers are normalized by per-channel corpus
    statistics so the diffusion process sees roughly unit-scale data.
    """

    def __init__(self, base: int = 24, latent_channels: int = 4):
        super().__init__()
        self.encoder = ConvEncoder(base, latent_channels)
        self.decoder = ConvDecoder(base, latent_channels)
        self.latent_channels = latent_channels
        self.register_buffer("latent_mean", torch.zeros(latent_channels))
        self.register_buffer("latent_std", torch.ones(latent_channels))

    def set_latent_stats(self, mean: torch.Tensor, std: torch.Tensor) -> None:
        self.latent_mean.copy_(mean)
        self.latent_std.copy_(std.clamp_min(1e-6))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Image (H,W,3) or (B,H,W,3) in [0,1] -> normalized latent."""
        bchw, squeeze = _hwc_to_bchw(x)
        raw = self.encoder(bchw)
        mean = self.latent_mean.to(raw.dtype).view(1, -1, 1, 1)
        std = self.latent_std.to(raw.dtype).view(1, -1, 1, 1)
        z = (raw - mean) / std
        return z[0] if squeeze else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Normalized latent -> image in [0,1] (sigmoid output, clamped)."""
        squeeze = z.dim() == 3
        zb = z.unsqueeze(0) if squeeze else z
        mean = self.latent_mean.to(zb.dtype).view(1, -1, 1, 1)
        std = self.latent_std.to(zb.dtype).view(1, -1, 1, 1)
        img = self.decoder(zb * std + mean).clamp(0.0, 1.0)
        return _bchw_to_hwc(img, squeeze)


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Transformer-style features of a scalar batch (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=x.dtype) / max(half - 1, 1)
    )
    args = x[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class FiLMBlock(nn.Module):
    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * channels)

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        y = self.conv1(torch.nn.functional.silu(self.norm(h)))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        y = y * (1 + scale) + shift
        y = self.conv2(torch.nn.functional.silu(y))
        return h + y


class CondDenoiser(nn.Module):
    """Noise predictor over (noisy latent || reference latent) with
    timestep+audio FiLM conditioning.

    The audio embedding is gated by pooled reference features before it
    joins the timestep embedding: how strongly audio drives the frame
    depends on what the reference looks like, mirroring how reference
    appearance features and audio interact in the full-scale systems
    this model stands in for.
    """

    def __init__(self, latent_channels: int = 4, channels: int = 64, emb_dim: int = 128):
        super().__init__()
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(64, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.audio_mlp = nn.Sequential(nn.Linear(64, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.ref_pool = nn.Sequential(
            nn.Conv2d(latent_channels, 32, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 32, 3, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.ref_gate = nn.Linear(32, emb_dim)
        self.conv_in = nn.Conv2d(2 * latent_channels, channels, 3, padding=1)
        self.blocks = nn.ModuleList([FiLMBlock(channels, emb_dim) for _ in range(3)])
        self.norm_out = nn.GroupNorm(8, channels)
        self.conv_out = nn.Conv2d(channels, latent_channels, 3, padding=1)

    def forward(
        self, z: torch.Tensor, t: torch.Tensor, ref: torch.Tensor, audio: torch.Tensor
    ) -> torch.Tensor:
        t_emb = self.time_mlp(sinusoidal_embedding(t.to(z.dtype), 64))
        a_emb = self.audio_mlp(sinusoidal_embedding(audio.to(z.dtype) * 1000.0, 64))
        gate = torch.tanh(self.ref_gate(self.ref_pool(ref).flatten(1)))
        emb = t_emb + a_emb * (1.0 + gate)
        h = self.conv_in(torch.cat([z, ref], dim=1))
        for block in self.blocks:
            h = block(h, emb)
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))


@dataclass
class TalkingHeadModel:
    """Codec + conditioned denoiser + schedule, with training provenance."""

    codec: VAECodec
    denoiser: CondDenoiser
    sched: NoiseSchedule
    trained: bool = False
    train_seed: int = 0
    corpus_fingerprint: str = ""
    history: dict = field(default_factory=dict)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        c = self.codec.latent_channels
        return (c, 8, 8)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.codec.encode(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.codec.decode(z)

    def predict_eps(
        self, z: torch.Tensor, t: torch.Tensor | int, cond: Conditioning
    ) -> torch.Tensor:
        squeeze = z.dim() == 3
        zb = z.unsqueeze(0) if squeeze else z
        ref = cond.ref_latent
        refb = ref.unsqueeze(0) if ref.dim() == 3 else ref
        if refb.shape[0] == 1 and zb.shape[0] > 1:
            refb = refb.expand(zb.shape[0], -1, -1, -1)
        if refb.shape != zb.shape:
            raise ShapeError(
                f"ref latent shape {tuple(refb.shape)} incompatible with z {tuple(zb.shape)}"
            )
        if isinstance(t, int):
            tb = torch.full((zb.shape[0],), float(t), dtype=zb.dtype)
        else:
            tb = t.to(zb.dtype).reshape(-1)
            if tb.numel() == 1:
                tb = tb.expand(zb.shape[0])
        audio = cond.audio
        if isinstance(audio, (int, float)):
            ab = torch.full((zb.shape[0],), float(audio), dtype=zb.dtype)
        else:
            ab = audio.to(zb.dtype).reshape(-1)
            if ab.numel() == 1:
                ab = ab.expand(zb.shape[0])
        out = self.denoiser(zb, tb, refb, ab)
        return out[0] if squeeze else out

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)

    def parameters(self):
        yield from self.codec.parameters()
        yield from self.denoiser.parameters()

    def to_dtype(self, dtype: torch.dtype) -> "TalkingHeadModel":
        self.codec.to(dtype)
        self.denoiser.to(dtype)
        return self

    def weight_snapshot(self) -> list[torch.Tensor]:
        return [p.detach().clone() for p in self.parameters()]


def build_model(cfg: TrainConfig) -> TalkingHeadModel:
    torch.manual_seed(cfg.seed)
    codec = VAECodec(base=cfg.base_channels, latent_channels=cfg.latent_channels)
    denoiser = CondDenoiser(latent_channels=cfg.latent_channels, channels=cfg.denoiser_channels)
    sched = make_schedule(T_DEFAULT, BETA_START, BETA_END)
    return TalkingHeadModel(codec=codec, denoiser=denoiser, sched=sched, train_seed=cfg.seed)


def _corpus_tensors(corpus: list[VideoClip]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack corpus into (N, F, H, W, 3) frames and (N, F) amplitudes."""
    if not corpus:
        raise ParameterError("corpus must be non-empty")
    n_frames = len(corpus[0])
    for clip in corpus:
        if len(clip) != n_frames:
            raise ParameterError("all training clips must share a frame count")
    frames = torch.stack([clip.pixel_stack() for clip in corpus])
    amps = torch.stack([clip.audio.amplitudes for clip in corpus])
    return frames, amps


def _edge_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared difference of horizontal/vertical gradients; sharpens edges."""
    dx = (a[..., 1:, :] - a[..., :-1, :]) - (b[..., 1:, :] - b[..., :-1, :])
    dy = (a[..., :, 1:] - a[..., :, :-1]) - (b[..., :, 1:] - b[..., :, :-1])
    return torch.mean(dx**2) + torch.mean(dy**2)


def ldm_training_loss(
    model: TalkingHeadModel,
    frame: torch.Tensor,
    ref: torch.Tensor,
    audio: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
) -> torch.Tensor:
    """Noise-prediction objective (per-element mean squared error).

    frame/ref are images (B,H,W,3); the target latent is the frame's
    encoding noised to t, the reference latent conditions the denoiser.
    """
    z0 = model.encode(frame)
    ref_lat = model.encode(ref)
    z_t = add_noise(z0, t, eps, model.sched)
    pred = model.predict_eps(z_t, t, Conditioning(ref_latent=ref_lat, audio=audio))
    return torch.mean((eps - pred) ** 2)


def train_victim(
    corpus: list[VideoClip], cfg: TrainConfig, progress: bool = False
) -> TalkingHeadModel:
    """Two-phase training; returns the frozen model with loss history."""
    frames, amps = _corpus_tensors(corpus)
    n_ids, n_frames = frames.shape[0], frames.shape[1]
    flat = frames.reshape(n_ids * n_frames, *frames.shape[2:])

    model = build_model(cfg)
    gen = generator(stable_seed(cfg.seed, "train"))

    # Phase A: codec reconstruction (mse + edge-difference term, cosine lr)
    opt = torch.optim.Adam(model.codec.parameters(), lr=cfg.lr_ae)
    steps_per_epoch = max(1, flat.shape[0] // cfg.batch_size)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.ae_epochs * steps_per_epoch, eta_min=cfg.lr_ae * 0.003
    )
    ae_history: list[float] = []
    size = flat.shape[1]
    for epoch in range(cfg.ae_epochs):
        epoch_losses = []
        for step in range(steps_per_epoch):
            idx = torch.randint(0, flat.shape[0], (cfg.batch_size,), generator=gen)
            batch = flat[idx]
            # every 4th step trains on half-size crops: grid purification
            # round-trips patches through the codec, so patches must be
            # in-distribution, not just whole portraits
            if step % 4 == 3 and size >= 32:
                offs = torch.randint(0, size - 32 + 1, (2,), generator=gen)
                batch = batch[:, offs[0] : offs[0] + 32, offs[1] : offs[1] + 32, :]
            bchw, _ = _hwc_to_bchw(batch)
            recon = model.codec.decoder(model.codec.encoder(bchw))
            loss = torch.mean((recon - bchw) ** 2) + 2.0 * _edge_loss(recon, bchw)
            if not torch.isfinite(loss):
                raise TrainingError(f"codec loss non-finite at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.codec.parameters(), 1.0)
            opt.step()
            lr_sched.step()
            epoch_losses.append(loss.item())
        ae_history.append(sum(epoch_losses) / len(epoch_losses))
        if progress:
            print(f"[codec] epoch {epoch}: loss {ae_history[-1]:.5f}")

    # Latent normalization stats from the trained codec
    with torch.no_grad():
        raws = []
        for i in range(0, flat.shape[0], 256):
            bchw, _ = _hwc_to_bchw(flat[i : i + 256])
            raws.append(model.codec.encoder(bchw))
        raw = torch.cat(raws)
        model.codec.set_latent_stats(
            raw.mean(dim=(0, 2, 3)), raw.std(dim=(0, 2, 3))
        )

    # Phase B: denoiser on frozen-codec latents
    with torch.no_grad():
        lat = model.encode(flat).reshape(n_ids, n_frames, *model.latent_shape)
    opt = torch.optim.Adam(model.denoiser.parameters(), lr=cfg.lr_diff)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.diff_epochs * steps_per_epoch, eta_min=cfg.lr_diff * 0.01
    )
    diff_history: list[float] = []
    for epoch in range(cfg.diff_epochs):
        epoch_losses = []
        for step in range(steps_per_epoch):
            ids = torch.randint(0, n_ids, (cfg.batch_size,), generator=gen)
            fi = torch.randint(0, n_frames, (cfg.batch_size,), generator=gen)
            if step % 4 == 3 and size >= 32:
                # patch steps: the grid purifier denoises 32x32 crops
                # conditioned on themselves with silent audio, so that
                # regime must be in-distribution too
                offs = torch.randint(0, size - 32 + 1, (2,), generator=gen)
                crops = frames[ids, fi][:, offs[0] : offs[0] + 32, offs[1] : offs[1] + 32, :]
                with torch.no_grad():
                    z0 = model.encode(crops)
                ref = z0
                audio = torch.zeros(cfg.batch_size)
            else:
                ri = torch.randint(0, n_frames, (cfg.batch_size,), generator=gen)
                # some pairs condition on the target frame itself, teaching the
                # model that a reference matching the audio is already the answer
                same = torch.rand((cfg.batch_size,), generator=gen) < 0.2
                ri = torch.where(same, fi, ri)
                z0 = lat[ids, fi]
                ref = lat[ids, ri]
                audio = amps[ids, fi]
            t = torch.randint(1, model.sched.T + 1, (cfg.batch_size,), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            z_t = add_noise(z0, t, eps, model.sched)
            pred = model.predict_eps(z_t, t, Conditioning(ref_latent=ref, audio=audio))
            loss = torch.mean((eps - pred) ** 2)
            if not torch.isfinite(loss):
                raise TrainingError(f"denoiser loss non-finite at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.denoiser.parameters(), 1.0)
            opt.step()
            lr_sched.step()
            epoch_losses.append(loss.item())
        diff_history.append(sum(epoch_losses) / len(epoch_losses))
        if progress:
            print(f"[denoiser] epoch {epoch}: mse {diff_history[-1]:.5f}")

    model.trained = True
    model.history = {"codec": ae_history, "denoiser": diff_history}
    model.freeze()
    return model


def animate(
    model: TalkingHeadModel,
    portrait: Portrait,
    audio: AudioTrack,
    steps: int = 20,
    seed: int = 0,
) -> VideoClip:
    """Generate one frame per audio frame by seeded DDIM sampling.

    All frames share the reference conditioning; each is driven by its
    own amplitude and its own seeded Gaussian start.
    """
    if not model.trained:
        warnings.warn("animating with an untrained model", UntrainedModelWarning)
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    n = len(audio)
    with torch.no_grad():
        ref_lat = model.encode(portrait.pixels)
        gen = generator(stable_seed(seed, "animate"))
        z_T = torch.randn((n, *model.latent_shape), generator=gen)
        cond = Conditioning(
            ref_latent=ref_lat.unsqueeze(0).expand(n, -1, -1, -1),
            audio=audio.amplitudes,
        )
        z0 = ddim_sample(model, z_T, cond, steps, model.sched)
        imgs = model.decode(z0)
    frames = [
        Portrait(pixels=imgs[i], face_mask=portrait.face_mask, identity=portrait.identity)
        for i in range(n)
    ]
    return VideoClip(frames=frames, audio=audio, identity=portrait.identity)


def ddim_invert(
    x: torch.Tensor,
    model: TalkingHeadModel,
    cond: Conditioning,
    steps: int = 20,
) -> LatentTrajectory:
    """Encode an image and run the reversed DDIM ladder, recording every rung."""
    if float(x.min()) < 0.0 or float(x.max()) > 1.0:
        raise ParameterError("image must lie in [0,1]")
    z0 = model.encode(x)
    traj = ddim_invert_latent(z0, model, cond, steps, model.sched)
    return LatentTrajectory(latents=traj, timesteps=timestep_ladder(model.sched.T, steps))


__all__ = [
    "CondDenoiser",
    "ConvDecoder",
    "ConvEncoder",
    "TalkingHeadModel",
    "TrainingError",
    "UntrainedModelWarning",
    "VAECodec",
    "animate",
    "build_model",
    "ddim_invert",
    "ldm_training_loss",
    "sinusoidal_embedding",
    "train_victim",
]
