"""Denoisers: a closed-form Gaussian oracle and a small trainable CNN."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DivergedTraining, MalformedHeader, TruncatedData


def gaussian_posterior_mean(z_t, alpha_bar: float, mu, sigma0: float):
    """E[z0 | z_t] for z0 ~ N(mu, sigma0^2 I) and z_t = sqrt(a) z0 + sqrt(1 - a) eps."""
    a = alpha_bar
    return (math.sqrt(a) * sigma0**2 * z_t + (1.0 - a) * mu) / (a * sigma0**2 + 1.0 - a)


def analytic_predict(z_t, t: int, schedule, mu, sigma0: float) -> np.ndarray:
    """Noise estimate consistent with the Gaussian posterior mean.

    Written in the form ``sqrt(1 - a) (z - sqrt(a) mu) / (a s^2 + 1 - a)``, which
    equals ``(z - sqrt(a) E[z0|z]) / sqrt(1 - a)`` and stays finite at a = 1.
    """
    a = schedule.alpha_bar[t]
    return math.sqrt(1.0 - a) * (z_t - math.sqrt(a) * mu) / (a * sigma0**2 + 1.0 - a)


@dataclass(frozen=True, eq=False)
class AnalyticGaussianDenoiser:
    mu: np.ndarray
    sigma0: float

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        mu = np.array(self.mu, dtype=np.float64)
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu must be finite")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)

    def predict(self, z, t, schedule, cond=None):
        return analytic_predict(z, t, schedule, self.mu, self.sigma0)

    def vjp(self, z, t, schedule, cond, cotangent):
        a = schedule.alpha_bar[t]
        return cotangent * (math.sqrt(1.0 - a) / (a * self.sigma0**2 + 1.0 - a))



CHECKPOINT_MAGIC = b"GDPRIOR1"


@dataclass(frozen=True)
class ToyConfig:
    width: int = 24
    embed_dim: int = 16
    cond_channels: int = 0
    steps: int = 800
    batch: int = 16
    lr: float = 2e-3
    val_size: int = 64

    def __post_init__(self):
        if self.width < 1 or self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("width must be positive and embed_dim a positive even number")
        if self.steps < 1 or self.batch < 1 or not self.lr > 0:
            raise ValueError("steps, batch and lr must be positive")


def noise_embedding(alpha_bar, dim: int) -> torch.Tensor:
    """Sinusoidal features of the noise level sqrt(1 - alpha_bar), shape (N, dim)."""
    sigma = torch.sqrt(1.0 - torch.as_tensor(alpha_bar, dtype=torch.float64)).reshape(-1, 1)
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), dim // 2, dtype=torch.float64))
    ang = sigma * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class _Net(nn.Module):
    # four 3x3 convolutions; the noise embedding becomes a per-channel bias
    # after the first two, the third is dilated to widen the receptive field.
    # The output is the velocity v = sqrt(a) eps - sqrt(1 - a) z0.
    def __init__(self, cfg: ToyConfig):
        super().__init__()
        w = cfg.width
        self.cfg = cfg
        self.conv1 = nn.Conv2d(1 + cfg.cond_channels, w, 3, padding=1)
        self.conv2 = nn.Conv2d(w, w, 3, padding=1)
        self.conv3 = nn.Conv2d(w, w, 3, padding=2, dilation=2)
        self.conv4 = nn.Conv2d(w, 1, 3, padding=1)
        self.emb1 = nn.Linear(cfg.embed_dim, w)
        self.emb2 = nn.Linear(cfg.embed_dim, w)
        self.act = nn.SiLU()

    def forward(self, z, alpha_bar, cond=None):
        e = noise_embedding(alpha_bar, self.cfg.embed_dim).expand(z.shape[0], -1)
        x = z if cond is None else torch.cat([z, cond], dim=1)
        h = self.act(self.conv1(x) + self.emb1(e)[:, :, None, None])
        h = self.act(self.conv2(h) + self.emb2(e)[:, :, None, None])
        h = self.act(self.conv3(h))
        return self.conv4(h)


def eps_from_velocity(v, z_t, alpha_bar):
    """eps = sqrt(a) v + sqrt(1 - a) z_t; works on floats or broadcast tensors."""
    if torch.is_tensor(alpha_bar):
        return torch.sqrt(alpha_bar) * v + torch.sqrt(1.0 - alpha_bar) * z_t
    return math.sqrt(alpha_bar) * v + math.sqrt(1.0 - alpha_bar) * z_t


class ToyDenoiser:
    """Small convolutional noise predictor on (H, W) latents, float64 throughout.

    The network itself predicts the velocity target and the noise estimate is
    derived from it. That keeps the clean estimate ``sqrt(a) z - sqrt(1-a) v``
    and its Jacobian bounded at the highest noise levels, where recovering it
    from a directly predicted noise divides small errors by ``sqrt(a)``.

    With ``cond_channels > 0`` the conditioning image is stacked onto the
    latent as extra input channels; otherwise ``cond`` is ignored.
    """

    def __init__(self, config: ToyConfig | None = None, seed: int = 0):
        self.config = config or ToyConfig()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = _Net(self.config).double()
        self.net.eval()

    @property
    def n_weights(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def _cond(self, cond, shape):
        if self.config.cond_channels == 0 or cond is None:
            if self.config.cond_channels:
                raise ValueError("this denoiser needs a conditioning image")
            return None
        c = np.asarray(cond, dtype=np.float64)
        if c.ndim == 2:
            c = c[:, :, None]
        if c.shape[:2] != shape or c.shape[2] != self.config.cond_channels:
            raise ValueError(f"conditioning image {c.shape} does not fit latent {shape}")
        return torch.from_numpy(np.ascontiguousarray(c.transpose(2, 0, 1)))[None]

    def _eps(self, z_t, t, schedule, cond):
        a = float(schedule.alpha_bar[t])
        v = self.net(z_t[None, None], a, self._cond(cond, tuple(z_t.shape)))[0, 0]
        return eps_from_velocity(v, z_t, a)

    def predict(self, z, t, schedule, cond=None):
        with torch.no_grad():
            out = self._eps(torch.tensor(np.asarray(z, dtype=np.float64)), t, schedule, cond)
        return out.numpy()

    def vjp(self, z, t, schedule, cond, cotangent):
        z_t = torch.tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
        out = self._eps(z_t, t, schedule, cond)
        (g,) = torch.autograd.grad(out, z_t, torch.tensor(np.asarray(cotangent, dtype=np.float64)))
        return g.numpy()

    # checkpoint I/O -------------------------------------------------------

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(k, v.detach().numpy().copy()) for k, v in self.net.state_dict().items()]

    def save(self, path) -> None:
        """Write the GDPRIOR1 container (layout in ``from_checkpoint_bytes``)."""
        from .cli_io import atomic_write_bytes

        atomic_write_bytes(path, checkpoint_bytes(self))

    @classmethod
    def load(cls, path) -> "ToyDenoiser":
        with open(path, "rb") as fh:
            return from_checkpoint_bytes(fh.read())


def checkpoint_bytes(model: ToyDenoiser) -> bytes:
    config = json.dumps(model.config.__dict__, sort_keys=True).encode("utf-8")
    arrays = model.state_arrays()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(config)), config, struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in arrays:
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def from_checkpoint_bytes(buf: bytes) -> ToyDenoiser:
    """Parse a GDPRIOR1 container.

    Layout, all integers little-endian:

    * 8 bytes magic ``GDPRIOR1``
    * uint32 length n, then n bytes of UTF-8 JSON with the ``ToyConfig`` fields
    * uint32 tensor count k, then k entries of
      (uint16 name length, UTF-8 name, uint8 ndim, ndim x uint32 dims)
    * the tensors' float64 values, in table order, each flattened row-major
    """
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedData(f"checkpoint ends at byte {len(buf)}, needed {pos + n}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(8) != CHECKPOINT_MAGIC:
        raise MalformedHeader("not a GDPRIOR1 checkpoint")
    (n,) = struct.unpack("<I", take(4))
    try:
        config = ToyConfig(**json.loads(take(n).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise MalformedHeader(f"bad checkpoint config: {exc}") from exc
    (k,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(k):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        table.append((name, struct.unpack(f"<{ndim}I", take(4 * ndim))))
    model = ToyDenoiser(config)
    expected = model.net.state_dict()
    if [name for name, _ in table] != list(expected):
        raise MalformedHeader("checkpoint tensor names do not match the architecture")
    state = {}
    for name, shape in table:
        if tuple(expected[name].shape) != tuple(shape):
            raise MalformedHeader(f"tensor {name} has shape {shape}, expected {tuple(expected[name].shape)}")
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float64))
    if pos != len(buf):
        raise MalformedHeader(f"{len(buf) - pos} trailing bytes after the weights")
    model.net.load_state_dict(state)
    return model


@dataclass
class TrainingReport:
    losses: list
    val_initial: float
    val_final: float


def _stack(fields):
    shapes = {np.shape(f) for f in fields}
    if len(shapes) != 1:
        raise ValueError(f"corpus fields must share one shape, got {sorted(shapes)}")
    arr = np.stack([np.asarray(f, dtype=np.float64) for f in fields])
    if not np.all(np.isfinite(arr)) or arr.min() < -1.0 or arr.max() > 1.0:
        raise ValueError("corpus fields must be finite and lie in [-1, 1]")
    return torch.from_numpy(arr)[:, None]


def denoising_loss(net, z0, t, noise, alpha_bar, target: str = "eps") -> torch.Tensor:
    """Mean squared error of the noise (``eps``) or velocity (``v``) estimate.

    The two differ only by the per-sample weight alpha_bar, so they share the
    same minimiser at every noise level.
    """
    a = alpha_bar[t].reshape(-1, 1, 1, 1)
    z_t = torch.sqrt(a) * z0 + torch.sqrt(1.0 - a) * noise
    v_hat = net(z_t, alpha_bar[t])
    if target == "v":
        return torch.mean((v_hat - (torch.sqrt(a) * noise - torch.sqrt(1.0 - a) * z0)) ** 2)
    return torch.mean((eps_from_velocity(v_hat, z_t, a) - noise) ** 2)


def train_toy_denoiser(corpus, schedule, config: ToyConfig | None = None, seed: int = 0):
    """Fit the noise predictor by denoising regression.

    Training minimises the velocity error, i.e. the noise error
    ``|eps_hat - eps|^2`` reweighted by ``1 / alpha_bar``; without the
    reweighting the highest noise levels carry almost no weight and the clean
    estimate there is left untrained. Validation reports the plain noise error.

    ``schedule`` is the full training schedule; levels are drawn uniformly
    from 1..T. A fixed held-out draw (last ``val_size`` fields, or the whole
    corpus when it is small) measures the validation loss before and after.
    Returns ``(model, TrainingReport)``.
    """
    config = config or ToyConfig()
    data = _stack(list(corpus))
    if config.cond_channels:
        raise ValueError("training on conditioning images is not supported")
    n_val = min(config.val_size, max(1, data.shape[0] // 5))
    train, val = (data[:-n_val], data[-n_val:]) if data.shape[0] > n_val else (data, data)
    model = ToyDenoiser(config, seed)
    net = model.net
    gen = torch.Generator().manual_seed(seed)
    alpha_bar = torch.tensor(np.array(schedule.alpha_bar, dtype=np.float64))
    T = schedule.T

    val_t = torch.randint(1, T + 1, (val.shape[0],), generator=gen)
    val_noise = torch.randn(val.shape, generator=gen, dtype=torch.float64)

    def val_loss():
        with torch.no_grad():
            return float(denoising_loss(net, val, val_t, val_noise, alpha_bar))

    val_initial = val_loss()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, config.steps)
    losses = []
    net.train()
    for step in range(config.steps):
        idx = torch.randint(0, train.shape[0], (config.batch,), generator=gen)
        t = torch.randint(1, T + 1, (config.batch,), generator=gen)
        noise = torch.randn((config.batch,) + tuple(train.shape[1:]), generator=gen, dtype=torch.float64)
        loss = denoising_loss(net, train[idx], t, noise, alpha_bar, target="v")
        if not torch.isfinite(loss):
            raise DivergedTraining(f"training loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if not all(torch.isfinite(p).all() for p in net.parameters()):
            raise DivergedTraining(f"weights became non-finite at step {step}")
        losses.append(loss.item())
    net.eval()
    return model, TrainingReport(losses, val_initial, val_loss())
