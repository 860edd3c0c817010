"""Residual diffusion refinement for sinogram and DR images.

The forward process blends a degraded image ``x_init``, the residual
``x_star - x_init`` and Gaussian noise::

    x_t = x_init + alpha_t * (x_star - x_init) + beta_t * eps

Two networks are trained jointly: ``phi`` predicts the residual and ``psi``
predicts the noise from ``(x_t, t)``. The reverse sweep subtracts the
predicted increments step by step and the refined image is ``x_init`` plus
the residual predicted at ``t = 0``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import diffcore as dc
from .decouple import DRStack, SinogramStack

log = logging.getLogger(__name__)

DOMAINS = ("sino", "dr")
_DOMAIN_STREAM = {"sino": 11, "dr": 12}


class DomainMismatchError(ValueError):
    pass


# --------------------------------------------------------------------------- schedule


class DiffusionSchedule:
    """Coefficients ``alpha[0..T]`` and ``beta[0..T]``.

    ``alpha`` runs strictly upward from 0 to 1 and ``beta`` non-decreasing
    from 0 to 1.
    """

    def __init__(self, alpha, beta):
        self.alpha = np.asarray(alpha, dtype=np.float64).copy()
        self.beta = np.asarray(beta, dtype=np.float64).copy()
        self._validate()

    def _validate(self):
        a, b = self.alpha, self.beta
        if a.ndim != 1 or a.shape != b.shape or a.size < 2:
            raise ValueError("alpha and beta must be 1-D of equal length T+1 >= 2")
        if a[0] != 0.0 or a[-1] != 1.0 or b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("schedule endpoints must be alpha_0 = beta_0 = 0 and alpha_T = beta_T = 1")
        if np.any(np.diff(a) <= 0):
            raise ValueError("alpha must be strictly increasing")
        if np.any(np.diff(b) < 0):
            raise ValueError("beta must be non-decreasing")

    @classmethod
    def default(cls, steps: int = 50) -> "DiffusionSchedule":
        """``alpha_t = t / T`` and ``beta_t = sqrt(t / T)``."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        s = np.arange(steps + 1) / steps
        s[-1] = 1.0
        return cls(s, np.sqrt(s))

    @property
    def steps(self) -> int:
        return self.alpha.size - 1

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d) -> "DiffusionSchedule":
        return cls(d["alpha"], d["beta"])

    def __eq__(self, other):
        return isinstance(other, DiffusionSchedule) and np.array_equal(self.alpha, other.alpha) and np.array_equal(
            self.beta, other.beta)


# --------------------------------------------------------------------------- networks


def time_embedding(t, dim: int = 32):
    """Sinusoidal embedding of integer steps ``t`` (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = torch.as_tensor(t, dtype=torch.float64).reshape(-1, 1) * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _Block(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3)
        self.c2 = nn.Conv2d(cout, cout, 3)

    def forward(self, x, add=None):
        h = dc.silu(dc.conv2d(x, self.c1.weight, self.c1.bias))
        if add is not None:
            h = h + add
        return dc.silu(dc.conv2d(h, self.c2.weight, self.c2.bias))


class Denoiser(nn.Module):
    """Two-level encoder-decoder with skips; the step embedding joins at the bottleneck.

    Inputs of any size are edge-padded to a multiple of 4 and cropped back,
    so the output shape always equals the input shape.
    """

    def __init__(self, base: int = 16, emb_dim: int = 32, zero_out: bool = True):
        super().__init__()
        w0, w1, w2 = base, 2 * base, 2 * base
        self.emb_dim = emb_dim
        self.enc0 = _Block(1, w0)
        self.enc1 = _Block(w0, w1)
        self.mid = _Block(w1, w2)
        self.t1 = nn.Linear(emb_dim, 2 * emb_dim)
        self.t2 = nn.Linear(2 * emb_dim, w2)
        self.dec1 = _Block(w2 + w1, w1)
        self.dec0 = _Block(w1 + w0, w0)
        self.out = nn.Conv2d(w0, 1, 1)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x, t):
        """``x`` (B, H, W) or (B, 1, H, W); ``t`` (B,) integer steps."""
        squeeze = x.ndim == 3
        if squeeze:
            x = x[:, None]
        H, W = x.shape[-2:]
        ph, pw = (-H) % 4, (-W) % 4
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        temb = time_embedding(t, self.emb_dim).to(x.dtype)
        temb = dc.affine(dc.silu(dc.affine(temb, self.t1.weight, self.t1.bias)), self.t2.weight, self.t2.bias)
        e0 = self.enc0(x)
        e1 = self.enc1(dc.avg_pool2(e0))
        m = self.mid(dc.avg_pool2(e1), temb[:, :, None, None])
        d1 = self.dec1(torch.cat([dc.upsample2(m), e1], dim=1))
        d0 = self.dec0(torch.cat([dc.upsample2(d1), e0], dim=1))
        y = dc.conv2d(d0, self.out.weight, self.out.bias)[..., :H, :W]
        return y[:, 0] if squeeze else y


# --------------------------------------------------------------------------- model


class RefinerModel(nn.Module):
    """Schedule, residual net ``phi``, noise net ``psi``, domain tag and normalisation."""

    def __init__(self, domain: str, schedule: DiffusionSchedule | None = None, base: int = 16, mean: float = 0.0,
                 std: float = 1.0, seed: int = 0, dtype=dc.DTYPE):
        super().__init__()
        if domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
        if not std > 0:
            raise ValueError("normalisation std must be positive")
        self._domain = domain
        self.schedule = schedule or DiffusionSchedule.default()
        self.base = int(base)
        self.mean = float(mean)
        self.std = float(std)
        torch.manual_seed(int(dc.seeded_rng(seed, _DOMAIN_STREAM[domain], 0).integers(0, 2**62)))
        self.phi = Denoiser(base).to(dtype)
        self.psi = Denoiser(base).to(dtype)

    @property
    def domain(self) -> str:
        return self._domain

    @property
    def dtype(self):
        return self.phi.out.weight.dtype

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean

    def config_dict(self) -> dict:
        return {"kind": "refiner", "domain": self.domain, "schedule": self.schedule.to_dict(), "base": self.base,
                "normalization": {"mean": self.mean, "std": self.std}}


def _coef(values, t, like):
    c = torch.as_tensor(np.asarray(values)[np.asarray(t)], dtype=like.dtype)
    return c.reshape((-1,) + (1,) * (like.ndim - 1))


def forward_sample(schedule: DiffusionSchedule, x_init, x_star, t, eps):
    """``x_init + alpha_t (x_star - x_init) + beta_t eps``; ``t`` is a scalar or a (B,) batch."""
    x_init, x_star, eps = (torch.as_tensor(a) for a in (x_init, x_star, eps))
    if not (x_init.shape == x_star.shape == eps.shape):
        raise ValueError("forward_sample: x_init, x_star and eps must share a shape")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.steps):
        raise ValueError(f"step must lie in [0, {schedule.steps}]")
    if t_arr.ndim == 0:
        a, b = float(schedule.alpha[int(t_arr)]), float(schedule.beta[int(t_arr)])
        return x_init + a * (x_star - x_init) + b * eps
    return x_init + _coef(schedule.alpha, t_arr, x_init) * (x_star - x_init) + _coef(schedule.beta, t_arr, x_init) * eps


def _steps_tensor(t, batch):
    t = torch.as_tensor(np.asarray(t), dtype=torch.int64)
    return t.expand(batch) if t.ndim == 0 else t


def training_losses(model: RefinerModel, x_init, x_star, t, eps):
    """``(L_res, L_noise)``: mean squared error of both predictors on forward-sampled ``x_t``.

    Inputs are already normalised, shaped (B, H, W).
    """
    xt = forward_sample(model.schedule, x_init, x_star, t, eps)
    ts = _steps_tensor(t, xt.shape[0])
    l_res = dc.squared_error(model.phi(xt, ts), x_star - x_init)
    l_noise = dc.squared_error(model.psi(xt, ts), eps)
    if not (torch.isfinite(l_res) and torch.isfinite(l_noise)):
        raise dc.NumericalError(f"non-finite diffusion loss (L_res={float(l_res.detach())}, L_noise={float(l_noise.detach())})")
    return l_res, l_noise


@dataclass(frozen=True)
class RefinerTrainConfig:
    epochs: int = 40
    batch: int = 8
    lr: float = 1e-3
    noise_weight: float = 1.0
    patch: int | None = 48
    seed: int = 0


def _crop(rng, x, patch):
    H, W = x.shape[-2:]
    ph, pw = (H, W) if patch is None else (min(patch, H), min(patch, W))
    i = int(rng.integers(0, H - ph + 1))
    j = int(rng.integers(0, W - pw + 1))
    return i, j, ph, pw


def train_refiner(model: RefinerModel, x_init, x_star, cfg: RefinerTrainConfig = RefinerTrainConfig(), progress=None):
    """Jointly fit ``phi`` and ``psi`` on normalised pairs (N, H, W).

    One epoch visits every pair once in a seeded random order, in minibatches
    of ``cfg.batch``; each sample gets a random crop, step and noise draw.
    Returns a list of ``(L_res, L_noise)`` per update.
    """
    x_init = np.asarray(x_init, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_init.ndim != 3 or x_init.shape != x_star.shape or x_init.shape[0] < 1:
        raise ValueError("train_refiner needs >= 1 pair of equally shaped images (N, H, W)")
    store = dc.ParameterStore.from_module(model, lr=cfg.lr)
    rng = dc.seeded_rng(cfg.seed, _DOMAIN_STREAM[model.domain], 1)
    T = model.schedule.steps
    history = []
    parts = {}

    def loss_fn(xi, xs, t, eps):
        l_res, l_noise = training_losses(model, xi, xs, t, eps)
        parts["res"], parts["noise"] = float(l_res.detach()), float(l_noise.detach())
        return l_res + cfg.noise_weight * l_noise

    n = x_init.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch):
            idx = order[s : s + cfg.batch]
            i, j, ph, pw = _crop(rng, x_init, cfg.patch)
            xi = torch.as_tensor(x_init[idx, i : i + ph, j : j + pw], dtype=model.dtype)
            xs = torch.as_tensor(x_star[idx, i : i + ph, j : j + pw], dtype=model.dtype)
            t = rng.integers(1, T + 1, len(idx))
            eps = torch.as_tensor(rng.standard_normal(xi.shape), dtype=model.dtype)
            try:
                dc.forward_backward(loss_fn, store, xi, xs, t, eps)
            except dc.NumericalError as exc:
                raise dc.NumericalError(f"{exc} at epoch {epoch}, update {len(history)}, lr {cfg.lr}") from None
            dc.adam_step(store)
            history.append((parts["res"], parts["noise"]))
        if progress is not None:
            progress(epoch, history[-1])
    return history


# --------------------------------------------------------------------------- inference


def reverse_step(model: RefinerModel, x_t, t: int, phi=None, psi=None):
    """``x_{t-1} = x_t - (alpha_t - alpha_{t-1}) phi(x_t, t) - (beta_t - beta_{t-1}) psi(x_t, t)``.

    ``phi``/``psi`` override the model's networks (used for oracle checks).
    """
    if not 1 <= t <= model.schedule.steps:
        raise ValueError(f"reverse_step needs 1 <= t <= {model.schedule.steps}, got {t}")
    phi = model.phi if phi is None else phi
    psi = model.psi if psi is None else psi
    ts = _steps_tensor(t, x_t.shape[0])
    da = float(model.schedule.alpha[t] - model.schedule.alpha[t - 1])
    db = float(model.schedule.beta[t] - model.schedule.beta[t - 1])
    return x_t - da * phi(x_t, ts) - db * psi(x_t, ts)


@torch.no_grad()
def refine_normalized(model: RefinerModel, x_init, eps, include_final_noise_term: bool = False, phi=None, psi=None):
    """Reverse sweep from ``x_init + beta_T eps`` in normalised units; (B, H, W) tensors."""
    phi = model.phi if phi is None else phi
    psi = model.psi if psi is None else psi
    T = model.schedule.steps
    x = x_init + float(model.schedule.beta[T]) * eps
    for t in range(T, 0, -1):
        x = reverse_step(model, x, t, phi, psi)
    t0 = _steps_tensor(0, x.shape[0])
    out = x_init + phi(x, t0)
    if include_final_noise_term:
        out = out + psi(x, t0)
    return out


def image_noise(seed: int, domain: str, index: int, shape) -> np.ndarray:
    """Standard normal draw for image ``index`` of a stack; independent of batching."""
    return dc.seeded_rng(seed, _DOMAIN_STREAM[domain], 2, int(index)).standard_normal(shape)


def refine(model: RefinerModel, x_init, seed: int = 0, index: int = 0, include_final_noise_term: bool = False,
           dtype=None) -> np.ndarray:
    """Refine one image given in physical units; returns physical units."""
    x = np.asarray(x_init, dtype=np.float64)
    dtype = model.dtype if dtype is None else dtype
    xn = torch.as_tensor(model.normalize(x), dtype=dtype)[None]
    eps = torch.as_tensor(image_noise(seed, model.domain, index, x.shape), dtype=dtype)[None]
    if dtype != model.dtype:
        model = _cast(model, dtype)
    y = refine_normalized(model, xn, eps, include_final_noise_term)[0]
    return model.denormalize(y.double().numpy())


def _cast(model: RefinerModel, dtype):
    import copy

    return copy.deepcopy(model).to(dtype)


def refine_stack(model: RefinerModel, stack, seed: int = 0, include_final_noise_term: bool = False,
                 dtype=torch.float32, indices=None, progress=None):
    """Refine every image of a sinogram or DR stack independently.

    Image ``k`` always uses the noise stream ``(seed, domain, k)``, so refining a
    sub-stack reproduces the matching images of a full run.
    """
    expected = "sino" if isinstance(stack, SinogramStack) else "dr" if isinstance(stack, DRStack) else None
    if expected is None:
        raise TypeError(f"unsupported stack type {type(stack).__name__}")
    if expected != model.domain:
        raise DomainMismatchError(f"a {model.domain} refiner cannot refine a {expected} stack")
    work = model if dtype == model.dtype else _cast(model, dtype)
    indices = range(len(stack)) if indices is None else indices
    out = stack.data.copy()
    for k in indices:
        try:
            out[k] = refine(work, stack.data[k], seed, k, include_final_noise_term)
        except Exception as exc:
            raise type(exc)(f"refining {expected} image {k}: {exc}") from exc
        if progress is not None:
            progress(k)
    return stack.with_data(out)


# --------------------------------------------------------------------------- checkpoints


def save_refiner(path, model: RefinerModel, **meta):
    tensors = {k: v for k, v in model.state_dict().items()}
    return dc.save_checkpoint(path, tensors, {**model.config_dict(), **meta})


def load_refiner(path, expect_domain: str | None = None) -> tuple[RefinerModel, dict]:
    tensors, meta = dc.load_checkpoint(path)
    if meta.get("kind") != "refiner":
        raise ValueError(f"{path}: not a refiner checkpoint (kind={meta.get('kind')})")
    if expect_domain is not None and meta["domain"] != expect_domain:
        raise DomainMismatchError(f"{path}: checkpoint is for the {meta['domain']} domain, not {expect_domain}")
    norm = meta["normalization"]
    model = RefinerModel(meta["domain"], DiffusionSchedule.from_dict(meta["schedule"]), meta["base"], norm["mean"],
                         norm["std"])
    state = model.state_dict()
    for k, v in tensors.items():
        state[k] = torch.as_tensor(v, dtype=state[k].dtype)
    model.load_state_dict(state)
    return model, meta


def train_config_dict(cfg: RefinerTrainConfig) -> dict:
    return asdict(cfg)
