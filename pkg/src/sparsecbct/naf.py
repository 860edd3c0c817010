"""Neural attenuation field: hash-grid encoder plus a small MLP decoder.

The field maps a world point to a non-negative attenuation value. It is fitted
to sparse projections by rendering pixel rays with the same midpoint
quadrature as :mod:`sparsecbct.projector` and minimising the squared error
against the measured line integrals.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numba
import numpy as np
import torch
from torch import nn

from . import diffcore as dc
from .data import ProjectionSet
from .geometry import Box, ConeBeamGeometry, Ray, view_rays

log = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashEncoderConfig:
    levels: int = 8
    table_size_log2: int = 15
    features_per_level: int = 2
    base_resolution: int = 8
    growth_factor: float = 1.38

    def __post_init__(self):
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be >= 1")
        if self.base_resolution < 2:
            raise ValueError("base_resolution must be >= 2")
        if not self.growth_factor > 1.0:
            raise ValueError("growth_factor must exceed 1")
        if not 1 <= self.table_size_log2 <= 30:
            raise ValueError("table_size_log2 must lie in [1, 30]")

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features_per_level

    def resolutions(self) -> list[int]:
        return [int(math.floor(self.base_resolution * self.growth_factor**l)) for l in range(self.levels)]


@dataclass(frozen=True)
class NafTrainConfig:
    iters: int = 1500
    rays_per_batch: int = 1024
    lr_tables: float = 1e-2
    lr_decoder: float = 1e-2
    n_sample: int = 64
    seed: int = 0
    adam_eps: float = 1e-15
    lr_final_factor: float = 1.0  # exponential decay reaching this multiple at the last iteration


def spatial_hash(ix, iy, iz, table_size: int):
    """XOR of coordinate-times-prime, reduced modulo a power-of-two table size."""
    h = (ix * HASH_PRIMES[0]) ^ (iy * HASH_PRIMES[1]) ^ (iz * HASH_PRIMES[2])
    return h & (table_size - 1)


@numba.njit(cache=True)
def _hash_forward(q, tables, res, out):
    n = q.shape[0]
    n_levels, t_size, n_feat = tables.shape
    mask = t_size - 1
    for i in range(n):
        for l in range(n_levels):
            r = res[l]
            fx = q[i, 0] * r
            fy = q[i, 1] * r
            fz = q[i, 2] * r
            x0 = min(int(math.floor(fx)), r - 1)
            y0 = min(int(math.floor(fy)), r - 1)
            z0 = min(int(math.floor(fz)), r - 1)
            wx = fx - x0
            wy = fy - y0
            wz = fz - z0
            for f in range(n_feat):
                out[i, l * n_feat + f] = 0.0
            for c in range(8):
                bx = (c >> 2) & 1
                by = (c >> 1) & 1
                bz = c & 1
                w = (wx if bx else 1.0 - wx) * (wy if by else 1.0 - wy) * (wz if bz else 1.0 - wz)
                h = ((x0 + bx) * 1) ^ ((y0 + by) * 2654435761) ^ ((z0 + bz) * 805459861)
                h = h & mask
                for f in range(n_feat):
                    out[i, l * n_feat + f] += w * tables[l, h, f]


@numba.njit(cache=True)
def _hash_backward(q, grad_out, res, grad_tables):
    n = q.shape[0]
    n_levels, t_size, n_feat = grad_tables.shape
    mask = t_size - 1
    for i in range(n):
        for l in range(n_levels):
            r = res[l]
            fx = q[i, 0] * r
            fy = q[i, 1] * r
            fz = q[i, 2] * r
            x0 = min(int(math.floor(fx)), r - 1)
            y0 = min(int(math.floor(fy)), r - 1)
            z0 = min(int(math.floor(fz)), r - 1)
            wx = fx - x0
            wy = fy - y0
            wz = fz - z0
            for c in range(8):
                bx = (c >> 2) & 1
                by = (c >> 1) & 1
                bz = c & 1
                w = (wx if bx else 1.0 - wx) * (wy if by else 1.0 - wy) * (wz if bz else 1.0 - wz)
                h = ((x0 + bx) * 1) ^ ((y0 + by) * 2654435761) ^ ((z0 + bz) * 805459861)
                h = h & mask
                for f in range(n_feat):
                    grad_tables[l, h, f] += w * grad_out[i, l * n_feat + f]


class _HashEncode(torch.autograd.Function):
    """Fused lookup; gradients flow to the tables only (points are data)."""

    @staticmethod
    def forward(ctx, q, tables, res):
        qn = q.detach().numpy()
        out = np.empty((qn.shape[0], tables.shape[0] * tables.shape[2]), dtype=qn.dtype)
        _hash_forward(qn, tables.detach().numpy(), res.numpy(), out)
        ctx.save_for_backward(q, res)
        ctx.table_shape = tuple(tables.shape)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        q, res = ctx.saved_tensors
        gq = q.detach().numpy()
        g = np.zeros(ctx.table_shape, dtype=gq.dtype)
        _hash_backward(gq, np.ascontiguousarray(grad_out.detach().numpy()), res.numpy(), g)
        return None, torch.from_numpy(g), None


class NafModel(nn.Module):
    """Hash-encoded MLP with a softplus output, so the field is always >= 0.

    Parameters
    ----------
    box : Box
        World-space box mapped onto the unit cube; points outside are clamped.
    encoder : HashEncoderConfig
    width, depth : int
        Hidden width and number of hidden layers of the decoder.
    out_scale : float
        Attenuation units per unit of softplus output (1/mm).
    """

    def __init__(self, box: Box, encoder: HashEncoderConfig = HashEncoderConfig(), width: int = 64, depth: int = 2,
                 out_scale: float = 0.02, seed: int = 0, dtype=dc.DTYPE):
        super().__init__()
        self.box = box
        self.encoder = encoder
        self.width = int(width)
        self.depth = int(depth)
        self.out_scale = float(out_scale)
        self.register_buffer("_lo", torch.tensor(box.lo, dtype=dtype))
        self.register_buffer("_size", torch.tensor(box.size, dtype=dtype))
        self.register_buffer("_res", torch.tensor(encoder.resolutions(), dtype=torch.int64))
        self.register_buffer("_bits", torch.tensor([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)]))

        rng = dc.seeded_rng(seed, 1)
        L, T, F = encoder.levels, encoder.table_size, encoder.features_per_level
        self.tables = nn.Parameter(torch.tensor(rng.uniform(-1e-4, 1e-4, (L, T, F)), dtype=dtype))
        layers = []
        fan_in = encoder.feature_dim
        for out in [self.width] * self.depth + [1]:
            bound = 1.0 / math.sqrt(fan_in)
            lin = nn.Linear(fan_in, out, dtype=dtype)
            with torch.no_grad():
                lin.weight.copy_(torch.tensor(rng.uniform(-bound, bound, (out, fan_in))))
                lin.bias.copy_(torch.tensor(rng.uniform(-bound, bound, out)))
            layers.append(lin)
            fan_in = out
        self.decoder = nn.ModuleList(layers)

    @property
    def dtype(self):
        return self.tables.dtype

    def normalize(self, p):
        """World mm -> unit cube, clamped."""
        return ((p - self._lo) / self._size).clamp(0.0, 1.0)

    def encode_unit(self, q):
        """Hash-grid features (N, L*F) for points ``q`` (N, 3) already in [0, 1]^3."""
        return _HashEncode.apply(q.contiguous(), self.tables, self._res)

    def encode_unit_reference(self, q):
        """Same as :meth:`encode_unit`, composed from diffcore primitives (slow)."""
        L, T = self.encoder.levels, self.encoder.table_size
        res = self._res.to(q.dtype)[:, None, None]  # (L, 1, 1)
        x = q[None] * res  # (L, N, 3)
        i0 = torch.minimum(x.floor(), res - 1).to(torch.int64)
        frac = x - i0
        corners = i0[:, :, None, :] + self._bits  # (L, N, 8, 3)
        idx = spatial_hash(corners[..., 0], corners[..., 1], corners[..., 2], T)
        level = torch.arange(L, device=q.device)[:, None, None]
        feats = self.tables[level, idx]  # (L, N, 8, F)
        n = q.shape[0]
        blended = dc.trilinear_blend(feats.reshape(L * n, 8, -1), frac.reshape(L * n, 3))
        return blended.reshape(L, n, -1).permute(1, 0, 2).reshape(n, -1)

    def encode(self, p):
        return self.encode_unit(self.normalize(p))

    def decode(self, feat):
        h = feat
        for lin in self.decoder[:-1]:
            h = dc.softplus(dc.affine(h, lin.weight, lin.bias))
        last = self.decoder[-1]
        return self.out_scale * dc.softplus(dc.affine(h, last.weight, last.bias)).squeeze(-1)

    def forward(self, p):
        return self.decode(self.encode(p))

    def config_dict(self) -> dict:
        return {"kind": "naf", "box": {"lo": list(self.box.lo), "hi": list(self.box.hi)},
                "encoder": asdict(self.encoder), "width": self.width, "depth": self.depth,
                "out_scale": self.out_scale}

    def lr_for(self, tables: float, decoder: float):
        return lambda name: tables if name == "tables" else decoder


def encode(model: NafModel, p):
    """Feature vector(s) for world point(s) ``p``."""
    p = torch.as_tensor(np.asarray(p, dtype=np.float64), dtype=model.dtype)
    single = p.ndim == 1
    out = model.encode(p.reshape(-1, 3))
    return out[0] if single else out


def attenuation(model: NafModel, p):
    p = torch.as_tensor(np.asarray(p, dtype=np.float64), dtype=model.dtype)
    single = p.ndim == 1
    out = model(p.reshape(-1, 3))
    return out[0] if single else out


def render_rays(model: NafModel, origins, dirs, t_near, t_far, n_sample: int):
    """Differentiable midpoint-rule integral of the field along each ray."""
    if n_sample < 1:
        raise ValueError("n_sample must be >= 1")
    dt = (t_far - t_near) / n_sample  # (N,)
    steps = (torch.arange(n_sample, dtype=origins.dtype) + 0.5)  # (S,)
    t = t_near[:, None] + steps[None, :] * dt[:, None]  # (N, S)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    mu = model(pts.reshape(-1, 3)).reshape(t.shape)
    return mu.sum(dim=1) * dt


def predict_projection(model: NafModel, ray: Ray, n_sample: int = 64):
    """Rendered line integral for one ray, as a differentiable scalar tensor."""
    f = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=model.dtype).reshape(1, -1)
    return render_rays(model, f(ray.origin), f(ray.direction), f(ray.t_near)[0], f(ray.t_far)[0], n_sample)[0]


class RayTable:
    """All pixel rays of a projection set with their measured values."""

    def __init__(self, ps: ProjectionSet, box: Box):
        o, d, tn, tf, val = [], [], [], [], []
        for k, theta in enumerate(ps.geom.angles):
            src, dirs, t_near, t_far, hit = view_rays(ps.geom, theta, box)
            n = dirs.shape[0] * dirs.shape[1]
            o.append(np.broadcast_to(src, (n, 3)))
            d.append(dirs.reshape(n, 3))
            tn.append(t_near.reshape(n))
            tf.append(np.where(hit, t_far, t_near).reshape(n))
            val.append(ps.data[k].reshape(n))
        self.origins = np.concatenate(o)
        self.dirs = np.concatenate(d)
        self.t_near = np.concatenate(tn)
        self.t_far = np.concatenate(tf)
        self.values = np.concatenate(val)

    def __len__(self):
        return self.values.size

    def batch(self, idx, dtype):
        f = lambda a: torch.as_tensor(a[idx], dtype=dtype)
        return f(self.origins), f(self.dirs), f(self.t_near), f(self.t_far), f(self.values)


def train_naf(model: NafModel, sparse: ProjectionSet, cfg: NafTrainConfig = NafTrainConfig(), progress=None):
    """Fit ``model`` to ``sparse`` in place; returns the per-iteration loss history."""
    if len(sparse) == 0:
        raise ValueError("train_naf needs at least one projection")
    if cfg.iters < 1:
        raise ValueError("iters must be >= 1")
    rays = RayTable(sparse, model.box)
    store = dc.ParameterStore.from_module(model, model.lr_for(cfg.lr_tables, cfg.lr_decoder))
    rng = dc.seeded_rng(cfg.seed, 2)
    history = []

    def loss_fn(o, d, tn, tf, target):
        return dc.squared_error(render_rays(model, o, d, tn, tf, cfg.n_sample), target)

    for it in range(cfg.iters):
        idx = rng.integers(0, len(rays), cfg.rays_per_batch)
        loss = dc.forward_backward(loss_fn, store, *rays.batch(idx, model.dtype))
        if not math.isfinite(loss):
            raise dc.NumericalError(
                f"NAF training diverged: non-finite loss at iteration {it} "
                f"(lr tables={cfg.lr_tables}, decoder={cfg.lr_decoder})"
            )
        decay = cfg.lr_final_factor ** (it / max(1, cfg.iters - 1))
        dc.adam_step(store, eps=cfg.adam_eps, lr_scale=decay)
        history.append(loss)
        if progress is not None:
            progress(it, loss)
    return history


@torch.no_grad()
def render_view(model: NafModel, geom: ConeBeamGeometry, theta: float, n_sample: int = 64, chunk: int = 4096):
    src, dirs, t_near, t_far, hit = view_rays(geom, theta, model.box)
    n = dirs.shape[0] * dirs.shape[1]
    t_far = np.where(hit, t_far, t_near)
    o = torch.as_tensor(np.broadcast_to(src, (n, 3)).copy(), dtype=model.dtype)
    d = torch.as_tensor(dirs.reshape(n, 3), dtype=model.dtype)
    tn = torch.as_tensor(t_near.reshape(n), dtype=model.dtype)
    tf = torch.as_tensor(t_far.reshape(n), dtype=model.dtype)
    out = np.empty(n)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        out[s:e] = render_rays(model, o[s:e], d[s:e], tn[s:e], tf[s:e], n_sample).numpy()
    return out.reshape(geom.det_rows, geom.det_cols)


def synthesize_projections(model: NafModel, geom_dense: ConeBeamGeometry, n_sample: int = 64,
                           dtype=torch.float32) -> ProjectionSet:
    """Render one projection per angle of ``geom_dense``.

    Rendering runs on a copy of the model cast to ``dtype``; single precision
    halves the cost and is ample for inference.
    """
    render_model = model if dtype == model.dtype else copy.deepcopy(model).to(dtype)
    data = np.stack([render_view(render_model, geom_dense, th, n_sample) for th in geom_dense.angles])
    return ProjectionSet(geom_dense, data.astype(np.float64))


def save_naf(path, model: NafModel, **meta):
    tensors = {k: v for k, v in model.state_dict().items() if not k.startswith("_")}
    return dc.save_checkpoint(path, tensors, {**model.config_dict(), **meta})


def load_naf(path) -> tuple[NafModel, dict]:
    tensors, meta = dc.load_checkpoint(path)
    if meta.get("kind") != "naf":
        raise ValueError(f"{path}: not a NAF checkpoint (kind={meta.get('kind')})")
    box = Box(tuple(meta["box"]["lo"]), tuple(meta["box"]["hi"]))
    model = NafModel(box, HashEncoderConfig(**meta["encoder"]), meta["width"], meta["depth"], meta["out_scale"])
    state = model.state_dict()
    for k, v in tensors.items():
        state[k] = torch.as_tensor(v, dtype=state[k].dtype)
    model.load_state_dict(state)
    return model, meta
