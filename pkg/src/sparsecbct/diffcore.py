"""Small differentiable-computation core shared by the neural field and the refiners.

Tensors and reverse-mode gradients come from torch; this module pins down the
handful of primitives the two networks use, a named parameter store with its
own Adam update, a counter-based seeded generator, a central finite-difference
gradient oracle and the checkpoint file format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"SCBCKPT\\0"
    u32       format version
    u32       header length in bytes
    header    UTF-8 JSON: {"meta": {...}, "tensors": [{"name": str, "shape": [int, ...]}, ...]}
    payload   float64 little-endian values of every tensor, concatenated in header order
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"SCBCKPT\0"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


def _expect(cond: bool, op: str, msg: str):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# --------------------------------------------------------------------------- primitives


def affine(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` (N, in), ``weight`` (out, in)."""
    _expect(x.shape[-1] == weight.shape[1], "affine", f"input width {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    if bias is not None:
        _expect(bias.shape == (weight.shape[0],), "affine", f"bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.linear(x, weight, bias)


def conv2d(x, weight, bias=None, padding: int | None = None):
    """Stride-1 2-D convolution with 'same' zero padding for odd kernels."""
    _expect(x.ndim == 4, "conv2d", f"expected (N, C, H, W) input, got {tuple(x.shape)}")
    _expect(x.shape[1] == weight.shape[1], "conv2d", f"{x.shape[1]} input channels != weight's {weight.shape[1]}")
    pad = weight.shape[-1] // 2 if padding is None else padding
    return F.conv2d(x, weight, bias, padding=pad)


def avg_pool2(x):
    """2x2 mean pooling; spatial dims must be even."""
    _expect(x.ndim == 4 and x.shape[-1] % 2 == 0 and x.shape[-2] % 2 == 0, "avg_pool2",
            f"need (N, C, even H, even W), got {tuple(x.shape)}")
    return F.avg_pool2d(x, 2)


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    _expect(x.ndim == 4, "upsample2", f"expected (N, C, H, W) input, got {tuple(x.shape)}")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def softplus(x):
    return F.softplus(x)


def silu(x):
    return F.silu(x)


def gather_rows(table, index):
    """``table[index]`` for a (T, F) table and integer index of any shape."""
    _expect(table.ndim == 2, "gather_rows", f"table must be 2-D, got {tuple(table.shape)}")
    return table[index]


def scatter_add_rows(values, index, n_rows: int):
    """Sum rows of ``values`` (N, F) into an (n_rows, F) buffer at ``index`` (N,)."""
    _expect(values.shape[0] == index.shape[0], "scatter_add_rows", "values and index lengths differ")
    out = values.new_zeros((n_rows, values.shape[1]))
    return out.index_add(0, index, values)


def trilinear_blend(corners, frac):
    """Blend corner features (N, 8, F) with trilinear weights of ``frac`` (N, 3).

    Corner ``c`` has offset bits ``(c >> 2 & 1, c >> 1 & 1, c & 1)`` along (x, y, z).
    """
    _expect(corners.ndim == 3 and corners.shape[1] == 8, "trilinear_blend", f"corners shape {tuple(corners.shape)}")
    _expect(frac.shape == (corners.shape[0], 3), "trilinear_blend", f"frac shape {tuple(frac.shape)}")
    return (corners * corner_weights(frac)[..., None]).sum(dim=1)


_CORNER_BITS = torch.tensor([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)])


def corner_weights(frac):
    bits = _CORNER_BITS.to(frac.device, frac.dtype)
    w = frac[:, None, :] * bits + (1 - frac[:, None, :]) * (1 - bits)
    return w.prod(dim=-1)


def squared_error(pred, target):
    """Mean of squared differences."""
    _expect(pred.shape == target.shape, "squared_error", f"{tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


# --------------------------------------------------------------------------- parameters


class ParameterStore:
    """Named parameters with their gradients, per-parameter learning rates and Adam state."""

    def __init__(self, params=None, lr: float = 1e-3):
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.lr: dict[str, float] = {}
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.step = 0
        for name, p in (params or {}).items():
            self.add(name, p, lr)

    @classmethod
    def from_module(cls, module: torch.nn.Module, lr_for=None, lr: float = 1e-3) -> "ParameterStore":
        store = cls()
        for name, p in module.named_parameters():
            store.add(name, p, lr_for(name) if lr_for else lr)
        return store

    def add(self, name: str, tensor: torch.Tensor, lr: float):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self.params[name] = tensor
        self.lr[name] = float(lr)
        self.m[name] = torch.zeros_like(tensor, requires_grad=False)
        self.v[name] = torch.zeros_like(tensor, requires_grad=False)

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def grad(self, name) -> torch.Tensor:
        g = self.params[name].grad
        return torch.zeros_like(self.params[name]) if g is None else g

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_values(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def to_numpy(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.detach().cpu().numpy().astype(np.float64)) for k, p in self.params.items())


def forward_backward(loss_fn, params: ParameterStore, *inputs):
    """Evaluate ``loss_fn(*inputs)`` and fill the store's gradients."""
    params.zero_grad()
    loss = loss_fn(*inputs)
    if loss.ndim != 0:
        raise ShapeError(f"forward_backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    loss.backward()
    for name, p in params.items():
        if p.grad is not None and p.grad.shape != p.shape:
            raise ShapeError(f"gradient of {name} has shape {tuple(p.grad.shape)}")
    return float(loss.detach())


@torch.no_grad()
def adam_step(params: ParameterStore, lr: float | None = None, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, lr_scale: float = 1.0):
    """Bias-corrected Adam update.

    ``lr`` overrides the per-parameter rates; ``lr_scale`` multiplies whichever
    rate applies (used for decay schedules).
    """
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = params.grad(name)
        m = params.m[name]
        v = params.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        rate = (params.lr[name] if lr is None else lr) * lr_scale
        p.sub_(rate * (m / c1) / ((v / c2).sqrt() + eps))


# --------------------------------------------------------------------------- randomness


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox (counter-based) generator keyed by ``seed`` and an optional stream path.

    The same ``(seed, *stream)`` yields the same sequence on every platform.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------- finite differences


def central_difference(f, tensor: torch.Tensor, h: float = 1e-4, indices=None) -> torch.Tensor:
    """Central-difference gradient of scalar ``f()`` w.r.t. entries of ``tensor``.

    ``indices`` restricts the probe to a subset of flat positions; the other
    entries of the returned gradient are NaN.
    """
    grad = torch.full_like(tensor, float("nan"), requires_grad=False)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    positions = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in positions:
            old = flat[i].item()
            flat[i] = old + h
            fp = float(f())
            flat[i] = old - h
            fm = float(f())
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """``max |a - n| / max |n|`` over the probed (non-NaN) entries."""
    a = torch.as_tensor(analytic).reshape(-1)
    n = torch.as_tensor(numeric).reshape(-1)
    mask = ~torch.isnan(n)
    a, n = a[mask], n[mask]
    scale = max(float(n.abs().max()), 1e-30)
    return float((a - n).abs().max()) / scale


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, tensors, meta: dict | None = None) -> Path:
    """Write named tensors (name -> array) plus JSON metadata."""
    path = Path(path)
    arrays = OrderedDict((k, np.asarray(torch.as_tensor(v).detach().cpu(), dtype="<f8")) for k, v in tensors.items())
    header = {"meta": meta or {}, "tensors": [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()]}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a).tobytes())
    return path


def load_checkpoint(path):
    """Return ``(OrderedDict name -> float64 ndarray, meta)``."""
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    out = OrderedDict()
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(entry["shape"]).copy()
        out[entry["name"]] = arr
        offset += 8 * n
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after payload")
    return out, header["meta"]
