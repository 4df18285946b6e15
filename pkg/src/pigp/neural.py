"""PGCAN mean functions, the Adam driver and the learning-rate schedule.

The network is a feature-grid encoder (a trainable tensor F0, one shared
3x3 convolution + tanh, cosine-warped multilinear interpolation summed over
a few diagonally offset repetitions) followed by a small gated decoder.
Gradients come from torch autograd; everything runs in float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
OUT_TRANSFORMS = ("identity", "softmax", "scaled")


class NonFiniteGradient(FloatingPointError):
    def __init__(self, message: str, breakdown: dict | None = None):
        super().__init__(message)
        self.breakdown = breakdown or {}


def vertex_counts(lengths: Sequence[float], res: int, minimum: int = 4) -> tuple[int, ...]:
    """Encoder vertices per axis: round(Res * L_a / max(L)) + 1, at least ``minimum``."""
    top = max(lengths)
    return tuple(max(minimum, int(math.floor(res * L / top + 0.5)) + 1) for L in lengths)


def cosine_map(t: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 - torch.cos(math.pi * t))


@dataclass(frozen=True)
class EncodePlan:
    """Precomputed gather indices and interpolation weights for a query set."""

    index: torch.Tensor  # (n_rep, n_corner, n_query) flat vertex ids
    weight: torch.Tensor  # (n_rep, n_corner, n_query)


class Pgcan(nn.Module):
    """Parametric grid convolutional attention network.

    Parameters
    ----------
    dims : spatial dimension (2 or 3)
    n_out : number of output components
    vertices : encoder vertex counts per axis
    n_rep, n_f : repetitions and feature channels (n_f even)
    width : decoder hidden width; defaults to n_f // 2
    n_layers : gated hidden layers
    out_transform : identity | softmax | scaled
    scale, offset : affine output map for ``scaled`` (y = offset + scale * raw)
    """

    def __init__(
        self,
        dims: int,
        n_out: int,
        vertices: Sequence[int],
        n_rep: int = 3,
        n_f: int = 128,
        width: int | None = None,
        n_layers: int = 3,
        out_transform: str = "identity",
        scale: float = 1.0,
        offset: float = 0.0,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if n_f % 2:
            raise ValueError(f"feature width must be even, got {n_f}")
        if out_transform not in OUT_TRANSFORMS:
            raise ValueError(f"unknown output transform {out_transform!r}")
        if len(vertices) != dims:
            raise ValueError("one vertex count per axis required")
        if any(v < 2 for v in vertices):
            raise ValueError("need at least 2 encoder vertices per axis")
        self.dims = dims
        self.n_out = n_out
        self.vertices = tuple(int(v) for v in vertices)
        self.n_rep = n_rep
        self.n_f = n_f
        self.half = n_f // 2
        self.width = width or self.half
        self.out_transform = out_transform
        self.scale = float(scale)
        self.offset = float(offset)

        g = generator
        self.F0 = nn.Parameter(torch.empty(n_rep, n_f, *self.vertices, dtype=DTYPE).uniform_(-1e-2, 1e-2, generator=g))
        conv_cls = nn.Conv2d if dims == 2 else nn.Conv3d
        self.conv = conv_cls(n_f, n_f, 3, padding=1, dtype=DTYPE)
        self.proj_in = self.proj_mod = None
        if self.width != self.half:
            self.proj_in = nn.Linear(self.half, self.width, dtype=DTYPE)
            self.proj_mod = nn.Linear(self.half, self.width, dtype=DTYPE)
        self.hidden = nn.ModuleList(nn.Linear(self.width, self.width, dtype=DTYPE) for _ in range(n_layers))
        self.gates = nn.ModuleList(nn.Linear(self.width, self.width, dtype=DTYPE) for _ in range(n_layers))
        self.head = nn.Linear(self.width, n_out, dtype=DTYPE)
        self._init_weights(g)
        self._plans: dict = {}

    def _init_weights(self, g):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d, nn.Conv3d)):
                fan_out = m.weight.shape[0] * int(np.prod(m.weight.shape[2:]))
                fan_in = m.weight.shape[1] * int(np.prod(m.weight.shape[2:]))
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                with torch.no_grad():
                    m.weight.uniform_(-bound, bound, generator=g)
                    m.bias.zero_()

    # ------------------------------------------------------------ encoder

    def plan(self, x) -> EncodePlan:
        """Cell lookup for normalized queries ``x`` in [0, 1]^dims."""
        x = torch.as_tensor(np.asarray(x), dtype=DTYPE)
        V = torch.tensor(self.vertices, dtype=DTYPE)
        corners = torch.tensor(
            [[(c >> a) & 1 for a in range(self.dims)] for c in range(2 ** self.dims)], dtype=torch.long
        )
        strides = torch.tensor([int(np.prod(self.vertices[a + 1:])) for a in range(self.dims)], dtype=torch.long)
        idx, wts = [], []
        for k in range(self.n_rep):
            off = k / (self.n_rep + 1)
            # shifted lattice still spans the whole unit cube
            g = off + x * (V - 1 - off)
            cell = torch.clamp(torch.floor(g).long(), min=0)
            cell = torch.minimum(cell, (V - 2).long())
            t = cosine_map(g - cell)
            ik, wk = [], []
            for c in corners:
                vid = ((cell + c) * strides).sum(dim=1)
                w = torch.prod(torch.where(c.bool(), t, 1.0 - t), dim=1)
                ik.append(vid)
                wk.append(w)
            idx.append(torch.stack(ik))
            wts.append(torch.stack(wk))
        return EncodePlan(torch.stack(idx), torch.stack(wts))

    def feature_map(self) -> torch.Tensor:
        return torch.tanh(self.conv(self.F0))

    def encode(self, x=None, plan: EncodePlan | None = None, fmap: torch.Tensor | None = None) -> torch.Tensor:
        if plan is None:
            plan = self.plan(x)
        if fmap is None:
            fmap = self.feature_map()
        flat = fmap.reshape(self.n_rep, self.n_f, -1).transpose(1, 2)  # (rep, V, f)
        out = 0.0
        for k in range(self.n_rep):
            feats = flat[k][plan.index[k]]  # (corner, q, f)
            out = out + (plan.weight[k].unsqueeze(-1) * feats).sum(dim=0)
        return out

    # ------------------------------------------------------------ decoder

    def decode(self, feats: torch.Tensor) -> torch.Tensor:
        f1, f2 = feats[:, : self.half], feats[:, self.half:]
        if self.proj_in is not None:
            f1, f2 = self.proj_in(f1), self.proj_mod(f2)
        h = f1
        for lin, gate in zip(self.hidden, self.gates):
            a = torch.tanh(lin(h))
            z = torch.sigmoid(gate(h))
            h = (1.0 - z) * a + z * f2
        return self.head(h)

    def transform(self, raw: torch.Tensor) -> torch.Tensor:
        if self.out_transform == "softmax":
            return torch.softmax(raw, dim=-1)
        if self.out_transform == "scaled":
            return self.offset + self.scale * raw
        return raw

    def forward(self, x=None, plan: EncodePlan | None = None, fmap: torch.Tensor | None = None) -> torch.Tensor:
        return self.transform(self.decode(self.encode(x, plan, fmap)))

    def raw(self, x=None, plan=None, fmap=None) -> torch.Tensor:
        return self.decode(self.encode(x, plan, fmap))

    def cached_plan(self, key, x) -> EncodePlan:
        p = self._plans.get(key)
        if p is None:
            p = self._plans[key] = self.plan(x)
        return p


def init_temperature_bias(net: Pgcan, prescribed: Sequence[float] | np.ndarray | None, x_sample) -> Pgcan:
    """Shift the head bias so the mean initial output equals the mean prescription."""
    if prescribed is None or len(np.atleast_1d(prescribed)) == 0:
        return net
    target = float(np.mean(prescribed))
    with torch.no_grad():
        mean = float(net(x_sample).mean())
        scale = net.scale if net.out_transform == "scaled" else 1.0
        net.head.bias.add_((target - mean) / scale)
    return net


# ---------------------------------------------------------------- optimizer


def learning_rate(epoch: int, n_tol: int, lr0: float = 1e-3, factor: float = 0.75,
                  stages: Sequence[float] = (0.2, 0.4, 0.6, 0.8)) -> float:
    drops = sum(1 for s in stages if epoch >= s * n_tol)
    return lr0 * factor ** drops


def make_adam(params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def adam_step(opt: torch.optim.Adam, lr: float, breakdown: dict | None = None) -> None:
    """Apply one Adam update at ``lr`` after checking every gradient is finite."""
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradient("non-finite gradient", breakdown)
        group["lr"] = lr
    opt.step()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, nets: dict[str, nn.Module], meta: dict) -> None:
    """Write ``path`` (.npz) plus a JSON sidecar naming every tensor and shape."""
    path = Path(path)
    arrays, names = {}, []
    for prefix, net in nets.items():
        for name, t in net.state_dict().items():
            key = f"{prefix}.{name}"
            arrays[key] = t.detach().cpu().numpy()
            names.append({"name": key, "shape": list(t.shape), "dtype": str(arrays[key].dtype)})
    np.savez(path, **arrays)
    sidecar = dict(meta, tensors=names)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path, nets: dict[str, nn.Module]) -> dict:
    path = Path(path)
    data = np.load(path)
    for prefix, net in nets.items():
        state = {k[len(prefix) + 1:]: torch.from_numpy(data[k]) for k in data.files if k.startswith(prefix + ".")}
        net.load_state_dict(state)
    return json.loads(path.with_suffix(".json").read_text())
