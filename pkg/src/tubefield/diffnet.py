"""Differentiable estimator of the velocity potential.

    phi(x, t) = xi * Out( block_nb( ... block_1( Snake(In( ffe( x~, t~ ))))))

with ``x~ = 2x/L - 1``, ``t~ = 2t/T - 1``, a frozen Gaussian Fourier-feature
embedding and residual blocks ``y -> y + g(y)`` where ``g`` is a stack of
``layers_per_block`` fully connected layers, each followed by Snake.

Input derivatives are exact: they are carried through every layer as
:class:`~tubefield.jets.Jet2` values.  Parameter gradients of losses built
from those jets come from torch reverse mode.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import jets
from .jets import Jet2
from .physics import DEFAULT_FREQUENCY

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"TFNC"
CHECKPOINT_VERSION = 1
PAPER_PARAM_COUNT = 643_401


class NumericError(FloatingPointError):
    """A non-finite value appeared in a forward pass or gradient."""


class CorruptCheckpoint(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    n_f: int = 200
    n_b: int = 5
    layers_per_block: int = 3
    ffe_sigma: float = 0.1
    ffe_size: int = 50
    xi: float = 1e-2
    snake_a: float = 1.0
    seed: int = 0
    length: float = 1.0
    period: float = 1.0 / DEFAULT_FREQUENCY
    activation: str = "snake"  # "identity" is for tests only

    def __post_init__(self):
        if self.n_f < 1 or self.n_b < 0 or self.layers_per_block < 1 or self.ffe_size < 0:
            raise ValueError("n_f, layers_per_block >= 1 and n_b, ffe_size >= 0 required")
        if not (self.ffe_sigma > 0 and self.xi > 0 and self.snake_a > 0):
            raise ValueError("ffe_sigma, xi and snake_a must be positive")
        if self.activation not in ("snake", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def feature_dim(self) -> int:
        # sin and cos per frequency per coordinate; ffe_size == 0 feeds (x~, t~) directly
        return 4 * self.ffe_size if self.ffe_size else 2


@dataclass
class NetworkParams:
    config: NetworkConfig
    ffe: torch.Tensor  # (ffe_size, 2), column j holds the frequencies of coordinate j
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def tensors(self) -> list:
        """Trainable tensors in declaration order (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def count(self) -> int:
        return sum(t.numel() for t in self.tensors())

    def requires_grad_(self, flag=True):
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def detach(self) -> "NetworkParams":
        return NetworkParams(
            self.config,
            self.ffe.clone(),
            [w.detach().clone() for w in self.weights],
            [b.detach().clone() for b in self.biases],
        )

    def flat(self) -> torch.Tensor:
        return torch.cat([t.detach().reshape(-1) for t in self.tensors()])

    def with_flat(self, vec: torch.Tensor) -> "NetworkParams":
        out, k = [], 0
        for t in self.tensors():
            n = t.numel()
            out.append(vec[k:k + n].reshape(t.shape).clone())
            k += n
        return NetworkParams(self.config, self.ffe, out[0::2], out[1::2])

    def equal(self, other: "NetworkParams") -> bool:
        return torch.equal(self.ffe, other.ffe) and all(
            torch.equal(a, b) for a, b in zip(self.tensors(), other.tensors())
        )


def layer_shapes(cfg: NetworkConfig) -> list[tuple[int, int]]:
    shapes = [(cfg.n_f, cfg.feature_dim)]
    shapes += [(cfg.n_f, cfg.n_f)] * (cfg.n_b * cfg.layers_per_block)
    shapes.append((1, cfg.n_f))
    return shapes


def init_params(cfg: NetworkConfig) -> NetworkParams:
    """Glorot-uniform weights, zero biases, N(0, sigma^2) Fourier frequencies."""
    rng = np.random.default_rng(cfg.seed)
    ffe = rng.normal(0.0, cfg.ffe_sigma, size=(cfg.ffe_size, 2))
    weights, biases = [], []
    for fan_out, fan_in in layer_shapes(cfg):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(torch.tensor(rng.uniform(-limit, limit, size=(fan_out, fan_in)), dtype=DTYPE))
        biases.append(torch.zeros(fan_out, dtype=DTYPE))
    params = NetworkParams(cfg, torch.tensor(ffe, dtype=DTYPE), weights, biases)
    if (cfg.n_f, cfg.n_b, cfg.layers_per_block, cfg.ffe_size) == (200, 5, 3, 50):
        assert params.count() == PAPER_PARAM_COUNT, params.count()
    return params


def normalize_inputs(x, t, length, period):
    return 2.0 * x / length - 1.0, 2.0 * t / period - 1.0


def ffe_encode(xn, tn, ffe):
    """[sin(2 pi f x~), cos(2 pi f x~), sin(2 pi f t~), cos(2 pi f t~)] per point.

    ``xn``/``tn`` are column vectors (or jets of them); ``ffe`` is
    ``(ffe_size, 2)``.  An empty frequency table passes ``(x~, t~)`` through.
    """
    if ffe.shape[0] == 0:
        return jets.cat([xn, tn], dim=-1)
    ax = (2 * math.pi) * (xn * ffe[:, 0])
    at = (2 * math.pi) * (tn * ffe[:, 1])
    return jets.cat([jets.sin(ax), jets.cos(ax), jets.sin(at), jets.cos(at)], dim=-1)


def snake(z, a=1.0):
    return jets.snake(z, a)


def _activate(z, cfg):
    return jets.snake(z, cfg.snake_a) if cfg.activation == "snake" else z


def _trunk(params: NetworkParams, feats):
    cfg = params.config
    W, B = params.weights, params.biases
    h = _activate(jets.linear(feats, W[0], B[0]), cfg)
    k = 1
    for _ in range(cfg.n_b):
        y = h
        for _ in range(cfg.layers_per_block):
            y = _activate(jets.linear(y, W[k], B[k]), cfg)
            k += 1
        h = h + y
    out = jets.linear(h, W[k], B[k])
    return out[:, 0] * cfg.xi


def _as_column(v):
    if not isinstance(v, torch.Tensor):
        v = torch.as_tensor(np.asarray(v, dtype=float), dtype=DTYPE)
    return v.reshape(-1, 1).to(DTYPE)


def _check_finite(value, what):
    comps = [value]
    while comps:
        c = comps.pop()
        if isinstance(c, Jet2):
            comps += [c.v, c.d1] + ([c.d2] if c.d2 is not None else [])
        elif c is not None and not torch.isfinite(c).all():
            raise NumericError(f"non-finite values in {what}")


def forward(params: NetworkParams, x, t) -> torch.Tensor:
    cfg = params.config
    xn, tn = normalize_inputs(_as_column(x), _as_column(t), cfg.length, cfg.period)
    out = _trunk(params, ffe_encode(xn, tn, params.ffe))
    _check_finite(out, "network output")
    return out


def input_features(params: NetworkParams, x, t, direction: str, order: int = 2) -> Jet2:
    """Jets of the Fourier features along ``direction``.

    They depend only on the points and the frozen frequencies, so training
    computes them once per collocation set.
    """
    cfg = params.config
    xn, tn = normalize_inputs(_as_column(x), _as_column(t), cfg.length, cfg.period)
    if direction == "x":
        xj = Jet2.variable(xn, 2.0 / cfg.length, order)
        tj = Jet2.constant(tn, order)
    elif direction == "t":
        xj = Jet2.constant(xn, order)
        tj = Jet2.variable(tn, 2.0 / cfg.period, order)
    else:
        raise ValueError(f"direction must be 'x' or 't', got {direction!r}")
    return ffe_encode(xj, tj, params.ffe)


def trunk(params: NetworkParams, feats):
    """Network body applied to precomputed (jets of) features."""
    out = _trunk(params, feats)
    _check_finite(out, "forward pass")
    return out


def forward_with_jets(params: NetworkParams, x, t, direction: str, order: int = 2) -> Jet2:
    """Value and exact first/second derivative of phi along physical x or t."""
    return trunk(params, input_features(params, x, t, direction, order))


def forward_mixed(params: NetworkParams, x, t) -> dict:
    """phi, phi_x, phi_t, phi_xt, phi_tt from a t-jet whose entries are x-jets."""
    cfg = params.config
    xn, tn = normalize_inputs(_as_column(x), _as_column(t), cfg.length, cfg.period)
    xj = Jet2.constant(Jet2.variable(xn, 2.0 / cfg.length, order=1), order=2)
    tj = Jet2.variable(Jet2.constant(tn, order=1), 2.0 / cfg.period, order=2)
    out = _trunk(params, ffe_encode(xj, tj, params.ffe))
    _check_finite(out, "mixed-derivative forward pass")
    return {
        "phi": out.v.v,
        "phi_x": out.v.d1,
        "phi_t": out.d1.v,
        "phi_xt": out.d1.d1,
        "phi_tt": out.d2.v,
    }


@dataclass
class FieldEval:
    """phi and its input derivatives at a batch of points.

    Pressure and volume velocity are always derived from these, never stored.
    """

    phi: torch.Tensor
    phi_x: torch.Tensor = None
    phi_t: torch.Tensor = None
    phi_xx: torch.Tensor = None
    phi_tt: torch.Tensor = None
    phi_xt: torch.Tensor = None

    def pressure(self, R, A, rho):
        return R * A * self.phi + rho * self.phi_t

    def volume_velocity(self, A):
        return -A * self.phi_x

    def pressure_t(self, R, A, rho):
        return R * A * self.phi_t + rho * self.phi_tt

    def volume_velocity_t(self, A):
        return -A * self.phi_xt


def evaluate_field(params: NetworkParams, x, t, need=("x", "t"), order: int = 2) -> FieldEval:
    """Run the requested directional jet passes and collect a FieldEval."""
    ev = FieldEval(phi=None)
    for d in need:
        jet = forward_with_jets(params, x, t, d, order)
        ev.phi = jet.v
        setattr(ev, f"phi_{d}", jet.d1)
        if order == 2:
            setattr(ev, f"phi_{d}{d}", jet.d2)
    return ev


def evaluate_mixed(params: NetworkParams, x, t) -> FieldEval:
    return FieldEval(**forward_mixed(params, x, t))


def loss_gradient(tensors: list, loss: torch.Tensor, terms: dict | None = None) -> list:
    """Exact gradient of a scalar ``loss`` w.r.t. ``tensors``.

    ``terms`` (name -> weighted partial loss) is only used to attribute a
    non-finite result to the offending term.
    """
    if not torch.isfinite(loss):
        bad = [k for k, v in (terms or {}).items() if not torch.isfinite(v)]
        raise NumericError(f"non-finite loss (terms: {', '.join(bad) or 'unknown'})")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(tensors, grads)]
    for g in grads:
        if not torch.isfinite(g).all():
            bad = [k for k, v in (terms or {}).items()]
            raise NumericError(f"non-finite gradient (loss terms: {', '.join(bad)})")
    return grads


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: NetworkParams, path, extras: dict | None = None, meta: dict | None = None):
    """Write ``params`` (and optional extra float64 tensors) to ``path``.

    Layout, all little-endian::

        magic  b"TFNC"          4 bytes
        version                 uint32
        seed                    uint64
        config length, config   uint32 + UTF-8 JSON
        meta length, meta       uint32 + UTF-8 JSON (extra tensor names/shapes)
        sha256                  32 bytes over config + meta + payload
        payload                 float64 tensors: ffe, W0, b0, ..., extras
    """
    extras = extras or {}
    cfg_blob = json.dumps(asdict(params.config), sort_keys=True).encode()
    meta = dict(meta or {})
    meta["extras"] = [[k, list(np.shape(v))] for k, v in extras.items()]
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    chunks = [params.ffe] + params.tensors() + [torch.as_tensor(v, dtype=DTYPE) for v in extras.values()]
    payload = b"".join(
        np.ascontiguousarray(c.detach().cpu().numpy(), dtype="<f8").tobytes() for c in chunks
    )
    digest = hashlib.sha256(cfg_blob + meta_blob + payload).digest()
    header = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, params.config.seed)
    Path(path).write_bytes(
        header
        + struct.pack("<I", len(cfg_blob)) + cfg_blob
        + struct.pack("<I", len(meta_blob)) + meta_blob
        + digest + payload
    )


def load_checkpoint(path, with_extras: bool = False):
    raw = Path(path).read_bytes()
    try:
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CorruptCheckpoint("bad magic")
        version, seed = struct.unpack_from("<IQ", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
        pos = 16
        (n,) = struct.unpack_from("<I", raw, pos)
        cfg_blob = raw[pos + 4:pos + 4 + n]
        pos += 4 + n
        (m,) = struct.unpack_from("<I", raw, pos)
        meta_blob = raw[pos + 4:pos + 4 + m]
        pos += 4 + m
        digest = raw[pos:pos + 32]
        payload = raw[pos + 32:]
    except struct.error as exc:
        raise CorruptCheckpoint(f"truncated header: {exc}") from None
    if hashlib.sha256(cfg_blob + meta_blob + payload).digest() != digest:
        raise CorruptCheckpoint("checksum mismatch")
    cfg = NetworkConfig(**json.loads(cfg_blob))
    meta = json.loads(meta_blob)
    values = np.frombuffer(payload, dtype="<f8")
    shapes = [(cfg.ffe_size, 2)]
    for shape in layer_shapes(cfg):
        shapes += [shape, (shape[0],)]
    shapes += [tuple(s) for _, s in meta["extras"]]
    if values.size != sum(int(np.prod(s)) for s in shapes):
        raise CorruptCheckpoint("payload size does not match the stored configuration")
    arrays, k = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(torch.tensor(values[k:k + n].reshape(s), dtype=DTYPE))
        k += n
    n_layers = len(layer_shapes(cfg))
    tensors = arrays[1:1 + 2 * n_layers]
    params = NetworkParams(cfg, arrays[0], tensors[0::2], tensors[1::2])
    if seed != cfg.seed:
        raise CorruptCheckpoint("seed field disagrees with the stored configuration")
    if not with_extras:
        return params
    extras = {name: arr for (name, _), arr in zip(meta["extras"], arrays[1 + 2 * n_layers:])}
    return params, extras, meta
