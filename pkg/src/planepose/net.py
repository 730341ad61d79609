"""Convolutional pose regressor with multiple geometric output heads.

The backbone is ``len(channels)`` blocks of two 3x3 conv -> instance norm ->
ReLU layers followed by 2x2 max pooling, then adaptive average pooling and two
fully connected layers producing the embedding ``z``.

Heads read ``z``:

- ``direct`` emits the 9 reference-point coordinates,
- ``quaternion`` (4), ``axis_angle`` (3), ``euler`` (3) and ``matrix`` (9)
  emit rotation parameters that are converted to a matrix and combined with a
  shared translation and log-scale to move the canonical reference points,
- one log-variance head (9 outputs) per pose head when ``variance`` is set,
- Normal-Inverse-Gamma evidence (27 outputs) when ``evidential`` is set.

Positions and translations are produced in units of ``output_scale`` voxels,
so a zero output means the volume center and a unit output the grid edge.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .ensemble import fuse_mean
from .errors import ConfigError, InvalidInputError
from .geom import GRID_HALF_EXTENT, PlanePose, canonical_points

log = logging.getLogger(__name__)

ROTATION_HEADS = {"quaternion": 4, "axis_angle": 3, "euler": 3, "matrix": 9}
HEAD_ORDER = ("quaternion", "axis_angle", "euler", "matrix", "direct")
METHODS = ("planeinvol", "mve", "qaerts", "edl", "mcd", "de")


@dataclass(frozen=True)
class ModelConfig:
    in_size: int = 64
    channels: tuple = (8, 16, 32, 64)
    pool_size: int = 4
    hidden: int = 2048
    embedding_dim: int = 128
    heads: tuple = ("direct",)
    variance: bool = False
    evidential: bool = False
    dropout: float = 0.0
    output_scale: float = GRID_HALF_EXTENT
    logvar_clamp: float = 10.0
    log_scale_bound: float = float(np.log(4.0))

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "heads", tuple(self.heads))
        if not self.heads:
            raise ConfigError("head set must not be empty")
        unknown = set(self.heads) - set(HEAD_ORDER)
        if unknown:
            raise ConfigError(f"unknown heads: {sorted(unknown)}")
        if self.embedding_dim <= 0 or self.hidden <= 0 or not self.channels:
            raise ConfigError("embedding dim, hidden width and channel list must be positive")
        if self.variance and self.evidential:
            raise ConfigError("a model is either mean-variance or evidential, not both")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if self.in_size < self.pool_size or self.in_size % self.pool_size:
            raise ConfigError("input size must be a multiple of the pool size")
        if self.log_scale_bound <= 0:
            raise ConfigError("log_scale_bound must be positive")

    @property
    def conv_blocks(self) -> int:
        return len(self.channels)

    @property
    def ordered_heads(self) -> tuple:
        return tuple(h for h in HEAD_ORDER if h in self.heads)

    @property
    def has_rotation_heads(self) -> bool:
        return any(h in ROTATION_HEADS for h in self.heads)

    @classmethod
    def for_method(cls, method: str, **overrides) -> "ModelConfig":
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
        kw = {}
        if method == "planeinvol":
            kw = dict(heads=("direct",))
        elif method in ("mve", "de"):
            kw = dict(heads=("direct",), variance=True)
        elif method == "mcd":
            kw = dict(heads=("direct",), variance=True, dropout=0.1)
        elif method == "qaerts":
            kw = dict(heads=HEAD_ORDER, variance=True)
        elif method == "edl":
            kw = dict(heads=("direct",), evidential=True)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def full_scale(cls, method: str = "qaerts") -> "ModelConfig":
        """VGG-sized variant (ten conv pairs, 512-d embedding); never trained here."""
        return cls.for_method(
            method,
            in_size=160,
            channels=(64, 128, 256, 512, 512, 512, 512, 512, 512, 512),
            pool_size=2,
            hidden=1024,
            embedding_dim=512,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "channels": tuple(d["channels"]), "heads": tuple(d["heads"])})


@dataclass
class HeadPrediction:
    pose: PlanePose
    variance: np.ndarray | None = None


@dataclass
class EnsemblePrediction:
    heads: dict
    fused_mean: PlanePose
    fused_var: np.ndarray | None


@dataclass
class Outputs:
    """Raw forward pass results; every pose/variance tensor is ``(B, 9)``."""

    z: Tensor
    poses: dict
    variances: dict = field(default_factory=dict)
    mean: Tensor | None = None
    var: Tensor | None = None
    nig: tuple | None = None  # (gamma, nu, alpha, beta) in output_scale units


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------


def _head_sizes(cfg: ModelConfig) -> list[tuple[str, int]]:
    out = []
    for h in cfg.ordered_heads:
        out.append((f"head.{h}", 9 if h == "direct" else ROTATION_HEADS[h]))
    if cfg.has_rotation_heads:
        out.append(("head.shared", 4))  # translation (3) + log scale (1)
    if cfg.variance:
        out.extend((f"logvar.{h}", 9) for h in cfg.ordered_heads)
    if cfg.evidential:
        out.append(("evidence", 27))
    return out


def _pooled_sizes(cfg: ModelConfig) -> list[int]:
    """Spatial size entering each block; pooling stops once it would undercut pool_size."""
    sizes, s = [], cfg.in_size
    for _ in cfg.channels:
        sizes.append(s)
        if s % 2 == 0 and s // 2 >= cfg.pool_size:
            s //= 2
    sizes.append(s)
    return sizes


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    shapes, cin = [], 1
    for b, cout in enumerate(cfg.channels):
        shapes.append((f"conv{b}.0", (cout, cin, 3, 3)))
        shapes.append((f"conv{b}.1", (cout, cout, 3, 3)))
        cin = cout
    flat = cin * cfg.pool_size**2
    shapes += [
        ("fc1.weight", (cfg.hidden, flat)),
        ("fc1.bias", (cfg.hidden,)),
        ("fc2.weight", (cfg.embedding_dim, cfg.hidden)),
        ("fc2.bias", (cfg.embedding_dim,)),
    ]
    for name, n in _head_sizes(cfg):
        shapes.append((f"{name}.weight", (n, cfg.embedding_dim)))
        shapes.append((f"{name}.bias", (n,)))
    return shapes


def count_params(cfg: ModelConfig) -> dict:
    """Trainable scalar counts with a per-head breakdown.

    ``overhead`` is what the extra heads cost on top of a single direct head
    with the same backbone.
    """
    sizes = {name: int(np.prod(shape)) for name, shape in param_shapes(cfg)}
    backbone = sum(v for k, v in sizes.items() if k.startswith("conv"))
    fc = sum(v for k, v in sizes.items() if k.startswith("fc"))
    heads = {}
    for name, _ in _head_sizes(cfg):
        heads[name] = sizes[f"{name}.weight"] + sizes[f"{name}.bias"]
    total = sum(sizes.values())
    base = 9 * (cfg.embedding_dim + 1)
    overhead = sum(heads.values()) - base
    return {
        "backbone": backbone,
        "fc": fc,
        "heads": heads,
        "total": total,
        "overhead": overhead,
        "overhead_fraction": overhead / total,
    }


# ---------------------------------------------------------------------------
# differentiable geometry
# ---------------------------------------------------------------------------


def _rows(*cols):
    """Stack scalar columns ``(B,)`` into ``(B, 3, 3)`` given 9 entries row-major."""
    b = cols[0].shape[0]
    return ag.stack(cols, axis=1).reshape(b, 3, 3)


def quat_matrix(q: Tensor) -> Tensor:
    n2 = (q * q).sum(axis=1)
    bad = n2.data <= 1e-24
    if bad.any():
        log.warning("quaternion head produced %d zero vectors; using identity", int(bad.sum()))
        q = ag.replace_rows(q, bad, np.array([1.0, 0.0, 0.0, 0.0]))
    q = q / ag.sqrt((q * q).sum(axis=1, keepdims=True))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return _rows(
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    )  # fmt: skip


def axisangle_matrix(r: Tensor) -> Tensor:
    b = r.shape[0]
    a, c = ag.rodrigues_coeffs((r * r).sum(axis=1))
    x, y, z = r[:, 0], r[:, 1], r[:, 2]
    zero = Tensor(np.zeros(b, dtype=r.dtype))
    k = _rows(zero, -z, y, z, zero, -x, -y, x, zero)
    eye = np.eye(3, dtype=r.dtype)
    return eye + a.reshape(b, 1, 1) * k + c.reshape(b, 1, 1) * (k @ k)


def euler_matrix(e: Tensor) -> Tensor:
    b = e.shape[0]
    one = Tensor(np.ones(b, dtype=e.dtype))
    zero = Tensor(np.zeros(b, dtype=e.dtype))
    cx, sx = ag.cos(e[:, 0]), ag.sin(e[:, 0])
    cy, sy = ag.cos(e[:, 1]), ag.sin(e[:, 1])
    cz, sz = ag.cos(e[:, 2]), ag.sin(e[:, 2])
    rx = _rows(one, zero, zero, zero, cx, -sx, zero, sx, cx)
    ry = _rows(cy, zero, sy, zero, one, zero, -sy, zero, cy)
    rz = _rows(cz, -sz, zero, sz, cz, zero, zero, zero, one)
    return rz @ (ry @ rx)


def gram_schmidt(raw9: Tensor) -> Tensor:
    b = raw9.shape[0]
    m = raw9.data.reshape(b, 3, 3)
    a1, a2 = m[:, :, 0], m[:, :, 1]
    n1, n2 = np.linalg.norm(a1, axis=1), np.linalg.norm(a2, axis=1)
    safe1 = np.where(n1 > 0, n1, 1.0)
    u2 = a2 - np.sum(a1 * a2, axis=1, keepdims=True) * a1 / safe1[:, None] ** 2
    bad = (n1 < 1e-9) | (n2 < 1e-9) | (np.linalg.norm(u2, axis=1) < 1e-9 * np.maximum(n2, 1e-300))
    if bad.any():
        log.warning("matrix head produced %d degenerate blocks; using identity", int(bad.sum()))
        raw9 = ag.replace_rows(raw9, bad, np.eye(3).reshape(9))
    m = raw9.reshape(b, 3, 3)
    a1, a2 = m[:, :, 0], m[:, :, 1]
    c1 = a1 / ag.sqrt((a1 * a1).sum(axis=1, keepdims=True))
    u2 = a2 - (c1 * a2).sum(axis=1, keepdims=True) * c1
    c2 = u2 / ag.sqrt((u2 * u2).sum(axis=1, keepdims=True))
    c3 = ag.stack(
        [
            c1[:, 1] * c2[:, 2] - c1[:, 2] * c2[:, 1],
            c1[:, 2] * c2[:, 0] - c1[:, 0] * c2[:, 2],
            c1[:, 0] * c2[:, 1] - c1[:, 1] * c2[:, 0],
        ],
        axis=1,
    )
    return ag.stack([c1, c2, c3], axis=2)


ROTATION_FNS = {
    "quaternion": quat_matrix,
    "axis_angle": axisangle_matrix,
    "euler": euler_matrix,
    "matrix": gram_schmidt,
}


def transform_points(rot: Tensor, t: Tensor, scale: Tensor, half_extent: float) -> Tensor:
    """``s * R @ p + t`` for the canonical points; returns ``(B, 9)``."""
    b = rot.shape[0]
    pts = canonical_points(half_extent).astype(rot.dtype)
    moved = ag.matmul(pts, rot.transpose(0, 2, 1))
    return (scale.reshape(b, 1, 1) * moved + t.reshape(b, 1, 3)).reshape(b, 9)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.training = False
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in param_shapes(config):
            self.params[name] = Tensor(self._init(name, shape, rng), requires_grad=True, name=name)

    def _init(self, name, shape, rng):
        if name.endswith(".bias"):
            val = np.zeros(shape)
            if name == "head.matrix.bias":
                val = np.eye(3).reshape(9)
            elif name == "head.quaternion.bias":
                val = np.array([1.0, 0.0, 0.0, 0.0])
            elif name == "head.direct.bias":
                # start at the canonical plane, like the rotation heads
                val = canonical_points(1.0).reshape(9)
            return val.astype(self.dtype)
        fan_in = int(np.prod(shape[1:]))
        if name.startswith(("head.", "logvar.", "evidence")):
            bound = 1.0 / np.sqrt(fan_in)
        else:
            bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, shape).astype(self.dtype)

    # -- parameter access ----------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise InvalidInputError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(self.dtype)

    # -- forward -------------------------------------------------------------
    def _as_input(self, images) -> Tensor:
        if isinstance(images, Tensor):
            x = images
        else:
            arr = np.asarray(images)
            if arr.ndim == 2:
                arr = arr[None]
            if arr.ndim == 3:
                arr = arr[:, None]
            x = Tensor(arr.astype(self.dtype))
        if x.ndim != 4 or x.shape[0] == 0:
            raise InvalidInputError(f"expected a non-empty image batch, got shape {x.shape}")
        size = self.config.in_size
        if x.shape[1:] != (1, size, size):
            raise InvalidInputError(f"images must be {size}x{size}, got {x.shape[2:]}")
        return x

    def features(self, images, rng=None, mc=False) -> Tensor:
        cfg = self.config
        p = self.params
        x = self._as_input(images)
        sizes = _pooled_sizes(cfg)
        for b in range(cfg.conv_blocks):
            for j in range(2):
                x = ag.relu(ag.instance_norm(ag.conv2d(x, p[f"conv{b}.{j}"])))
            if sizes[b + 1] < sizes[b]:
                x = ag.maxpool2x2(x)
        x = ag.adaptive_avg_pool(x, cfg.pool_size)
        x = x.reshape(x.shape[0], -1)
        drop = cfg.dropout > 0 and (self.training or mc)
        if drop and rng is None:
            raise ConfigError("dropout is active but no random generator was given")
        x = ag.relu(ag.linear(x, p["fc1.weight"], p["fc1.bias"]))
        if drop:
            x = ag.dropout(x, cfg.dropout, rng)
        x = ag.relu(ag.linear(x, p["fc2.weight"], p["fc2.bias"]))
        if drop:
            x = ag.dropout(x, cfg.dropout, rng)
        return x

    def _head(self, z, name):
        return ag.linear(z, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def variance_heads(self, z: Tensor) -> tuple[dict, Tensor]:
        """Per-head variances (clamped log-variance, exponentiated) and their mean."""
        c = self.config.logvar_clamp
        variances = {h: ag.exp(ag.clip(self._head(z, f"logvar.{h}"), -c, c)) for h in self.config.ordered_heads}
        return variances, fuse_mean(list(variances.values()))

    def heads(self, z: Tensor) -> Outputs:
        cfg = self.config
        scale = cfg.output_scale
        poses = {}
        if cfg.has_rotation_heads:
            shared = self._head(z, "head.shared")
            t = shared[:, 0:3] * scale
            # soft bound on log s: identity near zero, saturating at +-log_scale_bound
            b = cfg.log_scale_bound
            s = ag.exp(ag.tanh(shared[:, 3] * (1.0 / b)) * b)
        for h in cfg.ordered_heads:
            raw = self._head(z, f"head.{h}")
            if h == "direct":
                poses[h] = raw * scale
            else:
                poses[h] = transform_points(ROTATION_FNS[h](raw), t, s, scale)
        out = Outputs(z=z, poses=poses)
        names = list(poses)
        out.mean = fuse_mean([poses[h] for h in names])
        if cfg.variance:
            out.variances, out.var = self.variance_heads(z)
        if cfg.evidential:
            ev = self._head(z, "evidence")
            nu = ag.softplus(ev[:, 0:9])
            alpha = ag.softplus(ev[:, 9:18]) + 1.0
            beta = ag.softplus(ev[:, 18:27])
            out.nig = (poses["direct"] / scale, nu, alpha, beta)
            out.var = beta / (alpha - 1.0) * (scale * scale)
        return out

    def forward(self, images, rng=None, mc=False) -> Outputs:
        return self.heads(self.features(images, rng=rng, mc=mc))

    __call__ = forward

    # -- inference -----------------------------------------------------------
    def predict_moments(self, images, rng=None, mc=False) -> tuple[np.ndarray, np.ndarray]:
        """Fused mean ``(B, 9)`` and variance ``(B, 9)`` as float64 arrays.

        Models without a variance head report zero variance.
        """
        out = self.forward(images, rng=rng, mc=mc)
        mu = out.mean.data.astype(np.float64)
        var = np.zeros_like(mu) if out.var is None else out.var.data.astype(np.float64)
        return mu, var

    def predict(self, images) -> list[EnsemblePrediction]:
        out = self.forward(images)
        preds = []
        for i in range(out.mean.shape[0]):
            heads = {}
            for h, pose in out.poses.items():
                v = out.variances.get(h)
                heads[h] = HeadPrediction(
                    PlanePose(pose.data[i].astype(np.float64)),
                    None if v is None else v.data[i].astype(np.float64),
                )
            var = None if out.var is None else out.var.data[i].astype(np.float64)
            preds.append(EnsemblePrediction(heads, PlanePose(out.mean.data[i].astype(np.float64)), var))
        return preds


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update; ``None`` gradients count as zeros."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Model, **manifest) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float32 LE weights)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".bin")
    names = list(model.params)
    with open(blob, "wb") as fh:
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes())
    meta = {
        "format": "planepose-checkpoint-1",
        "config": model.config.to_dict(),
        "seed": model.seed,
        "params": [[n, list(model.params[n].shape)] for n in names],
        "blob": blob.name,
        **manifest,
    }
    js = path.with_suffix(".json")
    js.write_text(json.dumps(meta, indent=2))
    return js, blob


def load_checkpoint(path, dtype=np.float32) -> tuple[Model, dict]:
    path = Path(path)
    js = path if path.suffix == ".json" else path.with_suffix(".json")
    meta = json.loads(js.read_text())
    cfg = ModelConfig.from_dict(meta["config"])
    model = Model(cfg, seed=meta.get("seed", 0), dtype=dtype)
    raw = np.frombuffer((js.parent / meta["blob"]).read_bytes(), dtype="<f4")
    need = sum(int(np.prod(shape)) for _, shape in meta["params"])
    if need != raw.size:
        raise InvalidInputError(f"{js}: blob has {raw.size} values, manifest needs {need}")
    state, pos = {}, 0
    for name, shape in meta["params"]:
        n = int(np.prod(shape))
        state[name] = raw[pos : pos + n].reshape(shape)
        pos += n
    model.load_state(state)
    return model, meta


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
