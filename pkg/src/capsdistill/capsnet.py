"""LSTM-CapsNet: stacked LSTM -> square feature maps -> conv capsules -> routing.

Data flow for a batch of B segments with L windows of F features::

    (B, L, F) -> N x [LSTM, layer norm, LeakyReLU] -> (B, L, M)
    -> reshape (B, L, sqrt(M), sqrt(M))           windows become channels
    -> conv 3x3, L->L channels, LeakyReLU        (B, L, S, S),  S = sqrt(M) - 2
    -> conv 1x1, L->L channels                   split channels into C groups of d = L / C
    -> squash                                     lower capsules u: (B, A, d), A = C * S^2
    -> u_hat = u_i W_ij                           (B, A, K, H)
    -> dynamic routing                            higher capsules v: (B, K, H)

Classification reads the capsule lengths |v_k|; regression feeds the flattened
higher capsules through Dense(10, sigmoid) -> Dense(1, sigmoid).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError
from .tensorcore import Tensor

HEADS = ("classification", "regression")


@dataclass(frozen=True)
class ArchSpec:
    n_features: int
    n_layers: int = 1
    hidden_units: int = 256
    windows: int = 8
    capsule_groups: int = 2
    n_higher: int = 3
    higher_dim: int = 16
    head: str = "classification"
    routing_iters: int = 3
    head_hidden: int = 10

    def __post_init__(self):
        self.validate()

    @property
    def side(self) -> int:
        return math.isqrt(self.hidden_units)

    @property
    def map_side(self) -> int:
        return self.side - 2

    @property
    def lower_dim(self) -> int:
        return self.windows // self.capsule_groups

    @property
    def n_lower(self) -> int:
        return self.capsule_groups * self.map_side ** 2

    def validate(self) -> None:
        problems = []
        if self.side ** 2 != self.hidden_units:
            problems.append(f"hidden_units={self.hidden_units} is not a perfect square")
        elif self.side < 3:
            problems.append(f"hidden_units={self.hidden_units} too small for a 3x3 convolution")
        if self.capsule_groups < 1 or self.windows % self.capsule_groups:
            problems.append(f"windows={self.windows} not divisible by capsule_groups={self.capsule_groups}")
        elif self.higher_dim <= self.lower_dim:
            problems.append(f"higher_dim={self.higher_dim} must exceed lower_dim={self.lower_dim}")
        if self.n_higher < 1:
            problems.append("n_higher must be >= 1")
        if self.n_layers < 1 or self.n_features < 1:
            problems.append("n_layers and n_features must be >= 1")
        if self.head not in HEADS:
            problems.append(f"head must be one of {HEADS}, got {self.head!r}")
        if self.routing_iters < 1:
            problems.append("routing_iters must be >= 1")
        if problems:
            raise ConfigError("invalid ArchSpec: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(spec: ArchSpec) -> dict[str, tuple[int, ...]]:
    m, l = spec.hidden_units, spec.windows
    shapes: dict[str, tuple[int, ...]] = {}
    fan = spec.n_features
    for k in range(spec.n_layers):
        shapes[f"lstm{k}.w_x"] = (fan, 4 * m)
        shapes[f"lstm{k}.w_h"] = (m, 4 * m)
        shapes[f"lstm{k}.b"] = (4 * m,)
        shapes[f"norm{k}.gain"] = (m,)
        shapes[f"norm{k}.bias"] = (m,)
        fan = m
    shapes["conv1.w"] = (l, l, 3, 3)
    shapes["conv1.b"] = (l,)
    shapes["conv2.w"] = (l, l, 1, 1)
    shapes["conv2.b"] = (l,)
    shapes["route.W"] = (spec.n_lower, spec.n_higher, spec.lower_dim, spec.higher_dim)
    if spec.head == "regression":
        shapes["head.w1"] = (spec.n_higher * spec.higher_dim, spec.head_hidden)
        shapes["head.b1"] = (spec.head_hidden,)
        shapes["head.w2"] = (spec.head_hidden, 1)
        shapes["head.b2"] = (1,)
    return shapes


def count_params(spec: ArchSpec) -> int:
    """Trainable scalars of the assembled model."""
    return int(sum(np.prod(s) for s in param_shapes(spec).values()))


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith("route.W"):
        return shape[2]
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init_params(spec: ArchSpec, seed: int) -> dict[str, np.ndarray]:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(spec).items():
        leaf = name.split(".")[1]
        if leaf == "gain":
            out[name] = np.ones(shape)
        elif leaf.startswith("b") or leaf == "bias":
            out[name] = np.zeros(shape)
        else:
            bound = math.sqrt(1.0 / _fan_in(name, shape))
            out[name] = rng.uniform(-bound, bound, size=shape)
    return out


@dataclass
class CapsuleBank:
    lower: Tensor  # (B, A, d)
    higher: Tensor  # (B, K, H)
    coupling: np.ndarray  # (B, A, K)


@dataclass
class CapsOutput:
    capsules: CapsuleBank
    lengths: Tensor  # (B, K)
    head: Tensor | None = None  # (B,) regression output in (0, 1)

    def predictions(self) -> np.ndarray:
        if self.head is not None:
            return self.head.data.copy()
        return np.argmax(self.lengths.data, axis=-1)


def predict_vectors(u: Tensor, weight: Tensor) -> Tensor:
    """u_hat[b, i, j] = u[b, i] @ W[i, j] for every lower/higher capsule pair."""
    squeeze = u.ndim == 2
    if squeeze:
        u = u.reshape(1, *u.shape)
    if weight.ndim != 4 or u.shape[1] != weight.shape[0] or u.shape[2] != weight.shape[2]:
        raise tc.ShapeError(f"predict_vectors: capsules {u.shape} incompatible with W {weight.shape}")
    out = tc.einsum("bid,ijdh->bijh", u, weight)
    return out.reshape(out.shape[1:]) if squeeze else out


def dynamic_routing(u_hat: Tensor, iters: int = 3, history: list | None = None):
    """Routing by agreement.

    Returns (v, c) with v: (B, K, H) and c: (B, A, K). The logit update after
    the last iteration is skipped since nothing reads it. If ``history`` is a
    list, the coupling array of every iteration is appended to it.
    """
    if iters < 1:
        raise ValueError("routing needs at least one iteration")
    squeeze = u_hat.ndim == 3
    if squeeze:
        u_hat = u_hat.reshape(1, *u_hat.shape)
    logits = Tensor(np.zeros(u_hat.shape[:3]))
    for r in range(iters):
        c = tc.softmax(logits, axis=-1)
        if history is not None:
            history.append(c.data[0] if squeeze else c.data)
        s = tc.einsum("bak,bakh->bkh", c, u_hat)
        v = tc.squash(s)
        if r < iters - 1:
            logits = logits + tc.einsum("bakh,bkh->bak", u_hat, v)
    if squeeze:
        return v.reshape(v.shape[1:]), c.data[0]
    return v, c.data


class CapsNet:
    """One teacher or student model: ArchSpec plus named parameter tensors."""

    def __init__(self, spec: ArchSpec, params: dict[str, np.ndarray],
                 input_mean: np.ndarray | None = None, input_std: np.ndarray | None = None):
        expected = param_shapes(spec)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameters do not match spec: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {tuple(params[name].shape)} "
                                  f"!= spec shape {shape}")
        self.spec = spec
        self.params = {k: Tensor(np.array(params[k], dtype=np.float64), requires_grad=True) for k in expected}
        f = spec.n_features
        self.input_mean = np.zeros(f) if input_mean is None else np.asarray(input_mean, dtype=np.float64)
        self.input_std = np.ones(f) if input_std is None else np.asarray(input_std, dtype=np.float64)

    @classmethod
    def create(cls, spec: ArchSpec, seed: int) -> "CapsNet":
        return cls(spec, init_params(spec, seed))

    def set_input_stats(self, x: np.ndarray) -> None:
        """Standardise inputs with per-feature statistics of a training set (B, L, F)."""
        flat = x.reshape(-1, x.shape[-1])
        self.input_mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        self.input_std = np.where(std > 1e-8, std, 1.0)

    def num_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def copy(self) -> "CapsNet":
        return CapsNet(self.spec, self.state(), self.input_mean.copy(), self.input_std.copy())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def forward(self, x: np.ndarray | Tensor) -> CapsOutput:
        spec, p = self.spec, self.params
        if len(x.shape) != 3 or tuple(x.shape[1:]) != (spec.windows, spec.n_features):
            raise ConfigError(f"input shape {tuple(x.shape)} does not match (batch, {spec.windows}, {spec.n_features})")
        if isinstance(x, Tensor):
            h = (x - Tensor(self.input_mean).broadcast_to(x.shape)) / Tensor(self.input_std).broadcast_to(x.shape)
        else:
            x = np.asarray(x, dtype=np.float64)
            h = Tensor((x - self.input_mean) / self.input_std)
        bsz = h.shape[0]
        for k in range(spec.n_layers):
            h = tc.lstm(h, p[f"lstm{k}.w_x"], p[f"lstm{k}.w_h"], p[f"lstm{k}.b"])
            h = tc.leaky_relu(tc.layer_norm(h, p[f"norm{k}.gain"], p[f"norm{k}.bias"]))
        maps = h.reshape(bsz, spec.windows, spec.side, spec.side)
        f1 = tc.leaky_relu(tc.conv2d(maps, p["conv1.w"], p["conv1.b"]))
        f2 = tc.conv2d(f1, p["conv2.w"], p["conv2.b"])
        s, g, d = spec.map_side, spec.capsule_groups, spec.lower_dim
        caps = f2.reshape(bsz, g, d, s, s).transpose(0, 1, 3, 4, 2).reshape(bsz, spec.n_lower, d)
        u = tc.squash(caps)
        v, c = dynamic_routing(predict_vectors(u, p["route.W"]), spec.routing_iters)
        lengths = tc.l2_norm(v, axis=-1)
        head = None
        if spec.head == "regression":
            flat = v.reshape(bsz, spec.n_higher * spec.higher_dim)
            z = tc.sigmoid(flat @ p["head.w1"] + p["head.b1"].broadcast_to((bsz, spec.head_hidden)))
            head = tc.sigmoid(z @ p["head.w2"] + p["head.b2"].broadcast_to((bsz, 1))).reshape(bsz)
        return CapsOutput(CapsuleBank(u, v, c), lengths, head)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outs = []
        with tc.no_grad():
            for k in range(0, len(x), batch_size):
                outs.append(self.forward(x[k:k + batch_size]).predictions())
        return np.concatenate(outs) if outs else np.zeros(0)

    # checkpoint round trip
    def save(self, path, extra_meta: dict | None = None) -> None:
        tensors = dict(self.state())
        tensors["buffer.input_mean"] = self.input_mean
        tensors["buffer.input_std"] = self.input_std
        meta = {"arch": self.spec.to_dict()}
        meta.update(extra_meta or {})
        tc.save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path, expect: ArchSpec | None = None) -> "CapsNet":
        tensors, meta = tc.load_checkpoint(path)
        if "arch" not in meta:
            raise ConfigError(f"{path}: checkpoint has no embedded ArchSpec")
        spec = ArchSpec(**meta["arch"])
        if expect is not None and expect != spec:
            diffs = {k: (v, getattr(expect, k)) for k, v in spec.to_dict().items()
                     if getattr(expect, k) != v}
            raise ConfigError(f"{path}: checkpoint ArchSpec differs from config (checkpoint, config): {diffs}")
        mean = tensors.pop("buffer.input_mean", None)
        std = tensors.pop("buffer.input_std", None)
        return cls(spec, tensors, mean, std)


# Student ladder (hidden layers, hidden units) relative to a 3 x 256 teacher.
TEACHER_LAYOUT = (3, 256)
STUDENT_LADDER = ((1, 256), (1, 144), (1, 64), (1, 16))


def ladder_specs(base: ArchSpec, ladder=STUDENT_LADDER) -> list[ArchSpec]:
    return [replace(base, n_layers=n, hidden_units=m) for n, m in ladder]
