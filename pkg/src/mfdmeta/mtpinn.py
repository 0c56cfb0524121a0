"""Multi-task physics-informed network for MFD estimation.

A shared ReLU trunk feeds three heads: per-point flow, critical occupancy and
maximum flow (the latter two averaged over the batch). Training minimises
``MSE + alpha * physics`` where the physics term pulls the data towards a
shared-vertex bi-parabola built from the predicted critical occupancy and
maximum flow, plus three shape penalties.

The same parameter layout, minus the two scalar heads and the physics term,
gives the plain network used as a baseline (``kind="nn"``).
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataio import MfdSeries

HEADS = ("flow", "xcd", "fmax")
OFFSET_BAND = 0.05


@dataclass
class MtpinnConfig:
    hidden_sizes: tuple[int, ...] = (64, 64, 64)
    head_sizes: tuple[int, ...] = (32,)
    dropout: float = 0.0
    alpha: float = 1.0
    w1: float | None = None  # None: inverse regime frequency
    w2: float | None = None
    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 200
    init_offset: float = 0.0
    init_scaler: float = 3.0
    seed: int = 0
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.head_sizes = tuple(int(h) for h in self.head_sizes)
        self.split = tuple(float(s) for s in self.split)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.alpha < 0 or (self.w1 is not None and self.w1 < 0) or (self.w2 is not None and self.w2 < 0):
            raise ValueError("loss weights must be >= 0")
        if self.init_scaler <= 1.0:
            raise ValueError("init_scaler must be > 1")

    @classmethod
    def from_dict(cls, d: dict) -> MtpinnConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _softplus_inverse(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


@dataclass
class MtpinnModel:
    params: dc.ParameterSet
    config: MtpinnConfig
    kind: str = "mtpinn"  # or "nn"
    norm: tuple[float, float] | None = None
    loss_trace: list[dict] = field(default_factory=list)

    def group(self, prefix: str) -> dc.ParameterSet:
        return self.params.subset([k for k in self.params if k.startswith(prefix + ".")])

    @property
    def shared(self) -> dc.ParameterSet:
        return self.group("shared")

    @property
    def branch_flow(self) -> dc.ParameterSet:
        return self.group("flow")

    @property
    def branch_xcd(self) -> dc.ParameterSet:
        return self.group("xcd")

    @property
    def branch_fmax(self) -> dc.ParameterSet:
        return self.group("fmax")

    @property
    def offset(self) -> float:
        return float(self.params["offset"])

    @property
    def scaler(self) -> float:
        return 1.0 + float(np.logaddexp(0.0, self.params["scaler_raw"]))

    def with_params(self, params: dc.ParameterSet) -> MtpinnModel:
        return MtpinnModel(params, self.config, self.kind, self.norm, list(self.loss_trace))

    def to_json(self) -> dict:
        cfg = asdict(self.config)
        return {
            "kind": self.kind,
            "config": cfg,
            "norm": None if self.norm is None else list(self.norm),
            "params": self.params.to_json(),
            "rng_seed": self.params.rng_seed,
            "loss_trace": self.loss_trace,
        }

    @classmethod
    def from_json(cls, d: dict) -> MtpinnModel:
        return cls(
            dc.ParameterSet.from_json(d["params"], d.get("rng_seed")),
            MtpinnConfig.from_dict(d["config"]),
            d.get("kind", "mtpinn"),
            None if d.get("norm") is None else tuple(d["norm"]),
            d.get("loss_trace", []),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> MtpinnModel:
        return cls.from_json(json.loads(Path(path).read_text()))


def _layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def init_model(config: MtpinnConfig | None = None, seed: int | None = None, kind: str = "mtpinn") -> MtpinnModel:
    """Uniform(+-1/sqrt(fan_in)) weights and biases, seeded."""
    cfg = config or MtpinnConfig()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    entries: dict[str, np.ndarray] = {}
    width = 1
    for i, h in enumerate(cfg.hidden_sizes):
        entries[f"shared.{i}.W"], entries[f"shared.{i}.b"] = _layer(rng, width, h)
        width = h
    heads = HEADS if kind == "mtpinn" else ("flow",)
    for head in heads:
        w = width
        for i, h in enumerate((*cfg.head_sizes, 1)):
            entries[f"{head}.{i}.W"], entries[f"{head}.{i}.b"] = _layer(rng, w, h)
            w = h
    if kind == "mtpinn":
        entries["offset"] = np.array(cfg.init_offset)
        entries["scaler_raw"] = np.array(_softplus_inverse(cfg.init_scaler - 1.0))
    elif kind != "nn":
        raise ValueError(f"unknown model kind {kind!r}")
    return MtpinnModel(dc.ParameterSet(entries, rng_seed=seed), cfg, kind)


def check_branch_compatible(a: MtpinnModel, b: MtpinnModel) -> None:
    """Both models must share trunk names and shapes."""
    sa = {k: v.shape for k, v in a.shared.items()}
    sb = {k: v.shape for k, v in b.shared.items()}
    if sa != sb:
        raise ValueError(f"trunk shapes differ: {sa} vs {sb}")


# ---------------------------------------------------------------------------
# Graph pieces
# ---------------------------------------------------------------------------


@dataclass
class Outputs:
    flow: dc.Node
    x_cd: dc.Node | None = None
    f_max: dc.Node | None = None


def _mlp(h: dc.Node, p: dict, prefix: str, n_layers: int, last_linear: bool, dropout: float = 0.0, seed=None) -> dc.Node:
    for i in range(n_layers):
        h = dc.linear(h, p[f"{prefix}.{i}.W"], p[f"{prefix}.{i}.b"])
        if i < n_layers - 1 or not last_linear:
            h = dc.relu(h)
            if dropout > 0:
                if seed is None or isinstance(seed, np.random.Generator):
                    h = dc.dropout(h, dropout, seed)
                else:
                    h = dc.dropout(h, dropout, (*seed, zlib.crc32(prefix.encode()), i))
    return h


def forward_graph(
    p: dict, x: np.ndarray, config: MtpinnConfig, kind: str = "mtpinn", dropout: float = 0.0, seed=None, features=None
) -> Outputs:
    """Build the forward graph on parameter nodes ``p`` for occupancies ``x``.

    ``features`` short-circuits the trunk with precomputed activations (for a frozen trunk).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    n_shared = len(config.hidden_sizes)
    n_head = len(config.head_sizes) + 1
    if seed is not None and not isinstance(seed, np.random.Generator):
        seed = tuple(np.atleast_1d(seed).tolist())
    if features is not None:
        h = dc.const(features)
    else:
        h = _mlp(dc.const(x), p, "shared", n_shared, last_linear=False, dropout=dropout, seed=seed)
    flow = dc.reshape(_mlp(h, p, "flow", n_head, last_linear=True), (x.shape[0],))
    if kind == "nn":
        return Outputs(flow)
    x_cd = dc.sigmoid(_mlp(h, p, "xcd", n_head, last_linear=True)).mean()
    f_max = dc.sigmoid(_mlp(h, p, "fmax", n_head, last_linear=True)).mean()
    return Outputs(flow, x_cd, f_max)


def trunk_features(model: MtpinnModel, x) -> np.ndarray:
    """Shared-trunk activations for ``x`` (no dropout)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    leaves = model.params.leaves(requires_grad=False)
    return _mlp(dc.const(x), leaves, "shared", len(model.config.hidden_sizes), last_linear=False).value


def forward(model: MtpinnModel, x, dropout: float | None = None, seed=None) -> tuple[np.ndarray, float | None, float | None]:
    """Numeric forward pass: (flow per x, x_cd, f_max) in normalized units."""
    rate = model.config.dropout if dropout is None else dropout
    leaves = model.params.leaves(requires_grad=False)
    out = forward_graph(leaves, x, model.config, model.kind, rate, seed)
    if model.kind == "nn":
        return out.flow.value.copy(), None, None
    return out.flow.value.copy(), float(out.x_cd.value), float(out.f_max.value)


@dataclass
class PhysicsParts:
    l1: dc.Node
    l2: dc.Node
    w1: float
    w2: float
    offset: dc.Node
    scale: dc.Node
    max: dc.Node
    clamped: bool = False

    @property
    def total(self) -> dc.Node:
        return self.l1 * self.w1 + self.l2 * self.w2 + self.offset + self.scale + self.max

    def values(self) -> dict:
        return {
            "l1": float(self.l1.value),
            "l2": float(self.l2.value),
            "w1": self.w1,
            "w2": self.w2,
            "offset": float(self.offset.value),
            "scale": float(self.scale.value),
            "max": float(self.max.value),
            "physics": float(self.total.value),
        }


XCD_FLOOR = 1e-3


def physics_loss(outputs: Outputs, x: np.ndarray, y: np.ndarray, offset: dc.Node, scaler_raw: dc.Node, w1=None, w2=None) -> PhysicsParts:
    """Reference bi-parabola fit and shape penalties.

    ``f1(x) = a1 (x - x_cd)^2 + (f_max - offset)`` with
    ``a1 = -(f_max - offset) / x_cd^2`` and, right of the vertex,
    ``a2 = -(f_max - offset) / ((x_scaler - 1) x_cd)^2``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    x_cd = outputs.x_cd
    clamped = bool(x_cd.value <= XCD_FLOOR)
    if clamped:
        x_cd = dc.add(dc.mul(x_cd, 0.0), XCD_FLOOR)
    height = dc.sub(outputs.f_max, offset)
    width_ratio = dc.softplus(scaler_raw)  # x_scaler - 1
    a1 = dc.neg(dc.div(height, dc.square(x_cd)))
    a2 = dc.neg(dc.div(height, dc.square(dc.mul(width_ratio, x_cd))))

    left = x <= x_cd.value
    n1 = int(left.sum())
    n2 = n - n1
    if w1 is None:
        w1 = n / n1 if n1 else 0.0
    if w2 is None:
        w2 = n / n2 if n2 else 0.0
    curv = dc.add(dc.mul(a1, left), dc.mul(a2, ~left))
    ref = dc.add(dc.mul(curv, dc.square(dc.sub(x, x_cd))), height)
    sq = dc.square(dc.sub(y, ref))
    l1 = dc.mul(dc.mul(sq, left).sum(), 1.0 / n)
    l2 = dc.mul(dc.mul(sq, ~left).sum(), 1.0 / n)

    # flows near the max-flow occupancy should not sit above the vertex height
    x_peak = x[np.argmax(y)]
    near = np.abs(x - x_peak) <= OFFSET_BAND
    lam_offset = dc.mean(dc.relu(dc.sub(y[near], height)))
    lam_scale = dc.add(dc.square(dc.relu(dc.sub(1.0, width_ratio))), dc.square(dc.relu(dc.sub(width_ratio, 4.0))))
    lam_max = dc.mean(dc.square(dc.relu(dc.sub(outputs.flow, outputs.f_max))))
    if clamped:
        lam_scale = dc.add(lam_scale, 1.0)
    return PhysicsParts(l1, l2, float(w1), float(w2), lam_offset, lam_scale, lam_max, clamped)


def loss_graph(
    p: dict, x, y, config: MtpinnConfig, kind: str = "mtpinn", dropout: float = 0.0, seed=None, alpha: float | None = None,
    features=None,
):
    """Scalar training loss node plus its parts (``None`` for the plain net)."""
    y = np.asarray(y, dtype=np.float64)
    out = forward_graph(p, x, config, kind, dropout, seed, features)
    mse = dc.square(dc.sub(out.flow, y)).mean()
    if kind == "nn":
        return mse, mse, None
    phys = physics_loss(out, x, y, p["offset"], p["scaler_raw"], config.w1, config.w2)
    a = config.alpha if alpha is None else alpha
    return dc.add(mse, dc.mul(phys.total, a)), mse, phys


def total_loss(model: MtpinnModel, x, y, alpha: float | None = None) -> float:
    leaves = model.params.leaves(requires_grad=False)
    total, _, _ = loss_graph(leaves, x, y, model.config, model.kind, 0.0, None, alpha)
    return float(total.value)


def loss_breakdown(model: MtpinnModel, x, y, alpha: float | None = None) -> dict:
    leaves = model.params.leaves(requires_grad=False)
    total, mse, phys = loss_graph(leaves, x, y, model.config, model.kind, 0.0, None, alpha)
    out = {"total": float(total.value), "mse": float(mse.value)}
    if phys is not None:
        out.update(phys.values())
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def split_indices(n: int, fractions, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_val]), np.sort(perm[n_train + n_val :])


def fit_params(
    model: MtpinnModel,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    dropout: float,
    seed: int,
    trainable=None,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    frozen_trunk: bool = False,
) -> MtpinnModel:
    """Minibatch Adam on ``trainable`` parameter names (all by default).

    With ``val`` the snapshot with the lowest validation loss is returned.
    ``frozen_trunk`` computes the trunk once up front; it requires that no
    ``shared.*`` parameter is trainable and that dropout is off.
    """
    cfg = model.config
    names = list(model.params) if trainable is None else [k for k in model.params if k in set(trainable)]
    features = None
    if frozen_trunk:
        if dropout > 0 or any(k.startswith("shared.") for k in names):
            raise ValueError("frozen_trunk needs dropout 0 and no trainable trunk parameters")
        features = trunk_features(model, x)
    values = dict(model.params.clone().items())
    seed_tag = model.params.rng_seed
    opt = dc.FlatAdam([values[k] for k in names], lr=lr)
    rng = np.random.default_rng([seed, 11])
    mask_rng = np.random.default_rng([seed, 13])
    trace: list[dict] = []
    best, best_val = None, math.inf
    n = x.size
    for epoch in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            leaves = {k: dc.leaf(v, k in names) for k, v in values.items()}
            feats = None if features is None else features[idx]
            loss, _, _ = loss_graph(leaves, x[idx], y[idx], cfg, model.kind, dropout, mask_rng, features=feats)
            g = dc.grad(loss, {k: leaves[k] for k in names})
            values.update(zip(names, opt.step([g[k] for k in names])))
            running += float(loss.value) * idx.size
        params = dc.ParameterSet(values, seed_tag)
        row = {"epoch": epoch, "train": running / n}
        if val is not None:
            v = total_loss(model.with_params(params), *val)
            row["val"] = v
            if v < best_val:
                best, best_val = params, v
        trace.append(row)
    final = best if best is not None else dc.ParameterSet(values, seed_tag)
    out = model.with_params(final)
    out.loss_trace = list(model.loss_trace) + trace
    return out


def train(model: MtpinnModel, series: MfdSeries, config: MtpinnConfig | None = None) -> MtpinnModel:
    """Train with a seeded 70/15/15 split, returning the best-validation snapshot.

    The test split is scored once and stored in the last trace row.
    """
    cfg = config or model.config
    model = MtpinnModel(model.params, cfg, model.kind, series.norm, list(model.loss_trace))
    if cfg.epochs == 0:
        return model
    x, y = series.occupancy, series.flow
    tr, va, te = split_indices(len(series), cfg.split, cfg.seed)
    if tr.size == 0:
        raise ValueError("training split is empty")
    val = (x[va], y[va]) if va.size else None
    out = fit_params(model, x[tr], y[tr], cfg.epochs, cfg.batch_size, cfg.lr, cfg.dropout, cfg.seed, val=val)
    if te.size:
        flow, _, _ = forward(out, x[te], dropout=0.0)
        out.loss_trace.append({"test_mse": float(np.mean((flow - y[te]) ** 2))})
    return out


def evaluation_split(series: MfdSeries, config: MtpinnConfig) -> MfdSeries:
    _, _, te = split_indices(len(series), config.split, config.seed)
    return series.take(te)


def predict_mfd(model: MtpinnModel, grid, norm: tuple[float, float] | None = None) -> dict:
    """Curve over a normalized occupancy grid plus denormalized key values."""
    norm = norm or model.norm
    if norm is None:
        raise ValueError("model has no normalization scales")
    flow_scale, occ_scale = norm
    grid = np.asarray(grid, dtype=float)
    flow, x_cd, f_max = forward(model, grid, dropout=0.0)
    out = {
        "occupancy": grid,
        "flow": flow,
        "occupancy_denorm": grid * occ_scale,
        "flow_denorm": flow * flow_scale,
        "x_cd": x_cd,
        "f_max": f_max,
    }
    if x_cd is not None:
        out["x_cd_denorm"] = x_cd * occ_scale
        out["f_max_denorm"] = f_max * flow_scale
    return out
