"""Comparison models: scratch MTPINN, a plain network, and frozen-trunk transfer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import mtpinn as mt
from .dataio import MfdSeries

log = logging.getLogger(__name__)

SCRATCH_EPOCHS = 100
SCRATCH_BATCH = 10
SCRATCH_DROPOUT = 0.1


def _require_points(series: MfdSeries, what: str) -> None:
    if len(series) == 0:
        raise ValueError(f"{what} has no observations")


def scratch_config(base: mt.MtpinnConfig | None = None) -> mt.MtpinnConfig:
    """The fixed scratch recipe on top of ``base``'s architecture."""
    return replace(base or mt.MtpinnConfig(), epochs=SCRATCH_EPOCHS, batch_size=SCRATCH_BATCH, dropout=SCRATCH_DROPOUT)


def train_scratch_comparison(support: MfdSeries, config: mt.MtpinnConfig | None = None, seed: int = 0) -> mt.MtpinnModel:
    """Fresh MTPINN trained on every support point (no validation hold-out)."""
    _require_points(support, "support")
    cfg = config or scratch_config()
    if (cfg.epochs, cfg.batch_size, cfg.dropout) != (SCRATCH_EPOCHS, SCRATCH_BATCH, SCRATCH_DROPOUT):
        log.warning(
            "scratch recipe overridden: epochs=%d batch=%d dropout=%g", cfg.epochs, cfg.batch_size, cfg.dropout
        )
    model = mt.init_model(cfg, seed=seed)
    model.norm = support.norm
    return mt.fit_params(model, support.occupancy, support.flow, cfg.epochs, cfg.batch_size, cfg.lr, cfg.dropout, seed)


def train_plain_nn(series: MfdSeries, config: mt.MtpinnConfig | None = None, seed: int | None = None) -> mt.MtpinnModel:
    """Trunk plus a single flow head, trained on MSE alone with the usual split."""
    _require_points(series, "series")
    cfg = config or mt.MtpinnConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return mt.train(mt.init_model(cfg, kind="nn"), series, cfg)


# ---------------------------------------------------------------------------
# Transfer learning
# ---------------------------------------------------------------------------


@dataclass
class TransferConfig:
    mode: str = "cold"  # or "warm"
    finetune_epochs: int = 1000
    frozen: bool = True
    lr: float = 1e-3
    batch_size: int | None = None  # None: full batch
    seed: int = 0
    # zero every branch layer, not only the output layer (leaves ReLU hidden units dead)
    zero_hidden: bool = False

    def __post_init__(self):
        if self.mode not in ("cold", "warm"):
            raise ValueError(f"mode must be 'cold' or 'warm', got {self.mode!r}")
        if not self.frozen:
            raise ValueError("transfer finetuning always freezes the shared trunk")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")

    @property
    def label(self) -> str:
        return f"{'tc' if self.mode == 'cold' else 'tw'}{self.finetune_epochs}"

    @classmethod
    def from_label(cls, label: str, **kw) -> TransferConfig:
        """``tc1000`` -> cold, 1000 epochs; ``tw5`` -> warm, 5 epochs."""
        if len(label) < 3 or label[:2] not in ("tc", "tw") or not label[2:].isdigit():
            raise ValueError(f"bad transfer label {label!r}")
        return cls(mode="cold" if label[:2] == "tc" else "warm", finetune_epochs=int(label[2:]), **kw)


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    replicas_per_city: int | None = 3  # None: every replica
    include_support: bool = True


def pretrain_pool(pool: dict, n: int | None, held_out=(), cfg: PretrainConfig | None = None) -> list[MfdSeries]:
    """Series used for pretraining: each non-held-out city's full series plus some biased replicas."""
    cfg = cfg or PretrainConfig()
    held_out = set(held_out)
    rng = np.random.default_rng([cfg.seed, 0 if n is None else n, 5])
    out = []
    for city in sorted(pool):
        if city in held_out:
            continue
        data = pool[city]
        out.append(data.full)
        if not cfg.include_support or n is None:
            continue
        replicas = data.bundles[n].replicas
        k = len(replicas) if cfg.replicas_per_city is None else min(cfg.replicas_per_city, len(replicas))
        for j in sorted(rng.choice(len(replicas), size=k, replace=False)):
            out.append(replicas[j])
    return out


def transfer_pretrain(
    series: list[MfdSeries],
    config: mt.MtpinnConfig | None = None,
    pcfg: PretrainConfig | None = None,
    held_out=(),
) -> mt.MtpinnModel:
    """One MTPINN trained on the concatenation of ``series``."""
    pcfg = pcfg or PretrainConfig()
    bad = sorted({s.city for s in series} & set(held_out))
    if bad:
        raise ValueError(f"held-out cities in the pretraining pool: {bad}")
    if not series or sum(len(s) for s in series) == 0:
        raise ValueError("empty pretraining pool")
    cfg = config or mt.MtpinnConfig()
    x = np.concatenate([s.occupancy for s in series])
    y = np.concatenate([s.flow for s in series])
    model = mt.init_model(cfg, seed=pcfg.seed)
    return mt.fit_params(model, x, y, pcfg.epochs, pcfg.batch_size, pcfg.lr, 0.0, pcfg.seed)


def branch_names(model: mt.MtpinnModel) -> list[str]:
    return [k for k in model.params if not k.startswith("shared.")]


def _cold_start(model: mt.MtpinnModel, tcfg: TransferConfig) -> mt.MtpinnModel:
    fresh = mt.init_model(model.config, seed=tcfg.seed, kind=model.kind).params
    n_out = len(model.config.head_sizes)
    entries = {}
    for k, v in model.params.items():
        head, _, rest = k.partition(".")
        if head not in mt.HEADS:
            entries[k] = v
        elif tcfg.zero_hidden or rest.startswith(f"{n_out}."):
            entries[k] = np.zeros_like(v)
        else:
            entries[k] = fresh[k]
    return model.with_params(type(model.params)(entries, model.params.rng_seed))


def transfer_finetune(pretrained: mt.MtpinnModel, support: MfdSeries, tcfg: TransferConfig | None = None) -> mt.MtpinnModel:
    """Retrain everything except the shared trunk on ``support``.

    Cold mode zeroes each branch's output layer first and redraws the branch's
    hidden layers; warm mode keeps the pretrained branches.
    """
    tcfg = tcfg or TransferConfig()
    _require_points(support, "support")
    model = _cold_start(pretrained, tcfg) if tcfg.mode == "cold" else pretrained.with_params(pretrained.params.clone())
    model.norm = support.norm
    if tcfg.finetune_epochs == 0:
        return model
    batch = tcfg.batch_size or len(support)
    return mt.fit_params(
        model, support.occupancy, support.flow, tcfg.finetune_epochs, batch, tcfg.lr, 0.0, tcfg.seed,
        trainable=branch_names(model), frozen_trunk=True,
    )
