"""Two-phase training: pretrain the backbone on mixed-domain data, then freeze it
and finetune per-domain adaptors, with patience-based early stopping."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DomainDataset, batches
from .errors import (
    ConfigError,
    ConflictError,
    DataError,
    MissingDomainError,
    ParameterError,
    ShapeError,
    UndefinedAUCError,
)
from .layers import GradTape, bce_loss, bce_with_logits
from .metrics import EvalResult, auc, wauc
from .model import CTRModel
from .numerics import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    dropout: float = 0.5
    batch_size: int = 1024
    patience: int = 5
    alpha: float = 32.0
    max_epochs: int = 50
    seed: int = 0
    rank_cap: int | None = None

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Settings sized for a single desktop core."""
        return cls(**{"batch_size": 256, **overrides})

    def validate(self):
        checks = [
            ("learning_rate", self.learning_rate >= 0, "must be >= 0"),
            ("dropout", 0.0 <= self.dropout < 1.0, "must be in [0, 1)"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("patience", self.patience >= 1, "must be >= 1"),
            ("alpha", self.alpha > 0, "must be positive"),
            ("max_epochs", self.max_epochs >= 0, "must be >= 0"),
            ("rank_cap", self.rank_cap is None or self.rank_cap >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"train.{key} {msg}, got {getattr(self, key)!r}", key=f"train.{key}")
        return self

    def to_dict(self):
        return asdict(self)


class OptimizerState:
    """Adam moments, kept only for tensors that have received a gradient."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}


def adam_step(state: OptimizerState, registry, tape: GradTape, lr: float) -> None:
    """One bias-corrected Adam update per tensor in ``tape``; clears the tape.

    Step counts are per tensor, so adaptors that only see their own domain's
    batches get correct bias correction.
    """
    for name, g in tape.items():
        entry = registry[name]
        if entry.frozen:
            raise ParameterError(f"gradient recorded for frozen tensor {name!r}")
        p = entry.tensor
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.steps[name] = 0
        state.steps[name] += 1
        k = state.steps[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1 ** k)
        v_hat = v / (1.0 - state.beta2 ** k)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    tape.clear()


class EarlyStopping:
    """Stops after ``patience`` consecutive scores that fail to beat the best."""

    def __init__(self, patience: int, best: float = -math.inf):
        self.patience = patience
        self.best = best
        self.bad_epochs = 0
        self.best_epoch = 0

    def update(self, score: float, epoch: int) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    domain: str
    train_loss: float
    val_auc: float
    val_wauc: float
    elapsed_ms: float


LOG_COLUMNS = ["epoch", "phase", "domain", "train_loss", "val_auc", "val_wauc", "elapsed_ms"]


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def to_csv(self, include_timing=True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = LOG_COLUMNS if include_timing else LOG_COLUMNS[:-1]
        w.writerow(cols)
        for r in self.records:
            row = [r.epoch, r.phase, r.domain, repr(r.train_loss), repr(r.val_auc), repr(r.val_wauc)]
            if include_timing:
                row.append(f"{r.elapsed_ms:.1f}")
            w.writerow(row)
        return buf.getvalue()


def predict(model: CTRModel, ds: DomainDataset, phase="eval", chunk=4096):
    out = np.empty(len(ds))
    for s in range(0, len(ds), chunk):
        out[s:s + chunk] = model.predict_proba(ds.X[s:s + chunk], ds.t[s:s + chunk], phase)
    return out


def _wauc_of(ds, p) -> EvalResult:
    return wauc({t: (p[ds.t == t], ds.y[ds.t == t]) for t in ds.domains})


def evaluate(model: CTRModel, ds: DomainDataset, phase="eval") -> EvalResult:
    return _wauc_of(ds, predict(model, ds, phase))


def _pooled_auc(p, y):
    try:
        return auc(p, y)
    except UndefinedAUCError:
        return float("nan")


def _domain_score(p, y):
    """Per-domain selection score: AUC, or negative log-loss when AUC is undefined."""
    a = _pooled_auc(p, y)
    if math.isnan(a):
        return -float(np.mean(bce_loss(p, y))), a
    return a, a


def _train_epoch(model, batch_iter, phase, cfg, state, registry, drop_rng=None):
    losses = {}
    for batch in batch_iter:
        logits, cache = model.forward_batch(batch.X, batch.t, phase, dropout=cfg.dropout, rng=drop_rng)
        loss, grad = bce_with_logits(logits, batch.y)
        tape = GradTape()
        model.backward(cache, grad, tape)
        adam_step(state, registry, tape, cfg.learning_rate)
        key = int(batch.t[0]) if phase == "finetune" else "mixed"
        tot, n = losses.get(key, (0.0, 0))
        losses[key] = (tot + loss * batch.y.size, n + batch.y.size)
    return {k: tot / n for k, (tot, n) in losses.items()}


def pretrain(model: CTRModel, train: DomainDataset, val: DomainDataset, cfg: TrainConfig,
             *, evaluate_fn=None) -> TrainLog:
    """Train embeddings and backbone on shuffled mixed-domain minibatches.

    After each epoch the validation WAUC is computed (or ``evaluate_fn(model)``
    is called, which must return a float); the best-scoring parameters are
    restored on exit.
    """
    cfg.validate()
    if model.domains:
        raise ConflictError("pretrain expects a model without adaptors")
    if len(train) == 0:
        raise DataError("empty training split")
    if evaluate_fn is None and len(val) == 0:
        raise DataError("empty validation split")
    trainlog = TrainLog()
    if cfg.max_epochs == 0:
        return trainlog
    registry = model.registry()
    trainable = [n for n, e in registry.items() if not e.frozen]
    state = OptimizerState()
    stopper = EarlyStopping(cfg.patience)
    rng = Rng(cfg.seed)
    best = None
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order_seed = rng.derive(1, epoch).state
        losses = _train_epoch(model, batches(train, cfg.batch_size, "mixed", order_seed), "pretrain",
                              cfg, state, registry, drop_rng=rng.derive(2, epoch))
        if evaluate_fn is not None:
            score, val_auc = float(evaluate_fn(model)), float("nan")
        else:
            p = predict(model, val, "pretrain")
            score, val_auc = _wauc_of(val, p).wauc, _pooled_auc(p, val.y)
        if stopper.update(score, epoch):
            best = {n: registry[n].tensor.copy() for n in trainable}
        trainlog.records.append(EpochRecord(epoch, "pretrain", "mixed", losses.get("mixed", float("nan")),
                                            val_auc, score, 1000 * (time.perf_counter() - t0)))
        log.info("pretrain epoch %d loss %.5f val WAUC %.5f", epoch, losses.get("mixed", float("nan")), score)
        if stopper.should_stop:
            break
    for n, arr in best.items():
        registry[n].tensor[...] = arr
    trainlog.best_epoch["mixed"] = stopper.best_epoch
    return trainlog


def finetune(model: CTRModel, train: DomainDataset, val: DomainDataset, cfg: TrainConfig,
             domains=None) -> TrainLog:
    """Train only the adaptors, one domain-homogeneous batch at a time.

    Each domain stops on its own once its validation AUC fails to beat its
    best for ``patience`` epochs; the zero-update adaptor state counts as the
    initial best, so a domain never ends below its pretrained score.
    """
    cfg.validate()
    domains = sorted(train.domains if domains is None else (int(t) for t in domains))
    missing = [t for t in domains if t not in model.domains]
    if missing:
        raise MissingDomainError(f"domain(s) {missing} have training data but no adaptor")
    if any(not part.frozen for part in model.backbone_parts()):
        raise ParameterError("finetune expects a frozen backbone; call attach_adaptors first")
    trainlog = TrainLog()
    active = [t for t in domains if t in train.sizes]
    if cfg.max_epochs == 0 or not active:
        return trainlog
    registry = model.registry()
    state = OptimizerState()
    rng = Rng(cfg.seed).derive(7)

    def val_scores():
        p = predict(model, val, "eval")
        scores = {}
        for t in active:
            rows = val.t == t
            scores[t] = _domain_score(p[rows], val.y[rows]) if rows.any() else (0.0, float("nan"))
        return scores, _wauc_of(val, p).wauc

    def snapshot(t):
        return {n: registry[n].tensor.copy() for n in model.adaptor_tensor_names(t)}

    initial, _ = val_scores()
    stoppers = {t: EarlyStopping(cfg.patience, initial[t][0]) for t in active}
    best = {t: snapshot(t) for t in active}
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order_seed = rng.derive(1, epoch).state
        sub = train.for_domains(active)
        losses = _train_epoch(model, batches(sub, cfg.batch_size, "per_domain", order_seed, domains=active),
                              "finetune", cfg, state, registry)
        scores, val_w = val_scores()
        elapsed = 1000 * (time.perf_counter() - t0)
        for t in active:
            score, val_auc = scores[t]
            if stoppers[t].update(score, epoch):
                best[t] = snapshot(t)
            trainlog.records.append(EpochRecord(epoch, "finetune", str(t), losses.get(t, float("nan")),
                                                val_auc, val_w, elapsed))
        active = [t for t in active if not stoppers[t].should_stop]
        if not active:
            break
    for t, snap in best.items():
        for n, arr in snap.items():
            registry[n].tensor[...] = arr
        trainlog.best_epoch[str(t)] = stoppers[t].best_epoch
    return trainlog
