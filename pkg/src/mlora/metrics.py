"""AUC, domain-weighted AUC (WAUC) and log-loss."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, LabelError, UndefinedAUCError
from .layers import bce_loss

log = logging.getLogger(__name__)


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise LabelError("labels must be 0 or 1")
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    return scores, labels, n_pos, n_neg


def average_ranks(x):
    """1-based ranks of ``x``; tied values share the mean of their ranks."""
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    starts = np.flatnonzero(np.r_[True, sx[1:] != sx[:-1]])
    ends = np.r_[starts[1:], sx.size]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney rank statistic: (R+ - n+(n+ + 1)/2) / (n+ n-)."""
    scores, labels, n_pos, n_neg = _validate(scores, labels)
    r_pos = average_ranks(scores)[labels].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_oracle(scores, labels) -> float:
    """Brute-force pairwise AUC; ties between a positive and a negative count 1/2."""
    scores, labels, n_pos, n_neg = _validate(scores, labels)
    pos = scores[labels][:, None]
    neg = scores[~labels][None, :]
    wins = np.count_nonzero(pos > neg)
    ties = np.count_nonzero(pos == neg)
    return (wins + 0.5 * ties) / (n_pos * n_neg)


def log_loss(probs, labels) -> float:
    return float(np.mean(bce_loss(probs, labels)))


@dataclass
class DomainAUC:
    domain: int
    size: int
    weight: float
    auc: float


@dataclass
class EvalResult:
    domains: list[DomainAUC]
    wauc: float
    log_loss: float = float("nan")
    excluded: tuple[int, ...] = ()

    @property
    def total_size(self):
        return sum(d.size for d in self.domains)

    @property
    def wauc_percent(self):
        return 100.0 * self.wauc

    def by_domain(self):
        return {d.domain: d for d in self.domains}

    def to_csv(self, domain_names=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain_id", "size", "weight", "auc"])
        for d in self.domains:
            name = domain_names[d.domain] if domain_names else d.domain
            w.writerow([name, d.size, repr(d.weight), repr(d.auc)])
        w.writerow(["WAUC", self.total_size, repr(1.0), repr(self.wauc)])
        return buf.getvalue()


def wauc(per_domain) -> EvalResult:
    """WAUC over ``{domain: (scores, labels)}``.

    Domains whose labels are all one class are dropped (with a warning) and the
    weights renormalised over the remaining ones.
    """
    kept, excluded = [], []
    all_p, all_y = [], []
    for t in sorted(per_domain):
        scores, labels = per_domain[t]
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        if scores.size == 0:
            continue
        all_p.append(scores)
        all_y.append(labels)
        try:
            kept.append((t, scores.size, auc(scores, labels)))
        except UndefinedAUCError:
            log.warning("domain %s has a single label class; excluded from WAUC", t)
            excluded.append(t)
    if not kept:
        raise EvaluationError("no domain has both label classes; WAUC undefined")
    total = sum(s for _, s, _ in kept)
    domains = [DomainAUC(t, s, s / total, a) for t, s, a in kept]
    value = sum(d.weight * d.auc for d in domains)
    p = np.concatenate(all_p)
    ll = log_loss(p, np.concatenate(all_y)) if np.all((p >= 0) & (p <= 1)) else float("nan")
    return EvalResult(domains, float(value), ll, tuple(excluded))
