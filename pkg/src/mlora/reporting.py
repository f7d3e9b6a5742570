"""Figures written next to the CSV reports (PNG, Agg backend)."""

from __future__ import annotations

import io
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fileio import atomic_write_bytes  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def _save(fig, path):
    buf = io.BytesIO()
    # no Software/date chunks so reruns give identical files
    fig.savefig(buf, format="png", bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_domain_auc(path, result, baseline=None, domain_names=None, title=None):
    """Per-domain AUC bars; with ``baseline`` the two results are drawn side by side."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        doms = [d.domain for d in result.domains]
        labels = [str(domain_names[t]) if domain_names else str(t) for t in doms]
        x = np.arange(len(doms))
        if baseline is not None:
            before = baseline.by_domain()
            ax.bar(x - 0.2, [before[t].auc if t in before else math.nan for t in doms], 0.4,
                   label=f"pretrained (WAUC {baseline.wauc:.4f})", color="0.65")
            ax.bar(x + 0.2, [d.auc for d in result.domains], 0.4,
                   label=f"finetuned (WAUC {result.wauc:.4f})", color="C0")
        else:
            ax.bar(x, [d.auc for d in result.domains], 0.6, color="C0")
            ax.axhline(result.wauc, color="k", lw=0.8, ls="--", label=f"WAUC {result.wauc:.4f}")
        ax.legend(frameon=False, loc="upper right")
        ax.set_xticks(x, labels)
        ax.set_xlabel("domain")
        ax.set_ylabel("AUC")
        aucs = [d.auc for d in result.domains]
        if baseline is not None:
            aucs += [d.auc for d in baseline.domains]
        ax.set_ylim(max(0.0, min(aucs) - 0.05), 1.0)
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_training_log(path, trainlog, title=None):
    """Validation score per epoch; one line for pretraining or one per finetuned domain."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        series = {}
        for r in trainlog.records:
            key = "pretrain" if r.phase == "pretrain" else f"domain {r.domain}"
            score = r.val_wauc if r.phase == "pretrain" else r.val_auc
            series.setdefault(key, ([], []))
            series[key][0].append(r.epoch)
            series[key][1].append(score)
        for key, (ep, sc) in series.items():
            ax.plot(ep, sc, marker="o", ms=2.5, lw=1, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation WAUC" if list(series) == ["pretrain"] else "validation AUC")
        if series:
            ax.legend(frameon=False, fontsize=7)
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_lifts(path, results, title=None):
    """Per-domain AUC lift (percentage points) for each seed of an experiment."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        doms = sorted({t for r in results for t in r.domain_lifts_pp()})
        x = np.arange(len(doms))
        width = 0.8 / max(len(results), 1)
        for k, r in enumerate(results):
            lifts = r.domain_lifts_pp()
            ax.bar(x - 0.4 + (k + 0.5) * width, [lifts.get(t, math.nan) for t in doms], width,
                   label=f"seed {r.seed}: {r.lift_pp:+.2f} pp")
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xticks(x, [str(t) for t in doms])
        ax.set_xlabel("domain (largest first)")
        ax.set_ylabel("AUC lift (pp)")
        ax.legend(frameon=False, fontsize=7)
        if title:
            ax.set_title(title)
        _save(fig, path)
