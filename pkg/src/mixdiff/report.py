"""Evaluation reports: metric orchestration, JSON/CSV output, figures.

A report run compares a synthetic corpus against real train/test
corpora: the discriminative and predictive scores are rerun several
times with consecutive seeds and summarized as mean and standard
deviation, the nearest-neighbour adversarial accuracy runs once, and
everything lands in a directory as report.json, report.csv and a few
rendered figures.  All outputs are deterministic for a fixed seed:
JSON keys are sorted, CSV rows likewise, and figures carry pinned
metadata so rerunning the command reproduces identical bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .data import TimeSeriesSample
from .evaluation import (FeatureSpace, MetricConfig, discriminative_score,
                         nnaa, predictive_score)
from .nn_core import RngHub

OVERFIT_GAP = 0.1


def _summary(runs: list[float]) -> dict:
    sd = float(np.std(runs, ddof=1)) if len(runs) > 1 else 0.0
    return {"runs": [float(r) for r in runs],
            "mean": float(np.mean(runs)), "sd": sd}


def _subsample(groups, n: int, seed: int):
    """Deterministically cut each corpus down to its first n of a
    seeded shuffle, so NNAA sees equal-sized sets."""
    hub = RngHub(seed)
    out = []
    for name, samples in groups:
        idx = sorted(hub.stream(f"nnaa/{name}").permutation(len(samples))[:n])
        out.append([samples[i] for i in idx])
    return out


def run_evaluation(real_train: list[TimeSeriesSample],
                   real_test: list[TimeSeriesSample],
                   synth: list[TimeSeriesSample],
                   space: FeatureSpace,
                   reruns: int = 10, seed: int = 0,
                   metric_cfg: MetricConfig = MetricConfig()) -> dict:
    """All metrics as one JSON-ready dictionary."""
    if reruns < 1:
        raise ValueError("reruns must be >= 1")

    def cfg(r: int) -> MetricConfig:
        return MetricConfig(steps=metric_cfg.steps, batch=metric_cfg.batch,
                            lr=metric_cfg.lr, beta1=metric_cfg.beta1,
                            beta2=metric_cfg.beta2, hidden=metric_cfg.hidden,
                            test_fraction=metric_cfg.test_fraction,
                            seed=seed + r)

    disc = [discriminative_score(real_train, synth, cfg(r), space)
            for r in range(reruns)]
    pred = [predictive_score(synth, real_test, cfg(r), space)
            for r in range(reruns)]
    base = [predictive_score(real_train, real_test, cfg(r), space)
            for r in range(reruns)]

    n = min(len(real_train), len(real_test), len(synth))
    tr, te, sy = _subsample([("train", real_train), ("test", real_test),
                             ("synth", synth)], n, seed)
    rep = nnaa(space.flat_features(tr), space.flat_features(te),
               space.flat_features(sy))
    nnaa_block = {"aa_train": rep.aa_train, "aa_test": rep.aa_test,
                  "value": rep.value, "set_size": n}
    overfit = (rep.aa_train == 0.0
               or rep.aa_test - rep.aa_train > OVERFIT_GAP)
    payload = {
        "sizes": {"real_train": len(real_train), "real_test": len(real_test),
                  "synth": len(synth)},
        "seed": seed,
        "reruns": reruns,
        "discriminative": _summary(disc),
        "predictive": _summary(pred),
        "predictive_baseline": _summary(base),
        "predictive_gap": float(np.mean(pred) - np.mean(base)),
        "nnaa": nnaa_block,
        "overfit_warning": bool(overfit),
    }
    return payload


def _flatten(obj, prefix="") -> list[tuple[str, object]]:
    rows = []
    if isinstance(obj, dict):
        for key in sorted(obj):
            rows.extend(_flatten(obj[key], f"{prefix}{key}."))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            rows.extend(_flatten(v, f"{prefix}{i}."))
    else:
        rows.append((prefix[:-1], obj))
    return rows


def write_report(outdir, payload: dict,
                 real_train: list[TimeSeriesSample] | None = None,
                 synth: list[TimeSeriesSample] | None = None,
                 figures: bool = True) -> list[str]:
    """Write report.json, report.csv and figures; returns file names."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    if figures and real_train is not None and synth is not None:
        payload = dict(payload)
        payload["figures"] = render_figures(outdir / "figures",
                                            real_train, synth, payload)
        written.extend(f"figures/{name}" for name in payload["figures"])
    with open(outdir / "report.json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(outdir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        for key, value in _flatten(payload):
            writer.writerow([key, value])
    return ["report.json", "report.csv"] + written


# -- figures ------------------------------------------------------------

_META = {"Software": "mixdiff"}  # pinned so identical runs give identical bytes


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=110, metadata=_META)
    import matplotlib.pyplot as plt
    plt.close(fig)


def render_figures(figdir, real: list[TimeSeriesSample],
                   synth: list[TimeSeriesSample], payload: dict) -> list[str]:
    """Trajectory, per-step statistic and score-summary plots."""
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    figdir = Path(figdir)
    figdir.mkdir(parents=True, exist_ok=True)
    names = []
    p_num = real[0].x.shape[0]
    p_cat = real[0].c.shape[0]
    length = real[0].length

    if p_num:
        fig, axes = plt.subplots(p_num, 2, figsize=(9, 2.6 * p_num),
                                 squeeze=False, sharey="row")
        show = min(6, len(real), len(synth))
        for p in range(p_num):
            for col, (tag, corpus) in enumerate([("real", real),
                                                 ("synthetic", synth)]):
                ax = axes[p][col]
                for s in corpus[:show]:
                    ax.plot(s.x[p], lw=0.9, alpha=0.75)
                ax.set_title(f"channel {p} ({tag})", fontsize=9)
                ax.set_xlim(0, length - 1)
        fig.tight_layout()
        _save(fig, figdir / "trajectories.png")
        names.append("trajectories.png")

    rows = p_num + (1 if p_num else 0) + p_cat
    if rows:
        fig, axes = plt.subplots(rows, 1, figsize=(7, 2.2 * rows),
                                 squeeze=False)
        axes = axes[:, 0]
        row = 0
        steps = np.arange(length)
        for p in range(p_num):
            ax = axes[row]
            for tag, corpus, color in [("real", real, "C0"),
                                       ("synthetic", synth, "C1")]:
                stack = np.stack([s.x[p] for s in corpus])
                mean = np.nanmean(stack, axis=0)
                sd = np.nanstd(stack, axis=0)
                ax.plot(steps, mean, color=color, label=tag)
                ax.fill_between(steps, mean - sd, mean + sd, color=color,
                                alpha=0.2)
            ax.set_title(f"numerical channel {p}: per-step mean ± sd",
                         fontsize=9)
            ax.legend(fontsize=8)
            row += 1
        if p_num:
            ax = axes[row]
            for tag, corpus, color in [("real", real, "C0"),
                                       ("synthetic", synth, "C1")]:
                rate = np.stack([s.m for s in corpus]).mean(axis=(0, 1))
                ax.plot(steps, rate, color=color, label=tag)
            ax.set_ylim(0, 1)
            ax.set_title("missing rate per step", fontsize=9)
            ax.legend(fontsize=8)
            row += 1
        for p in range(p_cat):
            ax = axes[row]
            k = int(max(np.max([s.c[p].max() for s in real]),
                        np.max([s.c[p].max() for s in synth]))) + 1
            for tag, corpus, ls in [("real", real, "-"),
                                    ("synthetic", synth, "--")]:
                codes = np.stack([s.c[p] for s in corpus])
                for v in range(k):
                    ax.plot(steps, (codes == v).mean(axis=0), ls=ls,
                            color=f"C{v % 10}",
                            label=f"{tag} cat {v}" if v < 3 else None)
            ax.set_ylim(0, 1)
            ax.set_title(f"categorical channel {p}: "
                         "per-step frequency (dashed = synthetic)",
                         fontsize=9)
            ax.legend(fontsize=7, ncol=2)
            row += 1
        fig.tight_layout()
        _save(fig, figdir / "channel_stats.png")
        names.append("channel_stats.png")

    fig, ax = plt.subplots(figsize=(6, 3.2))
    labels = ["discriminative", "predictive", "predictive\nbaseline"]
    means = [payload["discriminative"]["mean"], payload["predictive"]["mean"],
             payload["predictive_baseline"]["mean"]]
    sds = [payload["discriminative"]["sd"], payload["predictive"]["sd"],
           payload["predictive_baseline"]["sd"]]
    labels.append("nnaa")
    means.append(payload["nnaa"]["value"])
    sds.append(0.0)
    ax.bar(range(len(means)), means, yerr=sds, capsize=4,
           color=["C0", "C1", "C2", "C3"])
    ax.set_xticks(range(len(means)), labels, fontsize=9)
    ax.set_title("scores (lower is better)", fontsize=10)
    fig.tight_layout()
    _save(fig, figdir / "scores.png")
    names.append("scores.png")
    return names
