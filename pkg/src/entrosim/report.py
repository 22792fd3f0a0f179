"""Optional PNG figures rendered next to the CSV outputs.

matplotlib is imported lazily so the simulator itself never needs it; the
figures are off unless ``run.figures = true``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise RuntimeError("figures need matplotlib; install the 'figures' extra") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def training_figure(rows: Sequence, path: Path, title: str = "") -> Path:
    """Batch entropy against its target, and mean reward, per step."""
    plt = _pyplot()
    steps = [r.step for r in rows]
    fig, (ax_h, ax_r) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax_h.plot(steps, [r.batch_entropy for r in rows], lw=1.0, label="batch entropy")
    ax_h.plot(steps, [r.target_mid for r in rows], lw=1.0, ls="--", label="target")
    ax_h.set_ylabel("entropy (nats)")
    ax_h.legend(loc="upper right", frameon=False)
    ax_r.plot(steps, [r.mean_reward for r in rows], lw=1.0, color="tab:green")
    ax_r.set_ylabel("mean reward")
    ax_r.set_xlabel("step")
    if title:
        ax_h.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def sweep_figure(traces: Mapping[str, Sequence[float]], path: Path) -> Path:
    """One entropy trace per labelled run."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, trace in traces.items():
        ax.plot(range(len(trace)), trace, lw=0.8, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("batch entropy (nats)")
    ax.legend(loc="upper right", frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def sign_agreement_figure(summaries: Sequence, path: Path) -> Path:
    """Agreement given the condition, per learning rate and estimator."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    kinds = sorted({s.estimator for s in summaries})
    for kind in kinds:
        pts = sorted((s.lr, s.agreement_given_condition) for s in summaries
                     if s.estimator == kind and s.lr > 0)
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=kind)
    ax.set_xscale("log")
    ax.set_xlabel("learning rate")
    ax.set_ylabel("sign agreement | condition")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
