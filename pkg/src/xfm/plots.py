"""Figure rendering for training runs and grid sweeps.

Everything draws through the Agg backend straight to files; no display is
assumed. Figures sit next to the delimited outputs they visualize
(history.jsonl, grid_results.csv).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def render_history(records: list[dict], path) -> None:
    """Loss curves plus validation AUC for one training run."""
    epochs = [r["epoch"] for r in records]
    train_loss = [r["train_loss"] for r in records]
    valid_loss = [r.get("valid_loss") for r in records]
    valid_auc = [r.get("valid_auc") for r in records]
    has_valid = any(v is not None for v in valid_auc)

    fig, axes = plt.subplots(1, 2 if has_valid else 1, figsize=(10 if has_valid else 5, 4))
    ax_loss = axes[0] if has_valid else axes
    ax_loss.plot(epochs, train_loss, marker="o", label="train logloss")
    if any(v is not None for v in valid_loss):
        ax_loss.plot(epochs, valid_loss, marker="s", label="valid logloss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("logloss")
    ax_loss.legend()
    ax_loss.grid(True, alpha=0.3)

    if has_valid:
        ax_auc = axes[1]
        ax_auc.plot(epochs, valid_auc, marker="o", color="tab:green")
        ax_auc.set_xlabel("epoch")
        ax_auc.set_ylabel("valid AUC")
        ax_auc.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_grid(rows: list[dict], path, top: int = 20) -> None:
    """Horizontal bars of validation AUC for the best grid combinations."""
    scored = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.4 * min(len(scored), top) + 1.2)))
    if scored:
        best = scored[:top]
        labels = [
            f"cin {r['cin_depth']}x{r['cin_width']} dnn {r['dnn_depth']}x{r['dnn_width']} "
            f"{r['activation']} lr={r['lr']} lam={r['lambda']}"
            for r in best
        ]
        aucs = [float(r["valid_auc"]) for r in best]
        pos = range(len(best) - 1, -1, -1)
        ax.barh(list(pos), aucs, color="tab:blue")
        ax.set_yticks(list(pos))
        ax.set_yticklabels(labels, fontsize=7)
        ax.set_xlabel("valid AUC")
    else:
        ax.text(0.5, 0.5, "no successful combinations", ha="center", va="center")
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
