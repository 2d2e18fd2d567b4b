"""Report figures rendered next to the delimited outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

TERM_LABELS = {"lp": "length", "op": "objects", "og": "object gen",
               "cg": "caption gen", "refine": "refinement", "ce": "next token"}


def loss_curves(history, path):
    """Per-epoch loss terms on a log scale."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    epochs = [h["epoch"] for h in history]
    for key in history[0]:
        if key in ("epoch", "total"):
            continue
        ax.plot(epochs, [h[key] for h in history], label=TERM_LABELS.get(key, key))
    ax.plot(epochs, [h["total"] for h in history], "k--", label="total", linewidth=1)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def latency_figure(rows, path):
    """Per-video decode time against target length for both decoders."""
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    lengths = [r["length"] for r in rows]
    ax.plot(lengths, [r["na_ms"] for r in rows], "o-", label="parallel decode")
    ax.plot(lengths, [r["ar_ms"] for r in rows], "s-", label="left-to-right decode")
    ax.set_xlabel("target caption length")
    ax.set_ylabel("ms per video (median)")
    ax.set_ylim(bottom=0)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metric_bars(metrics, path):
    """Bar chart of the headline evaluation numbers."""
    keys = [k for k in ("bleu_4", "rouge_l", "cider", "novel", "unique", "vocab_usage")
            if k in metrics and metrics[k] == metrics[k]]  # drop NaNs
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.bar(range(len(keys)), [metrics[k] for k in keys], color="steelblue")
    ax.set_xticks(range(len(keys)), keys, rotation=20, fontsize=8)
    for i, k in enumerate(keys):
        ax.text(i, metrics[k], f"{metrics[k]:.1f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("score")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
