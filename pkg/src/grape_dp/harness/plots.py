"""Optional matplotlib rendering of report CSVs to PNG files."""

from __future__ import annotations

from pathlib import Path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_train(records, png_path: str | Path, title: str) -> None:
    plt = _pyplot()
    steps = [r.step for r in records]
    losses = [r.loss for r in records]
    accs = [r.accuracy for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(steps, losses, marker="o", ms=3, label="train loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if any(a == a for a in accs):  # accuracy present (not NaN)
        ax2 = ax.twinx()
        ax2.plot(steps, accs, color="tab:orange", marker="s", ms=3, label="eval accuracy")
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0.0, 1.02)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def render_spectrum(rows, png_path: str | Path, title: str) -> None:
    plt = _pyplot()
    series: dict[tuple[float, float], list[tuple[int, float]]] = {}
    for c, sigma, idx, _s, s_rel, _ in rows:
        series.setdefault((c, sigma), []).append((idx, s_rel))
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for (c, sigma), points in series.items():
        points.sort()
        label = f"C={'inf' if c != c or c == float('inf') else c}, sigma={sigma}"
        ax.semilogy([p[0] for p in points], [p[1] for p in points], label=label)
    ax.set_xlabel("singular value index")
    ax.set_ylabel("s_i / s_1")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def render_memory(method: str, predicted: dict, measured: dict, png_path: str | Path) -> None:
    plt = _pyplot()
    cats = list(predicted.keys())
    x = range(len(cats))
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.bar([i - 0.2 for i in x], [predicted[c] for c in cats], width=0.4, label="predicted")
    ax.bar([i + 0.2 for i in x], [measured.get(c, 0) for c in cats], width=0.4, label="measured")
    ax.set_xticks(list(x))
    ax.set_xticklabels(cats, rotation=15, fontsize=8)
    ax.set_ylabel("float64 slots")
    ax.set_title(f"memory model: {method}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
