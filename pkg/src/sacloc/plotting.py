"""Report figures rendered next to the CSV/JSON outputs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
}

MODE_COLORS = {
    "none": "#7f7f7f",
    "predicted": "#8c564b",
    "modality_only": "#1f77b4",
    "frame_only": "#2ca02c",
    "composed": "#9467bd",
    "sac": "#d62728",
}


def _figure(width=4.5, height=None):
    height = height or width * 0.68
    return plt.subplots(figsize=(width, height))


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_loss_log(history, path, title="training loss"):
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        epochs = [h.epoch for h in history]
        ax.plot(epochs, [h.loss for h in history], label="total", color="k")
        ax.plot(epochs, [h.ce for h in history], label="cross-entropy", ls="--", color="#1f77b4")
        if any(h.ot for h in history):
            ax.plot(epochs, [h.ot for h in history], label="transport", ls=":", color="#d62728")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss per video")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_map_curve(maps: dict, path, label="mAP"):
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ious = sorted(maps)
        ax.plot(ious, [100 * maps[i] for i in ious], marker="o", color="k", label=label)
        ax.set_xlabel("tIoU threshold")
        ax.set_ylabel("mAP (%)")
        ax.set_ylim(bottom=0)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_experiment(out_dir, cells, reports, synth=None, video_labels: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    paths = []
    by_mode = defaultdict(list)
    for c in cells:
        by_mode[c.method].append(c)
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for mode, group in by_mode.items():
            ious = sorted(group[0].maps)
            vals = np.array([[100 * c.maps[i] for i in ious] for c in group])
            ax.errorbar(ious, vals.mean(axis=0), yerr=vals.std(axis=0, ddof=1) if len(group) > 1 else None,
                        marker="o", ms=3, capsize=2, label=mode, color=MODE_COLORS.get(mode))
        ax.set_xlabel("tIoU threshold")
        ax.set_ylabel("mAP (%)")
        ax.legend(frameon=False)
        paths.append(_save(fig, out / "map_vs_iou.png"))

        fig, ax = _figure()
        modes = list(by_mode)
        for x, mode in enumerate(modes):
            vals = [100 * c.maps.get(0.5, np.nan) for c in by_mode[mode]]
            ax.bar(x, np.mean(vals), color=MODE_COLORS.get(mode), alpha=0.6)
            ax.plot([x] * len(vals), vals, "k.", ms=4)
        ax.set_xticks(range(len(modes)), modes, rotation=30, ha="right")
        ax.set_ylabel("mAP@0.5 (%)")
        if 0.5 in reports:
            ax.set_title(f"t = {reports[0.5].t:.2f}, p = {reports[0.5].p:.2g}")
        paths.append(_save(fig, out / "map_at_05.png"))

        fig, ax = _figure()
        for mode, group in by_mode.items():
            curves = np.array([[h.ce for h in c.history] for c in group])
            if curves.size:
                ax.plot(range(1, curves.shape[1] + 1), curves.mean(axis=0), label=mode, color=MODE_COLORS.get(mode))
        ax.set_xlabel("epoch")
        ax.set_ylabel("frame cross-entropy")
        ax.legend(frameon=False)
        paths.append(_save(fig, out / "loss_curves.png"))

        if synth is not None and video_labels and any(c.attention for c in cells):
            fig, ax = _figure()
            labels = sorted(synth.modality_preference)
            for mode, group in by_mode.items():
                rows = [r for c in group for r in c.attention]
                if not rows:
                    continue
                per_label = defaultdict(list)
                for vid, _, mot in rows:
                    per_label[video_labels.get(vid, 0)].append(mot)
                ax.plot(labels, [np.mean(per_label[l]) if per_label[l] else np.nan for l in labels],
                        marker="s", label=mode, color=MODE_COLORS.get(mode))
            ax.axhline(0.5, color="0.6", lw=0.8)
            ax.set_xticks(labels, [f"{l}\n{synth.modality_preference[l][:3]}" for l in labels])
            ax.set_xlabel("class (preferred modality)")
            ax.set_ylabel("mean motion attention")
            ax.legend(frameon=False)
            paths.append(_save(fig, out / "modality_attention.png"))
    return paths

