"""Run plots: loss components, target mIoU over steps, caption token histograms."""
import json
import logging
import os
from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.captions import caption_stats, load_bank  # noqa: E402
from app.engine import read_history  # noqa: E402
from app.exceptions import CaptionDAError, PlotError  # noqa: E402
from app.schemas import MAX_CAPTION_TOKENS, CaptionRecord  # noqa: E402

logger = logging.getLogger(__name__)

LOSS_SERIES = ("L_S", "L_T", "L_p")


def _save(fig, path: Path, sidecar: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.stem + ".tmp.png")
    try:
        fig.savefig(tmp, format="png", dpi=120, bbox_inches="tight")
    finally:
        plt.close(fig)
    os.replace(tmp, path)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def plot_losses(history_path: Path, out_path: Path) -> Path:
    history_path = Path(history_path)
    if not history_path.exists():
        raise PlotError(f"no metric history at {history_path}")
    history = read_history(history_path)
    if not history:
        raise PlotError(f"{history_path} holds no steps")
    steps = [row["step"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in LOSS_SERIES:
        ax.plot(steps, [row[key] for row in history], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    sidecar = {"points": len(steps), "series": list(LOSS_SERIES), "source": history_path.name}
    return _save(fig, Path(out_path), sidecar)


def plot_miou(curve_path: Path, out_path: Path) -> Optional[Path]:
    curve_path = Path(curve_path)
    if not curve_path.exists():
        raise PlotError(f"no evaluation curve at {curve_path}")
    curve = json.loads(curve_path.read_text(encoding="utf-8"))
    if not curve:
        logger.warning("%s is empty, skipping the mIoU plot", curve_path)
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot([p["step"] for p in curve], [p["miou"] for p in curve], marker="o", linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("target mIoU (%)")
    ax.grid(alpha=0.3)
    return _save(fig, Path(out_path), {"points": len(curve), "source": curve_path.name})


def plot_token_histograms(records: Sequence[CaptionRecord], out_path: Path) -> Path:
    try:
        stats = caption_stats(records)
    except CaptionDAError as exc:
        raise PlotError(f"cannot plot token lengths: {exc}") from exc
    edges = stats.bin_edges
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, counts, title in ((axes[0], stats.histogram_raw, "raw"), (axes[1], stats.histogram_refined, "refined")):
        ax.bar(edges[:-1], counts, width=edges[1] - edges[0], align="edge", edgecolor="black", linewidth=0.5)
        ax.axvline(MAX_CAPTION_TOKENS, color="red", linestyle="--", linewidth=1)
        ax.set_title(f"{title} captions")
        ax.set_xlabel("tokens")
    axes[0].set_ylabel("captions")
    return _save(fig, Path(out_path), stats.to_dict())


def emit_plots(run_dir: Path, captions: Optional[Path] = None) -> List[Path]:
    """Write every plot a run directory supports into ``run_dir/plots``; run data is only read."""
    run_dir = Path(run_dir)
    plots = run_dir / "plots"
    written = [plot_losses(run_dir / "history.csv", plots / "losses.png")]
    curve = run_dir / "eval_curve.json"
    if curve.exists():
        miou_plot = plot_miou(curve, plots / "miou.png")
        if miou_plot is not None:
            written.append(miou_plot)
    if captions is not None:
        written.append(plot_token_histograms(load_bank(captions), plots / "tokens.png"))
    return written
