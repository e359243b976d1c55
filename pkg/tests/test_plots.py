import json
from datetime import datetime, timezone

import pytest

from app.captions import caption_stats
from app.engine import write_history
from app.exceptions import PlotError
from app.plots import emit_plots, plot_losses, plot_token_histograms
from app.schemas import CaptionRecord


def history(steps):
    return [{"step": i, "L_S": 2.0 / i, "L_T": 0.1, "L_p": 0.5, "q_T": 0.3, "lr": 6e-5} for i in range(1, steps + 1)]


def captions(count):
    return [CaptionRecord(image_id=f"s{i:04d}", raw_caption="word " * (80 + i), raw_tokens=80 + i,
                          refined_caption="short caption", refined_tokens=2 + i, provider="template-mock",
                          created_at=datetime(2024, 1, 1, tzinfo=timezone.utc)) for i in range(count)]


def test_loss_plot_sidecar_counts_points(tmp_path):
    path = plot_losses(write_history(history(100), tmp_path / "history.csv"), tmp_path / "plots" / "losses.png")
    assert path.exists() and path.stat().st_size > 0
    sidecar = json.loads(path.with_suffix(".json").read_text())
    assert sidecar["points"] == 100
    assert sidecar["series"] == ["L_S", "L_T", "L_p"]


def test_loss_plot_needs_history(tmp_path):
    with pytest.raises(PlotError):
        plot_losses(tmp_path / "missing.csv", tmp_path / "losses.png")
    with pytest.raises(PlotError):
        plot_losses(write_history([], tmp_path / "empty.csv"), tmp_path / "losses.png")


def test_token_histogram_sidecar_matches_stats(tmp_path):
    records = captions(12)
    path = plot_token_histograms(records, tmp_path / "tokens.png")
    assert json.loads(path.with_suffix(".json").read_text()) == caption_stats(records).to_dict()


def test_token_histogram_of_empty_bank_is_an_error(tmp_path):
    with pytest.raises(PlotError):
        plot_token_histograms([], tmp_path / "tokens.png")
    assert not (tmp_path / "tokens.png").exists()


def test_emit_plots_reads_a_run_directory(tmp_path):
    write_history(history(5), tmp_path / "history.csv")
    (tmp_path / "eval_curve.json").write_text(json.dumps([{"step": 5, "miou": 12.5}]))
    before = sorted(p.name for p in tmp_path.iterdir())
    written = emit_plots(tmp_path)
    assert [p.name for p in written] == ["losses.png", "miou.png"]
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(before + ["plots"])


def test_emit_plots_skips_empty_eval_curve(tmp_path):
    write_history(history(3), tmp_path / "history.csv")
    (tmp_path / "eval_curve.json").write_text("[]")
    assert [p.name for p in emit_plots(tmp_path)] == ["losses.png"]
