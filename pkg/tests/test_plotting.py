import numpy as np

from strokeseg.metrics import CaseMetrics, MetricsReport
from strokeseg.plotting import plot_crossval, plot_history, plot_metrics, plot_overlay
from strokeseg.training import HistoryRow

PNG = b"\x89PNG"


def test_history_figure(tmp_path):
    hist = [HistoryRow(e, 1e-3 / e, 1.0 / e, 0.1 * e if e % 2 == 0 else None) for e in range(1, 9)]
    path = plot_history(hist, tmp_path / "sub" / "h.png", "fold 0")
    assert path.read_bytes()[:4] == PNG


def test_metrics_and_crossval_figures(tmp_path):
    rows = [CaseMetrics(f"c{i}", 0.8 + 0.01 * i, 0.7, 1.5 * i, i) for i in range(5)]
    assert plot_metrics(MetricsReport(rows), tmp_path / "m.png").read_bytes()[:4] == PNG
    header = ["Fold 1", "Fold 2", "Average"]
    assert plot_crossval(header, [[0.8, 0.7, 0.75], [0.82, 0.71, 0.765]], tmp_path / "cv.png").read_bytes()[:4] == PNG


def test_overlay_handles_empty_masks(tmp_path):
    img = np.random.default_rng(0).normal(size=(12, 12, 6))
    truth = np.zeros((12, 12, 6), np.uint8)
    truth[3:6, 3:6, 2] = 1
    assert plot_overlay(img, truth, truth, tmp_path / "a.png").exists()
    assert plot_overlay(img, None, np.zeros_like(truth), tmp_path / "b.png").exists()
