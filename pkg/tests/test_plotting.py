import numpy as np
import pytest

from hifusion.dataset import SlideRecord, SpotMeta
from hifusion.plotting import panel_annotation, plot_spatial_expression, render_expression_figure


def _slide(n_spots=5):
    rng = np.random.default_rng(0)
    spots = [SpotMeta(f"s{i}", int(20 + 30 * i), int(25 + 10 * i)) for i in range(n_spots)]
    image = rng.integers(0, 255, size=(96, 160, 3), dtype=np.uint8)
    return SlideRecord("S0", "P0", 0, "", spots, image=image)


def test_panel_annotation_perfect_and_constant():
    truth = np.array([0.1, 0.5, 0.9, 0.3])
    assert panel_annotation(truth, truth) == "MAE 0.000  PCC 1.00"
    constant = np.full(4, 0.2)
    text = panel_annotation(constant, truth)
    assert text.startswith("MAE ")
    assert text.endswith("PCC n/a")


def _panel_axes(fig):
    return [ax for ax in fig.axes if ax.collections and ax.get_label() != "<colorbar>"]


def test_truth_vs_itself_panels_carry_identical_data():
    slide = _slide()
    rng = np.random.default_rng(1)
    truth = rng.uniform(size=(5, 2))
    fig = render_expression_figure(slide, truth, truth.copy(), ["g0", "g1"], ["g0"])
    try:
        measured, predicted = _panel_axes(fig)
        sc_m, sc_p = measured.collections[-1], predicted.collections[-1]
        assert np.array_equal(sc_m.get_offsets(), sc_p.get_offsets())
        assert np.array_equal(sc_m.get_array(), sc_p.get_array())
        assert sc_m.get_clim() == sc_p.get_clim()
        assert measured.get_xlabel() == predicted.get_xlabel() == "MAE 0.000  PCC 1.00"
    finally:
        import matplotlib.pyplot as plt

        plt.close(fig)


def test_prediction_and_truth_panels_share_color_scale():
    slide = _slide()
    truth = np.linspace(0.0, 1.0, 10).reshape(5, 2)
    pred = truth * 3.0 - 1.0  # wider range than the truth column
    fig = render_expression_figure(slide, truth, pred, ["g0", "g1"], ["g0", "g1"])
    try:
        scatter_axes = _panel_axes(fig)
        assert len(scatter_axes) == 4
        for row in (scatter_axes[0:2], scatter_axes[2:4]):
            clims = [ax.collections[-1].get_clim() for ax in row]
            assert clims[0] == clims[1]
        lo, hi = scatter_axes[0].collections[-1].get_clim()
        assert lo == min(truth[:, 0].min(), pred[:, 0].min())
        assert hi == max(truth[:, 0].max(), pred[:, 0].max())
    finally:
        import matplotlib.pyplot as plt

        plt.close(fig)


def test_unknown_gene_and_shape_errors():
    slide = _slide()
    values = np.zeros((5, 2))
    with pytest.raises(ValueError, match="GENE_X"):
        render_expression_figure(slide, values, values, ["g0", "g1"], ["GENE_X"])
    with pytest.raises(ValueError, match="no genes"):
        render_expression_figure(slide, values, values, ["g0", "g1"], [])
    with pytest.raises(ValueError, match="expected 5 x 2"):
        render_expression_figure(slide, np.zeros((4, 2)), values, ["g0", "g1"], ["g0"])


def test_plot_writes_deterministic_png(tmp_path):
    slide = _slide()
    rng = np.random.default_rng(2)
    truth = rng.uniform(size=(5, 3))
    pred = rng.uniform(size=(5, 3))
    first = plot_spatial_expression(
        slide, truth, pred, ["a", "b", "c"], ["a", "c"], tmp_path / "one.png"
    )
    second = plot_spatial_expression(
        slide, truth, pred, ["a", "b", "c"], ["a", "c"], tmp_path / "two.png"
    )
    assert first.is_file() and first.stat().st_size > 0
    assert first.read_bytes() == second.read_bytes()
