import pandas as pd
import plotly.graph_objects as go

from utils.simulator import simulate_rally
from utils.spin import analyze_rally, scatter_frame
from utils.trajectory import segment_rally
from utils.visualization import VisualizationHelper, spin_scatter_svg, write_html


def _scatter():
    return pd.DataFrame({
        "rally_id": [0, 0, 1, 1],
        "frame_index": [10, 80, 12, 90],
        "delta_v_xy": [-0.6, -0.95, 0.0, float("nan")],
        "z_accel": [-9.4, -17.0, -23.5, float("nan")],
        "label": ["NoSpin", "LightTopspin", "HeavyTopspin", "NoCluster"],
        "centroid_distance": [0.1, 0.5, 0.5, float("inf")],
        "player_level": ["professional", "professional", "amateur", "amateur"],
    })


def test_svg_has_hits_centroids_and_legend_counts():
    svg = spin_scatter_svg(_scatter())
    assert svg.startswith("<svg")
    assert svg.count("<circle") == 3 + 4
    for name in ("Top Cluster", "Middle Cluster", "Bottom Cluster"):
        assert name in svg
    assert "NoSpin (1)" in svg
    assert "NoCluster (0)" in svg


def test_svg_of_no_hits_still_draws_the_centroids():
    empty = _scatter().iloc[0:0]
    svg = spin_scatter_svg(empty)
    assert svg.count("<path") == 3


def test_scatter_figure_marks_centroids():
    fig = VisualizationHelper().create_spin_scatter(_scatter())
    assert isinstance(fig, go.Figure)
    texts = [t.text[0] for t in fig.data if t.text is not None]
    assert sorted(texts) == ["Bottom Cluster", "Middle Cluster", "Top Cluster"]


def test_scatter_figure_facets_by_level():
    fig = VisualizationHelper().create_spin_scatter(_scatter(), facet_by_level=True)
    centroid_traces = [t for t in fig.data if t.text is not None]
    assert len(centroid_traces) == 3 * 2


def test_trajectory_figure_and_html(generator, table, tmp_path):
    truth = simulate_rally(generator.generate_rally(n_hits=1), table)
    segmented = segment_rally(truth, table, smooth=False)
    fig = VisualizationHelper().create_trajectory_figure(segmented, truth=truth, table=table)
    assert len(fig.data) == 3 + len(segmented.events)

    a, b = tmp_path / "a.html", tmp_path / "b.html"
    write_html(fig, str(a))
    write_html(fig, str(b))
    assert a.read_text() == b.read_text()
    assert 'id="spinflow-figure"' in a.read_text()


def test_loss_curve_has_raw_and_smoothed_lines():
    history = pd.DataFrame({"step": [0, 1, 2], "loss": [7.0, 6.0, 5.5], "smoothed_loss": [7.0, 6.5, 6.2]})
    fig = VisualizationHelper().create_loss_curve({"gated": history, "single": history})
    assert [t.name for t in fig.data] == ["gated loss", "gated smoothed", "single loss", "single smoothed"]


def test_scatter_frame_feeds_the_figure(generator, table):
    analyses = analyze_rally(simulate_rally(generator.generate_rally(n_hits=2), table))
    fig = VisualizationHelper().create_spin_scatter(scatter_frame(analyses))
    assert len(fig.data) >= 4
