import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from manifold_metrics import svg
from manifold_metrics.errors import UsageError

NS = "{http://www.w3.org/2000/svg}"


def cell_colors(text):
    root = ET.fromstring(text)
    return [r.get("fill") for r in root.iter(NS + "rect") if r.find(NS + "title") is not None]


def test_two_level_heatmap():
    text = svg.heatmap_svg([[0.0, 1.0], [1.0, 0.0]])
    colors = cell_colors(text)
    assert len(colors) == 4 and len(set(colors)) == 2
    assert colors[0] == colors[3] == "#ffffff"


def test_inf_diagonal_distinguished():
    m = np.full((3, 3), 0.2)
    m[[0, 1, 2], [1, 2, 0]] = 0.7
    np.fill_diagonal(m, math.inf)
    colors = np.array(cell_colors(svg.heatmap_svg(m))).reshape(3, 3)
    assert set(np.diagonal(colors)) == {svg.INF_COLOR}
    assert svg.INF_COLOR not in colors[~np.eye(3, dtype=bool)]


def test_nan_cells_grey():
    colors = cell_colors(svg.heatmap_svg([[math.nan, 0.5], [0.5, math.nan]]))
    assert colors[0] == colors[3] == svg.NAN_COLOR


def test_deterministic_bytes(tmp_path):
    m = np.random.default_rng(0).random((4, 4))
    svg.heatmap_svg(m, tmp_path / "a.svg", "t")
    svg.heatmap_svg(m, tmp_path / "b.svg", "t")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    s1 = svg.spectrum_svg({"a": [3.0, 2.0, 1.0], "b": [2.5, 2.4, 0.1]})
    assert s1 == svg.spectrum_svg({"a": [3.0, 2.0, 1.0], "b": [2.5, 2.4, 0.1]})


def test_plots_parse():
    ET.fromstring(svg.spectrum_svg({"m": [1.0, math.inf, 0.5]}, title="<&>"))
    rows = [{"n": 100, "std": 0.1}, {"n": 1000, "std": 0.0}, {"n": 10000, "std": 0.01}]
    root = ET.fromstring(svg.convergence_svg(rows))
    labels = [t.text for t in root.iter(NS + "text")]
    assert "100" in labels and "10000" in labels and "1000" not in labels


def test_unwritable_path(tmp_path):
    with pytest.raises(UsageError):
        svg.heatmap_svg([[1.0]], tmp_path / "missing" / "x.svg")
