"""The native SVG PR plot: geometry, determinism, and input validation."""

import numpy as np
import pytest

from predseg.plot import _MARGIN, _SIZE, pr_plot_svg, write_pr_plot


def one_curve():
    recall = np.linspace(1.0, 0.1, 10)
    precision = np.linspace(0.5, 0.95, 10)
    return [("model", recall, precision)]


def test_is_a_complete_svg_document():
    svg = pr_plot_svg(one_curve())
    assert svg.startswith("<svg")
    assert svg.rstrip().endswith("</svg>")
    assert 'xmlns="http://www.w3.org/2000/svg"' in svg


def test_deterministic():
    assert pr_plot_svg(one_curve()) == pr_plot_svg(one_curve())


def test_axis_labels_title_and_legend():
    svg = pr_plot_svg(one_curve(), title="desk run")
    for text in ("desk run", "Recall", "Precision", "model"):
        assert text in svg


def test_corner_coordinates():
    # recall 0, precision 0 is the lower-left axes corner; 1,1 the upper right
    svg = pr_plot_svg([("c", np.array([0.0, 1.0]), np.array([0.0, 1.0]))])
    low = float(_MARGIN)
    high = float(_SIZE - _MARGIN)
    assert f'points="{low:.2f},{high:.2f} {high:.2f},{low:.2f}"' in svg


def test_many_curves_cycle_palette():
    curves = [
        (f"run{i}", np.array([0.0, 1.0]), np.array([1.0, 0.0])) for i in range(8)
    ]
    svg = pr_plot_svg(curves)
    for i in range(8):
        assert f"run{i}" in svg


def test_mismatched_arrays_rejected():
    with pytest.raises(ValueError, match="matching"):
        pr_plot_svg([("x", np.array([0.1, 0.2]), np.array([0.3]))])
    with pytest.raises(ValueError, match="matching"):
        pr_plot_svg([("x", np.zeros((2, 2)), np.zeros((2, 2)))])


def test_write_ends_with_newline(tmp_path):
    write_pr_plot(one_curve(), tmp_path / "pr.svg")
    assert (tmp_path / "pr.svg").read_text().endswith("</svg>\n")
