import xml.etree.ElementTree as ET

import numpy as np
import pytest

from lossep.clutter import KEEP_ON, SHUT_DOWN, clutter_ep, exact_clutter_posterior
from lossep.demos import (
    PINNED_SEED,
    TWO_POINT_UTILITY,
    TWO_POINT_Y,
    SearchExhausted,
    clutter_demo,
    clutter_instance,
    count_modes,
    pick_tau,
    search_clutter_seed,
    two_point_demo,
    two_point_grid,
    write_clutter_demo,
    write_two_point_demo,
)
from lossep.reporting import read_csv

# Two-point posterior moments from 240x240 Gauss-Hermite quadrature in the
# whitened prior coordinates, independent of the grid code.
GH_MEAN = 2.33089157
GH_TRACE = 9.5795715
GH_COV12 = 0.90834461

# Pinned clutter fixture (seed PINNED_SEED)
PINNED_Y = [5.48326954, -0.82784157, -2.67264907, -1.3789801, -1.60967422]
PINNED_TAU = -1.0


@pytest.fixture(scope="module")
def pinned():
    return clutter_demo(PINNED_SEED)


@pytest.fixture(scope="module")
def two_point():
    return two_point_demo()


def test_pinned_instance_is_locked(pinned):
    assert np.allclose(pinned.y, PINNED_Y, atol=1e-8)
    assert pinned.utility.tau_crit == PINNED_TAU
    assert pinned.actions == {"bayes": SHUT_DOWN, "ep": KEEP_ON, "lossep": SHUT_DOWN}
    assert pinned.n_modes == 2
    assert pinned.qualifies
    assert pinned.p_high["bayes"] == pytest.approx(0.2554297889586465, abs=1e-10)


def test_search_finds_pinned_seed():
    demo = search_clutter_seed(PINNED_SEED, 1)
    assert demo.seed == PINNED_SEED and demo.qualifies


def test_search_exhausted():
    with pytest.raises(SearchExhausted):
        search_clutter_seed(0, 5)


def test_pick_tau_prefers_flip(pinned):
    post = exact_clutter_posterior(pinned.y)
    state, _ = clutter_ep(pinned.y)
    tau, hit = pick_tau(post, state.q())
    assert hit and tau == PINNED_TAU


def test_count_modes():
    y, _ = clutter_instance(PINNED_SEED)
    assert count_modes(exact_clutter_posterior(y)) == 2
    assert count_modes(exact_clutter_posterior([0.1, -0.2, 0.05])) == 1


def test_write_clutter_demo(pinned, tmp_path):
    s = write_clutter_demo(pinned, tmp_path)
    assert s["qualifies"] and s["actions"]["ep"] == "keep_on"
    header, rows = read_csv(tmp_path / "clutter_densities.csv")
    assert header == ["phi", "exact", "ep", "lossep_q", "lossep_qbar"]
    x = np.array([[float(v) for v in r] for r in rows])
    dx = x[1, 0] - x[0, 0]
    assert x[:, 1].sum() * dx == pytest.approx(1.0, abs=1e-2)
    ET.parse(tmp_path / "clutter_densities.svg")
    _, acts = read_csv(tmp_path / "clutter_actions.csv")
    assert [a[2] for a in acts] == ["shut_down", "keep_on", "shut_down"]


def test_two_point_grid_normalized_and_antisymmetric():
    g = two_point_grid()
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-6)
    m = g.moments().mean
    swapped = two_point_grid(y=-TWO_POINT_Y).moments().mean
    assert np.allclose(swapped, -m, atol=1e-12)
    assert m[0] == pytest.approx(-m[1], abs=1e-12)


def test_two_point_grid_matches_gauss_hermite():
    g = two_point_grid().moments()
    assert g.mean[1] == pytest.approx(GH_MEAN, abs=1e-7)
    assert g.mean[0] == pytest.approx(-GH_MEAN, abs=1e-7)
    assert np.trace(g.cov) == pytest.approx(GH_TRACE, abs=1e-6)
    assert g.cov[0, 1] == pytest.approx(GH_COV12, abs=1e-6)


def test_ep_close_to_grid(two_point):
    g = two_point.posterior.moments()
    assert two_point.ep_converged and two_point.lossep_converged
    assert np.max(np.abs(two_point.ep.mean - g.mean)) < 0.15
    assert np.max(np.abs(two_point.ep.cov - g.cov)) < 0.15


def test_lossep_qbar_tracks_utility_weighted_target(two_point):
    w = two_point.weighted.moments()
    assert np.max(np.abs(two_point.lossep_qbar.mean - w.mean)) < 0.02
    assert abs(np.trace(two_point.lossep_qbar.cov) - np.trace(w.cov)) < 0.05
    # the utility tilt moves q_bar toward the target relative to plain EP
    d_lossep = np.abs(two_point.lossep_qbar.mean - w.mean).max()
    d_ep = np.abs(two_point.ep.mean - w.mean).max()
    assert d_lossep < d_ep


def test_two_point_actions_favour_plus(two_point):
    # b < 0 lowers the decision boundary, so +1 wins on more than half the comb
    assert TWO_POINT_UTILITY.bias < 0
    assert (two_point.actions_exact == 1).mean() > 0.5
    assert np.mean(two_point.actions_lossep == two_point.actions_exact) > 0.99


def test_write_two_point(two_point, tmp_path):
    s = write_two_point_demo(two_point, tmp_path)
    header, rows = read_csv(tmp_path / "two_point_moments.csv")
    assert header[0] == "method" and len(rows) == 5
    assert s["trace_exact_posterior"] == pytest.approx(GH_TRACE, abs=1e-6)
    root = ET.parse(tmp_path / "two_point.svg").getroot()
    assert root.tag.endswith("svg")
    _, grid = read_csv(tmp_path / "two_point_grid.csv")
    assert len(grid) == two_point.posterior.gx.size ** 2

