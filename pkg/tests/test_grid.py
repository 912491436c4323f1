import numpy as np
import pytest

from cordeslab.fields import Box
from cordeslab.grid import (GridFunction, NormWeights, apply_stencil,
                            build_grid, discrete_norms, pair)

RNG = np.random.default_rng(17)


def test_build_grid_spacings():
    g = build_grid(Box((0.0,), (1.0,)), 3, nt=2, T=1.0)
    assert g.h[0] == 0.25
    assert np.allclose(g.axis_nodes(0), [0.25, 0.5, 0.75])
    g2 = build_grid(Box((0.0, 0.0), (1.0, 2.0)), (3, 7), nt=4, T=1.0)
    assert np.allclose(g2.h, [0.25, 0.25])


def test_build_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        build_grid(Box((0.0,), (1.0,)), 1, nt=2, T=1.0)
    with pytest.raises(ValueError):
        build_grid(Box((0.0,), (1.0,)), 5, nt=0, T=1.0)
    with pytest.raises(Exception):
        build_grid(Box((1.0,), (1.0,)), 5, nt=2, T=1.0)


def grid_fn(g, fn):
    pts = g.nodes()
    return GridFunction(g, fn(pts).reshape(g.shape))


def test_stencils_on_zero():
    g = build_grid(Box((0.0,), (1.0,)), 7, nt=1, T=1.0)
    z = GridFunction(g, np.zeros(g.shape))
    for kind, j in (("d1", None), ("d2", None)):
        out = apply_stencil(z, kind, 1, j)
        assert np.all(out.values == 0.0)


def test_d2_consistency_sine():
    g = build_grid(Box((0.0,), (1.0,)), 127, nt=1, T=1.0)
    u = grid_fn(g, lambda p: np.sin(np.pi * p[:, 0]))
    d2 = apply_stencil(u, "d2", 1)
    exact = -np.pi ** 2 * u.values
    assert np.abs(d2.values - exact).max() <= 0.01 * np.pi ** 2


def test_cross_exact_on_bilinear():
    g = build_grid(Box((0.0, 0.0), (1.0, 1.0)), (9, 9), nt=1, T=1.0)
    u = grid_fn(g, lambda p: p[:, 0] * p[:, 1])
    cr = apply_stencil(u, "cross", 1, 2)
    # interior nodes away from the boundary see the exact value 1
    assert np.abs(cr.values[1:-1, 1:-1] - 1.0).max() <= 1e-12


def test_d2_second_order_convergence():
    errs = []
    for m in (31, 63):
        g = build_grid(Box((0.0,), (1.0,)), m, nt=1, T=1.0)
        u = grid_fn(g, lambda p: np.sin(np.pi * p[:, 0]))
        d2 = apply_stencil(u, "d2", 1)
        errs.append(np.abs(d2.values + np.pi ** 2 * u.values).max())
    assert 3.5 <= errs[0] / errs[1] <= 4.5


def test_stencil_rejects_out_of_range_axis():
    g = build_grid(Box((0.0,), (1.0,)), 7, nt=1, T=1.0)
    u = GridFunction(g, np.zeros(g.shape))
    with pytest.raises(IndexError):
        apply_stencil(u, "d1", 2)


# ----------------------------------------------------------------------------
# norms


def test_norms_zero_function():
    g = build_grid(Box((0.0,), (1.0,)), 15, nt=4, T=1.0)
    nb = discrete_norms(GridFunction(g, np.zeros((5, 15))))
    for field in ("X0", "X2", "C0", "C1", "Y2", "Yhat2"):
        assert getattr(nb, field) == 0.0


def test_norms_sine_slice_values():
    g = build_grid(Box((0.0,), (1.0,)), 4095, nt=1, T=1.0)
    u = grid_fn(g, lambda p: np.sin(np.pi * p[:, 0]))
    nb = discrete_norms(u)
    assert abs(nb.H0[0] - 1 / np.sqrt(2)) <= 1e-4
    h1_semi = np.sqrt(nb.H1[0] ** 2 - nb.H0[0] ** 2)
    assert abs(h1_semi - np.pi / np.sqrt(2)) <= 1e-3


def test_norms_strengthened_second_order_value():
    # bracket with gamma = 1, alpha1 -> 0: sqrt(0.5 * pi^4 / 2) = pi^2 / 2
    g = build_grid(Box((0.0,), (1.0,)), 511, nt=1, T=1.0)
    u = grid_fn(g, lambda p: np.sin(np.pi * p[:, 0]))
    w = NormWeights((1,), {1: 1.0}, alpha1=1e-12, alpha2=1.0)
    nb = discrete_norms(u, w)
    assert abs(nb.Hhat2[0] - np.pi ** 2 / 2) <= 1e-2


def test_norm_equivalence_bounds():
    g = build_grid(Box((0.0, 0.0), (1.0, 1.0)), (12, 12), nt=3, T=0.5)
    w = NormWeights((1, 2), {1: 0.7, 2: 1.6}, alpha1=0.1)
    n = g.n
    for _ in range(20):
        u = GridFunction(g, RNG.standard_normal((4, 12, 12)))
        nb = discrete_norms(u, w)
        upper = (np.sqrt(n) + w.alpha1)
        assert np.all(w.alpha1 * nb.W22 <= nb.Hhat2 + 1e-12)
        assert np.all(nb.Hhat2 <= upper * nb.W22 + 1e-12)


def test_norms_absolutely_homogeneous():
    g = build_grid(Box((0.0,), (1.0,)), 15, nt=3, T=1.0)
    u = RNG.standard_normal((4, 15)) + 1j * RNG.standard_normal((4, 15))
    nb1 = discrete_norms(GridFunction(g, u))
    c = -2.5 + 1.3j
    nb2 = discrete_norms(GridFunction(g, c * u))
    for field in ("X0", "X2", "Xhat2", "C0", "C1", "Y2", "Yhat2"):
        assert abs(getattr(nb2, field) - abs(c) * getattr(nb1, field)) \
            <= 1e-12 * max(1.0, abs(getattr(nb1, field)))


def test_y_norm_composition():
    g = build_grid(Box((0.0,), (1.0,)), 15, nt=3, T=1.0)
    w = NormWeights.default(1, alpha2=1.7)
    u = GridFunction(g, RNG.standard_normal((4, 15)))
    nb = discrete_norms(u, w)
    assert nb.Y2 == nb.X2 + nb.C1
    assert abs(nb.Yhat2 - (nb.Xhat2 + 1.7 * nb.C1)) <= 1e-15


def test_weights_validation():
    with pytest.raises(ValueError):
        NormWeights((1,), {1: 2.5})
    with pytest.raises(ValueError):
        NormWeights((1,), {2: 1.0})
    with pytest.raises(ValueError):
        NormWeights((1,), {1: 1.0}, alpha1=0.0)


# ----------------------------------------------------------------------------
# pairing


def test_pair_normalized_density():
    g = build_grid(Box((0.0,), (1.0,)), 255, nt=1, T=1.0)
    ones = GridFunction(g, np.ones(g.shape))
    # interior triangular bump, normalized
    x = g.axis_nodes(0)
    rho = np.clip(1 - np.abs(x - 0.5) / 0.2, 0, None)
    rho /= rho.sum() * g.cell_volume
    assert abs(pair(ones, rho) - 1.0) <= 1e-9


def test_pair_linear_against_integral():
    g = build_grid(Box((0.0,), (1.0,)), 1023, nt=1, T=1.0)
    u = grid_fn(g, lambda p: p[:, 0])
    rho = np.ones(g.shape)
    assert abs(pair(u, rho) - 0.5) <= 1e-6


def test_pair_zero_density():
    g = build_grid(Box((0.0,), (1.0,)), 15, nt=1, T=1.0)
    u = GridFunction(g, RNG.standard_normal(g.shape))
    assert pair(u, np.zeros(g.shape)) == 0.0


def test_pair_bilinear():
    g = build_grid(Box((0.0,), (1.0,)), 31, nt=1, T=1.0)
    u = RNG.standard_normal(g.shape)
    v = RNG.standard_normal(g.shape)
    w = RNG.standard_normal(g.shape)
    a, b = 1.7, -0.4
    lhs = pair(GridFunction(g, a * u + b * v), w)
    rhs = a * pair(GridFunction(g, u), w) + b * pair(GridFunction(g, v), w)
    assert abs(lhs - rhs) <= 1e-12
    # conjugate linear in the second argument
    lhs2 = pair(GridFunction(g, u), (1 + 2j) * w)
    assert abs(lhs2 - np.conj(1 + 2j) * pair(GridFunction(g, u), w)) <= 1e-12