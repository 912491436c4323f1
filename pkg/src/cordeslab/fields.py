"""Coefficient data for the operator and the associated diffusion.

A :class:`CoefficientField` bundles the second-order matrix ``b``, the
drift ``f`` and the complex zero-order rate ``lambda`` as evaluable
fields on ``D x [0, T]``, plus an optional diffusion factor ``beta`` with
``b = 0.5 * beta @ beta.T``.  Entries are expression-backed, constant, or
piecewise-constant tables; no opaque function plug-ins, so every field is
reproducible from its textual configuration.

Essential suprema are realized throughout as maxima over a declared
:class:`SampleSet` (grid nodes plus cell midpoints).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.signal import fftconvolve

from .expr import Expr, Num, parse_expression
from .linalg import symmetric_sqrt

__all__ = [
    "Box", "SampleSet", "sample_set",
    "ConstField", "ExprField", "TableField", "as_scalar_field",
    "CoefficientField", "make_field", "eval_field",
    "Decomposition", "decompose", "minimal_vertex_cover",
    "MollifiedField", "mollify",
    "builtin_problem", "builtin_solve_data", "BUILTIN_NAMES",
    "FieldConstructionError",
]

PATTERN_TOL = 1e-12


class FieldConstructionError(ValueError):
    """Raised when coefficient data violates a structural invariant."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; the closure is used for membership tests."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if len(self.lo) != len(self.hi):
            raise FieldConstructionError("box lo/hi dimension mismatch")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise FieldConstructionError("degenerate box")

    @property
    def n(self) -> int:
        return len(self.lo)

    @property
    def sides(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def contains(self, x: np.ndarray, open_set: bool = False) -> np.ndarray:
        """Vectorized membership; ``open_set`` tests the interior."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        if open_set:
            return np.all((x > lo) & (x < hi), axis=-1)
        return np.all((x >= lo) & (x <= hi), axis=-1)

    def shrink(self, margin: float) -> "Box":
        return Box(tuple(l + margin for l in self.lo),
                   tuple(h - margin for h in self.hi))


# ----------------------------------------------------------------------------
# scalar entries


class ConstField:
    def __init__(self, value: float):
        self.value = float(value)

    time_dependent = False

    def max_x_index(self) -> int:
        return 0

    def eval_raw(self, x: np.ndarray, t) -> np.ndarray:
        n_pts = np.atleast_2d(x).shape[0]
        return np.full(n_pts, self.value)

    def describe(self) -> str:
        return repr(self.value)


class ExprField:
    def __init__(self, expr):
        self.expr = parse_expression(expr) if isinstance(expr, str) else expr
        if not isinstance(self.expr, Expr):
            raise FieldConstructionError("expected an expression or text")

    @property
    def time_dependent(self) -> bool:
        return self.expr.uses_t()

    def max_x_index(self) -> int:
        return self.expr.max_x_index()

    def eval_raw(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        env = {f"x{i + 1}": x[:, i] for i in range(x.shape[1])}
        env["t"] = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return np.broadcast_to(np.asarray(self.expr.evaluate(env), dtype=float),
                               (x.shape[0],)).copy()

    def describe(self) -> str:
        return str(self.expr)


class TableField:
    """Piecewise-constant values on a uniform cell partition of a box.

    Outside the box the nearest cell value is continued; the public field
    evaluation applies the vanish-outside-Q mask on top of that.
    """

    def __init__(self, box: Box, cells, values):
        self.box = box
        self.cells = tuple(int(c) for c in cells)
        self.values = np.asarray(values, dtype=float).reshape(self.cells)
        if any(c < 1 for c in self.cells):
            raise FieldConstructionError("table needs at least one cell per axis")

    time_dependent = False

    def max_x_index(self) -> int:
        return self.box.n

    def eval_raw(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = np.asarray(self.box.lo)
        width = self.box.sides / np.asarray(self.cells)
        idx = np.floor((x - lo) / width).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.cells) - 1)
        return self.values[tuple(idx[:, i] for i in range(self.box.n))]

    def describe(self) -> str:
        return f"table{self.cells}"


def as_scalar_field(entry):
    """Coerce numbers, expression text, ``Expr`` or field objects."""
    if isinstance(entry, (ConstField, ExprField, TableField)):
        return entry
    if isinstance(entry, (int, float)):
        return ConstField(entry)
    if isinstance(entry, (str, Expr)):
        f = ExprField(entry)
        if isinstance(f.expr, Num):
            return ConstField(f.expr.value)
        return f
    raise FieldConstructionError(f"cannot interpret coefficient entry {entry!r}")


# ----------------------------------------------------------------------------
# sampling sets


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Spatial sample points times a list of sample times."""

    points: np.ndarray   # (Ns, n)
    times: np.ndarray    # (Nt,)
    descriptor: dict = dc_field(default_factory=dict)
    _memo: dict = dc_field(default_factory=dict, repr=False)

    @property
    def count(self) -> int:
        return self.points.shape[0] * self.times.shape[0]


def _nodes_and_midpoints(lo: float, hi: float, nodes: int) -> np.ndarray:
    base = np.linspace(lo, hi, nodes)
    mids = 0.5 * (base[:-1] + base[1:])
    return np.sort(np.concatenate([base, mids]))


def sample_set(box: Box, T: float, space: int = 9, time: int = 3) -> SampleSet:
    """Nodes plus cell midpoints of a uniform lattice over ``box x [0, T]``."""
    if space < 2 or time < 1:
        raise ValueError("need at least 2 spatial and 1 temporal node")
    axes = [_nodes_and_midpoints(lo, hi, space)
            for lo, hi in zip(box.lo, box.hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    if time == 1:
        times = np.array([0.5 * T])
    else:
        times = _nodes_and_midpoints(0.0, T, time)
    return SampleSet(points, times,
                     {"space_nodes": space, "time_nodes": time,
                      "box": [list(box.lo), list(box.hi)], "T": T})


# ----------------------------------------------------------------------------
# the coefficient field


def _matrix_eval(entries, x, t) -> np.ndarray:
    n = len(entries)
    npts = np.atleast_2d(x).shape[0]
    out = np.empty((npts, n, n))
    for i in range(n):
        for j in range(n):
            out[:, i, j] = entries[i][j].eval_raw(x, t)
    return out


@dataclass(frozen=True)
class CoefficientField:
    """Immutable coefficient bundle; evaluation is reentrant."""

    n: int
    T: float
    domain: Box | None
    b: tuple          # n x n of scalar fields, symmetric
    f: tuple          # n scalar fields
    lam_re: object
    lam_im: object
    beta: tuple | None = None

    # -- structural helpers ---------------------------------------------

    @property
    def time_dependent(self) -> bool:
        entries = [e for row in self.b for e in row] + list(self.f)
        entries += [self.lam_re, self.lam_im]
        if self.beta is not None:
            entries += [e for row in self.beta for e in row]
        return any(e.time_dependent for e in entries)

    def sampling_box(self) -> Box:
        if self.domain is not None:
            return self.domain
        return Box((-1.0,) * self.n, (1.0,) * self.n)

    def _mask(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tt = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        inside = (tt >= 0.0) & (tt <= self.T)
        if self.domain is not None:
            inside = inside & self.domain.contains(x)
        return inside

    # -- evaluation -------------------------------------------------------

    def eval_b(self, x, t, masked: bool = True) -> np.ndarray:
        out = _matrix_eval(self.b, x, t)
        if masked:
            out[~self._mask(x, t)] = 0.0
        return out

    def eval_f(self, x, t, masked: bool = True) -> np.ndarray:
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.stack([fi.eval_raw(x2, t) for fi in self.f], axis=-1)
        if masked:
            out[~self._mask(x2, t)] = 0.0
        return out

    def eval_lambda(self, x, t, masked: bool = True) -> np.ndarray:
        re = self.lam_re.eval_raw(x, t)
        im = self.lam_im.eval_raw(x, t)
        out = re + 1j * im
        if masked:
            out[~self._mask(x, t)] = 0.0
        return out

    def eval_beta(self, x, t, masked: bool = True) -> np.ndarray:
        if self.beta is None:
            raise FieldConstructionError("field carries no diffusion factor beta")
        out = _matrix_eval(self.beta, x, t)
        if masked:
            out[~self._mask(x, t)] = 0.0
        return out

    @property
    def lambda_is_real(self) -> bool:
        if isinstance(self.lam_im, ConstField):
            return self.lam_im.value == 0.0
        box = self.sampling_box()
        probe = _probe_points(box, self.T)
        return all(np.abs(self.lam_im.eval_raw(x, t)).max() < 1e-14
                   for x, t in probe)

    def describe(self) -> dict:
        d = {
            "n": self.n, "T": self.T,
            "domain": None if self.domain is None
            else [list(self.domain.lo), list(self.domain.hi)],
            "b": [[e.describe() for e in row] for row in self.b],
            "f": [e.describe() for e in self.f],
            "lambda": {"re": self.lam_re.describe(), "im": self.lam_im.describe()},
        }
        if self.beta is not None:
            d["beta"] = [[e.describe() for e in row] for row in self.beta]
        return d


def _probe_points(box: Box, T: float):
    """Deterministic construction-time probe: corners, center, random fill."""
    rng = np.random.default_rng(1234)
    corners = np.array(list(itertools.product(*zip(box.lo, box.hi)))[:16])
    center = 0.5 * (np.asarray(box.lo) + np.asarray(box.hi))[None, :]
    rand = rng.uniform(box.lo, box.hi, size=(48, box.n))
    pts = np.concatenate([corners, center, rand], axis=0)
    return [(pts, t) for t in (0.0, 0.5 * T, T)]


def make_field(n, T, domain, b, f=None, lam=0.0, beta=None) -> CoefficientField:
    """Validating constructor.

    ``b``/``beta`` are n x n nested sequences, ``f`` a length-n sequence,
    ``lam`` a scalar entry, a complex number, or a ``(re, im)`` pair.
    Symmetry of ``b`` and ``b = 0.5 beta beta^T`` (when ``beta`` is given)
    are checked on a deterministic probe set to 1e-12.
    """
    n = int(n)
    if domain is not None and not isinstance(domain, Box):
        domain = Box(*domain)
    if domain is not None and domain.n != n:
        raise FieldConstructionError("domain dimension does not match n")
    b_entries = tuple(tuple(as_scalar_field(b[i][j]) for j in range(n))
                      for i in range(n))
    if f is None:
        f = [0.0] * n
    f_entries = tuple(as_scalar_field(fi) for fi in f)
    if isinstance(lam, tuple):
        lam_re, lam_im = (as_scalar_field(lam[0]), as_scalar_field(lam[1]))
    elif isinstance(lam, complex):
        lam_re, lam_im = ConstField(lam.real), ConstField(lam.imag)
    else:
        lam_re, lam_im = as_scalar_field(lam), ConstField(0.0)
    beta_entries = None
    if beta is not None:
        beta_entries = tuple(tuple(as_scalar_field(beta[i][j]) for j in range(n))
                             for i in range(n))

    fld = CoefficientField(n, float(T), domain, b_entries, f_entries,
                           lam_re, lam_im, beta_entries)

    for e in [x for row in b_entries for x in row] + list(f_entries) + \
            [lam_re, lam_im] + ([x for row in beta_entries for x in row]
                                if beta_entries else []):
        if e.max_x_index() > n:
            raise FieldConstructionError(
                f"entry {e.describe()!r} references x{e.max_x_index()} but n={n}")

    box = fld.sampling_box()
    for x, t in _probe_points(box, fld.T):
        bm = fld.eval_b(x, t, masked=False)
        mism = np.abs(bm - np.swapaxes(bm, -1, -2)).max()
        if mism > 1e-12:
            raise FieldConstructionError(
                f"b is not symmetric (entry-wise mismatch {mism:.3e})")
        if not np.all(np.isfinite(bm)):
            raise FieldConstructionError("b is unbounded on the probe set")
        if beta_entries is not None:
            bb = fld.eval_beta(x, t, masked=False)
            prod = 0.5 * np.einsum("pik,pjk->pij", bb, bb)
            if np.abs(prod - bm).max() > 1e-12 * max(1.0, np.abs(bm).max()):
                raise FieldConstructionError(
                    "beta does not factor b: 0.5*beta*beta^T mismatch")
        fv = fld.eval_f(x, t, masked=False)
        lv = fld.eval_lambda(x, t, masked=False)
        if not (np.all(np.isfinite(fv)) and np.all(np.isfinite(lv))):
            raise FieldConstructionError("f or lambda is unbounded on the probe set")
    return fld


def eval_field(field: CoefficientField, x, t):
    """Point evaluation: returns ``(b, f, lam)`` with the outside-Q mask applied."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    b = field.eval_b(x, t)[0]
    f = field.eval_f(x, t)[0]
    lam = field.eval_lambda(x, t)[0]
    return b, f, complex(lam)


# ----------------------------------------------------------------------------
# decomposition b = b_bar + b_hat


@dataclass(frozen=True)
class Decomposition:
    """Split of ``b`` into a continuous reference part and a remainder.

    ``index_set`` (1-based coordinates) must cover the sparsity pattern of
    the remainder: entries with both indices outside the set vanish.
    ``gamma`` maps covered coordinates to weights in (0, 2); it stays
    ``None`` until optimized or supplied.
    """

    field: CoefficientField
    b_bar: tuple
    index_set: tuple
    gamma: dict | None = None

    def eval_b_bar(self, x, t) -> np.ndarray:
        return _matrix_eval(self.b_bar, x, t)

    def eval_b_hat(self, x, t) -> np.ndarray:
        return self.field.eval_b(x, t, masked=False) - self.eval_b_bar(x, t)

    def with_gamma(self, gamma) -> "Decomposition":
        gamma = _validate_gamma(gamma, self.index_set)
        return Decomposition(self.field, self.b_bar, self.index_set, gamma)

    def with_index_set(self, index_set, samples: SampleSet) -> "Decomposition":
        pattern = sparsity_pattern(self, samples)
        index_set = tuple(sorted(int(k) for k in index_set))
        if not _covers(index_set, pattern):
            raise FieldConstructionError(
                f"index set {index_set} does not cover the remainder's "
                f"sparsity pattern")
        return Decomposition(self.field, self.b_bar, index_set, self.gamma)

    def describe(self) -> dict:
        return {
            "b_bar": [[e.describe() for e in row] for row in self.b_bar],
            "index_set": list(self.index_set),
            "gamma": None if self.gamma is None
            else {str(k): v for k, v in sorted(self.gamma.items())},
        }


def _validate_gamma(gamma, index_set) -> dict:
    gamma = {int(k): float(v) for k, v in dict(gamma).items()}
    if set(gamma) != set(index_set):
        raise FieldConstructionError("gamma keys must equal the index set")
    tol = 1e-9
    for k, g in gamma.items():
        if not (tol < g < 2.0 - tol):
            raise FieldConstructionError(f"gamma[{k}]={g} outside (0, 2)")
    return gamma


def _memoized(samples: SampleSet, tag: str, key_obj, builder):
    """Per-sample-set cache; entries pin their key objects alive."""
    key = (tag, id(key_obj))
    hit = samples._memo.get(key)
    if hit is not None and hit[0] is key_obj:
        return hit[1]
    data = builder()
    samples._memo[key] = (key_obj, data)
    return data


def unique_rows(flat: np.ndarray) -> np.ndarray:
    """Sorted unique rows (lexsort; much faster than unique(axis=0))."""
    if len(flat) <= 1:
        return flat.copy()
    order = np.lexsort(flat.T[::-1])
    srt = flat[order]
    keep = np.ones(len(srt), dtype=bool)
    keep[1:] = np.any(srt[1:] != srt[:-1], axis=1)
    return srt[keep]


def unique_b_hat(decomp: Decomposition, samples: SampleSet) -> np.ndarray:
    """Deduplicated remainder matrices over the sample set (memoized)."""
    def build():
        stacked = np.concatenate([decomp.eval_b_hat(samples.points, t)
                                  for t in samples.times], axis=0)
        flat = stacked.reshape(stacked.shape[0], -1)
        return unique_rows(flat).reshape(-1, *stacked.shape[1:])
    return _memoized(samples, "b_hat", decomp.b_bar, build)


def sparsity_pattern(decomp: Decomposition, samples: SampleSet,
                     tol: float = PATTERN_TOL) -> np.ndarray:
    """Boolean n x n mask of remainder entries that are active on the samples."""
    bh = unique_b_hat(decomp, samples)
    return np.abs(bh).max(axis=0) > tol


def _covers(index_set, pattern: np.ndarray) -> bool:
    n = pattern.shape[0]
    inset = np.zeros(n, dtype=bool)
    for k in index_set:
        inset[k - 1] = True
    viol = pattern & ~inset[:, None] & ~inset[None, :]
    return not viol.any()


def minimal_vertex_cover(pattern: np.ndarray) -> tuple:
    """Smallest (then lexicographically first) cover of the pattern."""
    n = pattern.shape[0]
    if not pattern.any():
        return ()
    for size in range(1, n + 1):
        for combo in itertools.combinations(range(1, n + 1), size):
            if _covers(combo, pattern):
                return combo
    return tuple(range(1, n + 1))  # pragma: no cover


def decompose(field: CoefficientField, spec="identity",
              samples: SampleSet | None = None,
              index_set=None) -> Decomposition:
    """Split ``b`` into reference plus remainder.

    ``spec`` is ``"identity"`` (reference is the identity matrix),
    ``"constant"`` (reference is the arithmetic mean of ``b`` over the
    sample set), or an explicit n x n matrix of entries.  The default
    index set is the minimal vertex cover of the remainder's sparsity.
    """
    n = field.n
    if samples is None:
        samples = sample_set(field.sampling_box(), field.T)
    if isinstance(spec, str) and spec == "identity":
        b_bar = tuple(tuple(ConstField(1.0 if i == j else 0.0)
                            for j in range(n)) for i in range(n))
    elif isinstance(spec, str) and spec == "constant":
        acc = np.zeros((n, n))
        for t in samples.times:
            acc += field.eval_b(samples.points, t, masked=False).mean(axis=0)
        acc /= len(samples.times)
        acc = 0.5 * (acc + acc.T)
        b_bar = tuple(tuple(ConstField(acc[i, j]) for j in range(n))
                      for i in range(n))
    elif isinstance(spec, str):
        raise FieldConstructionError(f"unknown split spec {spec!r}")
    else:
        b_bar = tuple(tuple(as_scalar_field(spec[i][j]) for j in range(n))
                      for i in range(n))
    decomp = Decomposition(field, b_bar, ())
    pattern = sparsity_pattern(decomp, samples)
    if index_set is None:
        chosen = minimal_vertex_cover(pattern)
    else:
        chosen = tuple(sorted(int(k) for k in index_set))
        if not _covers(chosen, pattern):
            raise FieldConstructionError(
                f"index set {chosen} does not cover the remainder's "
                f"sparsity pattern")
    return Decomposition(field, b_bar, chosen)


# ----------------------------------------------------------------------------
# mollification diagnostics


@dataclass(frozen=True)
class MollifiedField:
    """Smoothed coefficients on a uniform lattice over ``D1`` plus moduli.

    ``b_eps`` smooths the reference part ``b_bar``; ``f_eps`` and
    ``lam_eps`` smooth the low-order coefficients.  ``moduli`` holds the
    sampled convergence/derivative diagnostics ``nu_b, nu_b_bar, nu_f,
    nu_f_bar, nu_lambda, nu_lambda_bar``; ``r = max(1, n/2)`` is the
    integrability exponent used for the lambda modulus.
    """

    eps: float
    box: Box
    axes: tuple
    times: np.ndarray
    b_eps: np.ndarray      # (Nt, n, n, *grid)
    f_eps: np.ndarray      # (Nt, n, *grid)
    lam_eps: np.ndarray    # (Nt, *grid) complex
    moduli: dict
    r: float


def _bump_kernel(eps: float, spacing, n: int) -> np.ndarray:
    """Polynomial bump (1 - |u|^2/eps^2)^3 on |u| <= eps, lattice-normalized."""
    taps = [np.arange(-int(np.floor(eps / s)), int(np.floor(eps / s)) + 1) * s
            for s in spacing]
    mesh = np.meshgrid(*taps, indexing="ij")
    r2 = sum(m ** 2 for m in mesh) / eps ** 2
    w = np.where(r2 <= 1.0, (1.0 - np.minimum(r2, 1.0)) ** 3, 0.0)
    total = w.sum()
    if total <= 0:
        raise ValueError("mollification radius is below the lattice resolution")
    return w / total


def _axis_cap(n: int) -> int:
    return {1: 321, 2: 121, 3: 41}.get(n, 17)


def _smooth_entry(entry, box: Box, axes, pad_counts, spacing, kernel,
                  t: float) -> np.ndarray:
    padded_axes = [np.concatenate([ax[0] - s * np.arange(p, 0, -1), ax,
                                   ax[-1] + s * np.arange(1, p + 1)])
                   for ax, p, s in zip(axes, pad_counts, spacing)]
    mesh = np.meshgrid(*padded_axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    vals = entry.eval_raw(pts, t).reshape(mesh[0].shape)
    return fftconvolve(vals, kernel, mode="valid")


def _grad_sq(arr: np.ndarray, spacing) -> np.ndarray:
    out = np.zeros_like(arr, dtype=float)
    for ax, s in enumerate(spacing):
        g = np.gradient(arr, s, axis=ax)
        out += np.abs(g) ** 2
    return out


def mollify(source, eps: float, box: Box | None = None,
            time_slices: int = 3) -> MollifiedField:
    """Convolve the smoothable coefficients with a compact bump kernel.

    ``source`` is a :class:`Decomposition` (its reference part is
    smoothed) or a :class:`CoefficientField` (whose ``b`` is treated as
    its own continuous part).  Smoothing acts in space only; the moduli
    are sampled on the lattice over ``box`` (the field domain by default).
    Coefficients are continued by their raw formulas beyond the domain so
    that constants are exact fixed points of the smoothing.
    """
    if eps <= 0:
        raise ValueError("mollification radius must be positive")
    if isinstance(source, Decomposition):
        decomp, field = source, source.field
        b_src = source.b_bar
    else:
        field = source
        b_src = field.b
        decomp = Decomposition(field, b_src, ())
    n = field.n
    if box is None:
        box = field.sampling_box()
    cap = _axis_cap(n)
    axes, spacing = [], []
    for lo, hi, side in zip(box.lo, box.hi, box.sides):
        count = min(cap, max(9, int(np.ceil(4 * side / eps)) + 1))
        axes.append(np.linspace(lo, hi, count))
        spacing.append(axes[-1][1] - axes[-1][0])
    kernel = _bump_kernel(eps, spacing, n)
    pad_counts = [(k - 1) // 2 for k in kernel.shape]
    if time_slices == 1:
        times = np.array([0.5 * field.T])
    else:
        times = np.linspace(0.0, field.T, time_slices)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    gshape = mesh[0].shape
    cellvol = float(np.prod(spacing))
    dt = field.T / len(times)
    r = max(1.0, n / 2.0)

    nt = len(times)
    b_eps = np.empty((nt, n, n) + gshape)
    f_eps = np.empty((nt, n) + gshape)
    lam_eps = np.empty((nt,) + gshape, dtype=complex)
    nu_b = nu_bb = nu_fb = nu_lb = 0.0
    f_lp = lam_lp = 0.0
    for k, t in enumerate(times):
        b_bar_vals = _matrix_eval(b_src, pts, t).reshape(gshape + (n, n))
        for i in range(n):
            for j in range(i, n):
                sm = _smooth_entry(b_src[i][j], box, axes, pad_counts,
                                   spacing, kernel, t)
                b_eps[k, i, j] = sm
                b_eps[k, j, i] = sm
        diff = b_eps[k] - np.moveaxis(b_bar_vals, (-2, -1), (0, 1))
        nu_b = max(nu_b, float(np.sqrt((diff ** 2).sum(axis=(0, 1))).max()))
        gsq = np.zeros(gshape)
        for i in range(n):
            for j in range(n):
                gsq += _grad_sq(b_eps[k, i, j], spacing)
        nu_bb = max(nu_bb, float(np.sqrt(gsq).max()))

        f_vals = field.eval_f(pts, t, masked=False).reshape(gshape + (n,))
        gsq = np.zeros(gshape)
        for i in range(n):
            f_eps[k, i] = _smooth_entry(field.f[i], box, axes, pad_counts,
                                        spacing, kernel, t)
            gsq += _grad_sq(f_eps[k, i], spacing)
        fdiff = np.sqrt(((f_eps[k] - np.moveaxis(f_vals, -1, 0)) ** 2).sum(axis=0))
        f_lp += float(np.sum(fdiff ** n) * cellvol * dt)
        nu_fb = max(nu_fb, float(np.sqrt(gsq).max()))

        lam_vals = field.eval_lambda(pts, t, masked=False).reshape(gshape)
        lam_eps[k] = (_smooth_entry(field.lam_re, box, axes, pad_counts,
                                    spacing, kernel, t)
                      + 1j * _smooth_entry(field.lam_im, box, axes, pad_counts,
                                           spacing, kernel, t))
        ldiff = np.abs(lam_eps[k] - lam_vals)
        lam_lp += float(np.sum(ldiff ** r) * cellvol * dt)
        nu_lb = max(nu_lb, float(np.sqrt(_grad_sq(lam_eps[k].real, spacing)
                                         + _grad_sq(lam_eps[k].imag, spacing)).max()))

    # Q\Q1 sup contribution when the smoothing box is a proper sub-domain
    f_sup_out, lam_sup_out = _outside_sup(field, box, kernel, pad_counts,
                                          spacing, axes, times, f_eps, lam_eps)
    moduli = {
        "nu_b": nu_b,
        "nu_b_bar": nu_bb,
        "nu_f": f_lp ** (1.0 / n) + f_sup_out,
        "nu_f_bar": nu_fb,
        "nu_lambda": lam_lp ** (1.0 / r) + lam_sup_out,
        "nu_lambda_bar": nu_lb,
    }
    return MollifiedField(float(eps), box, tuple(axes), times, b_eps, f_eps,
                          lam_eps, moduli, r)


def _outside_sup(field, box, kernel, pad_counts, spacing, axes, times,
                 f_eps, lam_eps):
    """Sup of the smoothing error over the part of D outside the box."""
    dom = field.domain
    if dom is None or (tuple(dom.lo) == tuple(box.lo)
                       and tuple(dom.hi) == tuple(box.hi)):
        return 0.0, 0.0
    probe_axes = [np.linspace(lo, hi, 17) for lo, hi in zip(dom.lo, dom.hi)]
    mesh = np.meshgrid(*probe_axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    outside = ~box.contains(pts)
    if not outside.any():
        return 0.0, 0.0
    pts = pts[outside]
    f_sup = lam_sup = 0.0
    for t in times:
        f_raw = field.eval_f(pts, t, masked=False)
        f_sm = np.stack(
            [_point_smooth(field.f[i], pts, kernel, pad_counts, spacing, t)
             for i in range(field.n)], axis=-1)
        f_sup = max(f_sup, float(np.sqrt(((f_sm - f_raw) ** 2).sum(-1)).max()))
        l_raw = field.eval_lambda(pts, t, masked=False)
        l_sm = (_point_smooth(field.lam_re, pts, kernel, pad_counts, spacing, t)
                + 1j * _point_smooth(field.lam_im, pts, kernel, pad_counts,
                                     spacing, t))
        lam_sup = max(lam_sup, float(np.abs(l_sm - l_raw).max()))
    return f_sup, lam_sup


def _point_smooth(entry, pts: np.ndarray, kernel: np.ndarray, pad_counts,
                  spacing, t: float) -> np.ndarray:
    """Kernel-weighted average of an entry at arbitrary points."""
    taps = [np.arange(-p, p + 1) * s for p, s in zip(pad_counts, spacing)]
    mesh = np.meshgrid(*taps, indexing="ij")
    offsets = np.stack([m.ravel() for m in mesh], axis=-1)
    w = kernel.ravel()
    shifted = pts[:, None, :] + offsets[None, :, :]
    vals = entry.eval_raw(shifted.reshape(-1, pts.shape[1]), t)
    return vals.reshape(pts.shape[0], -1) @ w


def smooth_at_points(entry, pts: np.ndarray, eps: float, t: float,
                     taps_per_radius: int = 3) -> np.ndarray:
    """Bump-kernel smoothing of a scalar entry evaluated at given points.

    Constants are exact fixed points; the quadrature lattice carries
    ``taps_per_radius`` taps per kernel radius in each direction.
    """
    n = pts.shape[1]
    spacing = [eps / taps_per_radius] * n
    kernel = _bump_kernel(eps, spacing, n)
    pad_counts = [(k - 1) // 2 for k in kernel.shape]
    return _point_smooth(entry, pts, kernel, pad_counts, spacing, t)


# ----------------------------------------------------------------------------
# builtin problems


def _require(params: dict, key: str, name: str):
    if key not in params:
        raise KeyError(f"builtin problem {name!r} requires parameter {key!r}")
    return params[key]


def _identity_heat(params):
    n = int(params.get("n", 1))
    T = float(params.get("T", 1.0))
    eye = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    beta = [[np.sqrt(2.0) if i == j else 0.0 for j in range(n)] for i in range(n)]
    return make_field(n, T, Box((0.0,) * n, (1.0,) * n), eye, beta=beta)


def _paper_3x3(params):
    alpha = float(_require(params, "alpha", "paper_3x3"))
    beta = float(_require(params, "beta", "paper_3x3"))
    T = float(params.get("T", 1.0))
    b = [[1.0, alpha, beta], [alpha, 1.0, 0.0], [beta, 0.0, 1.0]]
    beta_mat = None
    if alpha ** 2 + beta ** 2 < 1.0 - 1e-12:
        beta_mat = symmetric_sqrt(2.0 * np.asarray(b))
    return make_field(3, T, Box((-1.0,) * 3, (1.0,) * 3), b, beta=beta_mat)


def _checkerboard_2d(params):
    low = float(_require(params, "low", "checkerboard_2d"))
    high = float(_require(params, "high", "checkerboard_2d"))
    cells = int(params.get("cells", 4))
    T = float(params.get("T", 1.0))
    if low <= 0 or high <= 0:
        raise ValueError("checkerboard coefficients must be positive")
    box = Box((0.0, 0.0), (1.0, 1.0))
    ii, jj = np.meshgrid(np.arange(cells), np.arange(cells), indexing="ij")
    vals = np.where((ii + jj) % 2 == 0, low, high).astype(float)
    diag = TableField(box, (cells, cells), vals)
    zero = ConstField(0.0)
    root = TableField(box, (cells, cells), np.sqrt(2.0 * vals))
    return make_field(2, T, box, [[diag, zero], [zero, diag]],
                      beta=[[root, zero], [zero, root]])


def _manufactured_1d(params):
    T = float(params.get("T", 0.5))
    return make_field(1, T, Box((0.0,), (1.0,)), [[1.0]],
                      beta=[[np.sqrt(2.0)]])


def _gaussian_free_space(params):
    n = int(params.get("n", 1))
    half_width = float(params.get("half_width", 8.0))
    T = float(params.get("T", 0.5))
    eye = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    beta = [[np.sqrt(2.0) if i == j else 0.0 for j in range(n)] for i in range(n)]
    return make_field(n, T, Box((-half_width,) * n, (half_width,) * n),
                      eye, beta=beta)


_BUILTINS = {
    "identity_heat": _identity_heat,
    "paper_3x3": _paper_3x3,
    "checkerboard_2d": _checkerboard_2d,
    "manufactured_1d": _manufactured_1d,
    "gaussian_free_space": _gaussian_free_space,
}

BUILTIN_NAMES = tuple(sorted(_BUILTINS))

_PI = repr(float(np.pi))
_PI2 = repr(float(np.pi ** 2))

# companion expressions for problems that ship a known solution: the
# source, the terminal datum at t = T, and the exact solution
_SOLVE_DATA = {
    "manufactured_1d": lambda T: (
        f"(1 + {_PI2}) * exp(-t) * sin({_PI} * x1)",
        f"exp(-{T!r}) * sin({_PI} * x1)",
        f"exp(-t) * sin({_PI} * x1)",
    ),
}


def builtin_problem(name: str, params: dict | None = None) -> CoefficientField:
    """Construct a registered problem; raises ``KeyError`` on unknown names."""
    if name not in _BUILTINS:
        raise KeyError(f"unknown builtin problem {name!r}; "
                       f"choose from {', '.join(BUILTIN_NAMES)}")
    return _BUILTINS[name](dict(params or {}))


def builtin_solve_data(name: str, T: float):
    """Source/terminal/exact expressions for builtins with a known solution.

    Returns ``(phi, Phi, exact)`` as expression fields (``Phi`` is the
    exact solution frozen at ``t = T``), or ``None``.
    """
    maker = _SOLVE_DATA.get(name)
    if maker is None:
        return None
    phi_s, Phi_s, exact_s = maker(float(T))
    return ExprField(phi_s), ExprField(Phi_s), ExprField(exact_s)
