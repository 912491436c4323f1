"""Backward terminal-value solver, its discrete adjoint, and the
fixed-point construction with mollified coefficients.

The backward problem ``dv/dt + A v = -phi`` with ``A v = sum b_ij
d2v/dx_i dx_j + sum f_i dv/dx_i - lambda v``, zero Dirichlet data and
``v(., T) = Phi`` is marched implicitly from ``t = T`` down to ``t = 0``
with a theta scheme:

    (I - theta*dt*A_h) v_k = (I + (1-theta)*dt*A_h) v_{k+1} + dt*phi_bar

Coefficients and the source are frozen at the theta-weighted time level
``t_k + (1-theta)*dt`` (the unknown level for the default ``theta = 1``),
with coefficients sampled pointwise at the nodes.  The forward density
solve propagates with the conjugate transposes of the very same step
matrices, so the discrete duality pairing holds to solver precision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import bicgstab, splu

from .conditions import ellipticity_delta, nu_hat
from .fields import (CoefficientField, Decomposition, SampleSet,
                     smooth_at_points)
from .grid import Grid, GridFunction, NormBundle, NormWeights, discrete_norms
from .grid import _d1, _second_derivative

__all__ = [
    "SolverError", "BackwardProblem", "DiscreteSolution", "FixedPointTrace",
    "assemble_operator", "assemble_step", "solve_backward",
    "solve_forward_adjoint", "fixed_point_solve", "estimate_R_norm",
    "apriori_ratio",
]

DIRECT_LIMIT = 2000        # one-shot direct solves below this size
REUSE_DIRECT_LIMIT = 20000  # cached factorizations below this size
LIN_RTOL = 1e-10


class SolverError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# problem data


def _eval_space_fn(spec, grid: Grid, t: float | None):
    """Evaluate a source/terminal spec on the interior nodes.

    Accepts ``None`` (zero), scalar-field-like objects with ``eval_raw``,
    callables ``f(points[, t])``, space-time blocks ``(nt+1, *m)`` (sliced
    at the nearest time level), single-slice arrays, and ``(re, im)``
    pairs of any of these.
    """
    if spec is None:
        return np.zeros(grid.shape)
    if isinstance(spec, tuple) and len(spec) == 2:
        re = _eval_space_fn(spec[0], grid, t)
        im = _eval_space_fn(spec[1], grid, t)
        return re + 1j * im
    if isinstance(spec, GridFunction):
        spec = spec.values
    if isinstance(spec, np.ndarray):
        if spec.shape == grid.shape:
            return spec
        if spec.shape == (grid.nt + 1,) + grid.shape:
            if t is None:
                return spec[-1]
            k = min(grid.nt, max(0, int(np.floor(t / grid.dt + 0.5))))
            return spec[k]
        raise ValueError(f"array source of shape {spec.shape} does not fit "
                         f"the grid")
    pts = grid.nodes()
    if hasattr(spec, "eval_raw"):
        # terminal data (t is None) live at the horizon
        vals = spec.eval_raw(pts, grid.T if t is None else t)
    elif callable(spec):
        vals = spec(pts) if t is None else spec(pts, t)
    else:
        raise TypeError(f"cannot interpret source spec {spec!r}")
    return np.asarray(vals).reshape(grid.shape)


@dataclass
class BackwardProblem:
    """Data of one terminal-value problem on a coefficient field.

    ``phi`` and ``Phi`` follow the conventions of ``_eval_space_fn``;
    ``lambda_override`` (same conventions, complex allowed) replaces the
    field's zero-order coefficient, which the characteristic-functional
    route uses to inject a purely imaginary rate.
    """

    field: CoefficientField
    phi: object = None
    Phi: object = None
    lambda_override: object = None

    def eval_phi(self, grid: Grid, t: float) -> np.ndarray:
        return _eval_space_fn(self.phi, grid, t)

    def eval_Phi(self, grid: Grid) -> np.ndarray:
        return _eval_space_fn(self.Phi, grid, None)

    def eval_lambda_nodes(self, grid: Grid, t: float) -> np.ndarray:
        if self.lambda_override is not None:
            vals = _eval_space_fn(self.lambda_override, grid, t)
            return np.asarray(vals, dtype=complex).ravel()
        return self.field.eval_lambda(grid.nodes(), t, masked=False)

    def is_complex(self, grid: Grid) -> bool:
        if not self.field.lambda_is_real:
            return True
        if self.Phi is not None:
            val = _eval_space_fn(self.Phi, grid, None)
            if np.iscomplexobj(val) and np.abs(val.imag).max() > 0:
                return True
        # sources and rate overrides may be real at some instants (for
        # example a ramped panel), so probe every time level
        for probe in (self.phi, self.lambda_override):
            if probe is None:
                continue
            for t in grid.times():
                val = _eval_space_fn(probe, grid, t)
                if np.iscomplexobj(val) and np.abs(val.imag).max() > 0:
                    return True
        return False

    @property
    def operator_time_dependent(self) -> bool:
        return self.field.time_dependent or self.lambda_override is not None


@dataclass
class DiscreteSolution:
    v: GridFunction
    norms: NormBundle
    meta: dict = dc_field(default_factory=dict)


@dataclass
class FixedPointTrace:
    eps: float
    K: float
    increments: list
    contraction_est: float
    converged: bool
    agreement: float | None = None

    def as_dict(self) -> dict:
        return {"eps": self.eps, "K": self.K,
                "increments": [float(x) for x in self.increments],
                "contraction_est": self.contraction_est,
                "converged": self.converged,
                "agreement_vs_direct": self.agreement}


# ----------------------------------------------------------------------------
# coefficient providers


class _FieldCoefficients:
    def __init__(self, problem: BackwardProblem, grid: Grid):
        self.problem = problem
        self.grid = grid
        self.time_dependent = problem.operator_time_dependent

    def at(self, t: float):
        nodes = self.grid.nodes()
        fld = self.problem.field
        b = fld.eval_b(nodes, t, masked=False)
        f = fld.eval_f(nodes, t, masked=False)
        lam = self.problem.eval_lambda_nodes(self.grid, t)
        return b, f, lam


class _MollifiedCoefficients:
    """Bump-smoothed reference part plus rate shift for the weighted problem."""

    def __init__(self, decomp: Decomposition, grid: Grid, eps: float,
                 K: float = 0.0):
        self.decomp = decomp
        self.grid = grid
        self.eps = float(eps)
        self.K = float(K)
        self.time_dependent = decomp.field.time_dependent
        self._cache = {}

    def shifted(self, K: float) -> "_MollifiedCoefficients":
        other = _MollifiedCoefficients(self.decomp, self.grid, self.eps, K)
        other._cache = self._cache  # smoothed arrays do not depend on K
        return other

    def smooth_parts(self, t: float):
        key = 0.0 if not self.time_dependent else round(float(t), 12)
        if key not in self._cache:
            nodes = self.grid.nodes()
            n = self.grid.n
            b = np.empty((len(nodes), n, n))
            for i in range(n):
                for j in range(i, n):
                    b[:, i, j] = smooth_at_points(self.decomp.b_bar[i][j],
                                                  nodes, self.eps, t)
                    b[:, j, i] = b[:, i, j]
            f = np.stack([smooth_at_points(self.decomp.field.f[i], nodes,
                                           self.eps, t)
                          for i in range(n)], axis=-1)
            lam = (smooth_at_points(self.decomp.field.lam_re, nodes, self.eps, t)
                   + 1j * smooth_at_points(self.decomp.field.lam_im, nodes,
                                           self.eps, t))
            self._cache[key] = (b, f, lam)
        return self._cache[key]

    def at(self, t: float):
        b, f, lam = self.smooth_parts(t)
        return b, f, lam + self.K


# ----------------------------------------------------------------------------
# sparse assembly


def _assemble_from_arrays(grid: Grid, b_arr, f_arr, lam_arr,
                          dtype) -> sparse.csr_matrix:
    n, m = grid.n, grid.m
    N = grid.size
    h = grid.h
    strides = np.ones(n, dtype=np.int64)
    for i in range(n - 2, -1, -1):
        strides[i] = strides[i + 1] * m[i + 1]
    multi = np.indices(m).reshape(n, N)
    flat = np.arange(N, dtype=np.int64)

    rows, cols, data = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        data.append(np.asarray(v))

    diag = -np.asarray(lam_arr, dtype=dtype).ravel()
    for i in range(n):
        c2 = b_arr[:, i, i]
        diag = diag - 2.0 * c2 / h[i] ** 2
        c1 = f_arr[:, i]
        up = multi[i] < m[i] - 1
        dn = multi[i] > 0
        add(flat[up], flat[up] + strides[i], (c2 / h[i] ** 2 + c1 / (2 * h[i]))[up])
        add(flat[dn], flat[dn] - strides[i], (c2 / h[i] ** 2 - c1 / (2 * h[i]))[dn])
        for j in range(i + 1, n):
            cc = 2.0 * b_arr[:, i, j] / (4.0 * h[i] * h[j])
            iu, idn = multi[i] < m[i] - 1, multi[i] > 0
            ju, jdn = multi[j] < m[j] - 1, multi[j] > 0
            for si, sj, sgn in (((iu, strides[i]), (ju, strides[j]), 1.0),
                                ((idn, -strides[i]), (jdn, -strides[j]), 1.0),
                                ((iu, strides[i]), (jdn, -strides[j]), -1.0),
                                ((idn, -strides[i]), (ju, strides[j]), -1.0)):
                mask = si[0] & sj[0]
                add(flat[mask], flat[mask] + si[1] + sj[1], sgn * cc[mask])
    add(flat, flat, diag)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.concatenate([np.asarray(d, dtype=dtype) for d in data])
    return sparse.csr_matrix((data, (rows, cols)), shape=(N, N))


def assemble_operator(problem: BackwardProblem, grid: Grid,
                      t: float) -> sparse.csr_matrix:
    """Sparse discretization of the spatial operator at time ``t``."""
    provider = _FieldCoefficients(problem, grid)
    b, f, lam = provider.at(t)
    dtype = complex if np.abs(lam.imag).max() > 0 else float
    if dtype is float:
        lam = lam.real
    return _assemble_from_arrays(grid, b, f, lam, dtype)


def assemble_step(problem: BackwardProblem, grid: Grid, t: float,
                  theta: float = 1.0):
    """Step matrices ``(B, C, phi_bar)`` for the move onto time level ``t``.

    ``B v_t = C v_{t+dt} + dt * phi_bar`` with the operator and the source
    frozen at ``t + (1-theta)*dt``.
    """
    _check_theta(theta)
    dt = grid.dt
    t_eval = t + (1.0 - theta) * dt
    A = assemble_operator(problem, grid, t_eval)
    eye = sparse.identity(grid.size, dtype=A.dtype, format="csr")
    B = (eye - theta * dt * A).tocsr()
    C = (eye + (1.0 - theta) * dt * A).tocsr()
    phi_bar = problem.eval_phi(grid, t_eval)
    return B, C, phi_bar


def _check_theta(theta: float):
    if not 0.5 <= theta <= 1.0:
        raise ValueError("theta must lie in [0.5, 1]")


# ----------------------------------------------------------------------------
# linear solves and marching


class _StepSolver:
    """Deterministic linear solves: direct when small or reusable,
    diagonally preconditioned BiCGStab otherwise, with a direct fallback."""

    def __init__(self, B: sparse.csr_matrix, reuse: bool):
        self.B = B
        N = B.shape[0]
        self.iterations = 0
        self._lu = None
        self._lu_adj = None
        if N <= DIRECT_LIMIT or (reuse and N <= REUSE_DIRECT_LIMIT):
            self._lu = self._factorize(B)

    @staticmethod
    def _factorize(mat):
        try:
            return splu(mat.tocsc())
        except RuntimeError as err:
            raise SolverError(
                f"step system of size {mat.shape[0]} is singular "
                f"({err}); reduce dt or check the coefficients") from None

    def _iterative(self, mat, rhs):
        d = mat.diagonal()
        precond = sparse.diags(np.where(np.abs(d) > 0, 1.0 / d, 1.0))
        x, info = bicgstab(mat, rhs, rtol=LIN_RTOL, atol=0.0,
                           maxiter=10 * mat.shape[0], M=precond)
        self.iterations += 1
        if info != 0:
            return None
        res = np.linalg.norm(mat @ x - rhs)
        if res > 1e-8 * max(np.linalg.norm(rhs), 1e-300):
            return None
        return x

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(rhs)
        x = self._iterative(self.B, rhs)
        if x is None:  # robustness fallback; deterministic
            self._lu = self._factorize(self.B)
            return self._lu.solve(rhs)
        return x

    def solve_adjoint(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            trans = "H" if np.iscomplexobj(self.B.data) else "T"
            return self._lu.solve(np.asarray(rhs, dtype=self.B.dtype),
                                  trans=trans)
        BH = self.B.getH().tocsr()
        x = self._iterative(BH, rhs)
        if x is None:
            if self._lu_adj is None:
                self._lu_adj = self._factorize(BH)
            return self._lu_adj.solve(rhs)
        return x


class _Stepper:
    """Prepared marching machinery for one (grid, theta, coefficients)."""

    def __init__(self, grid: Grid, theta: float, provider, dtype):
        _check_theta(theta)
        self.grid = grid
        self.theta = theta
        self.provider = provider
        self.dtype = complex if dtype is complex else float
        self._cache: dict = {}

    def t_eval(self, k: int) -> float:
        return (k + 1.0 - self.theta) * self.grid.dt

    def system(self, k: int):
        static = not self.provider.time_dependent
        key = 0 if static else k
        if key not in self._cache:
            b, f, lam = self.provider.at(self.t_eval(k))
            if self.dtype is float:
                lam = lam.real
            A = _assemble_from_arrays(self.grid, b, f, lam, self.dtype)
            dt = self.grid.dt
            eye = sparse.identity(self.grid.size, dtype=self.dtype, format="csr")
            B = (eye - self.theta * dt * A).tocsr()
            C = None
            if self.theta < 1.0:
                C = (eye + (1.0 - self.theta) * dt * A).tocsr()
            reuse = static and self.grid.nt > 2
            self._cache[key] = (_StepSolver(B, reuse), C)
        return self._cache[key]

    def run_backward(self, phi_fn, Phi_arr: np.ndarray) -> np.ndarray:
        grid = self.grid
        nt, dt = grid.nt, grid.dt
        v = np.zeros((nt + 1,) + grid.shape, dtype=self.dtype)
        v[nt] = Phi_arr
        for k in range(nt - 1, -1, -1):
            solver, C = self.system(k)
            rhs = v[k + 1].ravel() if C is None else C @ v[k + 1].ravel()
            if phi_fn is not None:
                rhs = rhs + dt * np.asarray(phi_fn(self.t_eval(k)),
                                            dtype=self.dtype).ravel()
            v[k] = solver.solve(rhs).reshape(grid.shape)
        return v

    def run_forward_adjoint(self, rho_arr: np.ndarray) -> np.ndarray:
        grid = self.grid
        nt = grid.nt
        p = np.zeros((nt + 1,) + grid.shape, dtype=self.dtype)
        q = np.asarray(rho_arr, dtype=self.dtype).ravel()
        for k in range(nt):
            solver, C = self.system(k)
            p_hat = solver.solve_adjoint(q)
            p[k] = p_hat.reshape(grid.shape)
            q = p_hat if C is None else (C.getH() @ p_hat)
        p[nt] = q.reshape(grid.shape)
        return p


def solve_backward(problem: BackwardProblem, grid: Grid, theta: float = 1.0,
                   weights: NormWeights | None = None,
                   coefficients=None) -> DiscreteSolution:
    """March the terminal-value problem down to ``t = 0``.

    The terminal slice is the sampled ``Phi`` exactly; each linear system
    is solved to a relative residual of 1e-10 (direct factorizations for
    small or reusable systems).  Complex arithmetic switches on
    automatically when the rate or the data have imaginary parts.
    """
    provider = coefficients or _FieldCoefficients(problem, grid)
    dtype = complex if problem.is_complex(grid) else _real_or_complex(provider)
    stepper = _Stepper(grid, theta, provider, dtype)
    v = stepper.run_backward(lambda t: problem.eval_phi(grid, t),
                             problem.eval_Phi(grid))
    gf = GridFunction(grid, v)
    norms = discrete_norms(gf, weights)
    meta = {"theta": theta, "dt": grid.dt, "rtol": LIN_RTOL,
            "time_dependent": provider.time_dependent}
    return DiscreteSolution(gf, norms, meta)


def solve_forward_adjoint(rho, problem: BackwardProblem, grid: Grid,
                          theta: float = 1.0,
                          coefficients=None) -> DiscreteSolution:
    """Propagate a density with the transposed step matrices.

    Slices ``0 .. nt-1`` hold the densities paired with the backward
    sources; slice ``nt`` is the terminal density paired with ``Phi``.
    A signed input density triggers a warning, not an error.
    """
    rho_arr = rho.values if isinstance(rho, GridFunction) else np.asarray(rho)
    if rho_arr.shape != grid.shape:
        raise ValueError("density shape does not match the grid")
    if np.min(rho_arr.real) < -1e-12:
        warnings.warn("initial density has negative parts", RuntimeWarning)
    provider = coefficients or _FieldCoefficients(problem, grid)
    dtype = complex if problem.is_complex(grid) else float
    stepper = _Stepper(grid, theta, provider, dtype)
    p = stepper.run_forward_adjoint(rho_arr)
    gf = GridFunction(grid, p)
    return DiscreteSolution(gf, discrete_norms(gf), {"theta": theta})


# ----------------------------------------------------------------------------
# fixed-point construction


def _difference_arrays(problem: BackwardProblem, moll: _MollifiedCoefficients,
                       grid: Grid, t: float):
    nodes = grid.nodes()
    fld = problem.field
    b_s, f_s, lam_s = moll.smooth_parts(t)
    db = fld.eval_b(nodes, t, masked=False) - b_s
    df = fld.eval_f(nodes, t, masked=False) - f_s
    dl = fld.eval_lambda(nodes, t, masked=False) - lam_s
    if np.abs(dl.imag).max() == 0.0:
        dl = dl.real
    return db, df, dl


def _apply_difference(block: np.ndarray, grid: Grid, db, df, dl) -> np.ndarray:
    """Slice-wise ``sum db_ij D_ij v + sum df_i D_i v - dl v`` on a block."""
    n = grid.n
    shape = grid.shape
    out = -dl.reshape(shape) * block
    for i in range(n):
        gi = _d1(block, grid, i)
        out = out + df[:, i].reshape(shape) * gi
        for j in range(n):
            if np.abs(db[:, i, j]).max() == 0.0:
                continue
            out = out + db[:, i, j].reshape(shape) * \
                _second_derivative(block, grid, i, j)
    return out


def _auto_K(problem: BackwardProblem, grid: Grid, decomp: Decomposition,
            moll: _MollifiedCoefficients, eps: float, theta: float,
            weights: NormWeights, trials: int, seed: int):
    nodes = grid.nodes()
    lam0 = np.abs(problem.eval_lambda_nodes(grid, 0.0)).max()
    f0 = np.sqrt((problem.field.eval_f(nodes, 0.0, masked=False) ** 2)
                 .sum(axis=1)).max()
    samples = SampleSet(nodes, grid.times()[:: max(1, grid.nt // 3)])
    delta = ellipticity_delta(decomp, samples)
    K = float(lam0 + f0 ** 2 / delta + 1.0)
    for _ in range(7):
        est = estimate_R_norm(problem, grid, decomp, eps, K, trials=trials,
                              seed=seed, theta=theta, weights=weights,
                              _moll=moll)
        if est < 0.95:
            return K, est, True
        K *= 2.0
    return K, est, False


def fixed_point_solve(problem: BackwardProblem, grid: Grid,
                      decomp: Decomposition, eps: float | None = None,
                      K="auto", theta: float = 1.0,
                      weights: NormWeights | None = None,
                      tol: float = 1e-8, max_iter: int = 200,
                      check_condition: bool = True, seed: int = 7):
    """Solve by the contraction construction with smoothed coefficients.

    The problem is rewritten for the weighted unknown ``u(x,t) *
    exp(-K*(T-t))`` (weight normalized at the terminal time so the
    terminal datum is unchanged and no overflowing factors appear), whose
    smooth part is solved directly while the rough remainder acts through
    the iterated source term.  Returns ``(solution, trace)``; on
    convergence the solution is also compared against the direct solve
    and the max-node difference stored in ``trace.agreement``.
    """
    if eps is None:
        eps = 2.0 * float(np.max(grid.h))
    if weights is None:
        gamma = decomp.gamma or {k: 1.0 for k in decomp.index_set}
        if decomp.index_set:
            weights = NormWeights(decomp.index_set, gamma)
        else:
            weights = NormWeights.default(grid.n)
    moll = _MollifiedCoefficients(decomp, grid, eps, K=0.0)

    if check_condition:
        _warn_if_condition_fails(decomp, grid)

    auto_ok = True
    if K == "auto":
        K, est, auto_ok = _auto_K(problem, grid, decomp, moll, eps, theta,
                                  weights, trials=3, seed=seed)
        if not auto_ok:
            warnings.warn(
                f"weight search stopped at K={K} with R-norm estimate "
                f"{est:.3f} >= 0.95; iteration may diverge", RuntimeWarning)
    K = float(K)
    if K * grid.T > 200.0:
        raise SolverError(f"weight exponent K*T = {K * grid.T:.3g} would "
                          f"overflow; shorten the horizon or fix K")

    provider = moll.shifted(K)
    is_complex = problem.is_complex(grid)
    stepper = _Stepper(grid, theta, provider,
                       complex if is_complex else _real_or_complex(provider))

    def phi_weighted(t):
        return problem.eval_phi(grid, t) * np.exp(-K * (grid.T - t))

    u = stepper.run_backward(phi_weighted, problem.eval_Phi(grid))
    d = u.copy()
    increments = [discrete_norms(GridFunction(grid, d), weights).Yhat2]
    converged = increments[0] == 0.0
    grow = 0
    diffs = _StaticDiffs(problem, moll, grid, stepper)
    for _ in range(1, max_iter):
        g_block = diffs.apply(d, stepper)
        d = stepper.run_backward(_BlockSource(g_block, grid), np.zeros(grid.shape))
        u += d
        inc = discrete_norms(GridFunction(grid, d), weights).Yhat2
        increments.append(inc)
        scale = discrete_norms(GridFunction(grid, u), weights).Yhat2
        if inc <= tol * max(scale, 1e-300):
            converged = True
            break
        grow = grow + 1 if inc > increments[-2] else 0
        if grow >= 5:
            converged = False
            break
    ratios = [b / a for a, b in zip(increments, increments[1:])
              if a > 1e-14 * max(increments[0], 1e-300)]
    contraction = float(max(ratios)) if ratios else 0.0
    if not converged and grow >= 5:
        contraction = max(contraction, 1.0)

    tgrid = grid.times()
    v = u * np.exp(K * (grid.T - tgrid)).reshape((-1,) + (1,) * grid.n)
    if not is_complex and np.iscomplexobj(v):
        v = v.real
    gf = GridFunction(grid, v)
    solution = DiscreteSolution(gf, discrete_norms(gf, weights),
                                {"theta": theta, "eps": eps, "K": K,
                                 "iterations": len(increments)})
    agreement = None
    if converged:
        direct = solve_backward(problem, grid, theta, weights)
        agreement = float(np.abs(direct.v.values - v).max())
    trace = FixedPointTrace(float(eps), K, increments, contraction,
                            bool(converged and auto_ok), agreement)
    return solution, trace


def _real_or_complex(provider):
    _, _, lam = provider.at(0.0)
    return complex if np.abs(lam.imag).max() > 0 else float


class _BlockSource:
    """Space-time source sampled at the nearest step level."""

    def __init__(self, block: np.ndarray, grid: Grid):
        self.block = block
        self.grid = grid

    def __call__(self, t: float) -> np.ndarray:
        k = min(self.grid.nt, max(0, int(np.floor(t / self.grid.dt + 0.5))))
        return self.block[k]


class _StaticDiffs:
    """Coefficient differences (rough minus smoothed) at the step levels."""

    def __init__(self, problem, moll, grid, stepper):
        self.problem = problem
        self.moll = moll
        self.grid = grid
        self.static = not problem.field.time_dependent
        self._one = (_difference_arrays(problem, moll, grid, 0.0)
                     if self.static else None)

    def apply(self, block: np.ndarray, stepper: _Stepper) -> np.ndarray:
        if self.static:
            db, df, dl = self._one
            return _apply_difference(block, self.grid, db, df, dl)
        out = np.empty_like(block)
        for k in range(self.grid.nt + 1):
            t = min(stepper.t_eval(k), self.grid.T)
            db, df, dl = _difference_arrays(self.problem, self.moll,
                                            self.grid, t)
            out[k] = _apply_difference(block[k][None], self.grid, db, df, dl)[0]
        return out


def _warn_if_condition_fails(decomp: Decomposition, grid: Grid):
    if not decomp.index_set or decomp.gamma is None:
        return
    samples = SampleSet(grid.nodes(), grid.times()[:: max(1, grid.nt // 3)])
    try:
        delta = ellipticity_delta(decomp, samples)
        value = nu_hat(decomp, samples)
    except ValueError:
        warnings.warn("split condition could not be evaluated", RuntimeWarning)
        return
    if value >= delta ** 2:
        warnings.warn(
            f"split condition violated (nu_hat={value:.4g} >= "
            f"delta^2={delta ** 2:.4g}); attempting the iteration anyway",
            RuntimeWarning)


def estimate_R_norm(problem: BackwardProblem, grid: Grid,
                    decomp: Decomposition, eps: float, K: float,
                    trials: int = 8, seed: int = 0, theta: float = 1.0,
                    weights: NormWeights | None = None,
                    _moll: _MollifiedCoefficients | None = None) -> float:
    """Empirical norm of the remainder operator of the weighted problem.

    Maximum over ``trials`` random unit-norm space-time fields of the
    strengthened space-time norm after one application: rough-minus-smooth
    coefficient differences drive a source that the smooth weighted solver
    absorbs.  Deterministic for a fixed seed.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    if weights is None:
        gamma = decomp.gamma or {k: 1.0 for k in decomp.index_set}
        weights = (NormWeights(decomp.index_set, gamma) if decomp.index_set
                   else NormWeights.default(grid.n))
    moll = _moll or _MollifiedCoefficients(decomp, grid, eps, K=0.0)
    provider = moll.shifted(float(K))
    stepper = _Stepper(grid, theta, provider, _real_or_complex(provider))
    diffs = _StaticDiffs(problem, moll, grid, stepper)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        w = rng.standard_normal((grid.nt + 1,) + grid.shape)
        norm_w = discrete_norms(GridFunction(grid, w), weights).Yhat2
        w /= max(norm_w, 1e-300)
        g = diffs.apply(w, stepper)
        rw = stepper.run_backward(_BlockSource(g, grid), np.zeros(grid.shape))
        worst = max(worst,
                    discrete_norms(GridFunction(grid, rw), weights).Yhat2)
    return float(worst)


# ----------------------------------------------------------------------------
# diagnostics


def apriori_ratio(solution: DiscreteSolution, phi, Phi,
                  weights: NormWeights | None = None) -> float:
    """Ratio of the solution's strengthened space-time norm to the data size.

    Returns ``Yhat2(v) / (X0(phi) + H1(Phi))``; zero when both sides
    vanish.  Stability of this ratio under refinement reflects the
    uniform a-priori bound.
    """
    grid = solution.v.grid
    num = discrete_norms(solution.v, weights).Yhat2
    phi_block = np.stack([_eval_space_fn(phi, grid, t) for t in grid.times()],
                         axis=0)
    phi_norm = discrete_norms(GridFunction(grid, phi_block)).X0
    Phi_arr = _eval_space_fn(Phi, grid, None)
    Phi_norm = float(discrete_norms(GridFunction(grid, Phi_arr)).H1[0])
    denom = phi_norm + Phi_norm
    if denom < 1e-300:
        return 0.0 if num < 1e-300 else float("inf")
    return float(num / denom)
