"""Weak simulation of the associated diffusion and cross-checks against
the backward solver.

Paths follow the explicit weak scheme ``y_{k+1} = y_k + f dt + beta
sqrt(dt) xi_k`` with exit from the domain detected at step endpoints and
the zero-order rate accumulated as a continuous discount weight along
each path.  Noise comes from a counter-based generator keyed by
``(master_seed, path)``, so trajectories are bitwise reproducible no
matter how the path range is partitioned across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtr, ndtri

from .fields import Box, CoefficientField, ConstField
from .grid import Grid, GridFunction, pair
from .linalg import symmetric_sqrt
from .solver import BackwardProblem, DiscreteSolution, solve_backward

__all__ = [
    "SDE", "PathEnsemble", "Estimate",
    "UniformBoxSampler", "TruncatedGaussianSampler", "HatSampler",
    "PointSampler", "simulate_paths", "feynman_kac", "verify_pairing",
    "density_compare", "characteristic_functional", "max_principle_check",
]

_INIT_STREAM = np.uint64(2 ** 64 - 1)  # reserved key slot for the initial law
_MAX_RECORD_FLOATS = 4e8


# ----------------------------------------------------------------------------
# initial-law samplers (each knows its own density)


class UniformBoxSampler:
    def __init__(self, box: Box):
        self.box = box

    def sample(self, gen: Generator, M: int) -> np.ndarray:
        return gen.uniform(self.box.lo, self.box.hi, size=(M, self.box.n))

    def pdf(self, x: np.ndarray) -> np.ndarray:
        vol = float(np.prod(self.box.sides))
        return self.box.contains(x).astype(float) / vol

    def grid_density(self, grid: Grid) -> np.ndarray:
        return self.pdf(grid.nodes()).reshape(grid.shape)


class TruncatedGaussianSampler:
    """Axis-aligned Gaussian restricted to a box, drawn by inverse CDF."""

    def __init__(self, mean, sigma, box: Box):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=float),
                                     self.mean.shape).copy()
        self.box = box
        lo = (np.asarray(box.lo) - self.mean) / self.sigma
        hi = (np.asarray(box.hi) - self.mean) / self.sigma
        self._cdf_lo = ndtr(lo)
        self._cdf_hi = ndtr(hi)

    def sample(self, gen: Generator, M: int) -> np.ndarray:
        u = gen.uniform(size=(M, self.mean.size))
        z = ndtri(self._cdf_lo + u * (self._cdf_hi - self._cdf_lo))
        return self.mean + self.sigma * z

    def pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        z = (x - self.mean) / self.sigma
        dens = np.exp(-0.5 * np.sum(z ** 2, axis=-1)) / \
            np.prod(np.sqrt(2 * np.pi) * self.sigma)
        mass = float(np.prod(self._cdf_hi - self._cdf_lo))
        return dens * self.box.contains(x) / mass

    def grid_density(self, grid: Grid) -> np.ndarray:
        return self.pdf(grid.nodes()).reshape(grid.shape)


class HatSampler:
    """Product of triangular bumps, normalized to unit mass."""

    def __init__(self, center, width):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.width = np.broadcast_to(np.asarray(width, dtype=float),
                                     self.center.shape).copy()

    def sample(self, gen: Generator, M: int) -> np.ndarray:
        u = gen.uniform(size=(M, self.center.size))
        v = gen.uniform(size=(M, self.center.size))
        return self.center + self.width * (u + v - 1.0)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        z = np.abs(x - self.center) / self.width
        return np.prod(np.clip(1.0 - z, 0.0, None) / self.width, axis=-1)

    def grid_density(self, grid: Grid) -> np.ndarray:
        return self.pdf(grid.nodes()).reshape(grid.shape)


class PointSampler:
    """Deterministic start; carries no grid density."""

    def __init__(self, point):
        self.point = np.atleast_1d(np.asarray(point, dtype=float))

    def sample(self, gen: Generator, M: int) -> np.ndarray:
        return np.tile(self.point, (M, 1))

    def pdf(self, x: np.ndarray) -> np.ndarray:
        raise ValueError("a point mass has no pointwise density")

    def grid_density(self, grid: Grid) -> np.ndarray:
        raise ValueError("a point mass has no grid density")


# ----------------------------------------------------------------------------
# the diffusion


@dataclass
class SDE:
    """Diffusion data: drift ``f``, factor ``beta`` (with ``b = 0.5 beta
    beta^T``), killing rate ``lambda`` and exit domain from the field."""

    field: CoefficientField
    grid: Grid | None = None         # only needed when beta must be derived
    _beta_cache: dict = dc_field(default_factory=dict, repr=False)

    @property
    def T(self) -> float:
        return self.field.T

    @property
    def domain(self) -> Box | None:
        return self.field.domain

    def _const_beta(self):
        if self.field.beta is None:
            return None
        entries = [e for row in self.field.beta for e in row]
        if all(isinstance(e, ConstField) for e in entries):
            n = self.field.n
            return np.array([[self.field.beta[i][j].value for j in range(n)]
                             for i in range(n)])
        return None

    def beta_at(self, y: np.ndarray, t: float) -> np.ndarray:
        if self.field.beta is not None:
            return self.field.eval_beta(y, t, masked=False)
        # derived diffusion factor: symmetric root of 2 b, frozen per grid
        # node and looked up at the nearest node
        if self.grid is None:
            raise ValueError("deriving beta from b requires a reference grid")
        key = round(float(t), 12) if self.field.time_dependent else 0.0
        if key not in self._beta_cache:
            nodes = self.grid.nodes()
            b = self.field.eval_b(nodes, key, masked=False)
            self._beta_cache[key] = np.stack(
                [symmetric_sqrt(2.0 * b[i]) for i in range(len(nodes))])
        roots = self._beta_cache[key]
        idx = np.zeros(len(y), dtype=np.int64)
        stride = 1
        for ax in range(self.grid.n - 1, -1, -1):
            pos = np.clip(np.round((y[:, ax] - self.grid.lo[ax])
                                   / self.grid.h[ax] - 1.0).astype(int),
                          0, self.grid.m[ax] - 1)
            idx += pos * stride
            stride *= self.grid.m[ax]
        return roots[idx]


@dataclass
class PathEnsemble:
    M: int
    dt: float
    nsteps: int
    master_seed: int
    T: float
    n: int
    final_y: np.ndarray
    tau: np.ndarray
    exited: np.ndarray
    discount: np.ndarray
    record_times: np.ndarray | None = None
    traj: np.ndarray | None = None        # (M, R, n) frozen after exit
    disc_traj: np.ndarray | None = None   # (M, R) accumulated rate integral
    lambda_is_real: bool = True

    def summary(self) -> dict:
        return {"M": self.M, "dt": self.dt, "seed": self.master_seed,
                "survived": int(np.count_nonzero(~self.exited)),
                "mean_tau": float(self.tau.mean())}


@dataclass
class Estimate:
    value: complex
    stderr: float
    M: int
    meta: dict = dc_field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"re": float(np.real(self.value)),
                "im": float(np.imag(self.value)),
                "stderr": self.stderr, "M": self.M}


def _mean_and_stderr(vals: np.ndarray):
    M = len(vals)
    mean = complex(np.sum(vals) / M)
    if M < 2:
        return mean, 0.0
    var = float(np.var(vals.real, ddof=1))
    if np.iscomplexobj(vals):
        var += float(np.var(vals.imag, ddof=1))
    return mean, float(np.sqrt(var / M))


def _path_generator(master_seed: int, stream) -> Generator:
    key = np.array([np.uint64(master_seed), np.uint64(stream)], dtype=np.uint64)
    return Generator(Philox(key=key))


def simulate_paths(sde: SDE, sampler, dt: float, M: int, master_seed: int,
                   record=None, block_size: int = 20000) -> PathEnsemble:
    """Run the weak explicit scheme for ``M`` paths.

    ``record`` selects stored snapshots: ``None`` (endpoints only),
    ``"all"`` (every step), or a sequence of times (snapped to steps).
    The step count is ``round(T / dt)`` so the horizon is hit exactly.
    """
    if dt <= 0 or M < 1:
        raise ValueError("need dt > 0 and M >= 1")
    T = sde.T
    nsteps = max(1, int(round(T / dt)))
    dt = T / nsteps
    n = sde.field.n
    domain = sde.domain
    lam_real = sde.field.lambda_is_real
    disc_dtype = float if lam_real else complex

    if record is None:
        rec_idx = None
    elif isinstance(record, str) and record == "all":
        rec_idx = np.arange(nsteps + 1)
    else:
        rec_idx = np.unique(np.clip(np.round(np.asarray(record, dtype=float)
                                             / dt).astype(int), 0, nsteps))
    if rec_idx is not None:
        if M * len(rec_idx) * (n + 1) > _MAX_RECORD_FLOATS:
            raise MemoryError("trajectory recording would exceed the budget; "
                              "record fewer times or fewer paths")
        traj = np.empty((M, len(rec_idx), n))
        disc_traj = np.zeros((M, len(rec_idx)), dtype=disc_dtype)
        rec_pos = {int(k): i for i, k in enumerate(rec_idx)}
    else:
        traj = disc_traj = None
        rec_pos = {}

    a = sampler.sample(_path_generator(master_seed, _INIT_STREAM), M)
    if a.shape != (M, n):
        raise ValueError("sampler produced the wrong shape")

    final_y = np.empty((M, n))
    tau = np.full(M, T)
    exited = np.zeros(M, dtype=bool)
    discount = np.zeros(M, dtype=disc_dtype)
    const_beta = sde._const_beta()
    f_zero = all(isinstance(fi, ConstField) and fi.value == 0.0
                 for fi in sde.field.f)
    lam_zero = (isinstance(sde.field.lam_re, ConstField)
                and sde.field.lam_re.value == 0.0 and lam_real)
    sqdt = np.sqrt(dt)

    for start in range(0, M, block_size):
        end = min(M, start + block_size)
        B = end - start
        noise = np.empty((B, nsteps, n))
        for p in range(start, end):
            noise[p - start] = _path_generator(master_seed, p) \
                .standard_normal((nsteps, n))
        y = a[start:end].copy()
        alive = (domain.contains(y, open_set=True) if domain is not None
                 else np.ones(B, dtype=bool))
        tau_b = np.full(B, T)
        tau_b[~alive] = 0.0
        disc_b = np.zeros(B, dtype=disc_dtype)
        if 0 in rec_pos:
            traj[start:end, rec_pos[0]] = y
        for k in range(nsteps):
            t_k = k * dt
            if not lam_zero and alive.any():
                lam = sde.field.eval_lambda(y[alive], t_k)
                disc_b[alive] += (lam.real if lam_real else lam) * dt
            if alive.any():
                ydot = np.zeros((int(alive.sum()), n))
                if not f_zero:
                    ydot += sde.field.eval_f(y[alive], t_k) * dt
                xi = noise[alive, k, :]
                if const_beta is not None:
                    ydot += sqdt * xi @ const_beta.T
                else:
                    bmat = sde.beta_at(y[alive], t_k)
                    ydot += sqdt * np.einsum("pij,pj->pi", bmat, xi)
                y[alive] += ydot
                if domain is not None:
                    newly_out = alive & ~domain.contains(y, open_set=True)
                    tau_b[newly_out] = (k + 1) * dt
                    alive &= ~newly_out
            if (k + 1) in rec_pos:
                traj[start:end, rec_pos[k + 1]] = y
                disc_traj[start:end, rec_pos[k + 1]] = disc_b
        final_y[start:end] = y
        tau[start:end] = tau_b
        exited[start:end] = tau_b < T
        discount[start:end] = disc_b

    return PathEnsemble(M=M, dt=dt, nsteps=nsteps, master_seed=master_seed,
                        T=T, n=n, final_y=final_y, tau=tau, exited=exited,
                        discount=discount,
                        record_times=None if rec_idx is None else rec_idx * dt,
                        traj=traj, disc_traj=disc_traj,
                        lambda_is_real=lam_real)


# ----------------------------------------------------------------------------
# estimators


def _wants_time(spec) -> bool:
    return callable(spec) and not hasattr(spec, "eval_raw") and \
        getattr(spec, "__code__", None) is not None and \
        spec.__code__.co_argcount >= 2


def _spacetime_callable(spec):
    """Normalize a functional spec to a callable ``f(points, t)``."""
    if hasattr(spec, "eval_raw"):
        return spec.eval_raw
    if callable(spec):
        if _wants_time(spec):
            return spec
        return lambda x, t: spec(x)
    raise TypeError("path functionals need an evaluable (not array) spec")


def feynman_kac(ensemble: PathEnsemble, phi=None, Phi=None) -> Estimate:
    """Sample mean of the path functional.

    ``Phi`` is evaluated at surviving terminal points with the full
    discount; ``phi`` (needs a fully recorded ensemble) is integrated by
    the left rectangle rule along each living segment with the running
    discount.  The standard error combines real and imaginary spreads.
    """
    vals = np.zeros(ensemble.M, dtype=complex)
    if Phi is not None:
        fn = _spacetime_callable(Phi)
        surv = ~ensemble.exited
        if surv.any():
            w = np.exp(-ensemble.discount[surv])
            vals[surv] += fn(ensemble.final_y[surv], ensemble.T) * w
    if phi is not None:
        if ensemble.traj is None or len(ensemble.record_times) != \
                ensemble.nsteps + 1:
            raise ValueError("the phi term needs record='all'")
        fn = _spacetime_callable(phi)
        dt = ensemble.dt
        for k in range(ensemble.nsteps):
            t_k = k * dt
            living = ensemble.tau > t_k
            if not living.any():
                break
            vals[living] += fn(ensemble.traj[living, k, :], t_k) * \
                np.exp(-ensemble.disc_traj[living, k]) * dt
    if np.abs(vals.imag).max() == 0.0:
        vals = vals.real
    mean, stderr = _mean_and_stderr(vals)
    return Estimate(mean, stderr, ensemble.M,
                    {"dt": ensemble.dt, "seed": ensemble.master_seed})


def verify_pairing(problem: BackwardProblem, grid: Grid, sde: SDE, sampler,
                   dt: float, M: int, master_seed: int, theta: float = 1.0,
                   allowance: float = 0.0) -> dict:
    """Compare the solver-side pairing with the path-functional estimate.

    Returns a report with both values, their difference, the Monte Carlo
    standard error and a recorded (not asserted) size bound ratio.
    """
    solution = solve_backward(problem, grid, theta)
    rho_grid = sampler.grid_density(grid)
    pde_value = pair(GridFunction(grid, solution.v.values[0]), rho_grid)
    need_traj = problem.phi is not None
    ens = simulate_paths(sde, sampler, dt, M, master_seed,
                         record="all" if need_traj else None)
    mc = feynman_kac(ens, phi=problem.phi, Phi=problem.Phi)
    diff = abs(complex(pde_value) - complex(mc.value))
    rho_norm = float(np.sqrt(np.sum(np.abs(rho_grid) ** 2) * grid.cell_volume))
    from .solver import apriori_ratio  # data norms via the same quadratures
    data_ratio = apriori_ratio(solution, problem.phi, problem.Phi)
    report = {
        "pde": {"re": float(np.real(pde_value)), "im": float(np.imag(pde_value))},
        "mc": mc.as_dict(),
        "diff": diff,
        "tolerance": 3.0 * mc.stderr + allowance,
        "pass": bool(diff <= 3.0 * mc.stderr + allowance),
        "bound_record": {"rho_H0": rho_norm,
                         "functional_abs": abs(complex(mc.value)),
                         "solution_data_ratio": data_ratio},
        "ensemble": ens.summary(),
    }
    return report


def density_compare(ensemble: PathEnsemble, density, t: float) -> float:
    """L1 distance between the path histogram and a grid density at time ``t``.

    Bins are the node-centered grid cells; paths are weighted by the real
    part of their running discount factor, so rate-killed mass decays the
    same way on both sides.
    """
    if ensemble.M < 1 or ensemble.traj is None:
        raise ValueError("need a recorded, non-empty ensemble")
    if isinstance(density, DiscreteSolution):
        density = density.v
    if not isinstance(density, GridFunction):
        raise TypeError("density must be a grid function or solution")
    grid = density.grid
    k_rec = int(np.argmin(np.abs(ensemble.record_times - t)))
    if abs(ensemble.record_times[k_rec] - t) > ensemble.dt:
        raise ValueError(f"time {t} was not recorded")
    if density.is_spacetime:
        k_grid = min(grid.nt, max(0, int(round(t / grid.dt))))
        p_ref = density.values[k_grid].real
    else:
        p_ref = density.values.real
    alive = (~ensemble.exited) | (ensemble.tau > t)
    pos = ensemble.traj[alive, k_rec, :]
    w = np.exp(-ensemble.disc_traj[alive, k_rec].real)
    edges = [grid.axis_nodes(i) - grid.h[i] / 2.0 for i in range(grid.n)]
    edges = [np.append(e, e[-1] + grid.h[i]) for i, e in enumerate(edges)]
    hist, _ = np.histogramdd(pos, bins=edges, weights=w)
    p_hat = hist / (ensemble.M * grid.cell_volume)
    return float(np.sum(np.abs(p_hat - p_ref)) * grid.cell_volume)


def characteristic_functional(xi_times, xi_values, via: str, *,
                              sde: SDE | None = None, sampler=None,
                              dt: float | None = None, M: int | None = None,
                              master_seed: int | None = None,
                              grid: Grid | None = None,
                              field: CoefficientField | None = None,
                              theta: float = 1.0) -> Estimate:
    """Characteristic functional of the bounded arctangent transform.

    ``via="mc"``: sample mean over simulated paths of
    ``exp(-i * integral of xi(t) . arctan(y(t)) dt)`` (rectangle rule on
    the simulation steps).  ``via="pde"``: one complex backward solve with
    source ``xi(t) . arctan(x)`` and a purely imaginary rate equal to
    ``i`` times the source, paired with the initial density:
    ``1 - i (V(., 0), rho)``.
    """
    xi_times = np.asarray(xi_times, dtype=float)
    xi_values = np.atleast_2d(np.asarray(xi_values, dtype=float))
    if xi_values.shape[0] != xi_times.shape[0]:
        xi_values = xi_values.T
    if xi_values.shape[0] != xi_times.shape[0]:
        raise ValueError("xi panel shapes do not line up")

    def xi_at(t: float) -> np.ndarray:
        return np.array([np.interp(t, xi_times, xi_values[:, c])
                         for c in range(xi_values.shape[1])])

    if via == "mc":
        if None in (sde, sampler, dt, M, master_seed):
            raise ValueError("mc route needs sde, sampler, dt, M, master_seed")
        ens = simulate_paths(sde, sampler, dt, M, master_seed, record="all")
        phase = np.zeros(ens.M)
        for k in range(ens.nsteps):
            t_k = k * ens.dt
            z = np.arctan(ens.traj[:, k, :])
            phase += (z @ xi_at(t_k)) * ens.dt
        vals = np.exp(-1j * phase)
        mean, stderr = _mean_and_stderr(vals)
        return Estimate(mean, stderr, ens.M, {"route": "mc", "dt": ens.dt})

    if via == "pde":
        if None in (grid, sampler, field):
            raise ValueError("pde route needs grid, sampler, field")

        def phi_fn(x, t):
            return np.arctan(np.atleast_2d(x)) @ xi_at(t)

        def lam_fn(x, t):
            return 1j * phi_fn(x, t)

        problem = BackwardProblem(field, phi=phi_fn, Phi=None,
                                  lambda_override=lam_fn)
        solution = solve_backward(problem, grid, theta)
        rho_grid = sampler.grid_density(grid)
        value = 1.0 - 1j * pair(GridFunction(grid, solution.v.values[0]),
                                rho_grid)
        return Estimate(complex(value), 0.0, 0, {"route": "pde"})

    raise ValueError("via must be 'mc' or 'pde'")


def max_principle_check(solution: DiscreteSolution,
                        problem: BackwardProblem):
    """Sign check of the solution under nonnegative data and a real rate.

    Returns ``(min_value, verdict)`` with verdict ``"pass"``, ``"fail"``
    or ``"not applicable"`` when the preconditions (real rate,
    nonnegative source and terminal datum) do not hold.
    """
    grid = solution.v.grid
    applicable = problem.field.lambda_is_real
    if problem.lambda_override is not None:
        applicable = False
    if applicable and problem.phi is not None:
        for t in grid.times():
            vals = problem.eval_phi(grid, t)
            if np.iscomplexobj(vals) and np.abs(vals.imag).max() > 0:
                applicable = False
                break
            if vals.real.min() < -1e-12:
                applicable = False
                break
    if applicable:
        Phi = problem.eval_Phi(grid)
        if np.iscomplexobj(Phi) and np.abs(Phi.imag).max() > 0:
            applicable = False
        elif Phi.real.min() < -1e-12:
            applicable = False
    min_value = float(np.min(solution.v.values.real))
    if not applicable:
        return min_value, "not applicable"
    return min_value, "pass" if min_value >= -1e-10 else "fail"
