"""Solvability condition checks for the second-order coefficient matrix.

Two families are decided against a shared sampling set:

* the split condition: after writing ``b = b_bar + b_hat`` with a
  uniformly elliptic continuous reference part, the weighted measure
  ``nu_hat`` of the remainder must stay strictly below ``delta**2``
  (``delta`` = infimum of the smallest eigenvalue of ``b_bar``).  The
  index set and the weights ``gamma`` are optimized here.
* four classical eigenvalue-spread checks (cordes, talenti, landis,
  gihman_skorohod), each decided by a sampled margin.

Strict ``exists eps > 0`` inequalities are decided by ``margin >
STRICT_TOL`` at the sampled extremum, a deterministic proxy for the
essential supremum.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .fields import (CoefficientField, Decomposition, SampleSet, decompose,
                     sample_set, sparsity_pattern, unique_b_hat,
                     unique_rows, _covers, _memoized, _validate_gamma)
from .linalg import symmetric_eigenvalues

__all__ = [
    "Verdict", "ConditionReport", "STRICT_TOL",
    "ellipticity_delta", "symmetric_eigenvalues", "nu_hat",
    "optimize_gamma", "select_index_set",
    "check_split_condition", "check_classical", "full_report",
]

STRICT_TOL = 1e-10
GAMMA_MIN = 1e-6
GAMMA_MAX = 2.0 - 1e-6
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

CLASSICAL = ("cordes", "talenti", "landis", "gihman_skorohod")

_LANDIS_NOTE = (
    "literal eigenvalue inequality; for the paper_3x3 family it fails "
    "exactly when sqrt(alpha^2 + beta^2) >= 2/5 (the threshold applies to "
    "the root of alpha^2 + beta^2, not to the sum itself)")


@dataclass
class Verdict:
    ok: bool | None
    margin: float | None
    eps_max: float | None = None
    applicable: bool = True
    note: str = ""

    def as_dict(self) -> dict:
        return {"ok": self.ok, "margin": self.margin, "eps_max": self.eps_max,
                "applicable": self.applicable, "note": self.note}


@dataclass
class ConditionReport:
    delta: float
    nu_hat: float
    index_set: tuple
    gamma: dict
    verdicts: dict
    eigen_range: tuple
    params: dict
    samples_info: dict
    split: dict = dc_field(default_factory=dict)

    @property
    def satisfied(self) -> bool:
        return bool(self.verdicts["split_condition"].ok)

    def as_dict(self) -> dict:
        return {
            "schema": "v1",
            "delta": self.delta,
            "nu_hat": self.nu_hat,
            "N": list(self.index_set),
            "gamma": [self.gamma[k] for k in self.index_set],
            "verdicts": {k: v.as_dict() for k, v in self.verdicts.items()},
            "eigen_range": {"min": self.eigen_range[0],
                            "max": self.eigen_range[1]},
            "params": self.params,
            "samples": self.samples_info,
            "split": self.split,
        }

    def to_json(self, **kwargs) -> str:
        kwargs.setdefault("sort_keys", True)
        kwargs.setdefault("indent", 2)
        return json.dumps(self.as_dict(), **kwargs)


# ----------------------------------------------------------------------------
# sampled matrix helpers


def _stack_matrices(eval_fn, samples: SampleSet) -> np.ndarray:
    blocks = [eval_fn(samples.points, t) for t in samples.times]
    return np.concatenate(blocks, axis=0)


def _unique_matrices(mats: np.ndarray) -> np.ndarray:
    flat = mats.reshape(mats.shape[0], -1)
    return unique_rows(flat).reshape(-1, *mats.shape[1:])


def _unique_b(field: CoefficientField, samples: SampleSet) -> np.ndarray:
    return _memoized(samples, "b", field, lambda: _unique_matrices(
        _stack_matrices(lambda x, t: field.eval_b(x, t, masked=False),
                        samples)))


def _unique_b_bar(decomp: Decomposition, samples: SampleSet) -> np.ndarray:
    return _memoized(samples, "b_bar", decomp.b_bar, lambda: _unique_matrices(
        _stack_matrices(decomp.eval_b_bar, samples)))


def _eigen_of_b(field: CoefficientField, samples: SampleSet) -> np.ndarray:
    def build():
        uniq = _unique_b(field, samples)
        return np.stack([symmetric_eigenvalues(m) for m in uniq], axis=0)
    return _memoized(samples, "eig_b", field, build)


def _eigen_table(mats: np.ndarray) -> np.ndarray:
    uniq = _unique_matrices(mats)
    return np.stack([symmetric_eigenvalues(m) for m in uniq], axis=0)


# ----------------------------------------------------------------------------
# split condition ingredients


def ellipticity_delta(source, samples: SampleSet | None = None) -> float:
    """Infimum over the samples of the smallest eigenvalue of the reference part.

    ``source`` is a :class:`Decomposition` (its ``b_bar``), a
    :class:`CoefficientField` (its full ``b``), or a pre-evaluated stack of
    symmetric matrices.  Raises if the infimum is not strictly positive.
    """
    if isinstance(source, Decomposition):
        if samples is None:
            samples = sample_set(source.field.sampling_box(), source.field.T)
        eig = _memoized(samples, "eig_b_bar", source.b_bar,
                        lambda: _eigen_table(_unique_b_bar(source, samples)))
    elif isinstance(source, CoefficientField):
        if samples is None:
            samples = sample_set(source.sampling_box(), source.T)
        eig = _eigen_of_b(source, samples)
    else:
        mats = np.asarray(source, dtype=float)
        if mats.ndim == 2:
            mats = mats[None]
        eig = _eigen_table(mats)
    delta = float(eig[:, 0].min())
    if delta <= 0.0:
        raise ValueError(
            f"reference part not uniformly elliptic (min eigenvalue {delta:.3e})")
    return delta


def _nu_hat_terms(decomp: Decomposition, samples: SampleSet, index_set):
    """Per-sample ingredients of the weighted remainder measure.

    Returns ``(A, C)`` with ``A[s, k] = sum_{i in N} bh[i,k]^2 +
    4 sum_{i not in N} bh[i,k]^2`` and ``C[s, k] = bh[k,k]^2`` for the
    deduplicated sample rows ``s`` and the covered coordinates ``k``.
    """
    n = decomp.field.n
    bh = unique_b_hat(decomp, samples)
    inset = np.zeros(n, dtype=bool)
    for k in index_set:
        inset[k - 1] = True
    sq = bh ** 2
    cols = [k - 1 for k in index_set]
    a_in = sq[:, inset, :][:, :, cols].sum(axis=1)
    a_out = sq[:, ~inset, :][:, :, cols].sum(axis=1)
    A = a_in + 4.0 * a_out
    C = sq[:, cols, cols]
    # deduplicate again in the reduced (A, C) representation
    joined = unique_rows(np.concatenate([A, C], axis=1))
    m = len(cols)
    return joined[:, :m], joined[:, m:]


def _nu_hat_value(A: np.ndarray, C: np.ndarray, gamma_vec: np.ndarray) -> float:
    if gamma_vec.size == 0:
        return 0.0
    inner = A + (gamma_vec / (2.0 - gamma_vec)) * C
    return float(np.sum(0.5 / gamma_vec) * inner.sum(axis=1).max())


def nu_hat(decomp: Decomposition, samples: SampleSet | None = None,
           gamma: dict | None = None) -> float:
    """Weighted sampled measure of the remainder part.

    ``nu_hat = (sum_k 1/(2 gamma_k)) * max over samples of
    sum_k ( sum_{i in N} bh_ik^2 + 4 sum_{i not in N} bh_ik^2
    + gamma_k/(2-gamma_k) * bh_kk^2 )`` over the covered coordinates ``k``.
    """
    if samples is None:
        samples = sample_set(decomp.field.sampling_box(), decomp.field.T)
    gamma = decomp.gamma if gamma is None else gamma
    if not decomp.index_set:
        return 0.0
    if gamma is None:
        raise ValueError("gamma weights are not set; optimize or supply them")
    gamma = _validate_gamma(gamma, decomp.index_set)
    A, C = _nu_hat_terms(decomp, samples, decomp.index_set)
    gvec = np.array([gamma[k] for k in decomp.index_set])
    return _nu_hat_value(A, C, gvec)


def _golden_min(fn, lo: float, hi: float, iters: int = 48):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fn(d)
    x = c if fc <= fd else d
    return x, min(fc, fd)


def optimize_gamma(decomp: Decomposition, samples: SampleSet | None = None,
                   index_set=None):
    """Minimize ``nu_hat`` over the weights, clamped to ``(0, 2)``.

    Coordinate-wise golden-section descent (three sweeps) followed by a
    20-point-per-axis audit lattice; if the lattice beats the descent the
    search restarts from the lattice point.  Returns ``(gamma, value)``.
    """
    if samples is None:
        samples = sample_set(decomp.field.sampling_box(), decomp.field.T)
    index_set = tuple(decomp.index_set if index_set is None else
                      sorted(int(k) for k in index_set))
    if not index_set:
        return {}, 0.0
    A, C = _nu_hat_terms(decomp, samples, index_set)
    m = len(index_set)

    def value(gvec):
        return _nu_hat_value(A, C, gvec)

    def descent(start):
        g = start.copy()
        for _ in range(3):
            for j in range(m):
                def along(x, j=j):
                    g2 = g.copy()
                    g2[j] = x
                    return value(g2)
                g[j], _ = _golden_min(along, GAMMA_MIN, GAMMA_MAX)
        return g, value(g)

    best_g, best_v = descent(np.ones(m))
    lattice = np.linspace(GAMMA_MIN, GAMMA_MAX, 20)
    for _ in range(3):
        audit_g, audit_v = _audit_lattice(A, C, lattice, m, best_g)
        if audit_v < best_v - 1e-12:
            best_g, best_v = descent(audit_g)
            if audit_v < best_v:
                best_g, best_v = audit_g, audit_v
        else:
            break
    gamma = {k: float(g) for k, g in zip(index_set, best_g)}
    return gamma, float(best_v)


def _value_batch(A, C, gammas: np.ndarray) -> np.ndarray:
    """Vectorized ``nu_hat`` over a (G, m) batch of gamma vectors."""
    inner = A[None, :, :] + (gammas / (2.0 - gammas))[:, None, :] * C[None, :, :]
    return np.sum(0.5 / gammas, axis=1) * inner.sum(axis=2).max(axis=1)


def _audit_lattice(A, C, lattice, m, center):
    """Best point of the full lattice (m <= 4) or of axis lines through center."""
    if m <= 4:
        combos = np.stack(np.meshgrid(*([lattice] * m), indexing="ij"),
                          axis=-1).reshape(-1, m)
    else:
        combos = [center]
        for j in range(m):
            block = np.tile(center, (len(lattice), 1))
            block[:, j] = lattice
            combos.append(block)
        combos = np.concatenate([np.atleast_2d(c) for c in combos], axis=0)
    best_v, best_g = np.inf, center
    for start in range(0, len(combos), 20000):
        chunk = combos[start:start + 20000]
        vals = _value_batch(A, C, chunk)
        i = int(np.argmin(vals))
        if vals[i] < best_v:
            best_v, best_g = float(vals[i]), chunk[i].copy()
    return best_g, best_v


def select_index_set(decomp: Decomposition, samples: SampleSet | None = None):
    """Search index sets covering the remainder's sparsity pattern.

    Exhaustive over all covers for n <= 16 (each optimized over gamma);
    greedy highest-degree heuristic beyond, flagged in the returned note.
    Ties are broken towards the smaller, lexicographically first set.
    Returns ``(index_set, gamma, value, note)``.
    """
    field = decomp.field
    if samples is None:
        samples = sample_set(field.sampling_box(), field.T)
    pattern = sparsity_pattern(decomp, samples)
    n = field.n
    if not pattern.any():
        return (), {}, 0.0, ""
    note = ""
    if n <= 16:
        candidates = [combo
                      for size in range(1, n + 1)
                      for combo in itertools.combinations(range(1, n + 1), size)
                      if _covers(combo, pattern)]
    else:  # greedy cover, then its supersets along degree order
        note = "greedy cover heuristic (n > 16); not exhaustive"
        work = pattern.copy()
        chosen: list = []
        while work.any():
            deg = work.sum(axis=0) + work.sum(axis=1)
            k = int(np.argmax(deg))
            chosen.append(k + 1)
            work[k, :] = False
            work[:, k] = False
        candidates = [tuple(sorted(chosen))]
    best = None
    for combo in candidates:
        gamma, v = optimize_gamma(decomp, samples, combo)
        if best is None or v < best[2] - 1e-12:
            best = (combo, gamma, v)
    return best[0], best[1], best[2], note


def check_split_condition(field: CoefficientField, split_spec="identity",
                          samples: SampleSet | None = None,
                          index_set=None, gamma=None):
    """Decide ``nu_hat < delta**2`` for the best (or supplied) split weights.

    Returns ``(decomp, delta, nu_hat_value, verdict)`` with the decomposition
    carrying the chosen index set and gamma.
    """
    if samples is None:
        samples = sample_set(field.sampling_box(), field.T)
    if isinstance(split_spec, Decomposition):
        decomp = split_spec
        if index_set is not None:
            decomp = decomp.with_index_set(index_set, samples)
    else:
        decomp = decompose(field, split_spec, samples, index_set=index_set)
    note = ""
    delta = ellipticity_delta(decomp, samples)
    if gamma is not None:
        decomp = decomp.with_gamma(gamma)
        value = nu_hat(decomp, samples)
    elif index_set is not None or (isinstance(split_spec, Decomposition)
                                   and decomp.index_set):
        g, value = optimize_gamma(decomp, samples)
        if g:
            decomp = decomp.with_gamma(g)
    else:
        chosen, g, value, note = select_index_set(decomp, samples)
        decomp = Decomposition(decomp.field, decomp.b_bar, chosen,
                               g if g else None)
    margin = delta ** 2 - value
    verdict = Verdict(ok=bool(value < delta ** 2), margin=margin, note=note)
    return decomp, delta, value, verdict


# ----------------------------------------------------------------------------
# classical checks


def _classical_margins(which: str, eig: np.ndarray, bhat_sq_sum=None):
    n = eig.shape[1]
    s = eig.sum(axis=1)
    if which == "cordes":
        diffs = sum((eig[:, i] - eig[:, j]) ** 2
                    for i in range(n - 1) for j in range(i + 1, n))
        margin = s ** 2 - (n - 1) * diffs
        with np.errstate(divide="ignore", invalid="ignore"):
            eps = 1.0 - (n - 1) * diffs / s ** 2
        return margin, eps
    if which == "talenti":
        sq = (eig ** 2).sum(axis=1)
        margin = s ** 2 - (n - 1) * sq
        with np.errstate(divide="ignore", invalid="ignore"):
            eps = s ** 2 / sq - (n - 1)
        return margin, eps
    if which == "landis":
        mn = eig[:, 0]
        margin = (n + 2) * mn - s
        with np.errstate(divide="ignore", invalid="ignore"):
            eps = np.where(mn > 0, n + 2 - s / mn, -np.inf)
        return margin, eps
    if which == "gihman_skorohod":
        margin = 1.0 - bhat_sq_sum
        return margin, margin
    raise ValueError(f"unknown classical condition {which!r}")


def check_classical(field: CoefficientField, which: str,
                    samples: SampleSet | None = None,
                    b_bar=None) -> Verdict:
    """Decide one of the classical eigenvalue-spread conditions.

    ``cordes``/``talenti`` need n >= 3 and are decided through the same
    functional so their verdicts always agree; ``gihman_skorohod`` needs
    the reference part to be the identity (pass the report's ``b_bar``
    via a :class:`Decomposition`, identity by default).
    """
    if which not in CLASSICAL:
        raise ValueError(f"unknown classical condition {which!r}")
    if samples is None:
        samples = sample_set(field.sampling_box(), field.T)
    n = field.n
    if which in ("cordes", "talenti") and n < 3:
        return Verdict(ok=None, margin=None, applicable=False,
                       note="stated for n >= 3 only")
    if which == "gihman_skorohod":
        decomp = (b_bar if isinstance(b_bar, Decomposition)
                  else decompose(field, "identity" if b_bar is None else b_bar,
                                 samples))
        bbar = _unique_b_bar(decomp, samples)
        dev = np.abs(bbar - np.eye(n)).max()
        if dev > 1e-12:
            return Verdict(ok=None, margin=None, applicable=False,
                           note="requires the identity reference part")
        bh = unique_b_hat(decomp, samples)
        sq = (bh ** 2).sum(axis=(1, 2))
        margins, eps = _classical_margins(which, np.zeros((len(sq), n)), sq)
    else:
        eig = _eigen_of_b(field, samples)
        margins, eps = _classical_margins(which, eig)
    i = int(np.argmin(margins))
    margin = float(margins[i])
    eps_max = float(eps[i]) if np.isfinite(eps[i]) else None
    # cordes margin is exactly n * talenti margin; scale its strictness
    # threshold so the two verdicts can never disagree
    tol = n * STRICT_TOL if which == "cordes" else STRICT_TOL
    note = _LANDIS_NOTE if which == "landis" else ""
    return Verdict(ok=bool(margin > tol), margin=margin, eps_max=eps_max,
                   note=note)


# ----------------------------------------------------------------------------
# aggregation


def full_report(field: CoefficientField, split_spec="identity",
                samples: SampleSet | None = None,
                index_set=None, gamma=None) -> ConditionReport:
    """Run the split condition and all four classical checks."""
    if samples is None:
        samples = sample_set(field.sampling_box(), field.T)
    decomp, delta, value, split_verdict = check_split_condition(
        field, split_spec, samples, index_set=index_set, gamma=gamma)
    verdicts = {"split_condition": split_verdict}
    for which in CLASSICAL:
        verdicts[which] = check_classical(field, which, samples,
                                          b_bar=decomp)
    eig = _eigen_of_b(field, samples)
    eigen_range = (float(eig.min()), float(eig.max()))
    mats = _unique_b(field, samples)
    sup_b = float(np.sqrt((mats ** 2).sum(axis=(1, 2))).max())
    fv = np.concatenate([field.eval_f(samples.points, t, masked=False)
                         for t in samples.times])
    lv = np.concatenate([field.eval_lambda(samples.points, t, masked=False)
                         for t in samples.times])
    params = {
        "n": field.n, "T": field.T,
        "domain": None if field.domain is None
        else [list(field.domain.lo), list(field.domain.hi)],
        "sup_b": sup_b,
        "sup_f": float(np.sqrt((fv ** 2).sum(axis=1)).max()),
        "sup_lambda": float(np.abs(lv).max()),
    }
    gamma_map = decomp.gamma or {}
    return ConditionReport(
        delta=delta, nu_hat=value, index_set=decomp.index_set,
        gamma={k: gamma_map.get(k, 1.0) for k in decomp.index_set},
        verdicts=verdicts, eigen_range=eigen_range, params=params,
        samples_info={"count": samples.count, "grid": samples.descriptor},
        split=decomp.describe())
