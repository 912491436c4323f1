"""Plain-text configuration: ``key = value`` lines.

Problem files and run configs share one syntax: one assignment per line,
``#`` comments, dotted/bracketed keys (``domain.lo``, ``b[1][2]``),
double-quoted strings for expressions, bare words for names, numbers and
whitespace-separated number lists for everything else.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .fields import (Box, CoefficientField, TableField, builtin_problem,
                     builtin_solve_data, make_field)

__all__ = ["ConfigError", "parse_kv_text", "load_problem_mapping",
           "RunConfig", "config_hash"]


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str) -> dict:
    """Parse assignment lines into an ordered ``{key: value}`` mapping."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = _parse_value(value, lineno)
    return out


def _parse_value(value: str, lineno: int):
    if not value:
        raise ConfigError(f"line {lineno}: empty value")
    if value[0] == '"':
        if len(value) < 2 or value[-1] != '"':
            raise ConfigError(f"line {lineno}: unterminated string")
        return value[1:-1]
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    parts = value.replace(",", " ").split()
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        return value  # bare word such as a builtin name
    return nums[0] if len(nums) == 1 else nums


def _int_list(value) -> list:
    vals = value if isinstance(value, list) else [value]
    return [int(v) for v in vals]


def _load_table(path: Path, n: int, box: Box, cells) -> list:
    """Piecewise-constant matrix from CSV rows ``i1..in, b11..bnn``."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    if rows.shape[1] != n + n * n:
        raise ConfigError(f"table {path} needs {n + n * n} columns")
    cells = tuple(int(c) for c in cells)
    values = np.zeros(cells + (n, n))
    for row in rows:
        idx = tuple(int(v) for v in row[:n])
        values[idx] = row[n:].reshape(n, n)
    entries = [[TableField(box, cells, values[..., i, j]) for j in range(n)]
               for i in range(n)]
    return entries


def load_problem_mapping(kv: dict, base_dir: Path) -> CoefficientField:
    """Build a coefficient field from a problem-file mapping.

    Keys: ``n``, ``T``, ``domain.lo``/``domain.hi`` (or ``domain = all``),
    ``b[i][j]``/``f[i]``/``lambda.re``/``lambda.im``/``beta[i][j]`` with
    quoted expressions, or ``b.table.file`` plus ``b.table.cells`` for a
    piecewise-constant matrix.
    """
    try:
        n = int(kv["n"])
        T = float(kv["T"])
    except KeyError as missing:
        raise ConfigError(f"problem file lacks key {missing}") from None
    if kv.get("domain") == "all":
        domain = None
        table_box = Box((-1.0,) * n, (1.0,) * n)
    else:
        try:
            lo = kv["domain.lo"]
            hi = kv["domain.hi"]
        except KeyError as missing:
            raise ConfigError(f"problem file lacks key {missing}") from None
        lo = lo if isinstance(lo, list) else [lo]
        hi = hi if isinstance(hi, list) else [hi]
        domain = Box(tuple(lo), tuple(hi))
        table_box = domain

    if "b.table.file" in kv:
        cells = _int_list(kv.get("b.table.cells", [1] * n))
        b = _load_table(base_dir / str(kv["b.table.file"]), n, table_box, cells)
    else:
        b = [[kv.get(f"b[{i + 1}][{j + 1}]", 1.0 if i == j else 0.0)
              for j in range(n)] for i in range(n)]
    f = [kv.get(f"f[{i + 1}]", 0.0) for i in range(n)]
    lam = (kv.get("lambda.re", 0.0), kv.get("lambda.im", 0.0))
    beta = None
    if any(key.startswith("beta[") for key in kv):
        beta = [[kv.get(f"beta[{i + 1}][{j + 1}]", 0.0) for j in range(n)]
                for i in range(n)]
    return make_field(n, T, domain, b, f, lam, beta)


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(
        json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    field: CoefficientField
    resolved: dict
    base_dir: Path
    grid_m: tuple | None = None
    grid_nt: int | None = None
    theta: float = 1.0
    split: str = "identity"
    index_set: tuple | None = None
    gamma: tuple | None = None
    samples_space: int = 9
    samples_time: int = 3
    phi: object = None
    Phi: object = None
    exact: object = None
    proof_eps: float | None = None
    proof_K: object = "auto"
    mc_M: int = 10000
    mc_dt: float = 1e-3
    mc_seed: int = 1
    sampler_kind: str = "uniform"
    sampler_params: dict = dc_field(default_factory=dict)
    pairing_allowance: float = 2e-2
    density_times: list = dc_field(default_factory=list)
    density_l1: float = 0.05
    char_panel: Path | None = None
    char_allowance: float = 3e-2
    out_dir: Path = Path("out")
    threads: int | None = None
    dump_paths: bool = False

    @staticmethod
    def load(path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        kv = parse_kv_text(path.read_text())
        kv.update(overrides or {})
        return RunConfig.from_mapping(kv, path.parent)

    @staticmethod
    def from_mapping(kv: dict, base_dir: Path) -> "RunConfig":
        from .fields import ExprField

        base_dir = Path(base_dir)
        if "problem.builtin" in kv:
            name = str(kv["problem.builtin"])
            params = {key.split(".", 2)[2]: val for key, val in kv.items()
                      if key.startswith("problem.param.")}
            try:
                field = builtin_problem(name, params)
            except KeyError as err:
                raise ConfigError(str(err)) from None
            solve_data = builtin_solve_data(name, field.T)
        elif "problem.file" in kv:
            ppath = base_dir / str(kv["problem.file"])
            if not ppath.exists():
                raise ConfigError(f"problem file {ppath} does not exist")
            field = load_problem_mapping(parse_kv_text(ppath.read_text()),
                                         ppath.parent)
            solve_data = None
        else:
            field = load_problem_mapping(kv, base_dir)
            solve_data = None

        cfg = RunConfig(field=field, resolved=dict(kv), base_dir=base_dir)
        if solve_data is not None:
            cfg.phi, cfg.Phi, cfg.exact = solve_data

        if "grid.m" in kv:
            cfg.grid_m = tuple(_int_list(kv["grid.m"]))
        if "grid.nt" in kv:
            cfg.grid_nt = int(kv["grid.nt"])
        cfg.theta = float(kv.get("scheme.theta", 1.0))
        if not 0.5 <= cfg.theta <= 1.0:
            raise ConfigError(f"scheme.theta={cfg.theta} outside [0.5, 1]")

        cfg.split = str(kv.get("conditions.split", "identity"))
        if cfg.split not in ("identity", "constant"):
            raise ConfigError(f"unknown split spec {cfg.split!r}")
        if "conditions.N" in kv:
            cfg.index_set = tuple(_int_list(kv["conditions.N"]))
            if any(not 1 <= k <= field.n for k in cfg.index_set):
                raise ConfigError("conditions.N indices outside 1..n")
        if "conditions.gamma" in kv:
            gammas = kv["conditions.gamma"]
            cfg.gamma = tuple(gammas if isinstance(gammas, list) else [gammas])
            if any(not 0.0 < g < 2.0 for g in cfg.gamma):
                raise ConfigError("conditions.gamma entries must lie in (0, 2)")
            if cfg.index_set is not None and \
                    len(cfg.gamma) != len(cfg.index_set):
                raise ConfigError("conditions.gamma length != conditions.N")
        cfg.samples_space = int(kv.get("conditions.samples.space", 9))
        cfg.samples_time = int(kv.get("conditions.samples.time", 3))

        if "solve.phi" in kv or "solve.phi_im" in kv:
            re = ExprField(str(kv.get("solve.phi", "0")))
            if "solve.phi_im" in kv:
                cfg.phi = (re, ExprField(str(kv["solve.phi_im"])))
            else:
                cfg.phi = re
        if "solve.Phi" in kv:
            cfg.Phi = ExprField(str(kv["solve.Phi"]))
        if "solve.exact" in kv:
            cfg.exact = ExprField(str(kv["solve.exact"]))
        if "solve.proof_mirror.eps" in kv:
            cfg.proof_eps = float(kv["solve.proof_mirror.eps"])
        if "solve.proof_mirror.K" in kv:
            raw = kv["solve.proof_mirror.K"]
            cfg.proof_K = raw if raw == "auto" else float(raw)

        cfg.mc_M = int(kv.get("mc.M", 10000))
        if cfg.mc_M < 1:
            raise ConfigError("mc.M must be at least 1")
        cfg.mc_dt = float(kv.get("mc.dt", 1e-3))
        if cfg.mc_dt <= 0:
            raise ConfigError("mc.dt must be positive")
        cfg.mc_seed = int(kv.get("mc.seed", 1))
        cfg.sampler_kind = str(kv.get("mc.sampler", "uniform"))
        cfg.sampler_params = {key.split(".", 2)[2]: val
                              for key, val in kv.items()
                              if key.startswith("mc.sampler.")}
        cfg.dump_paths = bool(kv.get("mc.dump_paths", False))

        cfg.pairing_allowance = float(kv.get("verify.pairing.allowance", 2e-2))
        if "verify.density.times" in kv:
            times = kv["verify.density.times"]
            cfg.density_times = list(times if isinstance(times, list)
                                     else [times])
        cfg.density_l1 = float(kv.get("verify.density.l1", 0.05))
        if "characteristic.panel" in kv:
            cfg.char_panel = base_dir / str(kv["characteristic.panel"])
        cfg.char_allowance = float(kv.get("characteristic.allowance", 3e-2))
        if "out.dir" in kv:
            cfg.out_dir = base_dir / str(kv["out.dir"])
        if "threads" in kv:
            cfg.threads = int(kv["threads"])
        return cfg

    def make_sampler(self):
        from .stochastic import (HatSampler, PointSampler,
                                 TruncatedGaussianSampler, UniformBoxSampler)
        box = self.field.sampling_box()
        params = self.sampler_params
        kind = self.sampler_kind
        if kind == "uniform":
            return UniformBoxSampler(box)
        if kind == "gaussian":
            mean = params.get("center", [0.0] * self.field.n)
            sigma = params.get("sigma", 1.0)
            mean = mean if isinstance(mean, list) else [mean] * self.field.n
            return TruncatedGaussianSampler(mean, sigma, box)
        if kind == "hat":
            center = params.get("center", [0.0] * self.field.n)
            center = center if isinstance(center, list) \
                else [center] * self.field.n
            return HatSampler(center, params.get("width", 0.25))
        if kind == "point":
            point = params.get("at", [0.0] * self.field.n)
            point = point if isinstance(point, list) else [point]
            return PointSampler(point)
        raise ConfigError(f"unknown sampler {kind!r}")

    def make_grid(self):
        from .grid import build_grid
        if self.grid_m is None or self.grid_nt is None:
            raise ConfigError("this command needs grid.m and grid.nt")
        if self.field.domain is None:
            raise ConfigError("grids need a bounded domain; emulate free "
                              "space with a wide box in the problem file")
        m = self.grid_m if len(self.grid_m) > 1 else self.grid_m[0]
        return build_grid(self.field.domain, m, self.grid_nt, self.field.T)

    def gamma_map(self):
        if self.gamma is None:
            return None
        if self.index_set is None:
            raise ConfigError("conditions.gamma needs conditions.N")
        return dict(zip(self.index_set, self.gamma))

    def hash(self) -> str:
        return config_hash(self.resolved)
