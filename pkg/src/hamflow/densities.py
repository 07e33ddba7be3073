"""Base densities, exact model log-density via the inverse flow, KDE grids."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

from . import autodiff as ad
from .autodiff import ContractError, Expr, ParamStore, Program
from .dynamics import FlowSpec, StateVector
from .networks import GaussianEncoder, LOG_2PI


def _soft_uniform_log_unnorm(x: np.ndarray, sigma: float, beta: float) -> np.ndarray:
    # ln f(beta(x + sigma/2)) + ln f(-beta(x - sigma/2)) in softplus form
    a = beta * (x + 0.5 * sigma)
    b = beta * (x - 0.5 * sigma)
    sa = np.logaddexp(0.0, -a)
    sb = np.logaddexp(0.0, b)
    return -sa - sb


@lru_cache(maxsize=32)
def _soft_uniform_log_z(sigma: float, beta: float) -> float:
    """Per-coordinate log normalization by adaptive quadrature."""
    lim = 0.5 * sigma + 60.0 / beta
    val, err = quad(lambda x: math.exp(_soft_uniform_log_unnorm(np.float64(x), sigma, beta)),
                    -lim, lim, epsabs=1e-12, epsrel=1e-12, limit=200)
    if err > 1e-8:
        raise ContractError(f"soft-uniform normalization did not converge (err={err})")
    return math.log(val)


class BaseDensity:
    """Base density over phase space with a known symmetry.

    kinds: 'spherical-normal' (exactly rotation invariant) and
    'soft-uniform' (per-coordinate product of shifted sigmoids with plateau
    [-sigma/2, sigma/2] and sharpness beta).
    """

    def __init__(self, kind: str, d: int, sigma: float = 4.0, beta: float = 5.0):
        if kind not in ("spherical-normal", "soft-uniform"):
            raise ContractError(f"unknown base density '{kind}'")
        self.kind = kind
        self.d = int(d)
        self.sigma = float(sigma)
        self.beta = float(beta)
        if kind == "soft-uniform":
            if sigma <= 0 or beta <= 0:
                raise ContractError("soft-uniform needs positive sigma and beta")
            self._log_z = _soft_uniform_log_z(self.sigma, self.beta)

    def __repr__(self):
        if self.kind == "spherical-normal":
            return f"BaseDensity(spherical-normal, d={self.d})"
        return f"BaseDensity(soft-uniform, d={self.d}, sigma={self.sigma}, beta={self.beta})"

    # -- numeric ------------------------------------------------------------

    def _coord_log_prob(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "spherical-normal":
            return -0.5 * LOG_2PI - 0.5 * x * x
        return _soft_uniform_log_unnorm(x, self.sigma, self.beta) - self._log_z

    def log_prob(self, s: StateVector) -> np.ndarray | float:
        val = np.sum(self._coord_log_prob(s.flat()), axis=-1)
        return float(val) if not s.batched else val

    def marginal_q_log_prob(self, q: np.ndarray) -> np.ndarray:
        """Position-marginal log-density (the product form factorizes)."""
        q = np.asarray(q, dtype=np.float64)
        return np.sum(self._coord_log_prob(q), axis=-1)

    # -- graph --------------------------------------------------------------

    def _coord_log_prob_expr(self, v: Expr) -> Expr:
        if self.kind == "spherical-normal":
            n = v.shape[0]
            return ad.const(-0.5 * n * LOG_2PI) - 0.5 * ad.dot(v, v)
        a = ad.mul(ad.const(self.beta), v + ad.const(0.5 * self.sigma))
        b = ad.mul(ad.const(self.beta), v - ad.const(0.5 * self.sigma))
        terms = -ad.vsum(ad.softplus(-a)) - ad.vsum(ad.softplus(b))
        return terms - ad.const(v.shape[0] * self._log_z)

    def log_prob_exprs(self, q: Expr, p: Expr) -> Expr:
        if q.shape != (self.d,) or p.shape != (self.d,):
            raise ContractError(f"base density expects d={self.d} blocks")
        return self._coord_log_prob_expr(q) + self._coord_log_prob_expr(p)

    # -- sampling -----------------------------------------------------------

    def sample(self, count: int, rng: np.random.Generator) -> StateVector:
        flat = self._sample_coords(count * 2 * self.d, rng).reshape(count, 2 * self.d)
        return StateVector.from_flat(flat)

    def sample_q(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return self._sample_coords(count * self.d, rng).reshape(count, self.d)

    def _sample_coords(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "spherical-normal":
            return rng.standard_normal(n)
        # rejection from the bounding box [-sigma, sigma] with the exact ratio
        log_m = _soft_uniform_log_unnorm(np.float64(0.0), self.sigma, self.beta)
        out = np.empty(n)
        have = 0
        while have < n:
            need = n - have
            prop = rng.uniform(-self.sigma, self.sigma, size=max(need * 2, 64))
            logr = _soft_uniform_log_unnorm(prop, self.sigma, self.beta) - log_m
            keep = prop[np.log(rng.uniform(size=prop.size)) < logr]
            take = min(keep.size, need)
            out[have:have + take] = keep[:take]
            have += take
        return out

    def rejection_acceptance_rate(self) -> float:
        """Expected acceptance of the box sampler (diagnostic)."""
        if self.kind != "soft-uniform":
            return 1.0
        log_m = _soft_uniform_log_unnorm(np.float64(0.0), self.sigma, self.beta)
        return math.exp(self._log_z) / (2.0 * self.sigma * math.exp(log_m))


def spherical_normal(d: int) -> BaseDensity:
    return BaseDensity("spherical-normal", d)


def soft_uniform(d: int, sigma: float = 4.0, beta: float = 5.0) -> BaseDensity:
    return BaseDensity("soft-uniform", d, sigma, beta)


# ---------------------------------------------------------------------------
# model density


@dataclass
class ModelDensity:
    """Flow + base + encoder; the joint density needs no Jacobian term."""

    flow: FlowSpec
    base: BaseDensity
    encoder: GaussianEncoder
    store: ParamStore
    _programs: dict = dc_field(default_factory=dict, repr=False)

    @property
    def d(self) -> int:
        return self.flow.d

    def _prog(self, kind: str) -> Program:
        prog = self._programs.get(kind)
        if prog is not None:
            return prog
        d = self.d
        if kind == "joint":
            q = ad.vector_input("q", d)
            p = ad.vector_input("p", d)
            q0, p0 = self.flow.inverse_exprs(q, p)
            prog = Program([self.base.log_prob_exprs(q0, p0)], [q, p], self.store)
        elif kind == "fwd":
            q = ad.vector_input("q", d)
            p = ad.vector_input("p", d)
            prog = Program(list(self.flow.forward_exprs(q, p)), [q, p], self.store)
        elif kind == "enc":
            q = ad.vector_input("q", d)
            noise = ad.vector_input("noise", d)
            p, logdens = self.encoder.exprs(q, noise, self.store)
            prog = Program([p, logdens], [q, noise], self.store)
        else:  # pragma: no cover
            raise ContractError(f"unknown program '{kind}'")
        self._programs[kind] = prog
        return prog

    def encoder_sample(self, q: np.ndarray, noise: np.ndarray):
        p, logdens = self._prog("enc")(q, noise)
        return p, logdens


def model_joint_log_prob(m: ModelDensity, s: StateVector) -> np.ndarray | float:
    """ln p(s) = ln pi(flow_inverse(s)); exact because the flow is unit-Jacobian."""
    out = m._prog("joint")(s.q, s.p)[0]
    return float(out) if not s.batched else out


def model_sample(m: ModelDensity, count: int, seed: int) -> np.ndarray:
    """Push base samples through the forward flow; the momentum is dropped."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    s0 = m.base.sample(count, rng)
    q, _p = m._prog("fwd")(s0.q, s0.p)
    return np.asarray(q)


# ---------------------------------------------------------------------------
# grids and KDE


@dataclass
class GridData:
    """Rectangular grid: values[iy, ix] at (xs[ix], ys[iy])."""

    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray

    @property
    def cell_area(self) -> float:
        return float((self.xs[1] - self.xs[0]) * (self.ys[1] - self.ys[0]))


DEFAULT_BOUNDS = (-4.0, 4.0, -4.0, 4.0)
DEFAULT_RESOLUTION = 101


def kde_grid(samples: np.ndarray, bounds=DEFAULT_BOUNDS,
             resolution: int = DEFAULT_RESOLUTION,
             bandwidth="auto") -> GridData:
    """Gaussian-product KDE on a grid, normalized to integrate to 1 on it.

    'auto' bandwidth is Scott's rule per axis: h_j = std_j * N^(-1/6).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ContractError("kde_grid needs a non-empty (N, 2) sample array")
    if samples.shape[1] != 2:
        raise ContractError("grid export supports d=2 only")
    n = samples.shape[0]
    if isinstance(bandwidth, str):
        if bandwidth != "auto":
            raise ContractError(f"unknown bandwidth rule '{bandwidth}'")
        std = np.std(samples, axis=0, ddof=1)
        std = np.where(std > 0, std, 1.0)
        h = std * n ** (-1.0 / 6.0)
    else:
        h = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (2,)).copy()
        if np.any(h <= 0):
            raise ContractError("bandwidth must be positive")
    x0, x1, y0, y1 = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    values = np.zeros((resolution, resolution))
    norm = 1.0 / (n * 2.0 * np.pi * h[0] * h[1])
    for iy in range(resolution):
        dy = (ys[iy] - samples[:, 1]) / h[1]
        ey = np.exp(-0.5 * dy * dy)
        dx = (xs[None, :] - samples[:, 0, None]) / h[0]
        ex = np.exp(-0.5 * dx * dx)
        values[iy, :] = norm * (ey @ ex)
    grid = GridData(xs, ys, values)
    total = values.sum() * grid.cell_area
    if total > 0:
        values /= total
    return grid


def field_grid(field, store: ParamStore | None, var: str = "q",
               bounds=DEFAULT_BOUNDS, resolution: int = DEFAULT_RESOLUTION) -> GridData:
    """Evaluate a scalar field on a 2-D grid (energy surfaces U(q), K(p))."""
    if field.d != 2:
        raise ContractError("grid export supports d=2 only")
    x0, x1, y0, y1 = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    zeros = np.zeros_like(pts)
    env = {"q": pts, "p": zeros} if var == "q" else {"q": zeros, "p": pts}
    vals = ad.evaluate(field.expr, env, store)
    return GridData(xs, ys, np.asarray(vals).reshape(resolution, resolution))


def write_grid_csv(path, grid: GridData) -> None:
    """x,y,value rows; row-major in y then x (FORMATS.md)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "value"])
        for iy in range(grid.ys.size):
            for ix in range(grid.xs.size):
                writer.writerow([f"{grid.xs[ix]:.17g}", f"{grid.ys[iy]:.17g}",
                                 f"{grid.values[iy, ix]:.17g}"])


def read_grid_csv(path) -> GridData:
    xs, ys, vals = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(("x", "y", "value")) - set(reader.fieldnames):
            raise ContractError(f"grid file {path} must have columns x,y,value")
        for row in reader:
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
            vals.append(float(row["value"]))
    uxs = np.unique(np.asarray(xs))
    uys = np.unique(np.asarray(ys))
    if uxs.size * uys.size != len(vals):
        raise ContractError(f"grid file {path} is not a complete lattice")
    values = np.asarray(vals).reshape(uys.size, uxs.size)
    return GridData(uxs, uys, values)
