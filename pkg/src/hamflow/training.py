"""ELBO estimation, constrained min-max training, synthetic datasets."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np
from scipy.special import logsumexp
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import ConfigError, ContractError, NumericError, ParamStore, Program
from .densities import (
    ModelDensity,
    field_grid,
    kde_grid,
    model_sample,
    soft_uniform,
    spherical_normal,
    write_grid_csv,
)
from .dynamics import FlowSpec, StateVector, field_from_mlp, hamiltonian_field
from .networks import (
    MlpSpec,
    encoder_specs,
    init_encoder_params,
    init_mlp_params,
)
from .symmetry import Generator, GeneratorSet, so2_generator


class TrainingAbort(Exception):
    """Numeric failure during training; carries the diagnostic dump path."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def derive_seed(root: int, purpose: str) -> int:
    """Sub-seed from (root, purpose), stable across platforms."""
    digest = hashlib.sha256(f"{root}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(root: int, purpose: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(root, purpose)))


# ---------------------------------------------------------------------------
# datasets

RING_RADIUS = 2.0
RING_SIGMA = 0.2
MIXTURE_CENTERS = np.array([[2.0, 2.0], [2.0, -2.0], [-2.0, 2.0], [-2.0, -2.0]])
MIXTURE_SIGMA = 0.4


@dataclass
class Dataset:
    kind: str
    train_q: np.ndarray | None          # None in the infinite-data regime
    test_q: np.ndarray
    sampler: object                     # callable (count, rng) -> (count, d)
    true_log_prob: object | None        # callable (q,) -> log-density, if known
    d: int = 2


def _ring_sample(count: int, rng: np.random.Generator) -> np.ndarray:
    r = rng.normal(RING_RADIUS, RING_SIGMA, size=count)
    while np.any(r <= 0):  # truncation at 10 sigma; essentially never resamples
        bad = r <= 0
        r[bad] = rng.normal(RING_RADIUS, RING_SIGMA, size=int(bad.sum()))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=count)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)


def _ring_log_prob(q: np.ndarray) -> np.ndarray:
    # p(q) = p_r(|q|) / (2 pi |q|); the 1/r factor diverges (integrably) at
    # the origin, so the log-density is +inf exactly there
    from scipy.stats import norm

    q = np.asarray(q, dtype=np.float64)
    r = np.sqrt(np.sum(q * q, axis=-1))
    log_trunc = math.log(norm.sf(-RING_RADIUS / RING_SIGMA))
    lp_r = (-0.5 * math.log(2 * math.pi) - math.log(RING_SIGMA)
            - 0.5 * ((r - RING_RADIUS) / RING_SIGMA) ** 2 - log_trunc)
    with np.errstate(divide="ignore"):
        return lp_r - np.log(2.0 * np.pi * r)


def _mixture_sample(count: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.integers(0, len(MIXTURE_CENTERS), size=count)
    return MIXTURE_CENTERS[comp] + MIXTURE_SIGMA * rng.standard_normal((count, 2))


def _mixture_log_prob(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    diffs = q[..., None, :] - MIXTURE_CENTERS
    comp_lp = (-np.log(2 * np.pi * MIXTURE_SIGMA ** 2)
               - 0.5 * np.sum(diffs * diffs, axis=-1) / MIXTURE_SIGMA ** 2)
    return logsumexp(comp_lp, axis=-1) - math.log(len(MIXTURE_CENTERS))


def make_dataset(kind: str, size: int | None, seed: int,
                 test_size: int = 2048, path: str | None = None) -> Dataset:
    """Synthetic targets with tractable log-densities, or an external file.

    `size` is the finite training-set size; None means fresh samples every
    batch (the infinite-data regime).
    """
    rng = make_rng(seed, "dataset")
    if kind == "so2-ring":
        sampler, lp = _ring_sample, _ring_log_prob
    elif kind == "gaussian-mixture":
        sampler, lp = _mixture_sample, _mixture_log_prob
    elif kind == "external":
        if path is None:
            raise ConfigError("external dataset needs a path")
        data = _read_positions(path)
        if size is None or size >= len(data):
            raise ConfigError("external dataset needs a finite size below the file length")
        test = data[size:size + test_size]
        if len(test) == 0:
            raise ConfigError("external dataset too small for a test split")
        return Dataset("external", data[:size], test, None, None, d=data.shape[1])
    else:
        raise ConfigError(f"unknown dataset kind '{kind}'")
    test_q = sampler(test_size, make_rng(seed, "dataset-test"))
    train_q = sampler(size, rng) if size is not None else None
    return Dataset(kind, train_q, test_q, sampler, lp)


def _read_positions(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for i, line in enumerate(csv.reader(fh)):
            if not line:
                continue
            if i == 0 and any(not _is_float(tok) for tok in line):
                continue
            rows.append([float(tok) for tok in line])
    if not rows:
        raise ConfigError(f"no data rows in {path}")
    return np.asarray(rows, dtype=np.float64)


def _is_float(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# optimizer


def adam_step(flat: np.ndarray, grad: np.ndarray, state: dict, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place on the flat parameters."""
    if grad.shape != flat.shape:
        raise ContractError("gradient/parameter shape mismatch")
    b1, b2 = betas
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    if "m" not in state:
        state["m"] = np.zeros_like(flat)
        state["v"] = np.zeros_like(flat)
    m, v = state["m"], state["v"]
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    flat -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a ParamStore's flat array; state lives in the store's slots.

    The update is written with preallocated work buffers: at tens of
    thousands of parameters the temporaries otherwise dominate the step.
    """

    def __init__(self, store: ParamStore, lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps
        store.slots["adam_m"] = np.zeros(store.size)
        store.slots["adam_v"] = np.zeros(store.size)
        self.state = {"m": store.slots["adam_m"], "v": store.slots["adam_v"], "t": 0}
        self._w1 = np.empty(store.size)
        self._w2 = np.empty(store.size)

    def step(self, grad: np.ndarray) -> None:
        if grad.shape != self.store.flat.shape:
            raise ContractError("gradient/parameter shape mismatch")
        b1, b2 = self.betas
        self.state["t"] += 1
        t = self.state["t"]
        m, v, w1, w2 = self.state["m"], self.state["v"], self._w1, self._w2
        np.multiply(m, b1, out=m)
        np.multiply(grad, 1.0 - b1, out=w1)
        np.add(m, w1, out=m)
        np.multiply(v, b2, out=v)
        np.multiply(grad, grad, out=w1)
        np.multiply(w1, 1.0 - b2, out=w1)
        np.add(v, w1, out=v)
        np.divide(v, 1.0 - b2 ** t, out=w1)
        np.sqrt(w1, out=w1)
        np.add(w1, self.eps, out=w1)
        np.divide(m, 1.0 - b1 ** t, out=w2)
        np.divide(w2, w1, out=w2)
        np.multiply(w2, self.lr, out=w2)
        np.subtract(self.store.flat, w2, out=self.store.flat)


def lambda_ascent(gens: GeneratorSet, slack_ema: np.ndarray, rate: float) -> np.ndarray:
    """Multiplicative ascent on the multipliers with projection to lambda >= 0.

    lambda_k <- max(0, lambda_k * exp(rate * ema(C_k))): positive slack raises
    lambda, negative slack decays it toward zero.
    """
    if rate <= 0:
        raise ContractError("ascent rate must be positive")
    for gen, ema in zip(gens, slack_ema):
        gen.lam = max(0.0, gen.lam * math.exp(rate * float(ema)))
    return gens.lams


# ---------------------------------------------------------------------------
# ELBO and Lagrangian


def _elbo_program(m: ModelDensity) -> Program:
    """Roots: per-sample ELBO and the encoder momentum draw p.

    The p values feed the data-induced half of the constraint expectation
    (as constants; the penalty must shape H, not push the encoder around).
    """
    prog = m._programs.get("elbo")
    if prog is None:
        d = m.d
        q = ad.vector_input("q", d)
        noise = ad.vector_input("noise", d)
        p, logdens = m.encoder.exprs(q, noise, m.store)
        q0, p0 = m.flow.inverse_exprs(q, p)
        elbo_expr = m.base.log_prob_exprs(q0, p0) - logdens
        prog = Program([elbo_expr, p], [q, noise], m.store)
        m._programs["elbo"] = prog
    return prog


def elbo(m: ModelDensity, q: np.ndarray, noise: np.ndarray):
    """Single-sample ELBO estimate(s): ln pi(flow^-1(q, p)) - ln h(p|q)."""
    out = _elbo_program(m)(q, noise)[0]
    return float(out) if np.asarray(q).ndim == 1 else out


def _build_penalty_roots(m: ModelDensity, gens: GeneratorSet):
    from .dynamics import poisson_bracket_expr

    d = m.d
    q = ad.vector_input("q", d)
    p = ad.vector_input("p", d)
    hams = [hamiltonian_field(K, U) for K, U in m.flow.hamiltonians]
    roots = []
    for gen in gens:
        terms = [ad.square(poisson_bracket_expr(gen.field, H, q, p)) for H in hams]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        roots.append(total)
    return roots, [q, p]


def _penalty_program(m: ModelDensity, gens: GeneratorSet, key: str = "penalty") -> Program:
    """Per-generator squared-bracket graphs, summed over the flow's chain.

    Separate Program instances per caller role (`key`): each binds buffers to
    one batch size, so alternating base/data batches do not thrash rebinds.
    """
    prog = m._programs.get(key)
    if prog is None:
        roots, inputs = _build_penalty_roots(m, gens)
        prog = Program(roots, inputs, m.store)
        m._programs[key] = prog
    return prog


def lagrangian(m: ModelDensity, gens: GeneratorSet, batch_q: np.ndarray,
               pi_batch: StateVector, noise: np.ndarray) -> tuple[float, np.ndarray]:
    """loss = -mean ELBO + sum_k lambda_k * C_k; returns (loss, slacks).

    C_k is taken over the supplied state batch; the training loop estimates
    it over an equal mix of base samples and encoder-induced states. The
    multipliers are constants here; their ascent is a separate update.
    """
    elbo_vals = elbo(m, batch_q, noise)
    loss = -float(np.mean(elbo_vals))
    slacks = np.zeros(len(gens))
    if len(gens):
        pen = _penalty_program(m, gens)(pi_batch.q, pi_batch.p)
        slacks = np.array([float(np.mean(v)) - gen.kappa for v, gen in zip(pen, gens)])
        loss += float(np.sum(gens.lams * slacks))
    return loss, slacks


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class GeneratorConfig:
    kind: str = "so2"
    kappa: float = 0.0
    matrix: list | None = None

    def build(self, d: int, lam_init: float) -> Generator:
        if self.kind == "so2":
            if d != 2:
                raise ConfigError("so2 generator needs d=2")
            f = so2_generator()
        elif self.kind == "quadratic":
            if self.matrix is None:
                raise ConfigError("quadratic generator needs a matrix")
            from .symmetry import quadratic_form_generator

            f = quadratic_form_generator(np.asarray(self.matrix, dtype=np.float64))
        else:
            raise ConfigError(f"unknown generator kind '{self.kind}'")
        return Generator(f, kappa=self.kappa, lam=lam_init)


@dataclass
class ExperimentConfig:
    """Everything a run needs; mirrors the JSON schema in config.schema.json."""

    dataset: str = "gaussian-mixture"
    dataset_size: int | None = None          # None = infinite data
    dataset_path: str | None = None
    base_density: str = "spherical-normal"   # or "soft-uniform"
    base_sigma: float = 4.0
    base_beta: float = 5.0
    dimension: int = 2
    hidden: tuple[int, ...] = (128, 128)
    encoder_hidden: tuple[int, ...] = (128, 128)
    dt: float = 0.5
    leapfrog_steps: int = 2
    n_hamiltonians: int = 1
    generators: tuple[GeneratorConfig, ...] = ()
    learning_rate: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 128
    lambda_rate: float = 0.03
    lambda_init: float = 1.0
    penalty_batch: int = 256
    ema_momentum: float = 0.99
    penalty_data_fraction: float = 0.5
    penalty_data_kappa_scale: float = 10.0
    steps: int = 20000
    eval_every: int = 250
    test_size: int = 2048
    final_eval_draws: int = 16
    seed: int = 0
    out_dir: str | None = None
    export_grids: bool = True
    grid_sample_count: int = 10000

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.learning_rate <= 0 or self.lambda_rate <= 0:
            raise ConfigError("rates must be positive")
        if any(g.kappa < 0 for g in self.generators):
            raise ConfigError("kappa must be non-negative")
        if self.batch_size < 1 or self.penalty_batch < 1:
            raise ConfigError("batch sizes must be positive")
        if not 0.0 <= self.penalty_data_fraction <= 1.0:
            raise ConfigError("penalty_data_fraction must lie in [0, 1]")
        if self.penalty_data_kappa_scale < 1.0:
            raise ConfigError("penalty_data_kappa_scale must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        d = dict(raw)
        gens = tuple(GeneratorConfig(**g) for g in d.pop("generators", []))
        size = d.pop("dataset_size", None)
        if size == "infinite":
            size = None
        for key in ("hidden", "encoder_hidden", "betas"):
            if key in d:
                d[key] = tuple(d[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(generators=gens, dataset_size=size, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generators"] = [asdict(g) for g in self.generators]
        d["dataset_size"] = "infinite" if self.dataset_size is None else self.dataset_size
        d["hidden"] = list(self.hidden)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["betas"] = list(self.betas)
        return d


def build_model(cfg: ExperimentConfig) -> tuple[ModelDensity, GeneratorSet]:
    """Instantiate networks, flow, base density and generators for a config."""
    d = cfg.dimension
    store = ParamStore()
    rng = make_rng(cfg.seed, "init")
    # plain Xavier init everywhere: shrinking the last energy layers toward a
    # near-identity flow leaves symmetric targets on a saddle (no first-order
    # signal reaches K or U) and training stalls there
    hams = []
    for i in range(cfg.n_hamiltonians):
        kspec = MlpSpec((d, *cfg.hidden, 1), "softplus", f"K{i}")
        uspec = MlpSpec((d, *cfg.hidden, 1), "softplus", f"U{i}")
        init_mlp_params(store, kspec, rng)
        init_mlp_params(store, uspec, rng)
        hams.append((kspec, uspec))
    enc = encoder_specs(d, cfg.encoder_hidden)
    init_encoder_params(store, enc, rng)
    store.freeze()

    flow = FlowSpec(
        [(field_from_mlp(k, store, "p", name=k.prefix),
          field_from_mlp(u, store, "q", name=u.prefix)) for k, u in hams],
        dt=cfg.dt, leapfrog_steps=cfg.leapfrog_steps)
    if cfg.base_density == "spherical-normal":
        base = spherical_normal(d)
    elif cfg.base_density == "soft-uniform":
        base = soft_uniform(d, cfg.base_sigma, cfg.base_beta)
    else:
        raise ConfigError(f"unknown base density '{cfg.base_density}'")
    model = ModelDensity(flow, base, enc, store)
    gens = GeneratorSet([g.build(d, cfg.lambda_init) for g in cfg.generators])
    return model, gens


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: ModelDensity
    generators: GeneratorSet
    dataset: Dataset
    metrics: list[dict]
    out_dir: str | None
    seconds: float
    slack_history: list = dc_field(default_factory=list)
    lambda_history: list = dc_field(default_factory=list)


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _metric_columns(gens: GeneratorSet) -> list[str]:
    cols = ["step", "train_elbo", "test_elbo"]
    for name in gens.names():
        cols.append(f"slack_{name}")
    for name in gens.names():
        cols.append(f"lambda_{name}")
    return cols


def write_metrics_csv(path: str, rows: list[dict], gens: GeneratorSet) -> None:
    cols = _metric_columns(gens)
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def test_elbo_mean(model: ModelDensity, test_q: np.ndarray, root_seed: int,
                   step: int, chunk: int = 256, draws: int = 1) -> float:
    """Mean single-sample ELBO on the held-out set, deterministic per step.

    `draws` > 1 averages several noise draws per point: the same estimand
    with less Monte Carlo variance (used for the final evaluation, where
    sweep cells are compared).
    """
    rng = make_rng(root_seed, f"test-noise-{step}")
    noise = rng.standard_normal((draws,) + test_q.shape)
    total = 0.0
    for k in range(draws):
        for lo in range(0, len(test_q), chunk):
            vals = elbo(model, test_q[lo:lo + chunk], noise[k, lo:lo + chunk])
            total += float(np.sum(vals))
    return total / (len(test_q) * draws)


def train(cfg: ExperimentConfig) -> TrainResult:
    """Alternating descent on (theta, phi) and multiplicative ascent on lambda.

    Deterministic: identical config and seed give identical metric histories.
    """
    with threadpool_limits(limits=1):
        return _train_inner(cfg)


def _train_inner(cfg: ExperimentConfig) -> TrainResult:
    t_start = time.perf_counter()
    dataset = make_dataset(cfg.dataset, cfg.dataset_size, derive_seed(cfg.seed, "data"),
                           cfg.test_size, cfg.dataset_path)
    model, gens = build_model(cfg)
    store = model.store
    adam = Adam(store, cfg.learning_rate, cfg.betas)
    grad = store.zeros_like_flat()

    elbo_prog = _elbo_program(model)
    penalty_pi_prog = _penalty_program(model, gens, "penalty-pi") if len(gens) else None
    penalty_data_prog = _penalty_program(model, gens, "penalty-data") if len(gens) else None

    data_rng = make_rng(cfg.seed, "batches")
    noise_rng = make_rng(cfg.seed, "noise")
    pi_rng = make_rng(cfg.seed, "penalty")
    bsz = cfg.batch_size
    d = cfg.dimension

    perm = np.empty(0, dtype=np.int64)
    cursor = 0

    def next_batch() -> np.ndarray:
        nonlocal perm, cursor
        if dataset.train_q is None:
            return dataset.sampler(bsz, data_rng)
        n = len(dataset.train_q)
        out = np.empty((bsz, d))
        filled = 0
        while filled < bsz:
            if cursor >= len(perm):
                perm = data_rng.permutation(n)
                cursor = 0
            take = min(bsz - filled, len(perm) - cursor)
            out[filled:filled + take] = dataset.train_q[perm[cursor:cursor + take]]
            cursor += take
            filled += take
        return out

    ema = np.zeros(len(gens))
    metrics: list[dict] = []
    slack_hist: list[np.ndarray] = []
    lam_hist: list[np.ndarray] = []
    timing: list[tuple[int, float]] = []
    train_elbo = float("nan")
    slacks = np.zeros(len(gens))

    def record(step: int):
        draws = cfg.final_eval_draws if step == cfg.steps else 1
        row = {"step": step, "train_elbo": train_elbo,
               "test_elbo": test_elbo_mean(model, dataset.test_q, cfg.seed,
                                           step, draws=draws)}
        for name, s in zip(gens.names(), slacks):
            row[f"slack_{name}"] = s
        for name, l in zip(gens.names(), gens.lams):
            row[f"lambda_{name}"] = l
        metrics.append(row)
        slack_hist.append(np.array(slacks))
        lam_hist.append(gens.lams)
        timing.append((step, time.perf_counter() - t_start))

    step = 0
    try:
        record(0)
        for step in range(1, cfg.steps + 1):
            qb = next_batch()
            nb = noise_rng.standard_normal((bsz, d))
            grad[:] = 0.0
            elbo_vals, p_enc = elbo_prog.value_and_grad([qb, nb], [-1.0 / bsz, 0.0], grad)
            train_elbo = float(np.mean(elbo_vals))
            if penalty_pi_prog is not None:
                # constraint expectation: equal mix of base-density states and
                # the step's encoder-induced states (where the flow actually
                # operates; enforcing on pi alone leaves the commutator free
                # at the momenta the encoder uses)
                frac = cfg.penalty_data_fraction
                pis = model.base.sample(cfg.penalty_batch, pi_rng)
                seeds_pi = [(1.0 - frac) * gen.lam / cfg.penalty_batch for gen in gens]
                pen_pi = penalty_pi_prog.value_and_grad([pis.q, pis.p], seeds_pi, grad)
                if frac > 0.0:
                    seeds_data = [frac * gen.lam / bsz for gen in gens]
                    pen_data = penalty_data_prog.value_and_grad([qb, p_enc], seeds_data, grad)
                else:
                    pen_data = [np.zeros(1) for _ in gens]
                # the base-density side enforces the stated precision; the
                # encoder-state side (an addition for end-to-end invariance)
                # gets a looser precision so it stops dragging the fit once
                # the commutator is small there
                scale = cfg.penalty_data_kappa_scale
                slacks = np.array([
                    (1.0 - frac) * (float(np.mean(a)) - gen.kappa)
                    + frac * (float(np.mean(b)) - scale * gen.kappa)
                    for a, b, gen in zip(pen_pi, pen_data, gens)])
            adam.step(grad)
            if len(gens):
                ema = cfg.ema_momentum * ema + (1.0 - cfg.ema_momentum) * slacks
                lambda_ascent(gens, ema, cfg.lambda_rate)
            if step % cfg.eval_every == 0 or step == cfg.steps:
                record(step)
    except NumericError as err:
        dump_path = None
        if cfg.out_dir:
            os.makedirs(cfg.out_dir, exist_ok=True)
            dump_path = os.path.join(cfg.out_dir, f"abort_step{step}.npz")
            np.savez(dump_path, step=step, batch=qb, noise=nb,
                     params=store.flat.copy())
        raise TrainingAbort(f"numeric failure at step {step}: {err}", dump_path) from err

    seconds = time.perf_counter() - t_start
    result = TrainResult(model, gens, dataset, metrics, cfg.out_dir, seconds,
                         slack_hist, lam_hist)
    if cfg.out_dir:
        _write_artifacts(cfg, result, timing)
    return result


def _write_artifacts(cfg: ExperimentConfig, result: TrainResult,
                     timing: list[tuple[int, float]]) -> None:
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    model, gens = result.model, result.generators

    write_metrics_csv(os.path.join(out, "metrics.csv"), result.metrics, gens)
    lines = ["step,seconds"] + [f"{s},{t:.3f}" for s, t in timing]
    _atomic_write(os.path.join(out, "timing.csv"), ("\n".join(lines) + "\n").encode())

    ckpt_tmp = os.path.join(out, "params.bin.tmp")
    model.store.save(ckpt_tmp)
    os.replace(ckpt_tmp, os.path.join(out, "params.bin"))
    _atomic_write(os.path.join(out, "config.json"),
                  json.dumps(cfg.to_dict(), indent=2, sort_keys=True).encode())

    if len(gens):
        from .symmetry import noether_drift, symmetry_report

        rng = make_rng(cfg.seed, "drift")
        starts = model.base.sample(100, rng)
        drifts = []
        for i in range(100):
            s0 = StateVector(starts.q[i], starts.p[i])
            drifts.append(noether_drift(gens.generators[0].field, model.flow, s0,
                                        model.flow.leapfrog_steps, model.store))
        stats = {"median_drift": float(np.median(drifts)),
                 "max_drift": float(np.max(drifts))}
        payload = symmetry_report(gens, result.slack_history, result.lambda_history, stats)
        _atomic_write(os.path.join(out, "symmetry_report.json"),
                      json.dumps(payload, indent=2).encode())

    if cfg.export_grids:
        export_grids(cfg, result)


def export_grids(cfg: ExperimentConfig, result: TrainResult) -> list[str]:
    """Final surfaces: model KDE, target KDE, U(q), K(p)."""
    out = cfg.out_dir
    model = result.model
    files = []
    samples = model_sample(model, cfg.grid_sample_count,
                           derive_seed(cfg.seed, "model-kde"))
    write_grid_csv(os.path.join(out, "model_kde.csv"), kde_grid(samples))
    files.append("model_kde.csv")

    if result.dataset.sampler is not None:
        target = result.dataset.sampler(cfg.grid_sample_count,
                                        make_rng(cfg.seed, "target-kde"))
    else:
        target = result.dataset.train_q
    write_grid_csv(os.path.join(out, "target_kde.csv"), kde_grid(target))
    files.append("target_kde.csv")

    K, U = model.flow.hamiltonians[0]
    write_grid_csv(os.path.join(out, "u_grid.csv"),
                   field_grid(U, model.store, var="q"))
    write_grid_csv(os.path.join(out, "k_grid.csv"),
                   field_grid(K, model.store, var="p"))
    files.extend(["u_grid.csv", "k_grid.csv"])
    return files
