"""Symmetry generators, commutator penalties, and invariance diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Expr, ParamStore
from .dynamics import (
    FlowSpec,
    ScalarField,
    StateVector,
    infinitesimal_transform,
    poisson_bracket_expr,
    trajectory,
)


def so2_generator() -> ScalarField:
    """Angular momentum g = q1 p2 - q2 p1, the single SO(2) generator (d=2)."""
    def build(q, p):
        return ad.index(q, 0) * ad.index(p, 1) - ad.index(q, 1) * ad.index(p, 0)

    return ScalarField(2, build, name="so2")


def angular_momentum_generator(d: int, i: int, j: int) -> ScalarField:
    """Rotation generator in the (i, j) plane: g = q_i p_j - q_j p_i."""
    if not (0 <= i < d and 0 <= j < d and i != j):
        raise ContractError(f"bad plane ({i}, {j}) for d={d}")

    def build(q, p):
        return ad.index(q, i) * ad.index(p, j) - ad.index(q, j) * ad.index(p, i)

    return ScalarField(d, build, name=f"rot({i},{j})")


def quadratic_form_generator(a: np.ndarray, name: str = "q^T A p") -> ScalarField:
    """General bilinear generator g = q^T A p (satisfies d2g/dp dp = 0)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError("A must be a square matrix")
    d = a.shape[0]

    def build(q, p):
        return ad.dot(q, ad.affine(p, a))

    return ScalarField(d, build, name=name)


@dataclass
class Generator:
    """A known symmetry generator with its constraint precision and multiplier."""

    field: ScalarField
    kappa: float = 0.0
    lam: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.kappa < 0:
            raise ContractError("kappa must be non-negative")
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if not self.name:
            self.name = self.field.name


@dataclass
class GeneratorSet:
    generators: list[Generator] = dc_field(default_factory=list)

    def __iter__(self):
        return iter(self.generators)

    def __len__(self):
        return len(self.generators)

    @property
    def kappas(self) -> np.ndarray:
        return np.array([g.kappa for g in self.generators])

    @property
    def lams(self) -> np.ndarray:
        return np.array([g.lam for g in self.generators])

    def names(self) -> list[str]:
        return [g.name for g in self.generators]


def momentum_hessian_residual(g: ScalarField, states: StateVector,
                              store: ParamStore | None = None) -> float:
    """Max |d^2 g / dp_i dp_j| over states: zero for admissible generators.

    The built-in bilinear generators satisfy this identically; the check runs
    the nested symbolic derivative to confirm the graphs agree.
    """
    q = ad.vector_input("q", g.d)
    p = ad.vector_input("p", g.d)
    gp = ad.substitute(g._grad_p, {g._q: q, g._p: p})
    worst = 0.0
    for i in range(g.d):
        comp = ad.index(gp, i)
        hess_row = ad.grad_inputs(comp, p)
        vals = ad.evaluate(hess_row, {"q": states.q, "p": states.p}, store)
        worst = max(worst, float(np.max(np.abs(vals))))
    return worst


def bracket_with_hamiltonian_exprs(gens: GeneratorSet, H: ScalarField,
                                   q: Expr, p: Expr) -> list[Expr]:
    """Per-generator {g_k, H} graphs at the attachment point (q, p)."""
    return [poisson_bracket_expr(gen.field, H, q, p) for gen in gens]


def commutator_penalty(gens: GeneratorSet, H: ScalarField, samples: StateVector,
                       store: ParamStore | None = None) -> np.ndarray:
    """C_k = mean_samples {g_k, H}(s)^2 - kappa_k over a base-density batch."""
    if samples.q.ndim != 2 or samples.q.shape[0] == 0:
        raise ContractError("commutator_penalty needs a non-empty sample batch")
    q = ad.vector_input("q", H.d)
    p = ad.vector_input("p", H.d)
    out = []
    for gen, br in zip(gens, bracket_with_hamiltonian_exprs(gens, H, q, p)):
        vals = ad.evaluate(ad.square(br), {"q": samples.q, "p": samples.p}, store)
        out.append(float(np.mean(vals)) - gen.kappa)
    return np.array(out)


def noether_drift(g: ScalarField, flow: FlowSpec, s0: StateVector, steps: int,
                  store: ParamStore | None = None) -> float:
    """max_t |g(s_t) - g(s_0)| along the leapfrog trajectory."""
    if steps == 0:
        return 0.0
    states = trajectory(flow, s0, steps, store)
    vals = [g.value(s, store) for s in states]
    return float(np.max(np.abs(np.asarray(vals) - vals[0])))


def base_invariance_check(pi, g: ScalarField, s: StateVector, eps: float,
                          store: ParamStore | None = None) -> float:
    """|ln pi(T_g^eps(s)) - ln pi(s)|; O(eps^2) when pi is g-invariant."""
    moved = infinitesimal_transform(g, eps, s, store)
    return float(np.abs(pi.log_prob(moved) - pi.log_prob(s)))


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass
class ProbeResult:
    """Joint-density and potential-energy invariance residuals at one angle."""

    angle: float
    joint_residual: float
    potential_residual: float


def density_invariance_probe(model, angle: float, qs: np.ndarray,
                             seed: int = 0) -> ProbeResult:
    """Mean |log-joint(R s) - log-joint(s)| for encoder-drawn momenta.

    The full state is rotated (where invariance is guaranteed for an
    equivariant flow over an invariant base); |U(R q) - U(q)| is reported as
    the marginal proxy.
    """
    from .densities import model_joint_log_prob  # local import to avoid a cycle

    d = model.flow.d
    if d != 2:
        raise ContractError("the built-in SO(2) probe supports d=2 only")
    qs = np.asarray(qs, dtype=np.float64)
    rng = np.random.Generator(np.random.Philox(key=seed))
    noise = rng.standard_normal(qs.shape)
    p, _ = model.encoder_sample(qs, noise)
    rot = rotation_matrix(angle)
    s = StateVector(qs, p)
    s_rot = StateVector(qs @ rot.T, p @ rot.T)
    lp = model_joint_log_prob(model, s)
    lp_rot = model_joint_log_prob(model, s_rot)
    joint = float(np.mean(np.abs(lp_rot - lp)))

    _, U = model.flow.hamiltonians[0]
    u_vals = ad.evaluate(U.expr, {"q": qs, "p": p}, model.store)
    u_rot = ad.evaluate(U.expr, {"q": qs @ rot.T, "p": p}, model.store)
    potential = float(np.mean(np.abs(np.asarray(u_rot) - np.asarray(u_vals))))
    return ProbeResult(angle, joint, potential)


def symmetry_report(gens: GeneratorSet, slack_history: Sequence[np.ndarray],
                    lam_history: Sequence[np.ndarray],
                    drift_stats: dict | None = None) -> dict:
    """JSON-ready diagnostic payload for constrained runs."""
    hist = np.asarray(slack_history, dtype=np.float64).reshape(-1, len(gens))
    lams = np.asarray(lam_history, dtype=np.float64).reshape(-1, len(gens))
    return {
        "generators": gens.names(),
        "kappa": gens.kappas.tolist(),
        "slack_history": hist.tolist(),
        "lambda_history": lams.tolist(),
        "drift_stats": drift_stats or {},
    }
