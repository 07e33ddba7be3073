"""Phase-space mechanics: Poisson bracket, leapfrog steps, invertible flows.

All maps are built as expression graphs, so the training loss can
differentiate through the flow (including through the input-gradients of
the energy networks that appear inside each leapfrog sub-step).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Expr, ParamStore, Program
from .networks import MlpSpec, mlp_apply


@dataclass
class StateVector:
    """A point s = (q, p) in 2d-dimensional phase space (optionally batched)."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.q.shape != self.p.shape:
            raise ContractError(f"q and p must match, got {self.q.shape} vs {self.p.shape}")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.p))):
            raise ContractError("state entries must be finite")

    @property
    def d(self) -> int:
        return self.q.shape[-1]

    @property
    def batched(self) -> bool:
        return self.q.ndim == 2

    def flat(self) -> np.ndarray:
        return np.concatenate([self.q, self.p], axis=-1)

    @classmethod
    def from_flat(cls, s: np.ndarray) -> "StateVector":
        s = np.asarray(s, dtype=np.float64)
        d = s.shape[-1] // 2
        return cls(s[..., :d], s[..., d:])


class ScalarField:
    """Differentiable scalar function of phase space.

    Wraps a graph builder; exposes the value, input-gradient graphs (reusable
    templates, substituted at arbitrary attachment points) and numeric
    evaluation. `depends` records which coordinate blocks the expression
    actually touches, which the leapfrog uses to enforce separability.
    """

    def __init__(self, d: int, build: Callable[[Expr, Expr], Expr], name: str = "field"):
        self.d = int(d)
        self.name = name
        self._q = ad.vector_input("q", d)
        self._p = ad.vector_input("p", d)
        self.expr = build(self._q, self._p)
        if self.expr.shape != ():
            raise ContractError(f"field '{name}' must be scalar-valued")
        leaf_ids = {id(n) for n in ad.topo_order([self.expr]) if n.op == "input"}
        self.depends = frozenset(
            block for block, leaf in (("q", self._q), ("p", self._p))
            if id(leaf) in leaf_ids)
        self._grad_q = ad.grad_inputs(self.expr, self._q)
        self._grad_p = ad.grad_inputs(self.expr, self._p)

    def __repr__(self):
        return f"ScalarField({self.name}, d={self.d}, depends={sorted(self.depends)})"

    def apply(self, q: Expr, p: Expr) -> Expr:
        return ad.substitute(self.expr, {self._q: q, self._p: p})

    def grad_q(self, q: Expr, p: Expr) -> Expr:
        return ad.substitute(self._grad_q, {self._q: q, self._p: p})

    def grad_p(self, q: Expr, p: Expr) -> Expr:
        return ad.substitute(self._grad_p, {self._q: q, self._p: p})

    def value(self, s: StateVector, store: ParamStore | None = None):
        return ad.evaluate(self.expr, {"q": s.q, "p": s.p}, store)

    def grad(self, s: StateVector, store: ParamStore | None = None):
        gq = ad.evaluate(self._grad_q, {"q": s.q, "p": s.p}, store)
        gp = ad.evaluate(self._grad_p, {"q": s.q, "p": s.p}, store)
        return np.asarray(gq, dtype=np.float64), np.asarray(gp, dtype=np.float64)


def field_from_mlp(spec: MlpSpec, store: ParamStore, var: str, name: str | None = None) -> ScalarField:
    """Scalar field backed by an MLP of q or p only.

    Energies and generators need second derivatives, so relu nets are
    rejected here (the encoder keeps relu).
    """
    if spec.nonlinearity != "softplus":
        raise ContractError("energy/generator networks must use softplus")
    if spec.out_dim != 1:
        raise ContractError("scalar fields need a single output")
    if var not in ("q", "p"):
        raise ContractError("var must be 'q' or 'p'")
    d = spec.in_dim

    def build(q, p):
        return mlp_apply(spec, q if var == "q" else p, store)

    return ScalarField(d, build, name=name or spec.prefix)


def constant_field(d: int, value: float = 0.0, name: str = "const") -> ScalarField:
    return ScalarField(d, lambda q, p: ad.const(float(value)), name=name)


def quadratic_kinetic(d: int) -> ScalarField:
    """K(p) = |p|^2 / 2."""
    return ScalarField(d, lambda q, p: 0.5 * ad.dot(p, p), name="K=|p|^2/2")


def harmonic_potential(d: int) -> ScalarField:
    """U(q) = |q|^2 / 2."""
    return ScalarField(d, lambda q, p: 0.5 * ad.dot(q, q), name="U=|q|^2/2")


def central_potential(d: int, u_of_r2: Callable[[Expr], Expr], name: str = "U(r^2)") -> ScalarField:
    """Rotation-invariant potential: a function of |q|^2 only."""
    return ScalarField(d, lambda q, p: u_of_r2(ad.dot(q, q)), name=name)


def radial_feature_field(d: int, spec: MlpSpec, store: ParamStore, var: str,
                         name: str | None = None) -> ScalarField:
    """Field taking |q|^2 (or |p|^2) as its only feature: invariant by construction."""
    if spec.in_dim != 1:
        raise ContractError("radial feature field expects a 1-input MLP")

    def build(q, p):
        r2 = ad.dot(q, q) if var == "q" else ad.dot(p, p)
        return mlp_apply(spec, ad.stack([r2]), store)

    return ScalarField(d, build, name=name or f"radial-{spec.prefix}")


# ---------------------------------------------------------------------------
# Poisson bracket and the induced infinitesimal transformation


def poisson_bracket_expr(f: ScalarField, g: ScalarField, q: Expr, p: Expr) -> Expr:
    """{f, g} = sum_i df/dq_i dg/dp_i - df/dp_i dg/dq_i, as a graph.

    Built from gradient graphs, so a squared bracket remains differentiable
    w.r.t. network parameters (the constraint of Lagrangian training).
    """
    if f.d != g.d:
        raise ContractError(f"bracket needs equal dimensions, got {f.d} vs {g.d}")
    return ad.dot(f.grad_q(q, p), g.grad_p(q, p)) - ad.dot(f.grad_p(q, p), g.grad_q(q, p))


def poisson_bracket(f: ScalarField, g: ScalarField, s: StateVector,
                    store: ParamStore | None = None):
    if s.d != f.d:
        raise ContractError(f"state dimension {s.d} does not match fields ({f.d})")
    q = ad.vector_input("q", f.d)
    p = ad.vector_input("p", f.d)
    return ad.evaluate(poisson_bracket_expr(f, g, q, p), {"q": s.q, "p": s.p}, store)


def infinitesimal_transform(f: ScalarField, eps: float, s: StateVector,
                            store: ParamStore | None = None) -> StateVector:
    """First-order Euler action s + eps*({q,f}, {p,f}) = s + eps*(df/dp, -df/dq).

    Diagnostic map only; the trained flow uses exact leapfrog steps.
    """
    gq, gp = f.grad(s, store)
    return StateVector(s.q + eps * gp, s.p - eps * gq)


# ---------------------------------------------------------------------------
# leapfrog and flows


def leapfrog_exprs(K: ScalarField, U: ScalarField, dt: float, q: Expr, p: Expr,
                   inverse: bool = False) -> tuple[Expr, Expr]:
    """One generalized leapfrog step (three shears, unit Jacobian each).

    forward:  p1 = p - dt/2 dU(q); q' = q + dt dK(p1); p' = p1 - dt/2 dU(q')
    inverse is the exact algebraic inverse of the same three sub-steps.
    """
    if "q" in K.depends:
        raise ContractError(f"kinetic field '{K.name}' must depend on p only")
    if "p" in U.depends:
        raise ContractError(f"potential field '{U.name}' must depend on q only")
    half = 0.5 * dt
    if not inverse:
        p1 = p - ad.mul(ad.const(half), U.grad_q(q, p))
        q2 = q + ad.mul(ad.const(dt), K.grad_p(q, p1))
        p2 = p1 - ad.mul(ad.const(half), U.grad_q(q2, p1))
        return q2, p2
    p1 = p + ad.mul(ad.const(half), U.grad_q(q, p))
    q2 = q - ad.mul(ad.const(dt), K.grad_p(q, p1))
    p2 = p1 + ad.mul(ad.const(half), U.grad_q(q2, p1))
    return q2, p2


@dataclass
class FlowSpec:
    """Ordered chain of separable Hamiltonians integrated by leapfrog.

    The forward map applies `leapfrog_steps` steps of each (K, U) pair in
    order; the inverse reverses both the order and each step exactly.
    """

    hamiltonians: list[tuple[ScalarField, ScalarField]]
    dt: float
    leapfrog_steps: int = 2
    _programs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.hamiltonians:
            raise ContractError("a flow needs at least one Hamiltonian")
        if not self.dt > 0:
            raise ContractError("dt must be positive")
        if self.leapfrog_steps < 1:
            raise ContractError("leapfrog_steps must be a positive integer")
        d = self.hamiltonians[0][0].d
        for K, U in self.hamiltonians:
            if K.d != d or U.d != d:
                raise ContractError("all Hamiltonians must share the dimension")
            if "q" in K.depends:
                raise ContractError(f"kinetic field '{K.name}' must depend on p only")
            if "p" in U.depends:
                raise ContractError(f"potential field '{U.name}' must depend on q only")

    @property
    def d(self) -> int:
        return self.hamiltonians[0][0].d

    def forward_exprs(self, q: Expr, p: Expr) -> tuple[Expr, Expr]:
        for K, U in self.hamiltonians:
            for _ in range(self.leapfrog_steps):
                q, p = leapfrog_exprs(K, U, self.dt, q, p)
        return q, p

    def inverse_exprs(self, q: Expr, p: Expr) -> tuple[Expr, Expr]:
        for K, U in reversed(self.hamiltonians):
            for _ in range(self.leapfrog_steps):
                q, p = leapfrog_exprs(K, U, self.dt, q, p, inverse=True)
        return q, p

    def _program(self, kind: str, store: ParamStore | None) -> Program:
        key = (kind, id(store))
        prog = self._programs.get(key)
        if prog is None:
            q = ad.vector_input("q", self.d)
            p = ad.vector_input("p", self.d)
            if kind == "fwd":
                roots = self.forward_exprs(q, p)
            elif kind == "inv":
                roots = self.inverse_exprs(q, p)
            else:  # single leapfrog step of hamiltonian #k
                _, k = kind
                K, U = self.hamiltonians[k]
                roots = leapfrog_exprs(K, U, self.dt, q, p)
                key = (kind, id(store))
            prog = Program(list(roots), [q, p], store)
            self._programs[key] = prog
        return prog

    def step_sequence(self, n_steps: int) -> list[int]:
        """Hamiltonian index applied at each of n_steps single leapfrog steps."""
        unit = []
        for k in range(len(self.hamiltonians)):
            unit.extend([k] * self.leapfrog_steps)
        reps = -(-n_steps // len(unit))
        return (unit * reps)[:n_steps]


def _locate_failing_step(flow: FlowSpec, s: StateVector, store, inverse: bool):
    """Re-run step by step to name the leapfrog step that went non-finite."""
    from .autodiff import NumericError

    seq = flow.step_sequence(len(flow.hamiltonians) * flow.leapfrog_steps)
    if inverse:
        seq = list(reversed(seq))
    qv, pv = s.q, s.p
    for idx, k in enumerate(seq):
        K, U = flow.hamiltonians[k]
        ql = ad.vector_input("q", flow.d)
        pl = ad.vector_input("p", flow.d)
        qe, pe = leapfrog_exprs(K, U, flow.dt, ql, pl, inverse=inverse)
        try:
            env = {"q": qv, "p": pv}
            qv = np.asarray(ad.evaluate(qe, env, store))
            pv = np.asarray(ad.evaluate(pe, env, store))
        except NumericError as err:
            raise NumericError(
                f"numeric failure in leapfrog step {idx} "
                f"(hamiltonian {k}): {err}") from err
    raise NumericError("numeric failure in flow (step not identified)")  # pragma: no cover


def flow_forward(flow: FlowSpec, s: StateVector, store: ParamStore | None = None) -> StateVector:
    from .autodiff import NumericError

    try:
        q, p = flow._program("fwd", store)(s.q, s.p)
    except NumericError:
        _locate_failing_step(flow, s, store, inverse=False)
    return StateVector(q, p)


def flow_inverse(flow: FlowSpec, s: StateVector, store: ParamStore | None = None) -> StateVector:
    from .autodiff import NumericError

    try:
        q, p = flow._program("inv", store)(s.q, s.p)
    except NumericError:
        _locate_failing_step(flow, s, store, inverse=True)
    return StateVector(q, p)


def leapfrog_step(K: ScalarField, U: ScalarField, dt: float, s: StateVector,
                  store: ParamStore | None = None,
                  direction: str = "forward") -> StateVector:
    """Numeric single step; `direction` is 'forward' or 'inverse'."""
    if direction not in ("forward", "inverse"):
        raise ContractError(f"unknown direction '{direction}'")
    q = ad.vector_input("q", K.d)
    p = ad.vector_input("p", K.d)
    qe, pe = leapfrog_exprs(K, U, dt, q, p, inverse=direction == "inverse")
    env = {"q": s.q, "p": s.p}
    return StateVector(ad.evaluate(qe, env, store), ad.evaluate(pe, env, store))


def trajectory(flow: FlowSpec, s0: StateVector, n_steps: int,
               store: ParamStore | None = None) -> list[StateVector]:
    """States after each single leapfrog step (s0 first; len n_steps+1).

    Multi-Hamiltonian flows cycle through their chain in order.
    """
    states = [s0]
    s = s0
    for k in flow.step_sequence(n_steps):
        prog = flow._program(("step", k), store)
        q, p = prog(s.q, s.p)
        s = StateVector(q, p)
        states.append(s)
    return states


def jacobian_determinant_check(flow: FlowSpec, s: StateVector,
                               store: ParamStore | None = None,
                               fd_step: float = 1e-5) -> float:
    """Finite-difference Jacobian determinant of the forward map at s.

    Exactly 1 for leapfrog up to FD error; the operational form of the
    volume-preservation property.
    """
    if s.batched:
        raise ContractError("jacobian check expects a single state")
    d = s.d
    n = 2 * d
    base = s.flat()
    pert = np.repeat(base[None, :], 2 * n, axis=0)
    for i in range(n):
        pert[2 * i, i] += fd_step
        pert[2 * i + 1, i] -= fd_step
    sv = StateVector.from_flat(pert)
    out = flow_forward(flow, sv, store).flat()
    jac = np.empty((n, n))
    for i in range(n):
        jac[:, i] = (out[2 * i] - out[2 * i + 1]) / (2.0 * fd_step)
    return float(np.linalg.det(jac))


def hamiltonian_field(K: ScalarField, U: ScalarField, name: str = "H") -> ScalarField:
    """H(q, p) = K(p) + U(q) as a single field."""
    if K.d != U.d:
        raise ContractError("K and U dimensions differ")
    return ScalarField(K.d, lambda q, p: K.apply(q, p) + U.apply(q, p), name=name)


def write_trajectory_csv(path, flow: FlowSpec, starts: Sequence[StateVector],
                         n_steps: int, store: ParamStore | None = None,
                         generators: Sequence = ()) -> None:
    """Diagnostic export: traj,step,q1..qd,p1..pd,H,g1..gK rows."""
    d = flow.d
    header = (["traj", "step"] + [f"q{i+1}" for i in range(d)]
              + [f"p{i+1}" for i in range(d)] + ["H"]
              + [f"g{k+1}" for k in range(len(generators))])
    K0, U0 = flow.hamiltonians[0]
    H = hamiltonian_field(K0, U0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t_idx, s0 in enumerate(starts):
            for step_idx, s in enumerate(trajectory(flow, s0, n_steps, store)):
                row = [t_idx, step_idx, *s.q.tolist(), *s.p.tolist(),
                       H.value(s, store)]
                for gen in generators:
                    gfield = gen.field if hasattr(gen, "field") else gen
                    row.append(gfield.value(s, store))
                writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])
