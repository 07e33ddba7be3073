"""Shared test utilities: random graphs, finite differences, tiny models."""

from __future__ import annotations

import numpy as np

from hamflow import autodiff as ad
from hamflow import densities as dens
from hamflow import dynamics as dyn
from hamflow import networks as nets


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / scale))


def fd_input_grad(expr, leaf, env, store=None, h=1e-5) -> np.ndarray:
    """Central finite differences of a scalar expr w.r.t. one vector input."""
    x = np.asarray(env[leaf.meta], dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        up, dn = dict(env), dict(env)
        xu, xd = x.copy(), x.copy()
        xu.flat[i] += h
        xd.flat[i] -= h
        up[leaf.meta] = xu
        dn[leaf.meta] = xd
        out.flat[i] = (ad.evaluate(expr, up, store) - ad.evaluate(expr, dn, store)) / (2 * h)
    return out


def fd_param_grad(expr, env, store, indices, h=1e-6) -> np.ndarray:
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        s = store.flat[i]
        store.flat[i] = s + h
        up = ad.evaluate(expr, env, store)
        store.flat[i] = s - h
        dn = ad.evaluate(expr, env, store)
        store.flat[i] = s
        out[k] = (np.sum(up) - np.sum(dn)) / (2 * h)
    return out


class RandomGraph:
    """Value-safe random scalar graph over a vector input, a scalar input and
    parameters; used for the randomized derivative checks."""

    def __init__(self, rng: np.random.Generator, depth: int = 6, d: int = 3):
        self.rng = rng
        self.d = d
        self.x = ad.vector_input("x", d)
        self.t = ad.scalar_input("t")
        self.store = ad.ParamStore()
        self.store.register("w", rng.normal(size=d) * 0.7)
        self.store.register("a", rng.normal(size=(d, d)) * 0.5)
        self.store.register("c", rng.normal(size=()) * 0.5)
        self.store.freeze()
        self.expr = self._grow(depth)
        self.env = {"x": rng.uniform(-1.5, 1.5, size=d), "t": rng.uniform(-1.5, 1.5)}

    def _grow(self, depth: int) -> ad.Expr:
        rng = self.rng
        w = ad.param("w", (self.d,))
        c = ad.param("c", ())
        vecs = [self.x, w, ad.softplus(ad.affine(self.x, self.store.ref("a")))]
        scalars = [self.t, c, ad.dot(self.x, w), ad.vsum(vecs[2]),
                   ad.index(self.x, int(rng.integers(self.d)))]
        for _ in range(depth):
            op = rng.integers(8)
            a = scalars[int(rng.integers(len(scalars)))]
            b = scalars[int(rng.integers(len(scalars)))]
            if op == 0:
                new = a + b
            elif op == 1:
                new = a - b
            elif op == 2:
                new = a * b
            elif op == 3:
                new = a / (ad.square(b) + 0.5)
            elif op == 4:
                new = ad.tanh(a)
            elif op == 5:
                new = ad.sigmoid(a) * ad.softplus(b)
            elif op == 6:
                new = ad.log(ad.square(a) + 0.3)
            else:
                new = ad.sqrt(ad.square(a) + 0.2)
            scalars.append(new)
        out = scalars[-1] + 0.1 * scalars[-2]
        return out


def small_mlp_field(store, prefix, var, rng, widths=(8, 8), d=2, scale=1.0):
    spec = nets.MlpSpec((d, *widths, 1), "softplus", prefix)
    nets.init_mlp_params(store, spec, rng, final_scale=scale)
    return spec


def random_flow_model(seed=1, widths=(8, 8), d=2, dt=0.5, steps=2,
                      base="spherical-normal"):
    """Non-trivial random flow + encoder, for round-trip/quadrature tests."""
    store = ad.ParamStore()
    rng = np.random.default_rng(seed)
    kspec = small_mlp_field(store, "K0", "p", rng, widths, d)
    uspec = small_mlp_field(store, "U0", "q", rng, widths, d)
    enc = nets.encoder_specs(d, widths)
    nets.init_encoder_params(store, enc, rng)
    store.freeze()
    flow = dyn.FlowSpec(
        [(dyn.field_from_mlp(kspec, store, "p"), dyn.field_from_mlp(uspec, store, "q"))],
        dt=dt, leapfrog_steps=steps)
    if base == "spherical-normal":
        pi = dens.spherical_normal(d)
    else:
        pi = dens.soft_uniform(d, 4.0, 5.0)
    return dens.ModelDensity(flow, pi, enc, store)


def identity_flow_model(seed=5, d=2, enc_sigma=1.0, enc_mu=0.0, widths=(8, 8),
                        base="spherical-normal"):
    """Exactly-identity flow (zero energy weights) with a constant encoder."""
    store = ad.ParamStore()
    kspec = nets.MlpSpec((d, *widths, 1), "softplus", "K0")
    uspec = nets.MlpSpec((d, *widths, 1), "softplus", "U0")
    nets.init_zero_mlp_params(store, kspec)
    nets.init_zero_mlp_params(store, uspec)
    enc = nets.encoder_specs(d, widths)
    nets.init_constant_encoder_params(store, enc)
    store.freeze()
    nets.set_encoder_constants(store, enc, enc_mu, enc_sigma)
    flow = dyn.FlowSpec(
        [(dyn.field_from_mlp(kspec, store, "p"), dyn.field_from_mlp(uspec, store, "q"))],
        dt=0.5, leapfrog_steps=2)
    pi = dens.spherical_normal(d) if base == "spherical-normal" else dens.soft_uniform(d)
    return dens.ModelDensity(flow, pi, enc, store)
