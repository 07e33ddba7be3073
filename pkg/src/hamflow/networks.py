"""Neural parameterizations: softplus MLPs for energies, relu Gaussian encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Expr, ParamStore

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes, hidden non-linearity and the parameter name prefix."""

    sizes: tuple[int, ...]
    nonlinearity: str = "softplus"
    prefix: str = "mlp"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ContractError("an MLP needs at least input and output sizes")
        if self.nonlinearity not in ("softplus", "relu"):
            raise ContractError(f"unsupported non-linearity '{self.nonlinearity}'")

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def layer_names(self, i: int) -> tuple[str, str]:
        return f"{self.prefix}.l{i}.W", f"{self.prefix}.l{i}.b"


def init_mlp_params(store: ParamStore, spec: MlpSpec, rng: np.random.Generator,
                    final_scale: float = 1.0) -> None:
    """He-style init for relu nets, Xavier-style for softplus nets.

    `final_scale` shrinks the last layer (energies start near-identity).
    """
    n_layers = len(spec.sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
        if spec.nonlinearity == "relu":
            std = math.sqrt(2.0 / fan_in)
        else:
            std = math.sqrt(2.0 / (fan_in + fan_out))
        w = rng.normal(size=(fan_out, fan_in)) * std
        if i == n_layers - 1:
            w = w * final_scale
        wn, bn = spec.layer_names(i)
        store.register(wn, w)
        store.register(bn, np.zeros(fan_out))


def init_zero_mlp_params(store: ParamStore, spec: MlpSpec) -> None:
    """All-zero weights and biases (exact identity flow / constant fields)."""
    for i in range(len(spec.sizes) - 1):
        wn, bn = spec.layer_names(i)
        store.register(wn, np.zeros((spec.sizes[i + 1], spec.sizes[i])))
        store.register(bn, np.zeros(spec.sizes[i + 1]))


def mlp_apply(spec: MlpSpec, x: Expr, store: ParamStore) -> Expr:
    """Expression graph of the network output; linear final layer.

    Returns a scalar expr when the last layer has size 1, a vector otherwise.
    """
    if x.shape != (spec.in_dim,):
        raise ContractError(
            f"mlp '{spec.prefix}' expects input of shape ({spec.in_dim},), got {x.shape}")
    act = ad.softplus if spec.nonlinearity == "softplus" else ad.relu
    h = x
    n_layers = len(spec.sizes) - 1
    for i in range(n_layers):
        wn, bn = spec.layer_names(i)
        h = ad.affine(h, store.ref(wn), store.ref(bn))
        if i < n_layers - 1:
            h = act(h)
    if spec.out_dim == 1:
        return ad.index(h, 0)
    return h


def softplus_inverse(y: float) -> float:
    """x with softplus(x) = y, y > 0."""
    if y <= 0:
        raise ContractError("softplus_inverse needs a positive value")
    return y + math.log(-math.expm1(-y))


@dataclass(frozen=True)
class GaussianEncoder:
    """Diagonal-Gaussian momentum encoder h(p|q) with disjoint mu/sigma nets.

    sigma(q) = softplus(raw(q)) + floor keeps the scale strictly positive.
    """

    mu: MlpSpec
    sigma: MlpSpec
    floor: float = 1e-3

    @property
    def d(self) -> int:
        return self.mu.out_dim

    def sigma_expr(self, q: Expr, store: ParamStore) -> Expr:
        raw = mlp_apply(self.sigma, q, store)
        return ad.softplus(raw) + ad.const(np.full(self.d, self.floor))

    def exprs(self, q: Expr, noise: Expr, store: ParamStore) -> tuple[Expr, Expr]:
        """(p, log h(p|q)) as graphs; pathwise-differentiable in the params.

        p = mu(q) + sigma(q) * noise with log-density
        sum_i [-log(2 pi)/2 - log sigma_i(q) - noise_i^2 / 2].
        """
        if noise.shape != (self.d,):
            raise ContractError(f"noise must have shape ({self.d},)")
        mu = mlp_apply(self.mu, q, store)
        sigma = self.sigma_expr(q, store)
        p = mu + sigma * noise
        logdens = (ad.const(-0.5 * self.d * LOG_2PI)
                   - ad.vsum(ad.log(sigma))
                   - 0.5 * ad.dot(noise, noise))
        return p, logdens


def encoder_specs(d: int, hidden: tuple[int, ...] = (128, 128),
                  prefix: str = "enc") -> GaussianEncoder:
    sizes = (d, *hidden, d)
    return GaussianEncoder(
        mu=MlpSpec(sizes, "relu", f"{prefix}.mu"),
        sigma=MlpSpec(sizes, "relu", f"{prefix}.sigma"),
    )


def init_encoder_params(store: ParamStore, enc: GaussianEncoder,
                        rng: np.random.Generator) -> None:
    init_mlp_params(store, enc.mu, rng)
    init_mlp_params(store, enc.sigma, rng)


def init_constant_encoder_params(store: ParamStore, enc: GaussianEncoder) -> None:
    """Register all-zero encoder parameters (constant mu/sigma after freeze)."""
    init_zero_mlp_params(store, enc.mu)
    init_zero_mlp_params(store, enc.sigma)


def set_encoder_constants(store: ParamStore, enc: GaussianEncoder, mu, sigma) -> None:
    """After freeze: set output biases so mu(q) = mu, sigma(q) = sigma exactly."""
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (enc.d,))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (enc.d,))
    last = len(enc.mu.sizes) - 2
    store.set(enc.mu.layer_names(last)[1], mu)
    raw = np.array([softplus_inverse(s - enc.floor) for s in sigma])
    store.set(enc.sigma.layer_names(last)[1], raw)


def encoder_sample(enc: GaussianEncoder, q, noise, store: ParamStore):
    """Numeric (p, logdensity) for one position (or a batch) and noise draw."""
    q = np.asarray(q, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != enc.d:
        raise ContractError(f"noise must have last dimension {enc.d}")
    ql = ad.vector_input("q", enc.d)
    nl = ad.vector_input("noise", enc.d)
    p, logdens = enc.exprs(ql, nl, store)
    pv = ad.evaluate(p, {"q": q, "noise": noise}, store)
    lv = ad.evaluate(logdens, {"q": q, "noise": noise}, store)
    return pv, lv


def diag_gaussian_log_prob(x, mean, sigma) -> np.ndarray:
    """Reference diagonal-Gaussian log-density (independent of the graphs)."""
    x = np.asarray(x, dtype=np.float64)
    z = (x - mean) / sigma
    log_sigma = np.broadcast_to(np.log(sigma), x.shape)
    return (-0.5 * x.shape[-1] * LOG_2PI
            - np.sum(log_sigma, axis=-1)
            - 0.5 * np.sum(z * z, axis=-1))
