"""Two-level factorized convolution kernels and their exact cost accounting.

A conv layer with C_out kernels of shape (C_in, k, k) is generated from a
small set of stored factors instead of a dense weight tensor:

* cross-kernel level: the C_out kernels are mixtures of n_cross "basis
  kernels", W_o = sum_b mixer[o, b] * K_b, with mixer of shape
  (C_out, n_cross);
* intra-kernel level: each basis kernel K_b, viewed as a (C_in, k*k)
  matrix, is itself factorized as coeff[b] @ basis[b] with coeff[b] of
  shape (C_in, n_basis) and basis[b] of shape (n_basis, k*k).

Either level is skipped when it cannot compress: the intra level when
k == 1 or n_basis >= min(C_in, k*k) (then the basis-kernel matrices are
stored densely), the cross level when n_cross >= min(C_out, C_in*k*k)
(then every output kernel is its own basis kernel and no mixer exists).
The effective cardinality of a skipped level is the number of rows stored
there: C_in for the intra level, C_out for the cross level.

Every stored factor is fake-quantized to its own bit-width during
generation, with a per-tensor scale; gradients flow through the quantizer
by the clipped straight-through rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CardinalityError, NonFiniteError, ShapeError
from .quantize import (
    DistinctValueBound,
    distinct_value_bound,
    fake_quantize,
    positive_levels,
    quantize_codes,
    ste_grad,
)


@dataclass(frozen=True)
class GenPlan:
    """Resolved structure of one generated layer.

    n_basis and n_cross are the effective cardinalities after the skip
    rules, i.e. the number of rows actually stored at each level.
    """

    c_out: int
    c_in: int
    k: int
    n_basis: int
    n_cross: int
    intra_active: bool
    cross_active: bool
    q_basis: int = 4
    q_coeff: int = 4
    q_mixer: int = 4

    @property
    def kk(self) -> int:
        return self.k * self.k


def plan_layer(
    c_out: int,
    c_in: int,
    k: int,
    n_basis: int,
    n_cross: int,
    q_basis: int = 4,
    q_coeff: int = 4,
    q_mixer: int = 4,
) -> GenPlan:
    """Apply the skip rules and fix the layer structure."""
    for name, v in (("c_out", c_out), ("c_in", c_in), ("k", k),
                    ("n_basis", n_basis), ("n_cross", n_cross)):
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise CardinalityError(f"{name} must be a positive int, got {v!r}")
    for bits in (q_basis, q_coeff, q_mixer):
        positive_levels(bits)  # validates the range
    kk = k * k
    intra_active = k > 1 and n_basis < min(c_in, kk)
    cross_active = n_cross < min(c_out, c_in * kk)
    return GenPlan(
        c_out=int(c_out),
        c_in=int(c_in),
        k=int(k),
        n_basis=int(n_basis) if intra_active else int(c_in),
        n_cross=int(n_cross) if cross_active else int(c_out),
        intra_active=intra_active,
        cross_active=cross_active,
        q_basis=int(q_basis),
        q_coeff=int(q_coeff),
        q_mixer=int(q_mixer),
    )


@dataclass
class TwoLevelFactors:
    """Stored factors of one generated layer.

    basis: (n_cross, n_basis, k*k) when the intra level is active, else None.
    coeff: (n_cross, c_in, n_basis) when intra is active, else the dense
           basis-kernel stack (n_cross, c_in, k*k).
    mixer: (c_out, n_cross) when the cross level is active, else None.
    """

    plan: GenPlan
    basis: np.ndarray | None
    coeff: np.ndarray
    mixer: np.ndarray | None

    def validate(self) -> None:
        p = self.plan
        if p.intra_active:
            want_b = (p.n_cross, p.n_basis, p.kk)
            want_c = (p.n_cross, p.c_in, p.n_basis)
            if self.basis is None or self.basis.shape != want_b:
                got = None if self.basis is None else self.basis.shape
                raise ShapeError(f"basis shape {got}, expected {want_b}")
        else:
            want_c = (p.n_cross, p.c_in, p.kk)
            if self.basis is not None:
                raise ShapeError("basis must be None when the intra level is skipped")
        if self.coeff.shape != want_c:
            raise ShapeError(f"coeff shape {self.coeff.shape}, expected {want_c}")
        if p.cross_active:
            want_m = (p.c_out, p.n_cross)
            if self.mixer is None or self.mixer.shape != want_m:
                got = None if self.mixer is None else self.mixer.shape
                raise ShapeError(f"mixer shape {got}, expected {want_m}")
        elif self.mixer is not None:
            raise ShapeError("mixer must be None when the cross level is skipped")
        for name, t in (("basis", self.basis), ("coeff", self.coeff),
                        ("mixer", self.mixer)):
            if t is not None and not np.isfinite(t).all():
                raise NonFiniteError(f"{name} contains non-finite entries")


def init_random(plan: GenPlan, rng: np.random.Generator) -> TwoLevelFactors:
    """He-style random factors: the generated kernels come out with variance
    close to 2 / (c_in * k * k) regardless of the cardinalities."""
    p = plan
    sigma_w = np.sqrt(2.0 / (p.c_in * p.kk))
    basis = None
    if p.intra_active:
        basis = rng.standard_normal((p.n_cross, p.n_basis, p.kk)) * sigma_w
        coeff = rng.standard_normal((p.n_cross, p.c_in, p.n_basis)) / np.sqrt(p.n_basis)
    else:
        coeff = rng.standard_normal((p.n_cross, p.c_in, p.kk)) * sigma_w
    mixer = None
    if p.cross_active:
        mixer = rng.standard_normal((p.c_out, p.n_cross)) / np.sqrt(p.n_cross)
    f = TwoLevelFactors(plan=p, basis=basis, coeff=coeff, mixer=mixer)
    f.validate()
    return f


@dataclass
class GenForward:
    """Intermediates of one generation pass, kept for the backward pass."""

    weight: np.ndarray          # (c_out, c_in, k, k)
    w_cross: np.ndarray         # (n_cross, c_in, k*k), post-quantization
    q_basis: np.ndarray | None
    q_coeff: np.ndarray
    q_mixer: np.ndarray | None
    scale_basis: float | None
    scale_coeff: float | None
    scale_mixer: float | None
    quantized: bool


def forward(factors: TwoLevelFactors, quantized: bool = True) -> GenForward:
    """Generate the dense kernel tensor from the factors."""
    factors.validate()
    p = factors.plan

    def _q(t, bits):
        if t is None:
            return None, None
        if not quantized:
            return t, None
        codes, scale = quantize_codes(t, bits)
        return fake_quantize(t, bits), scale

    qb, sb = _q(factors.basis, p.q_basis)
    qc, sc = _q(factors.coeff, p.q_coeff)
    qm, sm = _q(factors.mixer, p.q_mixer)

    if p.intra_active:
        w_cross = np.matmul(qc, qb)  # (n_cross, c_in, k*k)
    else:
        w_cross = qc
    if p.cross_active:
        flat = np.matmul(qm, w_cross.reshape(p.n_cross, -1))
    else:
        flat = w_cross.reshape(p.n_cross, -1)
    weight = flat.reshape(p.c_out, p.c_in, p.k, p.k)
    return GenForward(
        weight=weight,
        w_cross=w_cross,
        q_basis=qb,
        q_coeff=qc,
        q_mixer=qm,
        scale_basis=sb,
        scale_coeff=sc,
        scale_mixer=sm,
        quantized=quantized,
    )


def generate(factors: TwoLevelFactors, quantized: bool = True) -> np.ndarray:
    return forward(factors, quantized=quantized).weight


@dataclass
class FactorGrads:
    """Gradients aligned with TwoLevelFactors fields (None where inactive)."""

    basis: np.ndarray | None
    coeff: np.ndarray
    mixer: np.ndarray | None


def backward(
    factors: TwoLevelFactors, fwd: GenForward, d_weight: np.ndarray
) -> FactorGrads:
    """Backpropagate a loss gradient on the generated kernels to the factors.

    Plain chain rule through the two matrix products; the fake quantizers
    pass gradients straight through, clipped at their per-tensor scale.
    """
    p = factors.plan
    d_weight = np.asarray(d_weight, dtype=np.float64)
    if d_weight.shape != fwd.weight.shape:
        raise ShapeError(
            f"d_weight shape {d_weight.shape}, expected {fwd.weight.shape}"
        )
    g_flat = d_weight.reshape(p.c_out, -1)
    d_mixer = None
    if p.cross_active:
        wc_flat = fwd.w_cross.reshape(p.n_cross, -1)
        d_mixer = np.matmul(g_flat, wc_flat.T)
        d_wc = np.matmul(fwd.q_mixer.T, g_flat).reshape(p.n_cross, p.c_in, p.kk)
    else:
        d_wc = g_flat.reshape(p.n_cross, p.c_in, p.kk)
    d_basis = None
    if p.intra_active:
        d_coeff = np.matmul(d_wc, np.swapaxes(fwd.q_basis, 1, 2))
        d_basis = np.matmul(np.swapaxes(fwd.q_coeff, 1, 2), d_wc)
    else:
        d_coeff = d_wc
    if fwd.quantized:
        if d_basis is not None:
            d_basis = ste_grad(factors.basis, fwd.scale_basis, d_basis)
        d_coeff = ste_grad(factors.coeff, fwd.scale_coeff, d_coeff)
        if d_mixer is not None:
            d_mixer = ste_grad(factors.mixer, fwd.scale_mixer, d_mixer)
    return FactorGrads(basis=d_basis, coeff=d_coeff, mixer=d_mixer)


def dense_param_count(plan: GenPlan) -> int:
    return plan.c_out * plan.c_in * plan.kk


def param_count(plan: GenPlan) -> int:
    """Stored float parameters of the generated layer."""
    p = plan
    if p.intra_active:
        stored = p.n_cross * (p.n_basis * p.kk + p.c_in * p.n_basis)
    else:
        stored = p.n_cross * p.c_in * p.kk
    if p.cross_active:
        stored += p.c_out * p.n_cross
    return stored


def param_ratio(plan: GenPlan) -> float:
    """Stored parameters over dense parameters; 1.0 when nothing compresses."""
    return param_count(plan) / dense_param_count(plan)


def memory_bits(plan: GenPlan) -> int:
    """Total stored bits at the layer's mixed precisions."""
    p = plan
    if p.intra_active:
        bits = p.n_cross * p.n_basis * p.kk * p.q_basis
        bits += p.n_cross * p.c_in * p.n_basis * p.q_coeff
    else:
        bits = p.n_cross * p.c_in * p.kk * p.q_coeff
    if p.cross_active:
        bits += p.c_out * p.n_cross * p.q_mixer
    return bits


def memory_ratio(plan: GenPlan, dense_bits: int = 16) -> float:
    """Stored bits over a dense layer at dense_bits per weight."""
    if not isinstance(dense_bits, (int, np.integer)) or dense_bits < 1:
        raise CardinalityError(f"dense_bits must be a positive int, got {dense_bits!r}")
    if not plan.intra_active and not plan.cross_active:
        return 1.0
    return memory_bits(plan) / (dense_param_count(plan) * dense_bits)


def layer_value_bound(plan: GenPlan) -> DistinctValueBound:
    """Distinct-value bound for this layer's generated weights."""
    p = plan
    if p.cross_active:
        return distinct_value_bound(
            p.q_basis, p.q_coeff, p.n_basis, q_mixer=p.q_mixer, n_cross=p.n_cross
        )
    return distinct_value_bound(p.q_basis, p.q_coeff, p.n_basis)
