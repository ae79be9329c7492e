"""Structured state space layers: HiPPO-LegS init, discretisation, kernels, scans.

Three structures are supported:

* ``S4``  - SISO per channel, diagonal-plus-low-rank ``A = diag(lam) - p p^H``
* ``S4D`` - SISO per channel, diagonal ``A = diag(lam)``
* ``S5``  - one MIMO system with diagonal ``A`` shared by all channels

``N`` counts the stored complex modes. Initialised systems keep one member of
each conjugate pair and read out ``2 * Re(C x)``, so the real system they stand
for has dimension ``2N``. Hand-built :class:`DiscreteSsm` instances can turn the
doubling off with ``conj_sym=False``.

All complex parameters are stored as pairs of real tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("S4", "S4D", "S5")
BILINEAR_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# initialisation


def hippo_legs(N: int) -> tuple[np.ndarray, np.ndarray]:
    """HiPPO-LegS transition matrix and its rank-one correction vector.

    A[n, k] = -sqrt(2n+1) sqrt(2k+1) below the diagonal, -(n+1) on it, 0 above;
    P[n] = sqrt(n + 1/2). ``A + P P^T + I/2`` is skew-symmetric.
    """
    if N < 1:
        raise ValueError(f"state size must be >= 1, got {N}")
    n = np.arange(N)
    q = np.sqrt(2 * n + 1.0)
    A = np.where(n[:, None] > n[None, :], -np.outer(q, q), 0.0) - np.diag(n + 1.0)
    P = np.sqrt(n + 0.5)
    return A, P


def legs_normal(N: int) -> np.ndarray:
    """Skew-symmetric part ``A + P P^T + I/2`` of LegS, from its closed form.

    Built by mirroring the strict lower triangle, so it is skew-symmetric to
    the bit.
    """
    if N < 1:
        raise ValueError(f"state size must be >= 1, got {N}")
    n = np.arange(N)
    q = np.sqrt(2 * n + 1.0)
    lower = np.tril(-0.5 * np.outer(q, q), k=-1)
    return lower - lower.T


def legs_dplr(n_modes: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and rank-one factor of LegS of size ``2 * n_modes``.

    Returns ``lam`` (the ``n_modes`` eigenvalues of the normal part with positive
    imaginary part, ascending) and ``p = V^H P`` restricted to those modes.
    """
    S = legs_normal(2 * n_modes)
    _, P = hippo_legs(2 * n_modes)
    w, V = np.linalg.eigh(-1j * S)  # S = V diag(i w) V^H
    keep = np.argsort(w)[n_modes:]
    lam = -0.5 + 1j * w[keep]
    p = V[:, keep].conj().T @ P
    return lam, p


def s4d_lin(n_modes: int) -> np.ndarray:
    n = np.arange(n_modes)
    return -0.5 + 1j * np.pi * n


def _crandn(rng: np.random.Generator, shape, scale: float = 1.0) -> np.ndarray:
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


@dataclass
class ContinuousSsm:
    variant: str
    N: int
    H: int
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def lam(self) -> Tensor:
        re = -T.exp(self.params["log_neg_lambda_re"])
        return T.complex_(re, self.params["lambda_im"])

    def _c(self, name: str) -> Tensor:
        return T.complex_(self.params[name + "_re"], self.params[name + "_im"])

    @property
    def B(self) -> Tensor:
        return self._c("B")

    @property
    def C(self) -> Tensor:
        return self._c("C")

    @property
    def P(self) -> Tensor:
        if self.variant != "S4":
            raise AttributeError(f"{self.variant} has no low-rank term")
        return self._c("P")

    @property
    def D(self) -> Tensor:
        return self.params["D"]

    @property
    def log_dt(self) -> Tensor:
        return self.params["log_dt"]

    def dense_A(self) -> np.ndarray:
        """Continuous state matrix per channel, (H, N, N) or (N, N) for S5."""
        lam = self.lam.data
        A = lam[..., :, None] * np.eye(self.N)
        if self.variant == "S4":
            p = self.P.data
            A = A - p[..., :, None] * p.conj()[..., None, :]
        return A


def init_ssm(
    variant: str,
    N: int,
    H: int,
    seed: int | np.random.Generator,
    dt_min: float = 1e-3,
    dt_max: float = 1e-1,
) -> ContinuousSsm:
    if variant not in VARIANTS:
        raise ValueError(f"unknown SSM variant {variant!r}; expected one of {VARIANTS}")
    if N < 1 or H < 1:
        raise ValueError(f"N and H must be >= 1, got N={N}, H={H}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    if variant == "S4":
        lam, p = legs_dplr(N)
    else:
        lam = s4d_lin(N)
    params: dict[str, np.ndarray] = {}
    if variant == "S5":
        params["log_neg_lambda_re"] = np.log(-lam.real)
        params["lambda_im"] = lam.imag.copy()
        B = _crandn(rng, (N, H), 1.0 / np.sqrt(H))
        C = _crandn(rng, (H, N), 1.0 / np.sqrt(N))
        n_dt = 1
    else:
        params["log_neg_lambda_re"] = np.tile(np.log(-lam.real), (H, 1))
        params["lambda_im"] = np.tile(lam.imag, (H, 1))
        if variant == "S4":
            params["P_re"] = np.tile(p.real, (H, 1))
            params["P_im"] = np.tile(p.imag, (H, 1))
        B = _crandn(rng, (H, N))
        C = _crandn(rng, (H, N))
        n_dt = H
    params["B_re"], params["B_im"] = B.real, B.imag
    params["C_re"], params["C_im"] = C.real, C.imag
    params["D"] = np.ones(H)
    params["log_dt"] = rng.uniform(np.log(dt_min), np.log(dt_max), n_dt)
    return ContinuousSsm(variant, N, H, {k: Tensor(v, requires_grad=True) for k, v in params.items()})


# ---------------------------------------------------------------------------
# discretisation


@dataclass
class DiscreteSsm:
    """Discrete system ``x_t = Abar x_{t-1} + Bbar u_t``, ``y_t = Re(C x_t) + D u_t``.

    Shapes: S4D ``Abar``/``Bbar``/``C`` are (H, N); S4 ``Abar`` is (H, N, N);
    S5 ``Abar`` is (N,), ``Bbar`` (N, H), ``C`` (H, N). With ``conj_sym`` the
    readout is doubled (``2 Re``) to account for the dropped conjugate modes.
    """

    variant: str
    Abar: Tensor
    Bbar: Tensor
    C: Tensor
    D: Tensor
    dt: Tensor | None = None
    conj_sym: bool = True

    def __post_init__(self):
        for name in ("Abar", "Bbar", "C", "D"):
            setattr(self, name, T.as_tensor(getattr(self, name)))

    @property
    def H(self) -> int:
        return self.D.shape[0]

    @property
    def N(self) -> int:
        return self.Abar.shape[-1]

    @property
    def scale(self) -> float:
        return 2.0 if self.conj_sym else 1.0


def discretize(ssm: ContinuousSsm, method: str = "bilinear") -> DiscreteSsm:
    if method not in ("bilinear", "zoh"):
        raise ValueError(f"unknown discretisation {method!r}")
    lam = ssm.lam
    B = ssm.B
    dt = T.exp(ssm.log_dt)
    if ssm.variant == "S5":
        dtl = dt * lam  # (N,)
    else:
        dtl = dt.reshape(-1, 1) * lam  # (H, N)

    if ssm.variant == "S4":
        if method != "bilinear":
            raise ValueError("zero-order hold is only implemented for diagonal systems")
        return _bilinear_dplr(ssm, dt, dtl)

    if method == "bilinear":
        denom = 1.0 - 0.5 * dtl
        _check_bilinear(denom)
        Abar = (1.0 + 0.5 * dtl) / denom
        factor = (dt / denom) if ssm.variant == "S5" else (dt.reshape(-1, 1) / denom)
    else:
        Abar = T.exp(dtl)
        factor = (Abar - 1.0) / lam
    Bbar = factor.reshape(-1, 1) * B if ssm.variant == "S5" else factor * B
    return DiscreteSsm(ssm.variant, Abar, Bbar, ssm.C, ssm.D, dt)


def _check_bilinear(denom: Tensor) -> None:
    if np.min(np.abs(denom.data)) < BILINEAR_FLOOR:
        raise ValueError("bilinear discretisation is singular: |1 - dt*lambda/2| < 1e-12")


def _bilinear_dplr(ssm: ContinuousSsm, dt: Tensor, dtl: Tensor) -> DiscreteSsm:
    # (I - dt/2 A)^-1 via Sherman-Morrison, since I - dt/2 A = diag(d) + (dt/2) p p^H
    N = ssm.N
    eye = np.eye(N)
    half = 0.5 * dt.reshape(-1, 1)  # (H, 1)
    p = ssm.P
    ph = T.conj(p)
    d = 1.0 - 0.5 * dtl
    _check_bilinear(d)
    dinv = 1.0 / d
    du = dinv * half * p  # D^-1 u
    vd = ph * dinv  # v^H D^-1
    denom = 1.0 + (ph * du).sum(axis=-1, keepdims=True)  # (H, 1)
    outer = du.reshape(-1, N, 1) * vd.reshape(-1, 1, N)
    A0inv = dinv.reshape(-1, N, 1) * eye - outer / denom.reshape(-1, 1, 1)
    A1 = (1.0 + 0.5 * dtl).reshape(-1, N, 1) * eye - half.reshape(-1, 1, 1) * (
        p.reshape(-1, N, 1) * ph.reshape(-1, 1, N)
    )
    Abar = A0inv @ A1
    Bbar = (A0inv @ (dt.reshape(-1, 1) * ssm.B).reshape(-1, N, 1)).reshape(-1, N)
    return DiscreteSsm("S4", Abar, Bbar, ssm.C, ssm.D, dt)


# ---------------------------------------------------------------------------
# convolutional mode


@dataclass
class ConvKernel:
    """Impulse response. SISO: K is (H, L). MIMO: K is (L, H_out, H_in)."""

    K: Tensor
    mimo: bool = False

    @property
    def L(self) -> int:
        return self.K.shape[0] if self.mimo else self.K.shape[-1]


def _diag_powers(Abar: Tensor, L: int) -> Tensor:
    """Abar**j for j < L along a new last axis, by repeated doubling."""
    W = T.ones(Abar.shape + (1,))
    step = Abar.reshape(Abar.shape + (1,))
    while W.shape[-1] < L:
        W = T.concat([W, W * step], axis=-1)
        if W.shape[-1] < L:
            step = step * step
    return W[..., :L]


def _dense_krylov(Abar: Tensor, Bbar: Tensor, L: int) -> Tensor:
    """Columns Abar**j @ Bbar for j < L, shape (H, N, L), by repeated doubling."""
    N = Abar.shape[-1]
    W = Bbar.reshape(-1, N, 1)
    step = Abar
    while W.shape[-1] < L:
        W = T.concat([W, step @ W], axis=-1)
        if W.shape[-1] < L:
            step = step @ step
    return W[..., :L]


def materialize_kernel(d: DiscreteSsm, L: int) -> ConvKernel:
    if L < 1:
        raise ValueError(f"kernel length must be >= 1, got {L}")
    if d.variant == "S5":
        V = _diag_powers(d.Abar, L)  # (N, L)
        CV = d.C.reshape(1, d.H, d.N) * T.transpose(V).reshape(L, 1, d.N)  # (L, H, N)
        K = T.real(CV @ d.Bbar) * d.scale
        return ConvKernel(K, mimo=True)
    if d.variant == "S4":
        W = _dense_krylov(d.Abar, d.Bbar, L)  # (H, N, L)
        K = T.real(d.C.reshape(-1, 1, d.N) @ W).reshape(-1, L) * d.scale
        return ConvKernel(K)
    V = _diag_powers(d.Abar, L)  # (H, N, L)
    K = T.real((d.C * d.Bbar).reshape(d.H, d.N, 1) * V).sum(axis=1) * d.scale
    return ConvKernel(K)


def conv_forward(k: ConvKernel, u: Tensor, D: Tensor) -> Tensor:
    """Apply a materialised kernel to ``u`` of shape (B, L, H)."""
    u, D = T.as_tensor(u), T.as_tensor(D)
    if u.ndim != 3:
        raise T.ShapeError(f"expected input (B, L, H), got {u.shape}")
    B, L, H = u.shape
    if k.L != L:
        raise T.ShapeError(f"kernel length {k.L} != sequence length {L}")
    ut = u.transpose(0, 2, 1)  # (B, H, L)
    if k.mimo:
        if k.K.shape[1:] != (H, H):
            raise T.ShapeError(f"MIMO kernel {k.K.shape} does not match {H} channels")
        Kt = k.K.transpose(1, 2, 0)  # (H_out, H_in, L)
        y = T.fft_causal_conv(ut.reshape(B, 1, H, L), Kt).sum(axis=2)
    else:
        if k.K.shape[0] != H:
            raise T.ShapeError(f"kernel has {k.K.shape[0]} channels, input has {H}")
        y = T.fft_causal_conv(ut, k.K)
    y = y + D.reshape(H, 1) * ut
    return y.transpose(0, 2, 1)


# ---------------------------------------------------------------------------
# recurrent mode


def _s5_input(d: DiscreteSsm, u: Tensor) -> Tensor:
    return u @ T.transpose(d.Bbar)  # (B, L, N)


def _s5_readout(d: DiscreteSsm, x: Tensor, u: Tensor) -> Tensor:
    return T.real(x @ T.transpose(d.C)) * d.scale + d.D * u


def recurrent_forward(d: DiscreteSsm, u: Tensor, x0: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Step the recurrence one sample at a time. Returns outputs and final state.

    The state absorbs ``u_t`` before it is read, so ``y_0`` already contains
    ``C Bbar u_0``. This is an inference/oracle path and records no graph.
    """
    u = T.as_tensor(u)
    if u.ndim != 3:
        raise T.ShapeError(f"expected input (B, L, H), got {u.shape}")
    Bsz, L, H = u.shape
    if H != d.H:
        raise T.ShapeError(f"system has {d.H} channels, input has {H}")
    A = d.Abar.data
    with T.no_grad():
        if d.variant == "S5":
            bu = _s5_input(d, u).data
            x = np.zeros((Bsz, d.N), complex) if x0 is None else np.array(x0, complex)
            xs = np.empty((Bsz, L, d.N), complex)
            for t in range(L):
                x = A * x + bu[:, t]
                xs[:, t] = x
            y = _s5_readout(d, Tensor(xs), u)
            return y, Tensor(x)

        Bb, C, D = d.Bbar.data, d.C.data, d.D.data
        uu = u.data
        x = np.zeros((Bsz, H, d.N), complex) if x0 is None else np.array(x0, complex)
        y = np.empty((Bsz, L, H))
        dense = d.variant == "S4"
        for t in range(L):
            if dense:
                x = np.einsum("hnm,bhm->bhn", A, x)
            else:
                x = A * x
            x = x + Bb * uu[:, t, :, None]
            y[:, t] = d.scale * np.einsum("hn,bhn->bh", C, x).real + D * uu[:, t]
    return Tensor(y), Tensor(x)


# ---------------------------------------------------------------------------
# parallel scan


def scan_combine(e1: tuple, e2: tuple) -> tuple:
    """Associative operator for ``x -> a x + b``; ``e1`` is the earlier element."""
    a1, b1 = e1
    a2, b2 = e2
    return a2 * a1, a2 * b1 + b2


def associative_scan(a: Tensor, b: Tensor) -> Tensor:
    """Inclusive scan of ``x_t = a_t x_{t-1} + b_t`` along axis -2 (x_{-1} = 0).

    Hillis-Steele doubling: ceil(log2 L) rounds, each combining every element
    with the one ``d`` steps earlier; positions before the start are padded
    with the identity ``(1, 0)``. Built from differentiable ops.
    """
    L = b.shape[-2]
    a = T.broadcast_to(a, b.shape[-2:])
    dist = 1
    while dist < L:
        a_prev = T.concat([T.ones((dist,) + a.shape[1:]), a[:-dist]], axis=0)
        b_prev = T.concat([T.zeros(b.shape[:-2] + (dist,) + b.shape[-1:]), b[..., :-dist, :]], axis=-2)
        b = a * b_prev + b
        a = a * a_prev
        dist *= 2
    return b


def s5_scan(d: DiscreteSsm, u: Tensor) -> Tensor:
    if d.variant != "S5":
        raise ValueError(f"s5_scan needs a MIMO (S5) system, got {d.variant}")
    u = T.as_tensor(u)
    if u.ndim != 3 or u.shape[-1] != d.H:
        raise T.ShapeError(f"expected input (B, L, {d.H}), got {u.shape}")
    x = associative_scan(d.Abar, _s5_input(d, u))
    return _s5_readout(d, x, u)
