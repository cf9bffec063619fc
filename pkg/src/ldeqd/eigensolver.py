"""Interior eigenpairs of the discretized Hamiltonians.

Two methods are provided:

``shift-invert-lanczos``
    ARPACK Lanczos on (H - sigma)^-1. The inner solve is a sparse LU
    factorization for small problems, otherwise GMRES preconditioned with
    the same Fourier approximate inverse as below.

``lobpcg-folded``
    Block preconditioned iteration on the folded operator (H - sigma)^2.
    The search space is [X, W, P] as in LOBPCG; extraction minimizes
    ||(H - sigma) x|| over the space (refined Ritz vectors) followed by an
    ordinary Rayleigh-Ritz step inside the selected block. The
    preconditioner is the inverse lattice symbol of the majority material,
    applied with FFTs, which is an approximate (H - sigma)^-1.

Envelopes are normalized so that sum |psi|^2 dV = 1 (dV = voxel volume).
Residuals are ||H psi - E psi|| / ||psi|| in eV.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .kpcore import SparseOperator

log = logging.getLogger(__name__)

METHODS = ("shift-invert-lanczos", "lobpcg-folded")
INNER = ("auto", "direct", "gmres")
KRAMERS_THRESHOLD = 1e-6
# below this dimension the dense Hermitian solver is used outright
DENSE_LIMIT = 600
# largest dimension factorized directly when inner="auto"; 3D fill-in makes
# LU impractical beyond this, preconditioned GMRES takes over
DIRECT_LIMIT = 6000
# relative residual an unconverged inner GMRES solve may still return
GMRES_ACCEPT = 1e-9


class EigenSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolveRequest:
    shift: float
    n_states: int = 1
    tol: float = 1e-6
    max_iterations: int = 500
    method: str = "shift-invert-lanczos"
    seed: int = 0
    inner: str = "auto"

    def __post_init__(self):
        if self.n_states < 1:
            raise ValueError("n_states must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.inner not in INNER:
            raise ValueError(f"inner must be one of {INNER}, got {self.inner!r}")


@dataclass
class EigenSolution:
    energies: np.ndarray
    envelopes: np.ndarray  # (n_states, dimension), sum |psi|^2 dV = 1
    residuals: np.ndarray
    iterations: int
    seed: int
    shift: float
    method: str
    dims: tuple = (1, 1, 1)
    n_components: int = 1
    voxel_volume: float = 1.0
    converged: bool = True
    notes: list = field(default_factory=list)

    @property
    def n_states(self) -> int:
        return len(self.energies)

    def envelope(self, i: int) -> np.ndarray:
        """State ``i`` as an array of shape dims + (components,)."""
        return self.envelopes[i].reshape(tuple(self.dims) + (self.n_components,))

    def density(self, i: int) -> np.ndarray:
        return np.sum(np.abs(self.envelope(i)) ** 2, axis=-1)

    def gram(self) -> np.ndarray:
        return self.envelopes.conj() @ self.envelopes.T * self.voxel_volume

    def levels(self, threshold: float = KRAMERS_THRESHOLD) -> list[list[int]]:
        """Group state indices into degenerate (Kramers) sets."""
        return kramers_groups(self.energies, threshold)


def kramers_groups(energies, threshold: float = KRAMERS_THRESHOLD) -> list[list[int]]:
    """Indices grouped by energy, consecutive members closer than ``threshold``.

    Groups come out in ascending energy.
    """
    energies = np.asarray(energies, dtype=float)
    order = np.argsort(energies, kind="stable")
    groups: list[list[int]] = []
    for i in order:
        if groups and energies[i] - energies[groups[-1][-1]] < threshold:
            groups[-1].append(int(i))
        else:
            groups.append([int(i)])
    return groups


def _as_matrix(op):
    return op.matrix if isinstance(op, SparseOperator) else op


def residual(op, sol: EigenSolution) -> np.ndarray:
    """Recompute ||H psi - E psi|| / ||psi|| for every state of ``sol``."""
    H = _as_matrix(op)
    V = np.asarray(sol.envelopes)
    if V.ndim != 2 or V.shape[1] != H.shape[0]:
        raise ValueError(f"solution vectors of length {V.shape[-1]} do not match operator {H.shape}")
    return _residuals(H, V.T, np.asarray(sol.energies))


def _residuals(H, X, energies) -> np.ndarray:
    R = H @ X - X * energies[None, :]
    return np.linalg.norm(R, axis=0) / np.linalg.norm(X, axis=0)


def _start_block(n: int, m: int, seed: int, initial=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m))
    if initial is not None:
        init = np.asarray(initial, dtype=complex).reshape(n, -1)
        k = min(init.shape[1], m)
        # keep a little noise so the block spans more than the guess
        X[:, :k] = init[:, :k] / np.linalg.norm(init[:, :k], axis=0) + 1e-3 * X[:, :k] / np.sqrt(n)
    return X


# --------------------------------------------------------------------------
# Fourier preconditioner


class FourierPreconditioner:
    """Approximate (H - sigma)^-1 from the lattice symbol of one material.

    The symbol is exact for a periodic uniform crystal; for a dot in a
    barrier matrix the majority (barrier) material is the natural choice.
    """

    def __init__(self, op: SparseOperator, shift: float, material: int | None = None):
        if material is None:
            material = int(np.bincount(op.material_index.ravel()).argmax())
        self.dims = tuple(op.dims)
        self.nc = op.n_components
        axes = [
            2 * np.pi * np.fft.fftfreq(n, h) if act else np.zeros(1)
            for n, h, act in zip(self.dims, op.spacing, op.active_axes)
        ]
        K = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        S = op.symbol(material, K)
        w, U = np.linalg.eigh(S)
        w = w - shift
        # keep the reference well conditioned if sigma hits one of its bands
        floor = 1e-3
        w = np.where(np.abs(w) < floor, np.where(w < 0, -floor, floor), w)
        self.T = np.einsum("kij,kj,klj->kil", U, 1.0 / w, U.conj())
        self.material = material

    def __call__(self, V: np.ndarray) -> np.ndarray:
        squeeze = V.ndim == 1
        V = V.reshape(V.shape[0], -1)
        m = V.shape[1]
        A = V.reshape(self.dims + (self.nc, m))
        F = np.fft.fftn(A, axes=(0, 1, 2)).reshape(-1, self.nc, m)
        F = np.einsum("kij,kjm->kim", self.T, F)
        out = np.fft.ifftn(F.reshape(self.dims + (self.nc, m)), axes=(0, 1, 2)).reshape(-1, m)
        return out[:, 0] if squeeze else out


# --------------------------------------------------------------------------
# solvers


def _dense(H, req: SolveRequest):
    w, V = la.eigh(H.toarray() if sp.issparse(H) else np.asarray(H))
    order = np.argsort(np.abs(w - req.shift), kind="stable")[: req.n_states]
    return w[order], V[:, order], 1


def _inner_solver(H, shift, req: SolveRequest, op):
    """Returns a function computing (H - shift)^-1 b."""
    n = H.shape[0]
    inner = req.inner
    if inner == "auto":
        inner = "direct" if n <= DIRECT_LIMIT else "gmres"
    if inner == "direct":
        lu = sla.splu((H - shift * sp.identity(n, format="csc")).tocsc())
        return lu.solve
    if isinstance(op, SparseOperator):
        M = FourierPreconditioner(op, shift)
    else:
        d = H.diagonal() - shift
        d[np.abs(d) < 1e-12] = 1e-12
        M = lambda v: v / d  # noqa: E731
    Mop = sla.LinearOperator((n, n), matvec=M, dtype=complex)
    A = (H - shift * sp.identity(n, format="csr")).tocsr()

    def solve(b):
        x, info = sla.gmres(A, b, M=Mop, rtol=1e-12, atol=0.0, restart=80, maxiter=50)
        if info != 0:
            # 1e-12 can sit below the rounding floor of an ill-conditioned
            # shifted operator; only a genuinely poor solve is a breakdown
            r = np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300)
            if not r < GMRES_ACCEPT:
                raise EigenSolverError(f"inner GMRES solve did not converge (info={info}, residual {r:.2g})")
        return x

    return solve


def _rayleigh_ritz(H, V):
    V, _ = np.linalg.qr(V)
    w, C = la.eigh(_hdot(V, H @ V))
    return w, V @ C


def _shift_invert(H, req: SolveRequest, op, initial=None):
    n = H.shape[0]
    k = req.n_states
    ncv = min(n - 1, max(2 * k + 1, 20))
    real = not np.iscomplexobj(H.data if sp.issparse(H) else H)
    v0 = _start_block(n, 1, req.seed, initial)[:, 0]
    if real:
        v0 = v0.real.copy()
    shift = req.shift
    converged = True
    count = [0]
    for attempt in range(4):
        try:
            inner = _inner_solver(H, shift, req, op)

            def solve(b, inner=inner):
                count[0] += 1
                return inner(b)

            OPinv = sla.LinearOperator((n, n), matvec=solve, dtype=float if real else complex)
            w, V = sla.eigsh(H, k=k, sigma=shift, which="LM", OPinv=OPinv, v0=v0, ncv=ncv,
                             maxiter=req.max_iterations, tol=0)
            break
        except sla.ArpackNoConvergence as exc:
            w, V = exc.eigenvalues, exc.eigenvectors
            converged = False
            if len(w) == 0:
                raise EigenSolverError("Lanczos iteration did not converge to any eigenpair") from None
            break
        except (RuntimeError, sla.ArpackError) as exc:
            if attempt == 3:
                raise EigenSolverError(f"shift-invert breakdown persists after retries: {exc}") from None
            new = req.shift + 1e-7 * (1 + abs(req.shift)) * 10**attempt
            log.warning("shift-invert breakdown at %.9g eV (%s), retrying at %.9g eV", shift, exc, new)
            shift = new
    # the complex ARPACK driver does not orthogonalize degenerate pairs
    w, V = _rayleigh_ritz(H, V)
    for _ in range(20):
        if np.all(_residuals(H, V, w) <= req.tol):
            break
        V = np.column_stack([solve(V[:, j]) for j in range(V.shape[1])])
        w, V = _rayleigh_ritz(H, V)
    return w, V, count[0], converged


def _hdot(A, B):
    """A^H B without materializing conj(A)."""
    if A.dtype != complex or B.dtype != complex:
        return A.conj().T @ B
    return la.blas.zgemm(1.0, A, B, trans_a=2)


def _svqb(S, AS, drop=1e-12):
    """Orthonormalize the columns of S (SVQB), carrying AS = H S along.

    Returns the new blocks and the smallest kept Gram eigenvalue.
    """
    G = _hdot(S, S)
    G = 0.5 * (G + G.conj().T)
    d = np.sqrt(np.abs(np.diag(G)))
    d[d == 0] = 1.0
    w, U = la.eigh(G / np.outer(d, d))
    keep = w > drop * w.max()
    T = (U[:, keep] / np.sqrt(w[keep])) / d[:, None]
    return S @ T, AS @ T, w[keep].min()


def _folded(H, req: SolveRequest, op, initial=None, block=None, precond=None):
    n = H.shape[0]
    k = req.n_states
    m = block or min(n, k + 2 + (k % 2))
    shift = req.shift
    if precond is None and isinstance(op, SparseOperator):
        precond = FourierPreconditioner(op, shift)
    if precond is None:
        precond = lambda V: V  # noqa: E731

    X = _start_block(n, m, req.seed, initial)
    X, AX, _ = _svqb(X, H @ X)
    P = AP = None
    converged = False
    it = 0
    for it in range(1, req.max_iterations + 1):
        if it % 25 == 0:
            # refresh the carried product against drift
            AX = H @ X
        # standard Rayleigh-Ritz inside the current block
        w, C = la.eigh(_hdot(X, AX))
        X, AX = X @ C, AX @ C
        order = np.argsort(np.abs(w - shift), kind="stable")
        w, X, AX = w[order], X[:, order], AX[:, order]
        R = AX - X * w[None, :]
        res = np.linalg.norm(R, axis=0)
        if np.all(res[:k] <= req.tol):
            converged = True
            break
        if it % 20 == 0:
            log.debug("folded it=%d max residual %.3g eV, E=%s", it, res[:k].max(), w[:k])
        # [W, P] orthogonal to X, then orthonormalized among themselves
        W = precond(R)
        W -= X @ _hdot(X, W)
        AW = H @ W
        if P is None:
            Q, AQ = W, AW
        else:
            c = _hdot(X, P)
            P -= X @ c
            AP -= AX @ c
            Q, AQ = np.hstack([W, P]), np.hstack([AW, AP])
        Q, AQ, gmin = _svqb(Q, AQ)
        if gmin < 1e-8:
            c = _hdot(X, Q)
            Q, AQ = Q - X @ c, AQ - AX @ c
            Q, AQ, _ = _svqb(Q, AQ)
        if Q.shape[1] == 0:
            raise EigenSolverError("search space collapsed; try another seed or shift")
        S, AS = np.hstack([X, Q]), np.hstack([AX, AQ])
        # refined extraction: minimize ||(H - sigma) x|| over span(S)
        Y = AS - shift * S
        G = _hdot(Y, Y)
        _, C = la.eigh(0.5 * (G + G.conj().T))
        C = C[:, :m]
        P, AP = Q @ C[m:], AQ @ C[m:]
        X, AX = S @ C, AS @ C
    return w[:k], X[:, :k], it, converged


def solve_interior(op, req: SolveRequest, initial=None, precond=None) -> EigenSolution:
    """The ``req.n_states`` eigenpairs of ``op`` nearest ``req.shift``.

    ``op`` is a :class:`SparseOperator` or any Hermitian sparse/dense matrix.
    ``initial`` (dimension x j) seeds the start block.
    """
    H = _as_matrix(op)
    n = H.shape[0]
    if H.shape != (n, n):
        raise ValueError("operator must be square")
    if req.n_states > n:
        raise ValueError(f"n_states={req.n_states} exceeds the dimension {n}")
    notes = []
    if n <= DENSE_LIMIT:
        w, V, iters = _dense(H, req)
        converged = True
        notes.append("dense")
    elif req.method == "shift-invert-lanczos":
        w, V, iters, converged = _shift_invert(H, req, op, initial)
    else:
        w, V, iters, converged = _folded(H, req, op, initial, precond=precond)

    # sort by distance to the shift, fix phases for reproducible output
    order = np.argsort(np.abs(w - req.shift), kind="stable")
    w, V = np.asarray(w, dtype=float)[order], V[:, order]
    V = V / np.linalg.norm(V, axis=0)
    piv = np.argmax(np.abs(V), axis=0)
    V = V * (np.abs(V[piv, range(V.shape[1])]) / V[piv, range(V.shape[1])])[None, :]
    res = _residuals(H, V, w)
    if not np.all(res <= req.tol):
        converged = False
    if not converged:
        log.warning("eigensolver stopped after %d iterations, max residual %.3g eV", iters, res.max())

    if isinstance(op, SparseOperator):
        dims, nc, dv = tuple(op.dims), op.n_components, op.voxel_volume
    else:
        dims, nc, dv = (n, 1, 1), 1, 1.0
    return EigenSolution(
        energies=w,
        envelopes=(V / np.sqrt(dv)).T.copy(),
        residuals=res,
        iterations=int(iters),
        seed=req.seed,
        shift=req.shift,
        method=req.method,
        dims=dims,
        n_components=nc,
        voxel_volume=dv,
        converged=bool(converged),
        notes=notes,
    )


# --------------------------------------------------------------------------
# export


def save_solution(sol: EigenSolution, path) -> None:
    """NPZ with a JSON header and envelopes of shape (states, *dims, components)."""
    header = {
        "format": "ldeqd-solution/1",
        "dims": list(sol.dims),
        "components": sol.n_components,
        "voxel_volume_nm3": sol.voxel_volume,
        "energies_eV": [float(e) for e in sol.energies],
        "residuals_eV": [float(r) for r in sol.residuals],
        "seed": sol.seed,
        "shift_eV": sol.shift,
        "method": sol.method,
        "iterations": sol.iterations,
        "converged": sol.converged,
    }
    env = sol.envelopes.reshape((sol.n_states,) + tuple(sol.dims) + (sol.n_components,))
    with open(Path(path), "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), envelopes=env)


def load_solution(path) -> EigenSolution:
    with np.load(Path(path)) as z:
        h = json.loads(str(z["header"]))
        env = z["envelopes"]
    return EigenSolution(
        energies=np.array(h["energies_eV"]),
        envelopes=env.reshape(env.shape[0], -1),
        residuals=np.array(h["residuals_eV"]),
        iterations=h["iterations"],
        seed=h["seed"],
        shift=h["shift_eV"],
        method=h["method"],
        dims=tuple(h["dims"]),
        n_components=h["components"],
        voxel_volume=h["voxel_volume_nm3"],
        converged=h["converged"],
    )
