"""Sparse dictionary learning on voxel time series.

The data matrix ``X`` holds one unit-norm voxel time series per column. It is
factorized as ``X ~ D A`` by minimizing

    0.5 * ||X - D A||_F^2 + lam * ||A||_1,   ||d_k|| = 1,

alternating a lasso solve for the coefficients ``A`` with exact
block-coordinate updates of the atoms ``d_k`` on the unit sphere. Atoms are
stored as rows, ``atoms.shape == (K, T)``; coefficients as ``(K, V)`` over
in-mask voxels.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .metrics import DEFAULT_THRESHOLD, binarize, set_jaccard
from .volume import Volume4D, normalize, parse_keyvalue, read_map, write_map

log = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-9


class ConvergenceError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = list(trace)


class SparseCodingWarning(UserWarning):
    pass


@dataclass
class DictionaryModel:
    atoms: np.ndarray  # (K, T)
    coefficients: np.ndarray  # (K, V)
    lam: float
    mask: np.ndarray
    objective: list[float] = field(default_factory=list)
    n_fixed: int = 0

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def maps(self) -> np.ndarray:
        """Coefficient maps scattered back to ``(K, D, H, W)``."""
        out = np.zeros((self.n_atoms,) + self.mask.shape)
        out[:, self.mask] = self.coefficients
        return out


@dataclass
class TemplateMatch:
    best_index: int
    jaccard: float
    all_scores: np.ndarray
    no_match: bool = False


def voxel_matrix(vol: Volume4D) -> np.ndarray:
    """Normalized in-mask voxel series, each scaled to unit Euclidean norm."""
    x = normalize(vol).voxel_matrix()
    norms = np.linalg.norm(x, axis=0)
    return x / np.where(norms > 0, norms, 1.0)


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_objective(X, D, A, lam) -> float:
    r = X - D @ A
    return 0.5 * float(np.sum(r * r)) + lam * float(np.abs(A).sum())


def kkt_residual(X, D, A, lam) -> float:
    """Largest violation of the lasso optimality conditions."""
    g = D.T @ (D @ A - X)
    on = A != 0
    viol = np.where(on, np.abs(g + lam * np.sign(A)), np.maximum(np.abs(g) - lam, 0.0))
    return float(viol.max(initial=0.0))


def _fista(X, D, lam, A0, max_iter, tol):
    L = np.linalg.norm(D, 2) ** 2
    if L == 0:
        return np.zeros((D.shape[1], X.shape[1])), 0, True
    DtX = D.T @ X
    DtD = D.T @ D
    A = A0.copy()
    Y = A.copy()
    t = 1.0
    best, best_obj = A.copy(), lasso_objective(X, D, A, lam)
    obj = best_obj
    converged = False
    for it in range(1, max_iter + 1):
        grad = DtD @ Y - DtX
        A_new = soft_threshold(Y - grad / L, lam / L)
        new_obj = lasso_objective(X, D, A_new, lam)
        if new_obj > obj:
            # adaptive restart keeps the sequence from oscillating
            t = 1.0
            Y = A.copy()
            A_new = soft_threshold(A - (DtD @ A - DtX) / L, lam / L)
            new_obj = lasso_objective(X, D, A_new, lam)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Y = A_new + ((t - 1.0) / t_new) * (A_new - A)
        A, t, obj = A_new, t_new, new_obj
        if obj <= best_obj:
            best, best_obj = A.copy(), obj
        if it % 10 == 0 or it == max_iter:
            if kkt_residual(X, D, best, lam) < tol:
                converged = True
                break
    return best, it, converged


def sparse_code(data, atoms, lam: float, init=None, max_iter: int = 5000, tol: float = 1e-6,
                return_info: bool = False):
    """Per-voxel lasso coefficients of ``data (T, V)`` against ``atoms (K, T)``.

    Solved by accelerated iterative soft-thresholding with restarts. The
    returned iterate never has a higher objective than ``init``. If the KKT
    residual is still above ``tol`` after ``max_iter`` iterations a
    ``SparseCodingWarning`` is issued.
    """
    X = np.asarray(data, dtype=np.float64)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[:, None]
    D = np.asarray(atoms, dtype=np.float64).T
    if D.shape[0] != X.shape[0]:
        raise ValueError(f"atoms have length {D.shape[0]}, data series have length {X.shape[0]}")
    A0 = np.zeros((D.shape[1], X.shape[1])) if init is None else np.array(init, dtype=np.float64)
    A, n_iter, converged = _fista(X, D, lam, A0, max_iter, tol)
    residual = kkt_residual(X, D, A, lam)
    if not converged and residual >= tol:
        warnings.warn(f"sparse coding stopped after {n_iter} iterations with KKT residual "
                      f"{residual:.3g}", SparseCodingWarning, stacklevel=2)
    out = A[:, 0] if squeeze else A
    if return_info:
        return out, {"iterations": n_iter, "kkt": residual, "converged": residual < tol}
    return out


def _init_atoms(X, k, rng, exclude=None):
    """Sign-invariant k-means++ seeding from data columns."""
    T, V = X.shape
    chosen = [] if exclude is None else [e for e in exclude]
    energy = np.sum(X * X, axis=0)
    atoms = []
    for _ in range(k):
        if chosen:
            C = np.array(chosen)
            dist = energy - np.max((C @ X) ** 2, axis=0)
        else:
            dist = energy.copy()
        dist = np.maximum(dist, 0.0)
        if dist.sum() <= 1e-12:
            d = rng.standard_normal(T)
        else:
            d = X[:, rng.choice(V, p=dist / dist.sum())].copy()
        d /= np.linalg.norm(d)
        atoms.append(d)
        chosen.append(d)
    return np.array(atoms).reshape(k, T)


def _update_atoms(X, D, A, start):
    """Exact minimization over each free atom on the unit sphere, in turn."""
    E = X - D @ A
    used = np.flatnonzero(np.any(A != 0, axis=1))
    basis = np.linalg.qr(D[:, used])[0] if used.size else np.zeros((D.shape[0], 0))
    for j in range(start, D.shape[1]):
        a = A[j]
        if not np.any(a):
            # unused atom: reseed with the worst-explained column, after
            # removing what the atoms in use already span (lasso shrinkage
            # leaves residuals parallel to them)
            R = E - basis @ (basis.T @ E)
            norms = np.linalg.norm(R, axis=0)
            col = int(np.argmax(norms))
            if norms[col] > 1e-8 * max(1.0, np.linalg.norm(X[:, col])):
                D[:, j] = R[:, col] / norms[col]
                basis = np.column_stack([basis, D[:, j]])
            continue
        R = E + np.outer(D[:, j], a)
        v = R @ a
        nv = np.linalg.norm(v)
        if nv > 0:
            D[:, j] = v / nv
        E = R - np.outer(D[:, j], a)
    return D


def _learn(X, atoms0, n_fixed, lam, iters, tol, max_iter):
    D = atoms0.T.copy()
    A = np.zeros((D.shape[1], X.shape[1]))
    trace = [lasso_objective(X, D, A, lam)]
    for it in range(iters):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SparseCodingWarning)
            A = sparse_code(X, D.T, lam, init=A, tol=tol, max_iter=max_iter)
        D = _update_atoms(X, D, A, n_fixed)
        obj = lasso_objective(X, D, A, lam)
        if obj > trace[-1] + MONOTONE_SLACK * max(1.0, abs(trace[-1])):
            trace.append(obj)
            raise ConvergenceError(f"objective increased at outer iteration {it + 1}", trace)
        trace.append(obj)
        log.debug("dict iter %d objective %.6f", it + 1, obj)
    # final coding pass so coefficients are optimal for the returned atoms
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SparseCodingWarning)
        A = sparse_code(X, D.T, lam, init=A, tol=tol, max_iter=max_iter)
    obj = lasso_objective(X, D, A, lam)
    if obj > trace[-1] + MONOTONE_SLACK * max(1.0, abs(trace[-1])):
        trace.append(obj)
        raise ConvergenceError("objective increased in the final coding pass", trace)
    trace.append(obj)
    # sign convention: coefficient rows sum to a non-negative value
    for j in range(n_fixed, D.shape[1]):
        if A[j].sum() < 0:
            A[j] = -A[j]
            D[:, j] = -D[:, j]
    return D.T.copy(), A, trace


def dict_learn(data: Volume4D, k: int = 20, lam: float = 0.15, iters: int = 30, seed: int = 0,
               tol: float = 1e-6, max_iter: int = 2000) -> DictionaryModel:
    """Learn ``k`` unit-norm temporal atoms and sparse spatial coefficient maps."""
    X = voxel_matrix(data)
    if k >= X.shape[1]:
        raise ValueError(f"k={k} must be below the number of in-mask voxels ({X.shape[1]})")
    rng = np.random.default_rng(seed)
    atoms0 = _init_atoms(X, k, rng)
    atoms, A, trace = _learn(X, atoms0, 0, lam, iters, tol, max_iter)
    return DictionaryModel(atoms, A, lam, data.brain_mask.copy(), trace)


def supervised_dict_learn(data: Volume4D, fixed_atoms, k: int = 20, lam: float = 0.15,
                          iters: int = 30, seed: int = 0, tol: float = 1e-6,
                          max_iter: int = 2000) -> DictionaryModel:
    """Dictionary learning with some atoms held fixed.

    ``fixed_atoms`` are centered and scaled to unit norm, placed first, and
    never updated. ``k`` counts all atoms, fixed ones included. The
    coefficient map of fixed atom ``i`` is ``model.maps[i]``.
    """
    X = voxel_matrix(data)
    fixed = np.atleast_2d(np.asarray(fixed_atoms, dtype=np.float64))
    if fixed.shape[1] != X.shape[0]:
        raise ValueError(f"fixed atoms have length {fixed.shape[1]}, data has {X.shape[0]} frames")
    fixed = fixed - fixed.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(fixed, axis=1, keepdims=True)
    fixed = fixed / np.where(norms > 0, norms, 1.0)
    n_fixed = fixed.shape[0]
    if k < n_fixed:
        raise ValueError(f"k={k} is smaller than the number of fixed atoms ({n_fixed})")
    rng = np.random.default_rng(seed)
    free = _init_atoms(X, k - n_fixed, rng, exclude=list(fixed)) if k > n_fixed else np.zeros((0, X.shape[0]))
    atoms, A, trace = _learn(X, np.vstack([fixed, free]), n_fixed, lam, iters, tol, max_iter)
    return DictionaryModel(atoms, A, lam, data.brain_mask.copy(), trace, n_fixed=n_fixed)


def select_target(model: DictionaryModel, template: np.ndarray,
                  threshold: float = DEFAULT_THRESHOLD) -> TemplateMatch:
    """Pick the atom whose binarized coefficient map best overlaps the template."""
    template = np.asarray(template)
    if template.shape != model.mask.shape:
        raise ValueError(f"template shape {template.shape} vs map shape {model.mask.shape}")
    tmpl = binarize(template, threshold)
    scores = np.array([set_jaccard(binarize(m, threshold), tmpl)[0] for m in model.maps])
    best = int(np.argmax(scores))  # first index on ties
    no_match = bool(scores.max(initial=0.0) == 0.0)
    if no_match:
        warnings.warn("no atom overlaps the template; returning atom 0", stacklevel=2)
    return TemplateMatch(best, float(scores[best]), scores, no_match)


class DictionaryLearner(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns atoms from a volume, ``transform``
    returns coefficient maps ``(K, D, H, W)`` of a volume under those atoms."""

    def __init__(self, n_atoms=20, lam=0.15, iters=30, seed=0):
        self.n_atoms = n_atoms
        self.lam = lam
        self.iters = iters
        self.seed = seed

    def fit(self, X: Volume4D, y=None):
        self.model_ = dict_learn(X, self.n_atoms, self.lam, self.iters, self.seed)
        self.atoms_ = self.model_.atoms
        return self

    def transform(self, X: Volume4D) -> np.ndarray:
        coefs = sparse_code(voxel_matrix(X), self.atoms_, self.lam)
        out = np.zeros((self.atoms_.shape[0],) + X.spatial_shape)
        out[:, X.brain_mask] = coefs
        return out

    def select(self, template, threshold=DEFAULT_THRESHOLD) -> TemplateMatch:
        return select_target(self.model_, template, threshold)


# ---------------------------------------------------------------- files


def save_model(model: DictionaryModel, out_dir, match: TemplateMatch | None = None) -> None:
    """``atoms.csv`` (one row per atom), ``coef_XX.vol4`` maps, ``mask.vol4``
    and, when given, the ``match.txt`` report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [",".join(repr(float(v)) for v in atom) for atom in model.atoms]
    (out / "atoms.csv").write_text("\n".join(rows) + "\n")
    for j, m in enumerate(model.maps):
        write_map(m, out / f"coef_{j:02d}.vol4")
    write_map(model.mask.astype(np.float64), out / "mask.vol4")
    meta = f"lambda = {model.lam!r}\nn_atoms = {model.n_atoms}\nn_fixed = {model.n_fixed}\n"
    (out / "model.txt").write_text(meta)
    if match is not None:
        (out / "match.txt").write_text(
            f"best_index = {match.best_index}\njaccard = {match.jaccard!r}\n"
            f"all_scores = {' '.join(repr(float(v)) for v in match.all_scores)}\n"
            f"no_match = {int(match.no_match)}\n")


def load_model(out_dir) -> DictionaryModel:
    out = Path(out_dir)
    meta = parse_keyvalue((out / "model.txt").read_text())
    atoms = np.loadtxt(out / "atoms.csv", delimiter=",", ndmin=2)
    mask = read_map(out / "mask.vol4") != 0
    maps = [read_map(out / f"coef_{j:02d}.vol4") for j in range(atoms.shape[0])]
    coefs = np.array([m[mask] for m in maps])
    return DictionaryModel(atoms, coefs, float(meta["lambda"]), mask, n_fixed=int(meta["n_fixed"]))


def load_match(out_dir) -> TemplateMatch:
    meta = parse_keyvalue((Path(out_dir) / "match.txt").read_text())
    scores = np.array([float(v) for v in meta["all_scores"].split()])
    return TemplateMatch(int(meta["best_index"]), float(meta["jaccard"]), scores,
                         bool(int(meta["no_match"])))
