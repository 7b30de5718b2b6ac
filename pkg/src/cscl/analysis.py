"""PCA by power iteration with deflation, and CSV helpers for exports."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def top_eigen(cov: np.ndarray, k: int, tol: float = 1e-10, max_iter: int = 20000,
              rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``k`` eigenpairs of a symmetric PSD matrix.

    Each vector comes from power iteration on the deflated matrix and stops
    once the residual ``|Av - lambda v|`` drops below ``tol * max(1, lambda)``.
    """
    cov = np.array(cov, dtype=np.float64)
    n = cov.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    rng = rng or np.random.default_rng(0)
    vals, vecs = [], []
    work = cov.copy()
    for _ in range(k):
        v = rng.standard_normal(n)
        for u in vecs:
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = work @ v
            lam = v @ w
            if np.linalg.norm(w - lam * v) <= tol * max(1.0, abs(lam)):
                break
            for u in vecs:
                w -= (u @ w) * u
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            v = w / norm
        vals.append(lam)
        vecs.append(v)
        work = work - lam * np.outer(v, v)
    return np.array(vals), np.stack(vecs, axis=1)


def pca_project(x: np.ndarray, k: int = 2, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (projections, components, mean) of the rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / max(len(x) - 1, 1)
    _, comps = top_eigen(cov, k, tol)
    return xc @ comps, comps, mu


def write_csv(path: str | Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return v


def write_matrix_csv(path: str | Path, mat: np.ndarray) -> None:
    mat = np.asarray(mat)
    write_csv(path, [f"c{j}" for j in range(mat.shape[1])], mat.tolist())
