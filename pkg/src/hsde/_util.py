"""Small shared helpers: seeded RNG streams, weighted quantiles, atomic file writes."""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np


def substream(seed, *path) -> np.random.Generator:
    """Deterministic RNG derived from a base seed and an integer path.

    Streams are keyed by value, not by call order, so independent stages
    (per step, per trial, per iteration) can be drawn in any order or in
    parallel without changing the result.
    """
    return np.random.default_rng([int(seed), *[int(p) for p in path]])


def weighted_quantile(values: np.ndarray, weights: np.ndarray, qs) -> np.ndarray:
    """Quantiles of a weighted sample.

    values: (U,) or (U, D); weights: (U,) nonnegative, need not be normalized.
    Returns array of shape (len(qs),) or (len(qs), D).
    """
    values = np.asarray(values, dtype=float)
    qs = np.atleast_1d(np.asarray(qs, dtype=float))
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    out = np.empty((qs.size, values.shape[1]))
    w = np.asarray(weights, dtype=float)
    for d in range(values.shape[1]):
        order = np.argsort(values[:, d], kind="stable")
        v = values[order, d]
        cw = np.cumsum(w[order])
        cw /= cw[-1]
        out[:, d] = v[np.searchsorted(cw, qs, side="left").clip(0, v.size - 1)]
    return out[:, 0] if squeeze else out


def affine_r2(estimate: np.ndarray, truth: np.ndarray) -> float:
    """R-squared of `truth` against the best affine map of `estimate`.

    Latent spaces recovered through a linear observation model are only
    identified up to an affine transform, so recovery is scored after
    fitting estimate -> truth by least squares.
    """
    est = np.atleast_2d(np.asarray(estimate, dtype=float).T).T
    tru = np.atleast_2d(np.asarray(truth, dtype=float).T).T
    design = np.column_stack([est, np.ones(est.shape[0])])
    coef, *_ = np.linalg.lstsq(design, tru, rcond=None)
    resid = tru - design @ coef
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((tru - tru.mean(axis=0)) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def atomic_write_text(path: str, text: str) -> None:
    """Write a file via temp-file-and-rename so readers never see a partial file."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=os.path.basename(path) + ".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    """Canonical JSON text: sorted keys, stable float repr, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"
