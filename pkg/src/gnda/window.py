"""Assimilation-window containers and twin-experiment data generation.

A window state is a plain ``(N + 1, n)`` array holding ``u_0 ... u_N``.
Stacked observation vectors are ordered by observation time, then by
component index.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import ModelDivergence


@dataclass(frozen=True)
class SeededRng:
    """Counter-based random stream keyed by ``(master_seed, stream_index)``.

    Draws depend only on the key and on ``purpose``, never on the order in
    which streams are consumed.
    """

    master_seed: int
    stream_index: int = 0

    def generator(self, purpose=0):
        key = np.array([self.master_seed, self.stream_index], dtype=np.uint64)
        counter = np.array([0, 0, 0, purpose], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def child(self, stream_index):
        return SeededRng(self.master_seed, stream_index)


# purposes of the sub-streams used inside one realization
TRUTH, NOISE, BACKGROUND = 0, 1, 2


class ObservationOperator:
    """Component selection at a set of observation times.

    Parameters
    ----------
    n, N : int
        Block dimension and number of model steps (the window has N + 1 blocks).
    obs_times : sequence of int
        Strictly increasing time indices in ``[0, N]``.
    components : sequence of int, or sequence of sequences
        Observed components, either shared by every observation time or given
        per time.
    """

    def __init__(self, n, N, obs_times, components):
        obs_times = np.asarray(obs_times, dtype=int).ravel()
        if obs_times.size and (np.any(np.diff(obs_times) <= 0) or obs_times[0] < 0 or obs_times[-1] > N):
            raise ValueError("observation times must be strictly increasing within [0, N]")
        comps = list(components)
        if not comps or np.isscalar(comps[0]):
            selectors = [np.asarray(comps, dtype=int)] * len(obs_times)
        else:
            selectors = [np.asarray(c, dtype=int) for c in comps]
        if len(selectors) != len(obs_times):
            raise ValueError("need one selector per observation time")
        for sel in selectors:
            if sel.size and (len(np.unique(sel)) != sel.size or sel.min() < 0 or sel.max() >= n):
                raise ValueError(f"invalid component selector {sel.tolist()}")
        self.n, self.N = int(n), int(N)
        self.obs_times = obs_times
        self.selectors = [np.sort(s) for s in selectors]
        mask = np.zeros((N + 1, n), dtype=bool)
        for t, sel in zip(obs_times, self.selectors):
            mask[t, sel] = True
        mask.setflags(write=False)
        self.mask = mask
        self._flat = np.flatnonzero(mask.ravel())

    @classmethod
    def regular(cls, n, N, cadence=10, components=(0,), first=0):
        """Observe ``components`` at times ``first, first + cadence, ...``."""
        return cls(n, N, np.arange(first, N + 1, cadence), components)

    @classmethod
    def empty(cls, n, N):
        return cls(n, N, [], [])

    @property
    def size(self):
        return self._flat.size

    def apply_H(self, w):
        w = np.asarray(w, dtype=float)
        self._check(w)
        return w.reshape(-1)[self._flat]

    def apply_Ht(self, v):
        v = np.asarray(v, dtype=float).ravel()
        if v.size != self.size:
            raise ValueError(f"observation vector has length {v.size}, expected {self.size}")
        out = np.zeros(self.mask.size)
        out[self._flat] = v
        return out.reshape(self.mask.shape)

    def apply_HtH(self, w):
        w = np.asarray(w, dtype=float)
        self._check(w)
        return np.where(self.mask, w, 0.0)

    def dense(self):
        """The stacked selection matrix, for tests on small windows."""
        H = np.zeros((self.size, self.mask.size))
        H[np.arange(self.size), self._flat] = 1.0
        return H

    def _check(self, w):
        if w.shape != self.mask.shape:
            raise ValueError(f"window has shape {w.shape}, expected {self.mask.shape}")


@dataclass(frozen=True)
class ObservationSet:
    values: np.ndarray
    gamma: float
    noise: np.ndarray
    Ht_eta_norm: float

    @property
    def noisy(self):
        return self.gamma > 0


def random_initial_state(model, rng, spinup=0):
    """i.i.d. standard normal state, optionally advanced ``spinup`` steps."""
    u = rng.standard_normal(model.n)
    for _ in range(spinup):
        u = model.step(u)
    return u


def generate_truth(model, u0, N, cap=1e8):
    """Integrate ``N`` steps from ``u0``; the result has ``N + 1`` blocks."""
    if N < 1:
        raise ValueError("need at least one model step")
    out = np.empty((N + 1, model.n))
    out[0] = u0
    for j in range(N):
        out[j + 1] = model.step(out[j])
        if np.max(np.abs(out[j + 1])) > cap:
            bad = int(np.argmax(np.abs(out[j + 1])))
            raise ModelDivergence((j + 1) * model.n + bad,
                                  f"trajectory exceeded {cap:g} at step {j + 1}, component {bad}")
    return out


def observe(truth, H, gamma, rng):
    """Noisy selection ``y = H u + eta`` with ``eta ~ N(0, gamma^2 I)``."""
    clean = H.apply_H(truth)
    if gamma > 0:
        eta = gamma * rng.standard_normal(clean.size)
    else:
        eta = np.zeros(clean.size)
    return ObservationSet(clean + eta, float(gamma), eta, float(np.linalg.norm(eta)))


def initial_guess(y, H, u_b):
    """``H^T y + (I - H^T H) u_b``."""
    values = y.values if isinstance(y, ObservationSet) else y
    return np.where(H.mask, H.apply_Ht(values), u_b)


def make_background(truth, mode="perturbed_truth", rng=None, sigma=1.0, model=None):
    """Background trajectory for a twin experiment.

    ``perturbed_truth`` adds i.i.d. N(0, sigma^2) noise to every entry;
    ``free_run`` integrates ``model`` from ``truth[0]`` plus N(0, sigma^2).
    """
    truth = np.asarray(truth, dtype=float)
    if sigma == 0:
        if mode == "free_run":
            return generate_truth(model, truth[0], truth.shape[0] - 1)
        return truth.copy()
    if mode == "perturbed_truth":
        return truth + sigma * rng.standard_normal(truth.shape)
    if mode == "free_run":
        if model is None:
            raise ValueError("free_run needs the model")
        u0 = truth[0] + sigma * rng.standard_normal(truth.shape[1])
        return generate_truth(model, u0, truth.shape[0] - 1)
    raise ValueError(f"unknown background mode {mode!r}")


# -- CSV ---------------------------------------------------------------------

def write_trajectory_csv(path, w):
    w = np.asarray(w)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t"] + [f"x{i}" for i in range(w.shape[1])])
        for t, row in enumerate(w):
            out.writerow([t] + [repr(float(v)) for v in row])


def read_trajectory_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])


def write_observations_csv(path, H, y):
    """One row per observation time; unobserved cells are empty and ``mask``
    holds a 0/1 character per component."""
    values = y.values if isinstance(y, ObservationSet) else np.asarray(y)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t"] + [f"y{i}" for i in range(H.n)] + ["mask"])
        pos = 0
        for t, sel in zip(H.obs_times, H.selectors):
            cells = [""] * H.n
            for comp in sel:
                cells[comp] = repr(float(values[pos]))
                pos += 1
            mask = "".join("1" if i in set(sel.tolist()) else "0" for i in range(H.n))
            out.writerow([int(t)] + cells + [mask])


def read_observations_csv(path, N):
    """Inverse of :func:`write_observations_csv`; returns ``(H, values)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    n = len(rows[0]) - 2
    times, selectors, values = [], [], []
    for r in rows[1:]:
        times.append(int(r[0]))
        sel = [i for i, ch in enumerate(r[-1]) if ch == "1"]
        selectors.append(sel)
        values.extend(float(r[1 + i]) for i in sel)
    return ObservationOperator(n, N, times, selectors), np.array(values)
