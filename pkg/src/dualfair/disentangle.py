"""Prototype-based visual disentanglement between the SA and TA branches."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import NumericalError, StateError
from .numerics import Tensor

BRANCHES = ("SA", "TA")


class ProjectionHead:
    """g: d_vl -> d_p, one ReLU hidden layer, shared by both branches."""

    def __init__(self, d_vl: int, d_hidden: int, d_p: int, rng):
        p = nx.parameter
        self.w1 = p(rng.normal(0, np.sqrt(2.0 / d_vl), (d_vl, d_hidden)))
        self.b1 = p(np.zeros(d_hidden))
        self.w2 = p(rng.normal(0, np.sqrt(1.0 / d_hidden), (d_hidden, d_p)))
        self.b2 = p(np.zeros(d_p))

    def named_parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, z: Tensor) -> Tensor:
        return nx.relu(z @ self.w1 + self.b1) @ self.w2 + self.b2


def project_normalize(z_v: Tensor, head: ProjectionHead) -> Tensor:
    r = head(z_v)
    norms = np.linalg.norm(r.data, axis=-1)
    if np.any(norms < 1e-12):
        raise NumericalError("projection head produced a zero embedding")
    return nx.l2_normalize(r, axis=-1)


class PrototypeBank:
    """Unit prototypes mu[y, a, b] kept outside the tape and refreshed by EMA."""

    def __init__(self, n_y: int, n_a: int, d_p: int, rng, beta: float = 0.5,
                 phi: float = 0.1, lam: float = 0.1):
        mu = rng.normal(size=(n_y, n_a, len(BRANCHES), d_p))
        self.mu = mu / np.linalg.norm(mu, axis=-1, keepdims=True)
        self.beta, self.phi, self.lam = float(beta), float(phi), float(lam)

    @property
    def shape(self):
        return self.mu.shape[:3]

    def copy(self) -> "PrototypeBank":
        other = PrototypeBank.__new__(PrototypeBank)
        other.mu = self.mu.copy()
        other.beta, other.phi, other.lam = self.beta, self.phi, self.lam
        return other

    def ema_update(self, r: dict, y, a):
        """Move each populated (y, a, b) cell toward its batch-mean embedding.

        ``r`` maps branch -> (N, d_p) unit embeddings (arrays or tensors).
        Cells without a matching sample are left untouched.
        """
        if self.beta == 1.0:
            return self     # identity; skipping avoids renormalisation round-off
        y, a = np.asarray(y), np.asarray(a)
        for bi, b in enumerate(BRANCHES):
            rb = r[b].data if isinstance(r[b], Tensor) else np.asarray(r[b], dtype=np.float64)
            for yy in range(self.mu.shape[0]):
                for aa in range(self.mu.shape[1]):
                    sel = (y == yy) & (a == aa)
                    if not sel.any():
                        continue
                    m = self.beta * self.mu[yy, aa, bi] + (1.0 - self.beta) * rb[sel].mean(axis=0)
                    n = np.linalg.norm(m)
                    if n > 0:
                        self.mu[yy, aa, bi] = m / n
        return self


def _cell_protos(bank: PrototypeBank, y, a) -> np.ndarray:
    y, a = np.asarray(y), np.asarray(a)
    if y.min() < 0 or a.min() < 0 or y.max() >= bank.mu.shape[0] or a.max() >= bank.mu.shape[1]:
        raise StateError("sample (y, a) has no prototype in the bank")
    return bank.mu[y, a]    # (N, 2, d_p)


def compactness_loss(r: dict, y, a, bank: PrototypeBank) -> Tensor:
    """Mean over (branch, sample) of -log softmax over branches at the sample's (y, a) cell."""
    protos = Tensor(_cell_protos(bank, y, a))      # constants: (N, B, d_p)
    terms = []
    for bi, b in enumerate(BRANCHES):
        sims = nx.tsum(nx.broadcast_to(r[b].reshape(r[b].shape[0], 1, r[b].shape[1]), protos.shape) * protos,
                       axis=-1) * (1.0 / bank.phi)                 # (N, B)
        terms.append(nx.log_softmax(sims, axis=-1)[:, bi])
    return -nx.mean(nx.concat(terms, axis=0))


def separability_loss(bank: PrototypeBank) -> Tensor:
    sa, ta = bank.mu[:, :, 0], bank.mu[:, :, 1]
    return Tensor(np.mean(np.sum(sa * ta, axis=-1)) / bank.phi)


def dis_loss(r: dict, y, a, bank: PrototypeBank):
    com = compactness_loss(r, y, a, bank)
    sep = separability_loss(bank)
    return com + bank.lam * sep, com, sep
