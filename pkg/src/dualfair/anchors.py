"""Per-branch text anchors and ridge-regularised removal of the sensitive subspace."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import TextEncoder, encode_text
from .errors import DimensionError, InputError, NumericalError
from .numerics import Tensor


@dataclass
class AnchorSet:
    z_sa: Tensor            # (C_SA, d_vl)
    z_ta: Tensor            # (C_TA, d_vl)
    z_ta_debiased: Tensor   # (C_TA, d_vl)
    alpha: float

    def for_branch(self, branch: str, debiased: bool = True) -> Tensor:
        if branch == "SA":
            return self.z_sa
        if branch == "TA":
            return self.z_ta_debiased if debiased else self.z_ta
        raise InputError(f"unknown branch {branch!r}")


def build_anchors(text_prompts: Tensor, class_names, sensitive_names, enc: TextEncoder,
                  alpha: float | None = None) -> AnchorSet:
    """Encode one row per class name for both branches using the shared prompts.

    With ``alpha`` given the TA rows are debiased immediately; otherwise the
    debiased slot simply mirrors the raw TA rows.
    """
    if not class_names or not sensitive_names:
        raise InputError("both target and sensitive class lists must be non-empty")
    names = list(sensitive_names) + list(class_names)
    z = encode_text([enc.tokenize(n) for n in names], text_prompts, enc)
    n_sa = len(sensitive_names)
    z_sa, z_ta = z[:n_sa], z[n_sa:]
    if alpha is None:
        return AnchorSet(z_sa, z_ta, z_ta, float("nan"))
    return AnchorSet(z_sa, z_ta, ridge_debias(z_sa, z_ta, alpha), float(alpha))


def ridge_debias(z_sa, z_ta, alpha: float) -> Tensor:
    """Return z_TA - S (S^T S + alpha I)^{-1} S^T z_TA with S = z_SA^T.

    Rows of ``z_sa`` span the removed subspace.  Differentiable in both
    arguments.  ``alpha = 0`` gives the exact orthogonal-complement
    projection and needs linearly independent SA rows.
    """
    z_sa, z_ta = nx.as_tensor(z_sa), nx.as_tensor(z_ta)
    if alpha < 0:
        raise InputError(f"alpha must be >= 0, got {alpha}")
    if z_sa.ndim != 2 or z_ta.ndim != 2 or z_sa.shape[1] != z_ta.shape[1]:
        raise DimensionError(f"ridge_debias: shapes {z_sa.shape} and {z_ta.shape} do not match")
    gram = z_sa @ z_sa.T                      # S^T S, (C_SA, C_SA)
    if alpha > 0:
        gram = gram + alpha * np.eye(z_sa.shape[0])
    elif np.linalg.matrix_rank(gram.data) < gram.shape[0]:
        raise NumericalError("singular SA Gram matrix at alpha=0; use alpha > 0")
    try:
        coef = nx.spd_solve(gram, z_sa @ z_ta.T)   # (C_SA, C_TA)
    except NumericalError:
        raise NumericalError("singular SA Gram matrix at alpha=0; use alpha > 0") from None
    s_hat = coef.T @ z_sa                     # (C_TA, d_vl)
    return z_ta - s_hat


def sa_leakage(v, z_sa) -> float:
    """Fraction of ``v``'s norm lying in span of the SA rows, in [0, 1]."""
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64).reshape(-1)
    S = np.asarray(z_sa.data if isinstance(z_sa, Tensor) else z_sa, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0:
        raise InputError("sa_leakage of a zero vector")
    q, r = np.linalg.qr(S.T)
    keep = np.abs(np.diag(r)) > 1e-12 * max(1.0, np.abs(r).max())
    q = q[:, keep]
    return float(min(1.0, np.linalg.norm(q.T @ v) / nv))


def leakage_table(z_sa, z_ta, alphas=(1000, 100, 60, 10, 1, 0.1, 1e-9)):
    """Mean SA leakage of the debiased TA rows for each alpha."""
    rows = []
    for a in alphas:
        deb = ridge_debias(z_sa, z_ta, a).data
        rows.append((float(a), float(np.mean([sa_leakage(t, z_sa) for t in deb]))))
    return rows
