"""Global hypernetwork emitting branch- and layer-specific low-rank prompt adapters."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .config import SHARING_MODES
from .errors import DimensionError, InputError
from .numerics import Tensor

BRANCHES = ("SA", "TA")


class HyperNetwork:
    def __init__(self, d_v: int, n_layers: int, d_vl: int, idx_in: int, idx_dim: int,
                 idx_hidden: int, hidden: int, rng, share_index_mlp: bool = True,
                 sharing: str = "combined"):
        if sharing not in SHARING_MODES:
            raise InputError(f"sharing must be one of {SHARING_MODES}")
        p = nx.parameter
        self.d_v, self.hidden, self.idx_dim, self.n_layers = d_v, hidden, idx_dim, n_layers
        self.sharing = sharing
        self.H_U = p(rng.normal(0, 0.02, (hidden * d_v, idx_dim)))
        self.H_D = p(rng.normal(0, 0.02, (d_v * hidden, idx_dim)))
        self.branch_emb = {b: p(rng.normal(0, 1.0, idx_in)) for b in BRANCHES}
        self.layer_emb = {b: p(rng.normal(0, 1.0, (n_layers, idx_in))) for b in BRANCHES}
        self.ctx_w = {b: p(rng.normal(0, 1 / np.sqrt(d_vl), (d_vl, idx_in))) for b in BRANCHES}
        self.ctx_b = {b: p(np.zeros(idx_in)) for b in BRANCHES}
        mlps = [self._mlp(rng, 2 * idx_in, idx_hidden, idx_dim)]
        if not share_index_mlp:
            mlps.append(self._mlp(rng, 2 * idx_in, idx_hidden, idx_dim))
        self.index_mlp = {"SA": mlps[0], "TA": mlps[-1]}
        self.share_index_mlp = share_index_mlp

    @staticmethod
    def _mlp(rng, n_in, n_hidden, n_out):
        p = nx.parameter
        return {"w1": p(rng.normal(0, np.sqrt(2.0 / n_in), (n_in, n_hidden))), "b1": p(np.zeros(n_hidden)),
                "w2": p(rng.normal(0, np.sqrt(1.0 / n_hidden), (n_hidden, n_out))), "b2": p(np.zeros(n_out))}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"H_U": self.H_U, "H_D": self.H_D}
        for b in BRANCHES:
            out[f"branch_emb/{b}"] = self.branch_emb[b]
            out[f"layer_emb/{b}"] = self.layer_emb[b]
            out[f"ctx_w/{b}"] = self.ctx_w[b]
            out[f"ctx_b/{b}"] = self.ctx_b[b]
        for b in (BRANCHES if not self.share_index_mlp else ("SA",)):
            tag = "index_mlp" if self.share_index_mlp else f"index_mlp/{b}"
            for k, v in self.index_mlp[b].items():
                out[f"{tag}/{k}"] = v
        return out


def index_mlp(x: Tensor, mlp: dict) -> Tensor:
    x = x.reshape(1, -1)
    out = nx.relu(x @ mlp["w1"] + mlp["b1"]) @ mlp["w2"] + mlp["b2"]
    return out.reshape(-1)


def build_index_embedding(branch: str, layer: int, anchor_context, hn: HyperNetwork,
                          final_layer: int | None = None) -> Tensor:
    """I_l^b: layer-aware context below the instance layer, anchor context at it.

    The sharing mode of ``hn`` picks which construction applies where:
    ``layer-aware`` always uses [t^b ; e_l^b], ``instance-aware`` always uses
    the anchor-conditioned t-hat^b, ``combined`` switches at ``final_layer``.
    """
    if branch not in BRANCHES:
        raise InputError(f"unknown branch {branch!r}")
    final_layer = hn.n_layers if final_layer is None else final_layer
    if not 1 <= layer <= hn.n_layers:
        raise DimensionError(f"layer {layer} outside [1, {hn.n_layers}]")
    use_instance = {"layer-aware": False, "instance-aware": True,
                    "combined": layer == final_layer}[hn.sharing]
    t = hn.branch_emb[branch]
    if use_instance:
        if anchor_context is None:
            raise InputError(f"anchor context required for the instance-aware index at layer {layer}")
        ctx = nx.as_tensor(anchor_context).reshape(1, -1) @ hn.ctx_w[branch] + hn.ctx_b[branch]
        ctx = ctx.reshape(-1)
        x = nx.concat([t, ctx], axis=0)
    else:
        x = nx.concat([t, hn.layer_emb[branch][layer - 1]], axis=0)
    return index_mlp(x, hn.index_mlp[branch])


def generate_adapter(index_embedding: Tensor, hn: HyperNetwork):
    """(U, D) = (H_U I, H_D I) reshaped to (h, d_v) and (d_v, h), row-major."""
    if index_embedding.shape != (hn.idx_dim,):
        raise DimensionError(f"index embedding must have shape ({hn.idx_dim},), got {index_embedding.shape}")
    col = index_embedding.reshape(hn.idx_dim, 1)
    U = (hn.H_U @ col).reshape(hn.hidden, hn.d_v)
    D = (hn.H_D @ col).reshape(hn.d_v, hn.hidden)
    return U, D


def adapt_prompts(prompts: Tensor, U: Tensor, D: Tensor) -> Tensor:
    """p-hat = ReLU(p D) U, applied per prompt token (rows of ``prompts``)."""
    if prompts.shape[-1] != D.shape[0] or D.shape[1] != U.shape[0] or U.shape[1] != prompts.shape[-1]:
        raise DimensionError(f"adapt_prompts: shapes p={prompts.shape}, D={D.shape}, U={U.shape}")
    return nx.relu(prompts @ D) @ U
