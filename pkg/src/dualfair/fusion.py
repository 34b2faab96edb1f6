"""Text-anchor-guided cross-attention producing instance-aware visual prompts."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .anchors import AnchorSet
from .encoders import VisionEncoder, transformer_block
from .errors import DimensionError, InputError
from .numerics import Tensor


class FusionHead:
    """Trainable cross-attention parameters for one branch."""

    def __init__(self, n_classes: int, d_vl: int, d_v: int, d_k: int, rng, d_attr: int | None = None):
        if d_k <= 0:
            raise DimensionError("d_k must be positive")
        d_attr = d_vl if d_attr is None else d_attr
        self.d_k = d_k
        self.n_classes = n_classes
        p = nx.parameter
        self.attr_emb = p(rng.normal(0, 0.02, (n_classes, d_attr)))
        self.fc_w = p(rng.normal(0, 1 / np.sqrt(d_vl + d_attr), (d_vl + d_attr, d_v)))
        self.fc_b = p(np.zeros(d_v))
        self.w_q = p(rng.normal(0, 1 / np.sqrt(d_v), (d_v, d_k)))
        self.w_k = p(rng.normal(0, 1 / np.sqrt(d_v), (d_v, d_k)))
        self.w_v = p(rng.normal(0, 1 / np.sqrt(d_v), (d_v, d_v)))
        self.ln_g = p(np.ones(d_v))
        self.ln_b = p(np.zeros(d_v))

    def named_parameters(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in
                ("attr_emb", "fc_w", "fc_b", "w_q", "w_k", "w_v", "ln_g", "ln_b")}


def anchor_queries(anchors, head: FusionHead, branch: str | None = None) -> Tensor:
    """q_c = FC([anchor_c ; attribute_embedding_c]) for every class c of a branch.

    ``anchors`` is either an AnchorSet (with ``branch``) or the (C, d_vl)
    anchor matrix itself.
    """
    if isinstance(anchors, AnchorSet):
        if branch not in ("SA", "TA"):
            raise InputError(f"branch must be 'SA' or 'TA', got {branch!r}")
        anchors = anchors.for_branch(branch)
    if anchors.shape[0] != head.n_classes:
        raise DimensionError(
            f"{anchors.shape[0]} anchor rows but the head has {head.n_classes} attribute embeddings"
        )
    x = nx.concat([anchors, head.attr_emb], axis=1)
    return x @ head.fc_w + head.fc_b


def attention_weights(q: Tensor, seq: Tensor, head: FusionHead) -> Tensor:
    if seq.shape[-2] < 1:
        raise InputError("cross-attention over an empty sequence")
    scores = (q @ head.w_q) @ (seq @ head.w_k).T
    return nx.softmax(scores * (1.0 / np.sqrt(head.d_k)), axis=-1)


def cross_attend(q: Tensor, seq: Tensor, head: FusionHead) -> Tensor:
    """softmax((q W_q)(k W_k)^T / sqrt(d_k)) (k W_v); ``seq`` may carry batch dims."""
    seq = nx.as_tensor(seq)
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise InputError("cross-attention over an empty sequence")
    if q.shape[-1] != seq.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {seq.shape[-1]}")
    return attention_weights(q, seq, head) @ (seq @ head.w_v)


def instance_prompts(o: Tensor, q: Tensor, head: FusionHead, eps: float = 1e-5) -> Tensor:
    if o.shape[-2:] != q.shape[-2:]:
        raise DimensionError(f"instance_prompts: shapes {o.shape} and {q.shape} differ")
    return nx.layer_norm(o + q, head.ln_g, head.ln_b, eps)


def final_layer_forward(cls: Tensor, prompts: Tensor, patch_states: Tensor, enc: VisionEncoder,
                        layer_index: int | None = None) -> Tensor:
    """Run the last (or given) visual layer on [cls, prompts, E] and project cls to d_vl."""
    layer_index = enc.n_layers if layer_index is None else layer_index
    if cls.shape[-1] != enc.dims.d_v or patch_states.shape[-1] != enc.dims.d_v:
        raise DimensionError("cls / patch widths do not match d_v")
    lead = patch_states.shape[:-2]
    parts = [cls]
    if prompts is not None and prompts.shape[-2] > 0:
        parts.append(nx.broadcast_to(prompts, lead + prompts.shape[-2:]))
    parts.append(patch_states)
    out = transformer_block(nx.concat(parts, axis=-2), enc.layers[layer_index - 1])
    return enc.project(out[..., 0, :])
