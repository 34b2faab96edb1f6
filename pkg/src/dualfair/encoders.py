"""Frozen toy vision and text transformers with prompt-injection slots.

Both encoders are pre-LN single-head transformers whose weights are drawn
once from a seeded normal and never trained.  Gradients still flow through
them into injected prompts.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import Dims
from .errors import DimensionError, InputError
from .numerics import Tensor

EOS = "<eos>"
TEMPLATE = ("a", "scan", "of", "a", "{}", "patient")


@dataclass
class ImageInput:
    patches: np.ndarray   # (M, d_patch)
    y: int
    a: int
    domain: int = 0
    id: int = 0


def _frozen(arr) -> Tensor:
    return Tensor(arr)


def _orthonormal(rng, n_in, n_out, gain=1.0) -> np.ndarray:
    """(n_in, n_out) matrix with orthonormal rows or columns, whichever fits."""
    g = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w


def _block_weights(rng, d, mlp_ratio, std):
    h = d * mlp_ratio
    return {
        "ln1_g": _frozen(np.ones(d)), "ln1_b": _frozen(np.zeros(d)),
        "wq": _frozen(rng.normal(0, std, (d, d))),
        "wk": _frozen(rng.normal(0, std, (d, d))),
        "wv": _frozen(rng.normal(0, std, (d, d))),
        "wo": _frozen(rng.normal(0, std, (d, d))),
        "ln2_g": _frozen(np.ones(d)), "ln2_b": _frozen(np.zeros(d)),
        "w1": _frozen(rng.normal(0, std, (d, h))),
        "w2": _frozen(rng.normal(0, std, (h, d))),
    }


def transformer_block(x: Tensor, w: dict) -> Tensor:
    """Pre-LN single-head self-attention block over the second-to-last axis."""
    d = x.shape[-1]
    hx = nx.layer_norm(x, w["ln1_g"], w["ln1_b"])
    q, k, v = hx @ w["wq"], hx @ w["wk"], hx @ w["wv"]
    att = nx.softmax((q @ k.T) * (1.0 / np.sqrt(d)), axis=-1)
    x = x + (att @ v) @ w["wo"]
    hx = nx.layer_norm(x, w["ln2_g"], w["ln2_b"])
    return x + nx.gelu(hx @ w["w1"]) @ w["w2"]


class _Frozen:
    def named_weights(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.named_weights().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def load_weights(self, weights: dict[str, np.ndarray]):
        own = self.named_weights()
        for name, t in own.items():
            if name not in weights:
                raise InputError(f"missing encoder weight {name!r}")
            if weights[name].shape != t.shape:
                raise DimensionError(f"{name}: expected {t.shape}, got {weights[name].shape}")
            t.data = np.array(weights[name], dtype=np.float64)


class VisionEncoder(_Frozen):
    def __init__(self, dims: Dims, seed: int = 1234):
        rng = np.random.default_rng([seed, 1])
        self.dims = dims
        d = dims.d_v
        self.patch_proj = _frozen(_orthonormal(rng, dims.d_patch, d))
        self.cls_seed = _frozen(rng.normal(0, dims.weight_std, d))
        self.layers = [_block_weights(rng, d, dims.mlp_ratio, dims.weight_std)
                       for _ in range(dims.n_vis_layers)]
        self.ln_post_g, self.ln_post_b = _frozen(np.ones(d)), _frozen(np.zeros(d))
        self.image_proj = _frozen(_orthonormal(rng, d, dims.d_vl))
        self.image_proj_b = _frozen(np.zeros(dims.d_vl)) if dims.proj_bias else None

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def named_weights(self):
        out = {"vision/patch_proj": self.patch_proj, "vision/cls_seed": self.cls_seed,
               "vision/ln_post_g": self.ln_post_g, "vision/ln_post_b": self.ln_post_b,
               "vision/image_proj": self.image_proj}
        if self.image_proj_b is not None:
            out["vision/image_proj_b"] = self.image_proj_b
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"vision/layer{i + 1}/{k}"] = v
        return out

    def project(self, cls: Tensor) -> Tensor:
        z = nx.layer_norm(cls, self.ln_post_g, self.ln_post_b) @ self.image_proj
        return z + self.image_proj_b if self.image_proj_b is not None else z


def embed_patches(patches, enc: VisionEncoder) -> Tensor:
    """E_0 = patches @ W_patch for one (M, d_patch) grid or a batch of them."""
    if isinstance(patches, ImageInput):
        patches = patches.patches
    patches = nx.as_tensor(patches)
    dims = enc.dims
    if patches.shape[-1] != dims.d_patch or patches.shape[-2] != dims.n_patches:
        raise DimensionError(
            f"expected patches (..., {dims.n_patches}, {dims.d_patch}), got {patches.shape}"
        )
    return patches @ enc.patch_proj


def initial_state(E0: Tensor, enc: VisionEncoder) -> Tensor:
    """[cls_0, E_0] with no prompt slots, batched like ``E0``."""
    lead = E0.shape[:-2]
    cls = nx.broadcast_to(enc.cls_seed, lead + (1, enc.dims.d_v))
    return nx.concat([cls, E0], axis=-2)


def vision_layer_forward(state: Tensor, layer_index: int, prompts, enc: VisionEncoder,
                         n_prompt_slots: int = 0) -> Tensor:
    """Run layer ``layer_index`` (1-based) on [cls, prompts, E].

    ``state`` is the previous layer's output [cls, old prompts, E]; its
    ``n_prompt_slots`` prompt outputs are discarded and replaced by ``prompts``
    (shape (K, d_v) or batched (..., K, d_v)).  Returns [cls, prompt outs, E].
    """
    if not 1 <= layer_index <= enc.n_layers:
        raise DimensionError(f"layer_index {layer_index} outside [1, {enc.n_layers}]")
    dims = enc.dims
    expect = 1 + n_prompt_slots + dims.n_patches
    if state.shape[-2] != expect or state.shape[-1] != dims.d_v:
        raise DimensionError(
            f"state has shape {state.shape}, expected (..., {expect}, {dims.d_v})"
        )
    lead = state.shape[:-2]
    cls = state[..., :1, :]
    E = state[..., 1 + n_prompt_slots:, :]
    parts = [cls]
    if prompts is not None:
        prompts = nx.as_tensor(prompts)
        if prompts.shape[-1] != dims.d_v:
            raise DimensionError(f"prompt width {prompts.shape[-1]} != d_v={dims.d_v}")
        if prompts.shape[-2] > 0:
            parts.append(nx.broadcast_to(prompts, lead + prompts.shape[-2:]))
    parts.append(E)
    seq = nx.concat(parts, axis=-2) if len(parts) > 1 else parts[0]
    return transformer_block(seq, enc.layers[layer_index - 1])


def split_state(state: Tensor, n_prompt_slots: int):
    return state[..., :1, :], state[..., 1 + n_prompt_slots:, :]


class TextEncoder(_Frozen):
    def __init__(self, dims: Dims, seed: int = 1234, template=TEMPLATE):
        rng = np.random.default_rng([seed, 2])
        self.dims = dims
        self.seed = seed
        self.template = tuple(template)
        if self.template.count("{}") != 1:
            raise InputError("template must contain exactly one '{}' slot")
        d = dims.d_t
        self.max_len = 64
        self.pos = _frozen(rng.normal(0, dims.weight_std, (self.max_len, d)))
        self.layers = [_block_weights(rng, d, dims.mlp_ratio, dims.weight_std)
                       for _ in range(dims.n_txt_layers)]
        self.ln_final_g, self.ln_final_b = _frozen(np.ones(d)), _frozen(np.zeros(d))
        gain = dims.text_embed_norm / np.sqrt(dims.d_vl) if dims.d_vl <= d else dims.text_embed_norm / np.sqrt(d)
        self.text_proj = _frozen(_orthonormal(rng, d, dims.d_vl, gain=gain))
        self.text_proj_b = _frozen(np.zeros(dims.d_vl)) if dims.proj_bias else None
        self._vocab: dict[str, np.ndarray] = {}

    def token_embedding(self, word: str) -> np.ndarray:
        """Embedding rows are derived from the word itself, so vocabularies compose."""
        if word not in self._vocab:
            rng = np.random.default_rng([self.seed, 3, zlib.crc32(word.encode())])
            self._vocab[word] = rng.normal(0, self.dims.weight_std, self.dims.d_t)
        return self._vocab[word]

    def tokenize(self, name: str) -> list[str]:
        if not name or not name.strip():
            raise InputError("empty class name")
        return [name if t == "{}" else t for t in self.template] + [EOS]

    def named_weights(self):
        out = {"text/pos": self.pos, "text/ln_final_g": self.ln_final_g,
               "text/ln_final_b": self.ln_final_b, "text/text_proj": self.text_proj}
        if self.text_proj_b is not None:
            out["text/text_proj_b"] = self.text_proj_b
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"text/layer{i + 1}/{k}"] = v
        return out


def encode_text(tokens, prompts: Tensor, enc: TextEncoder) -> Tensor:
    """Projected [EOS] state for one token sequence or a list of them.

    ``tokens`` is a list of words (one sequence) or a list of such lists
    (several sequences of equal length, encoded as one batch).  Learnable
    prompts (K, d_t) are prepended to every sequence.
    """
    single = isinstance(tokens[0], str)
    seqs = [tokens] if single else list(tokens)
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise InputError("sequences in one batch must have equal length")
    for s in seqs:
        if s.count(EOS) != 1:
            raise InputError(f"sequence must contain exactly one {EOS} token: {s}")
    eos_pos = seqs[0].index(EOS)
    if any(s.index(EOS) != eos_pos for s in seqs):
        raise InputError("EOS position must agree across a batch")
    prompts = nx.as_tensor(prompts)
    d = enc.dims.d_t
    if prompts.ndim != 2 or prompts.shape[1] != d:
        raise DimensionError(f"text prompts must be (K, {d}), got {prompts.shape}")
    K = prompts.shape[0]
    n = len(seqs)
    total = K + len(seqs[0])
    if total > enc.max_len:
        raise InputError(f"sequence of length {total} exceeds {enc.max_len}")
    emb = Tensor(np.stack([[enc.token_embedding(w) for w in s] for s in seqs]))
    x = nx.concat([nx.broadcast_to(prompts, (n, K, d)), emb], axis=1)
    x = x + enc.pos[:total]
    for w in enc.layers:
        x = transformer_block(x, w)
    eos = x[:, K + eos_pos, :]
    eos = nx.layer_norm(eos, enc.ln_final_g, enc.ln_final_b)
    z = eos @ enc.text_proj
    if enc.text_proj_b is not None:
        z = z + enc.text_proj_b
    return z[0] if single else z
