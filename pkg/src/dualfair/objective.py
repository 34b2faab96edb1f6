"""Dual-branch model, total objective, AdamW and the train / evaluate loops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .anchors import AnchorSet, build_anchors, ridge_debias
from .config import TrainConfig
from .datagen import Dataset
from .disentangle import BRANCHES, PrototypeBank, ProjectionHead, dis_loss, project_normalize
from .encoders import TextEncoder, VisionEncoder, embed_patches, initial_state, split_state, vision_layer_forward
from .errors import EvaluationError, InputError
from .fairmetrics import PredictionRecord
from .fusion import FusionHead, anchor_queries, cross_attend, final_layer_forward, instance_prompts
from .hypernet import HyperNetwork, adapt_prompts, build_index_embedding, generate_adapter
from .numerics import Tensor


class DualFairModel:
    """Frozen encoders plus every trainable block, switched by the config's toggles."""

    def __init__(self, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        self.dims = dims = cfg.dims()
        self.vision = VisionEncoder(dims, seed=cfg.encoder_seed)
        self.text = TextEncoder(dims, seed=cfg.encoder_seed)
        self.ta_names, self.sa_names = cfg.ta_classes, cfg.sa_classes
        if len(self.ta_names) != 2 or len(self.sa_names) != 2:
            raise InputError("binary target and sensitive attributes are required")
        rng = np.random.default_rng([cfg.seed, 101])
        K, L = cfg.prompt_len, dims.n_vis_layers
        self.instance_layer = cfg.resolved_instance_layer()
        self.params: dict[str, Tensor] = {}
        self.params["text_prompts"] = nx.parameter(rng.normal(0, 0.02, (K, dims.d_t)))
        for b in BRANCHES:
            self.params[f"vis_prompts/{b}"] = nx.parameter(rng.normal(0, 1.0, (L, K, dims.d_v)))
        self.fusion = {}
        if cfg.use_attn:
            for b in BRANCHES:
                n_c = len(self.sa_names if b == "SA" else self.ta_names)
                self.fusion[b] = FusionHead(n_c, dims.d_vl, dims.d_v, dims.d_k, rng)
                self.params.update({f"fusion/{b}/{k}": v for k, v in self.fusion[b].named_parameters().items()})
        self.hyper = None
        if cfg.use_hyper:
            self.hyper = HyperNetwork(dims.d_v, L, dims.d_vl, dims.idx_in, dims.idx_dim, dims.idx_hidden,
                                      dims.adapter_hidden, rng, share_index_mlp=cfg.share_index_mlp,
                                      sharing=cfg.sharing)
            self.params.update({f"hyper/{k}": v for k, v in self.hyper.named_parameters().items()})
        self.proj_head = None
        if cfg.use_dis:
            self.proj_head = ProjectionHead(dims.d_vl, dims.proj_hidden, dims.d_p, rng)
            self.params.update({f"proj/{k}": v for k, v in self.proj_head.named_parameters().items()})
        self.bank = PrototypeBank(2, 2, dims.d_p, rng, beta=cfg.beta, phi=cfg.phi, lam=cfg.lam)

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def frozen_fingerprint(self) -> str:
        return self.vision.fingerprint() + self.text.fingerprint()

    # -- forward -----------------------------------------------------------------
    def anchors(self) -> AnchorSet:
        cfg = self.cfg
        raw = build_anchors(self.params["text_prompts"], self.ta_names, self.sa_names, self.text)
        if not cfg.use_proj:
            return AnchorSet(raw.z_sa, raw.z_ta, raw.z_ta, float("nan"))
        if cfg.stop_grad_anchors:
            s_hat = raw.z_ta.data - ridge_debias(raw.z_sa.data, raw.z_ta.data, cfg.alpha).data
            deb = raw.z_ta - Tensor(s_hat)
        else:
            deb = ridge_debias(raw.z_sa, raw.z_ta, cfg.alpha)
        return AnchorSet(raw.z_sa, raw.z_ta, deb, cfg.alpha)

    def _prompt_for_layer(self, b, layer, state, slots, anchor_b):
        if layer == self.instance_layer and self.cfg.use_attn:
            head = self.fusion[b]
            cls, E = split_state(state, slots)
            kv = nx.concat([cls, E], axis=-2)
            q = anchor_queries(anchor_b, head)
            p = instance_prompts(cross_attend(q, kv, head), q, head)
        else:
            p = self.params[f"vis_prompts/{b}"][layer - 1]
        if self.hyper is not None:
            ctx = nx.mean(anchor_b, axis=0)
            idx = build_index_embedding(b, layer, ctx, self.hyper, final_layer=self.instance_layer)
            U, D = generate_adapter(idx, self.hyper)
            p = adapt_prompts(p, U, D)
        return p

    def branch_forward(self, E0: Tensor, b: str, anchor_b: Tensor) -> Tensor:
        L = self.dims.n_vis_layers
        state, slots = initial_state(E0, self.vision), 0
        for layer in range(1, L):
            p = self._prompt_for_layer(b, layer, state, slots, anchor_b)
            state = vision_layer_forward(state, layer, p, self.vision, slots)
            slots = p.shape[-2]
        p = self._prompt_for_layer(b, L, state, slots, anchor_b)
        cls, E = split_state(state, slots)
        return final_layer_forward(cls, p, E, self.vision, L)

    def forward(self, patches: np.ndarray, branches=BRANCHES):
        anchors = self.anchors()
        E0 = embed_patches(Tensor(patches), self.vision)
        z_v = {b: self.branch_forward(E0, b, anchors.for_branch(b)) for b in branches}
        return z_v, anchors


def branch_ce(z_v: Tensor, anchors: Tensor, labels, tau: float) -> Tensor:
    """Mean cross-entropy of cosine-similarity logits scaled by 1/tau."""
    z_v = nx.as_tensor(z_v)
    single = z_v.ndim == 1
    if single:
        z_v = z_v.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= anchors.shape[0]:
        raise InputError(f"labels must lie in [0, {anchors.shape[0]})")
    logits = nx.l2_normalize(z_v) @ nx.l2_normalize(anchors).T * (1.0 / tau)
    logp = nx.log_softmax(logits, axis=-1)
    return -nx.mean(logp[np.arange(len(labels)), labels])


def class_scores(z_v: Tensor, anchors: Tensor, tau: float) -> np.ndarray:
    logits = nx.l2_normalize(z_v) @ nx.l2_normalize(anchors).T * (1.0 / tau)
    return nx.softmax(logits, axis=-1).data


@dataclass
class LossBreakdown:
    total: Tensor
    ce_ta: float
    ce_sa: float
    com: float
    sep: float
    r: dict | None

    def record(self) -> dict:
        return {"L_total": float(self.total.data), "L_ce_ta": self.ce_ta, "L_ce_sa": self.ce_sa,
                "L_com": self.com, "L_sep": self.sep}


def total_loss(model: DualFairModel, patches, y, a) -> LossBreakdown:
    """L = CE_TA + w_SA * CE_SA + delta * (L_com + lambda * L_sep)."""
    cfg = model.cfg
    z_v, anchors = model.forward(patches)
    ce_ta = branch_ce(z_v["TA"], anchors.for_branch("TA"), y, cfg.tau)
    ce_sa = branch_ce(z_v["SA"], anchors.for_branch("SA"), a, cfg.tau)
    total = ce_ta + cfg.sa_loss_weight * ce_sa
    com = sep = 0.0
    r = None
    if model.proj_head is not None:
        r = {b: project_normalize(z_v[b], model.proj_head) for b in BRANCHES}
        dis, com_t, sep_t = dis_loss(r, y, a, model.bank)
        com, sep = float(com_t.data), float(sep_t.data)
        if cfg.delta != 0:
            total = total + cfg.delta * dis
    return LossBreakdown(total, float(ce_ta.data), float(ce_sa.data), com, sep, r)


class AdamW:
    """Adaptive moments with decoupled weight decay (p <- p - lr*wd*p before the step)."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grads(self):
        nx.zero_grads(self.params.values())

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if self.lr == 0:
                continue
            p.data *= 1 - self.lr * self.weight_decay
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class TrainState:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.model = DualFairModel(cfg)
        self.opt = AdamW(self.model.params, cfg.lr, cfg.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 202])
        self.epoch = 0
        self.batch_in_epoch = 0
        self.step = 0
        self.epoch_rng_state = self.rng.bit_generator.state

    @property
    def bank(self) -> PrototypeBank:
        return self.model.bank


def train_step(state: TrainState, patches, y, a) -> dict:
    if len(y) == 0:
        raise InputError("empty batch")
    model = state.model
    state.opt.zero_grads()
    out = total_loss(model, patches, y, a)
    rec = out.record()
    if not all(np.isfinite(v) for v in rec.values()):
        raise EvaluationError("non-finite loss: " + ", ".join(f"{k}={v!r}" for k, v in rec.items()))
    nx.backward(out.total)
    state.opt.step()
    if out.r is not None:
        model.bank.ema_update(out.r, y, a)
    state.step += 1
    rec = {"step": state.step, **rec}
    return rec


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train(state: TrainState, data: Dataset, epochs: int | None = None, log=None,
          stop_at_step: int | None = None):
    """Run seeded-shuffle epochs until ``epochs`` complete (or ``stop_at_step``).

    The generator state at the start of the current epoch is kept so a
    checkpoint taken mid-epoch replays the same permutation on resume.
    """
    epochs = state.cfg.epochs if epochs is None else epochs
    records = []
    while state.epoch < epochs:
        if state.batch_in_epoch == 0:
            state.epoch_rng_state = state.rng.bit_generator.state
        else:
            state.rng.bit_generator.state = state.epoch_rng_state
        batches = _epoch_batches(len(data), state.cfg.batch_size, state.rng)
        while state.batch_in_epoch < len(batches):
            if stop_at_step is not None and state.step >= stop_at_step:
                return records
            idx = batches[state.batch_in_epoch]
            rec = train_step(state, data.patches[idx], data.y[idx], data.a[idx])
            rec["epoch"] = state.epoch
            state.batch_in_epoch += 1
            records.append(rec)
            if log is not None:
                log(rec)
        state.epoch += 1
        state.batch_in_epoch = 0
    return records


def evaluate(model: DualFairModel, data: Dataset, batch_size: int = 256):
    """TA-branch class probabilities for every sample plus prediction records."""
    if len(data) == 0:
        raise InputError("cannot evaluate an empty dataset")
    scores = []
    with nx.no_grad():
        anchors = model.anchors()
        anchor_ta = anchors.for_branch("TA")
        for i in range(0, len(data), batch_size):
            E0 = embed_patches(Tensor(data.patches[i:i + batch_size]), model.vision)
            z = model.branch_forward(E0, "TA", anchor_ta)
            scores.append(class_scores(z, anchor_ta, model.cfg.tau))
    probs = np.concatenate(scores, axis=0)
    hard = probs.argmax(axis=1)
    records = [PredictionRecord(int(data.ids[i]), float(probs[i, 1]), int(hard[i]), int(data.y[i]),
                                int(data.a[i]), int(data.domain[i])) for i in range(len(data))]
    return probs, records


def format_log(rec: dict) -> str:
    keys = ["step", "epoch", "L_total", "L_ce_ta", "L_ce_sa", "L_com", "L_sep"]
    return " ".join(f"{k}={rec[k]!r}" for k in keys if k in rec)
