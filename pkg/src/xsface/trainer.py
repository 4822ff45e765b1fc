"""Source-modality pretraining, teacher-regularized adaptation, and Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import objectives
from .backbone import LayerSet, Model, Parameter, Partition, forward_embed
from .errors import InvalidConfigError, InvalidStateError, ProtocolError
from .synthdata import IdentityDataset, Modality, PairSample
from .tensor import Tensor, backward, cross_entropy, l2_normalize, matmul, mul, no_grad, permute, take

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 30
    seed: int = 0
    # cosine-logit scale of the temporary classification head
    scale: float = 16.0

    def validate(self) -> None:
        if self.lr <= 0 or self.batch <= 0 or self.epochs < 0 or self.scale <= 0:
            raise InvalidConfigError(f"invalid PretrainConfig: {self}")


@dataclass(frozen=True)
class AdaptConfig:
    layer_set: LayerSet = field(default_factory=lambda: LayerSet.parse("LN,ST,S0"))
    lam: float = 0.75
    margin: float = 0.0
    lr: float = 1e-4
    batch: int = 64
    epochs: int = 20
    seed: int = 0

    def validate(self) -> None:
        objectives.LossConfig(self.margin, self.lam).validate()
        if self.lr <= 0 or self.batch <= 0 or self.epochs < 0:
            raise InvalidConfigError(f"invalid AdaptConfig: {self}")


class AdamState:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: list[Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of ``params`` in place, using their ``.grad``."""
    for p in params:
        if p.value.grad is None:
            raise InvalidStateError(f"adam_step(): no gradient for trainable parameter '{p.name}'")
    state.step += 1
    t = state.step
    dtype = np.float32
    b1, b2 = dtype(state.beta1), dtype(state.beta2)
    bc1 = dtype(1.0 - state.beta1 ** t)
    bc2 = dtype(1.0 - state.beta2 ** t)
    lr_, eps = dtype(lr), dtype(state.eps)
    for p in params:
        g = p.value.grad.astype(dtype, copy=False)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value.data)
            state.v[p.name] = np.zeros_like(p.value.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.value.data -= lr_ * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for b, start in enumerate(range(0, n, size)):
        yield b, order[start:start + size]


def pretrain(model: Model, dataset: IdentityDataset, ids, cfg: PretrainConfig | None = None,
             history: list | None = None) -> Model:
    """Train every parameter with a cosine-softmax identity head on source images of ``ids``.

    The head is discarded; the returned copy is unpartitioned with all parameters FROZEN.
    ``history`` (if given) receives one mean training loss per epoch.
    """
    cfg = cfg or PretrainConfig()
    cfg.validate()
    ids = sorted(set(int(i) for i in ids))
    indices = dataset.select(ids, Modality.SOURCE)
    have = {dataset.entries[i].identity_id for i in indices}
    missing = [i for i in ids if i not in have]
    if missing:
        raise ProtocolError(f"pretrain(): identities {missing} have no source images")

    out = model.copy()
    if cfg.epochs == 0 or not ids:
        return out
    for p in out.parameters:
        p.value.requires_grad = True
        p.partition = Partition.ADAPTED
    label_of = {ident: k for k, ident in enumerate(ids)}
    images = dataset.stack(indices)
    labels = np.array([label_of[dataset.entries[i].identity_id] for i in indices])

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0x7E])))
    dim = out.config.embed_dim
    bound = np.sqrt(6.0 / dim)
    head = Parameter("pretrain.head", Tensor(rng.uniform(-bound, bound, size=(len(ids), dim)), requires_grad=True),
                     Partition.ADAPTED)
    params = out.parameters + [head]
    state = AdamState()
    for epoch in range(cfg.epochs):
        losses = []
        for _, idx in _batches(len(indices), cfg.batch, rng):
            for p in params:
                p.value.grad = None
            emb = l2_normalize(forward_embed(out, Tensor(images[idx])))
            logits = mul(matmul(emb, permute(l2_normalize(head.value), (1, 0))), cfg.scale)
            loss = cross_entropy(logits, labels[idx])
            backward(loss)
            adam_step(params, state, cfg.lr)
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        log.debug("pretrain epoch %d loss %.4f", epoch + 1, mean_loss)
        if history is not None:
            history.append(mean_loss)

    for p in out.parameters:
        p.value.requires_grad = False
        p.value.grad = None
        p.partition = Partition.FROZEN
    out.layer_set = None
    return out


@dataclass(frozen=True)
class StepLog:
    epoch: int
    batch: int
    l_c: float
    l_sdl: float
    l_total: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.batch}\t{self.l_c:.6f}\t{self.l_sdl:.6f}\t{self.l_total:.6f}"


def format_train_log(history: list[StepLog]) -> str:
    return "".join(s.line() + "\n" for s in history)


def adapt(student: Model, teacher: Model, pairs: list[PairSample], dataset: IdentityDataset,
          cfg: AdaptConfig | None = None, history: list | None = None) -> Model:
    """Adapt a partitioned copy of ``student`` on cross-modal ``pairs`` against a frozen ``teacher``.

    Per batch: ``(1 - lam) * mean contrastive loss over the pairs
    + lam * mean self-distillation loss over the batch's distinct source images``.
    Only LN / ADAPTED parameters move.  ``history`` receives one :class:`StepLog` per batch.
    """
    cfg = cfg or AdaptConfig()
    cfg.validate()
    if student.layer_set is None:
        raise InvalidStateError("adapt(): student has not been partitioned")
    if not pairs:
        raise ProtocolError("adapt(): empty pair list")
    if any(p.value.requires_grad for p in teacher.parameters):
        raise InvalidStateError("adapt(): teacher has trainable parameters; use clone_teacher()")

    out = student.copy()
    trainable = out.trainable_parameters()
    images = dataset.stack()
    src_all = np.array([p.source_index for p in pairs])
    tgt_all = np.array([p.target_index for p in pairs])
    y_all = np.array([p.y for p in pairs], dtype=np.float32)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0xAD])))
    state = AdamState()

    for epoch in range(cfg.epochs):
        for b, idx in _batches(len(pairs), cfg.batch, rng):
            src_u, src_inv = np.unique(src_all[idx], return_inverse=True)
            tgt_u, tgt_inv = np.unique(tgt_all[idx], return_inverse=True)
            e_src = forward_embed(out, Tensor(images[src_u]))
            e_tgt = forward_embed(out, Tensor(images[tgt_u]))
            with no_grad():
                e_teacher = forward_embed(teacher, Tensor(images[src_u]))
            l_c = objectives.contrastive_loss(take(e_src, src_inv), take(e_tgt, tgt_inv), y_all[idx], cfg.margin)
            l_sdl = objectives.self_distillation_loss(e_teacher, e_src)
            total = objectives.total_loss(l_c, l_sdl, cfg.lam)
            if trainable:
                out.zero_grad()
                backward(total)
                adam_step(trainable, state, cfg.lr)
            if history is not None:
                history.append(StepLog(epoch + 1, b + 1, l_c.item(), l_sdl.item(), total.item()))
    for p in out.parameters:
        p.value.grad = None
    return out
