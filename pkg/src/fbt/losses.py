"""Transfer losses: target-enhanced logit loss, contrastive feature loss,
their per-pair sum, and the three-pair total over teacher, fused, and student.

The logit loss is a KL divergence whose target-class term is amplified by
(1 + p_t[target])^gamma; gamma = 0 recovers plain KL exactly. The feature loss
is InfoNCE over L2-normalized projections: the same-image teacher embedding is
the positive, the other in-batch teacher embeddings are the negatives, and the
temperature is a learnable parameter. The teacher-role side of every pair is
detached, so gradients never reach the model being imitated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import Linear, Module
from .models import Knowledge
from .tensor import NumericsError, Parameter, ShapeError, Tensor

PROB_FLOOR = 1e-12
TAU_FLOOR = 1e-3


@dataclass
class LossConfig:
    gamma: float = 1.0                 # target-term modulation exponent
    kd_temperature: float = 1.0        # softening temperature for both logit rows
    tau_init: float = 0.07             # initial contrastive temperature
    embed_dim: int = 128               # common projection width for features
    pair_weights: tuple = (1.0, 1.0, 1.0)  # (teacher-student, teacher-fused, fused-student)
    ce_weight: float = 1.0             # ground-truth term on student and fused logits
    ofa_weight: float = 1.0
    infonce_weight: float = 1.0
    detach_fused_teacher: bool = True  # detach the fused side of the fused-student pair

    def validate(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.tau_init <= 0 or self.kd_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if len(self.pair_weights) != 3 or any(w < 0 for w in self.pair_weights):
            raise ValueError("pair_weights must be three nonnegative reals")
        if min(self.ce_weight, self.ofa_weight, self.infonce_weight) < 0:
            raise ValueError("loss weights must be nonnegative")
        return self


class ProjectionHead(Module):
    """Linear map into the shared embedding space, L2-normalized rows."""

    def __init__(self, in_features: int, embed_dim: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Linear(in_features, embed_dim, rng)

    def forward(self, x, train: bool = False):
        return T.l2_normalize(self.proj(x), axis=-1)


class LearnableTemperature(Module):
    """Contrastive temperature stored as a log so it stays positive."""

    def __init__(self, tau_init: float = 0.07):
        super().__init__()
        self.log_tau = Parameter(np.log(np.asarray([tau_init])))

    def value(self) -> Tensor:
        return T.exp(self.log_tau)

    def clamp(self):
        floor = np.log(TAU_FLOOR)
        np.maximum(self.log_tau.data, floor, out=self.log_tau.data)

    def item(self) -> float:
        return float(np.exp(self.log_tau.data[0]))


def _soft_probs(logits: Tensor, temperature: float) -> Tensor:
    scaled = T.mul(logits, 1.0 / temperature) if temperature != 1.0 else logits
    return T.softmax(scaled, axis=1)


def ofa_loss(p_teacher: Tensor, p_student: Tensor, targets, gamma: float = 1.0,
             temperature: float = 1.0, detach_teacher: bool = True) -> Tensor:
    """Target-enhanced KL between softened teacher and student logit rows.

    Per sample: (1 + q_t[c*])^gamma * q_t[c*] * log(q_t[c*]/q_s[c*])
    + sum over other classes of q_t[c] * log(q_t[c]/q_s[c]), averaged over
    the batch, where q = softmax(logits / temperature) and c* is the label.
    By default differentiable in the student logits only.
    """
    targets = np.asarray(targets)
    if p_teacher.ndim != 2 or p_student.ndim != 2 or p_teacher.shape != p_student.shape:
        raise ShapeError(f"ofa_loss: logit shapes {p_teacher.shape} and {p_student.shape} must match (batch, classes)")
    n, c = p_student.shape
    if targets.shape != (n,):
        raise ShapeError(f"ofa_loss: targets shape {targets.shape} does not match batch {n}")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"ofa_loss: target outside [0, {c})")

    q_t = _soft_probs(p_teacher.detach() if detach_teacher else p_teacher, temperature)
    q_s = _soft_probs(p_student, temperature)

    onehot = np.zeros((n, c), dtype=q_s.data.dtype)
    onehot[np.arange(n), targets] = 1.0
    hot = Tensor(onehot)
    tgt_prob = T.sum_(T.mul(q_t, hot), axis=1, keepdims=True)
    enhance = T.pow_const(T.add(tgt_prob, 1.0), gamma)
    weights = T.add(T.mul(q_t, T.sub(Tensor(np.ones_like(onehot)), hot)),
                    T.mul(hot, T.mul(enhance, tgt_prob)))
    log_ratio = T.sub(T.log(T.add(q_t, PROB_FLOOR)), T.log(T.add(q_s, PROB_FLOOR)))
    return T.mean(T.sum_(T.mul(weights, log_ratio), axis=1))


def infonce_loss(f_learner: Tensor, f_teacher: Tensor, tau) -> Tensor:
    """Contrastive alignment of same-image embeddings within a batch.

    Both inputs must be L2-normalized (batch, dim) rows; ``tau`` may be a
    learnable scalar tensor. Row i of ``f_learner`` is pulled toward row i of
    ``f_teacher`` and pushed from the other rows. Gradient flows into the
    learner embeddings and the temperature only when the teacher side is
    detached by the caller.
    """
    if f_learner.ndim != 2 or f_teacher.ndim != 2 or f_learner.shape != f_teacher.shape:
        raise ShapeError(f"infonce_loss: embedding shapes {f_learner.shape} and {f_teacher.shape} must match")
    b = f_learner.shape[0]
    if b == 0:
        raise ValueError("infonce_loss: empty batch")
    if T.verification_enabled():
        for name, t in (("learner", f_learner), ("teacher", f_teacher)):
            norms = np.linalg.norm(t.data, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-4):
                raise NumericsError(f"infonce_loss: {name} rows are not L2-normalized")
    if not isinstance(tau, Tensor):
        tau = Tensor(np.asarray([float(tau)]))
    sim = T.matmul(f_learner, T.transpose(f_teacher))
    logits = T.div(sim, tau)
    return T.cross_entropy(logits, np.arange(b))


def pair_loss(k_teacher: Knowledge, k_learner: Knowledge, targets,
              head_teacher: ProjectionHead, head_learner: ProjectionHead,
              tau: Tensor, cfg: LossConfig, detach_teacher: bool = True) -> tuple[Tensor, dict]:
    """One transfer pair: feature loss plus logit loss, teacher side detached.

    Returns the weighted sum and the weighted components for logging.
    """
    if k_teacher.p.shape[0] != k_learner.p.shape[0]:
        raise ShapeError(f"pair_loss: batch mismatch {k_teacher.p.shape} vs {k_learner.p.shape}")
    comps = {}
    total = None
    if cfg.infonce_weight > 0.0:
        emb_t = head_teacher(k_teacher.f)
        if detach_teacher:
            emb_t = emb_t.detach()
        emb_l = head_learner(k_learner.f)
        nce = T.mul(infonce_loss(emb_l, emb_t, tau), cfg.infonce_weight)
        comps["nce"] = nce
        total = nce
    else:
        comps["nce"] = None
    if cfg.ofa_weight > 0.0:
        ofa = T.mul(ofa_loss(k_teacher.p, k_learner.p, targets, gamma=cfg.gamma,
                             temperature=cfg.kd_temperature,
                             detach_teacher=detach_teacher), cfg.ofa_weight)
        comps["ofa"] = ofa
        total = ofa if total is None else T.add(total, ofa)
    else:
        comps["ofa"] = None
    if total is None:
        total = Tensor(np.zeros(()))
    return total, comps


@dataclass
class LossBreakdown:
    """Per-term weighted values, in the same units as the total."""

    ofa_ts: float = 0.0
    ofa_tf: float = 0.0
    ofa_fs: float = 0.0
    nce_ts: float = 0.0
    nce_tf: float = 0.0
    nce_fs: float = 0.0
    ce: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class TransferHeads(Module):
    """Projection heads for teacher, fused, and student plus the temperature."""

    def __init__(self, teacher_width: int, fused_width: int, student_width: int,
                 cfg: LossConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.teacher = ProjectionHead(teacher_width, cfg.embed_dim, rng)
        self.fused = ProjectionHead(fused_width, cfg.embed_dim, rng)
        self.student = ProjectionHead(student_width, cfg.embed_dim, rng)
        self.temperature = LearnableTemperature(cfg.tau_init)
        self.assign_parameter_names("transfer.")


def fbt_loss(k_t: Knowledge, k_f: Optional[Knowledge], k_s: Knowledge, targets,
             heads: TransferHeads, cfg: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """Three-pair transfer total plus optional ground-truth cross-entropy.

    total = w1*L(teacher, student) + w2*L(teacher, fused) + w3*L(fused, student)
          + ce_weight*(CE(student) + CE(fused))
    The first argument of each pair plays the teacher role and is detached
    (the fused side of the last pair obeys ``cfg.detach_fused_teacher``).
    """
    w1, w2, w3 = cfg.pair_weights
    tau = heads.temperature.value()
    terms: list[Tensor] = []
    bd = LossBreakdown()

    def run_pair(weight, k_a, k_b, head_a, head_b, detach=True):
        if weight <= 0.0 or k_a is None or k_b is None:
            return 0.0, 0.0
        loss, comps = pair_loss(k_a, k_b, targets, head_a, head_b, tau, cfg,
                                detach_teacher=detach)
        weighted = T.mul(loss, weight) if weight != 1.0 else loss
        terms.append(weighted)
        ofa = float(comps["ofa"].data) * weight if comps["ofa"] is not None else 0.0
        nce = float(comps["nce"].data) * weight if comps["nce"] is not None else 0.0
        return ofa, nce

    bd.ofa_ts, bd.nce_ts = run_pair(w1, k_t, k_s, heads.teacher, heads.student)
    bd.ofa_tf, bd.nce_tf = run_pair(w2, k_t, k_f, heads.teacher, heads.fused)
    bd.ofa_fs, bd.nce_fs = run_pair(w3, k_f, k_s, heads.fused, heads.student,
                                    detach=cfg.detach_fused_teacher)

    if cfg.ce_weight > 0.0:
        ce = T.cross_entropy(k_s.p, targets)
        if k_f is not None:
            ce = T.add(ce, T.cross_entropy(k_f.p, targets))
        ce = T.mul(ce, cfg.ce_weight)
        terms.append(ce)
        bd.ce = float(ce.data)

    if not terms:
        total = Tensor(np.zeros(()))
    else:
        total = terms[0]
        for t in terms[1:]:
            total = T.add(total, t)
    bd.total = float(total.data)
    return total, bd
