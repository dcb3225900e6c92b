"""Training loops: standalone model training, the three-model transfer run,
evaluation, and the ablation/cut-point experiment suites.

One run is fully determined by its configuration and seed: model
initialization, data order, and augmentation all derive from it, so repeated
runs produce identical metrics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetHandle, batches
from .fusion import AblationFlags, FusionSpec, GRID_CELLS, fused_forward, plan_fusion
from .losses import LossBreakdown, LossConfig, TransferHeads, fbt_loss
from .models import Knowledge, ModelConfig, ModelSpec, build_model, extract_knowledge
from .optim import AdamW, SGD, lr_at


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    optimizer: str = "auto"        # auto: sgd for cnn students, adamw otherwise
    lr: float = 0.0                # 0 -> family default (0.05 sgd, 1e-3 adamw)
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    warmup_frac: float = 0.05
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 1
    augment: bool = True
    record_wall_time: bool = False  # keep the metrics CSV byte-reproducible


@dataclass
class FusionPlanConfig:
    k: int = 3
    j: int = 4
    no_attn_block: bool = False
    no_msa_stage: bool = False
    path_grad_scale: float = 1.0

    def flags(self) -> AblationFlags:
        return AblationFlags(no_attn_block=self.no_attn_block, no_msa_stage=self.no_msa_stage)


@dataclass
class RunConfig:
    teacher: ModelConfig
    student: ModelConfig
    teacher_checkpoint: str
    fusion: FusionPlanConfig = field(default_factory=FusionPlanConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class MetricsRecord:
    epoch: int
    breakdown: LossBreakdown
    acc_student: float
    acc_fused: float
    acc_teacher: float
    tau: float
    seconds: float

    CSV_HEADER = ("epoch,loss_total,loss_ofa_ts,loss_ofa_tf,loss_ofa_fs,"
                  "loss_nce_ts,loss_nce_tf,loss_nce_fs,loss_ce,"
                  "acc_student,acc_fused,acc_teacher,tau,seconds")

    def csv_row(self, with_time: bool) -> str:
        b = self.breakdown
        fields = [self.epoch, b.total, b.ofa_ts, b.ofa_tf, b.ofa_fs,
                  b.nce_ts, b.nce_tf, b.nce_fs, b.ce,
                  self.acc_student, self.acc_fused, self.acc_teacher, self.tau,
                  self.seconds if with_time else 0.0]
        return ",".join(_csv_num(v) for v in fields)


def _csv_num(v) -> str:
    if isinstance(v, int):
        return str(v)
    return f"{v:.6g}"


def write_metrics_csv(path, records: list[MetricsRecord], with_time: bool = False):
    lines = [MetricsRecord.CSV_HEADER]
    lines += [r.csv_row(with_time) for r in records]
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _family_defaults(model: ModelSpec, cfg: TrainConfig) -> tuple[str, float]:
    opt = cfg.optimizer
    if opt == "auto":
        opt = "sgd" if model.family == "cnn" else "adamw"
    lr = cfg.lr
    if lr == 0.0:
        lr = 0.05 if opt == "sgd" else 1e-3
    return opt, lr


def _make_optimizer(name: str, params, lr: float, cfg: TrainConfig):
    if name == "sgd":
        return SGD(params, lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if name == "adamw":
        return AdamW(params, lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


def evaluate(forward: Callable, data: DatasetHandle, batch_size: int = 256,
             split: str = "test") -> float:
    """Top-1 accuracy of ``forward(images) -> logits`` over a split."""
    x = data.x_test if split == "test" else data.x_train
    y = data.y_test if split == "test" else data.y_train
    if len(y) == 0:
        raise ValueError("evaluate: empty dataset split")
    hits = 0
    with T.no_grad():
        for xb, yb in batches(x, y, batch_size):
            logits = forward(T.Tensor(xb))
            hits += int((np.argmax(logits.data, axis=1) == yb).sum())
    return hits / len(y)


def evaluate_model(model: ModelSpec, data: DatasetHandle, batch_size: int = 256,
                   split: str = "test") -> float:
    return evaluate(lambda xb: model(xb, train=False), data, batch_size, split)


def evaluate_fused(spec: FusionSpec, data: DatasetHandle, batch_size: int = 256,
                   split: str = "test") -> float:
    return evaluate(lambda xb: fused_forward(spec, xb, train=False).p, data, batch_size, split)


def train_teacher(model_cfg: ModelConfig, data: DatasetHandle, train_cfg: TrainConfig,
                  checkpoint_path: Optional[str] = None,
                  log: Optional[Callable[[str], None]] = None) -> tuple[ModelSpec, float]:
    """Train one model from scratch with cross-entropy; save a checkpoint."""
    model = build_model(model_cfg, seed=train_cfg.seed)
    opt_name, lr = _family_defaults(model, train_cfg)
    optimizer = _make_optimizer(opt_name, model.parameters(), lr, train_cfg)
    order_rng = np.random.default_rng(train_cfg.seed + 1000)
    aug_rng = np.random.default_rng(train_cfg.seed + 2000)
    steps_per_epoch = (data.train_count + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = steps_per_epoch * train_cfg.epochs
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        epoch_loss = 0.0
        nb = 0
        for xb, yb in batches(data.x_train, data.y_train, train_cfg.batch_size,
                              rng=order_rng, augment=train_cfg.augment, aug_rng=aug_rng):
            optimizer.lr = lr_at(step, total_steps, lr, train_cfg.schedule, train_cfg.warmup_frac)
            logits = model(T.Tensor(xb), train=True)
            loss = T.cross_entropy(logits, yb)
            val = float(loss.data)
            if not np.isfinite(val):
                raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
            epoch_loss += val
            nb += 1
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            step += 1
        if log and (epoch % max(1, train_cfg.eval_every) == 0 or epoch == train_cfg.epochs):
            acc = evaluate_model(model, data)
            log(f"epoch {epoch}: loss {epoch_loss / max(nb, 1):.4f} "
                f"test acc {acc:.4f} ({time.perf_counter() - t0:.1f}s)")
    final_acc = evaluate_model(model, data)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return model, final_acc


def transfer_loss_once(teacher: ModelSpec, student: ModelSpec, fusion: FusionSpec,
                       heads: TransferHeads, loss_cfg: LossConfig, x_np, targets,
                       backward: bool = False) -> float:
    """One forward (and optional backward) of the three-model transfer loss."""
    x = T.Tensor(x_np)
    with T.no_grad():
        k_t = extract_knowledge(teacher, x, train=False)
    k_f = fused_forward(fusion, x, train=True)
    k_s = extract_knowledge(student, x, train=True)
    loss, _ = fbt_loss(k_t, k_f, k_s, targets, heads, loss_cfg)
    if backward and loss.requires_grad:
        loss.backward()
    return float(loss.data)


@dataclass
class DistillArtifacts:
    teacher: ModelSpec
    student: ModelSpec
    fusion: FusionSpec
    heads: TransferHeads
    records: list


def _nonfinite_term(bd: LossBreakdown) -> Optional[str]:
    for key, val in bd.as_dict().items():
        if not np.isfinite(val):
            return f"loss_{key}" if key != "total" else "loss_total"
    return None


def run_distillation(cfg: RunConfig, data: DatasetHandle,
                     log: Optional[Callable[[str], None]] = None) -> DistillArtifacts:
    """The full transfer run: frozen teacher, trainable student plus fused view.

    Per batch the teacher knowledge is computed without a graph, the student
    and fused knowledge with one; they share parameters, so a single backward
    on the combined loss accumulates both paths. One optimizer updates student
    parameters, the seam module, the projection heads, and the temperature.
    """
    cfg.loss.validate()
    tc = cfg.train
    teacher = build_model(cfg.teacher, seed=tc.seed + 500)
    load_checkpoint(teacher, cfg.teacher_checkpoint)
    teacher.freeze()
    student = build_model(cfg.student, seed=tc.seed)
    fusion = plan_fusion(teacher, student, k=cfg.fusion.k, j=cfg.fusion.j,
                         ablation=cfg.fusion.flags(), seed=tc.seed + 1,
                         path_grad_scale=cfg.fusion.path_grad_scale)
    fused_width = (fusion.replacement_head or fusion.msa_source.head).fc.weight.shape[0]
    heads = TransferHeads(teacher.feature_width, fused_width, student.feature_width,
                          cfg.loss, seed=tc.seed + 2)

    opt_name, lr = _family_defaults(student, tc)
    params = list(dict.fromkeys(
        [*student.parameters(), *fusion.trainable_parameters(), *heads.parameters()],
    ))
    optimizer = _make_optimizer(opt_name, params, lr, tc)

    order_rng = np.random.default_rng(tc.seed + 1000)
    aug_rng = np.random.default_rng(tc.seed + 2000)
    steps_per_epoch = (data.train_count + tc.batch_size - 1) // tc.batch_size
    total_steps = steps_per_epoch * tc.epochs
    acc_teacher = evaluate_model(teacher, data)

    records: list[MetricsRecord] = []
    step = 0
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(8)
        nb = 0
        for xb, yb in batches(data.x_train, data.y_train, tc.batch_size,
                              rng=order_rng, augment=tc.augment, aug_rng=aug_rng):
            optimizer.lr = lr_at(step, total_steps, lr, tc.schedule, tc.warmup_frac)
            x = T.Tensor(xb)
            with T.no_grad():
                k_t = extract_knowledge(teacher, x, train=False)
            k_f = fused_forward(fusion, x, train=True)
            k_s = extract_knowledge(student, x, train=True)
            loss, bd = fbt_loss(k_t, k_f, k_s, yb, heads, cfg.loss)
            bad = _nonfinite_term(bd)
            if bad:
                raise DivergenceError(f"{bad} became non-finite at epoch {epoch}")
            if loss.requires_grad:
                loss.backward()
                optimizer.step()
                heads.temperature.clamp()
            optimizer.zero_grad()
            d = bd.as_dict()
            sums += [d["total"], d["ofa_ts"], d["ofa_tf"], d["ofa_fs"],
                     d["nce_ts"], d["nce_tf"], d["nce_fs"], d["ce"]]
            nb += 1
            step += 1
        seconds = time.perf_counter() - t0
        if epoch % max(1, tc.eval_every) == 0 or epoch == tc.epochs:
            acc_s = evaluate_model(student, data)
            acc_f = evaluate_fused(fusion, data)
        else:
            acc_s = records[-1].acc_student if records else 0.0
            acc_f = records[-1].acc_fused if records else 0.0
        means = sums / max(nb, 1)
        bd_epoch = LossBreakdown(total=means[0], ofa_ts=means[1], ofa_tf=means[2],
                                 ofa_fs=means[3], nce_ts=means[4], nce_tf=means[5],
                                 nce_fs=means[6], ce=means[7])
        rec = MetricsRecord(epoch=epoch, breakdown=bd_epoch, acc_student=acc_s,
                            acc_fused=acc_f, acc_teacher=acc_teacher,
                            tau=heads.temperature.item(), seconds=seconds)
        records.append(rec)
        if log:
            log(f"epoch {epoch}: loss {means[0]:.4f} student {acc_s:.4f} "
                f"fused {acc_f:.4f} teacher {acc_teacher:.4f} ({seconds:.1f}s)")
    return DistillArtifacts(teacher=teacher, student=student, fusion=fusion,
                            heads=heads, records=records)


ABLATION_VARIANTS = ("A", "B", "C", "D", "E", "F", "G", "full")


def apply_ablation_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """A named variant of the base configuration (shared seed and data)."""
    loss = replace(cfg.loss)
    fus = replace(cfg.fusion)
    if variant == "A":
        fus.no_attn_block = True
        fus.no_msa_stage = True
    elif variant == "B":
        fus.no_msa_stage = True
    elif variant == "C":
        loss.pair_weights = (loss.pair_weights[0], 0.0, loss.pair_weights[2])
    elif variant == "D":
        loss.pair_weights = (loss.pair_weights[0], loss.pair_weights[1], 0.0)
    elif variant == "E":
        loss.pair_weights = (0.0, loss.pair_weights[1], loss.pair_weights[2])
    elif variant == "F":
        loss.infonce_weight = 0.0
    elif variant == "G":
        loss.ofa_weight = 0.0
    elif variant != "full":
        raise ValueError(f"unknown ablation variant {variant!r}")
    return replace(cfg, loss=loss, fusion=fus)


def run_ablation_suite(base_cfg: RunConfig, data: DatasetHandle, seeds=(0,),
                       log=None) -> list[dict]:
    """Every ablation variant plus the full method, one row per variant."""
    rows = []
    for variant in ABLATION_VARIANTS:
        accs_s, accs_f = [], []
        for seed in seeds:
            cfg = apply_ablation_variant(base_cfg, variant)
            cfg = replace(cfg, train=replace(cfg.train, seed=seed))
            art = run_distillation(cfg, data)
            accs_s.append(art.records[-1].acc_student)
            accs_f.append(art.records[-1].acc_fused)
            if log:
                log(f"variant {variant} seed {seed}: student {accs_s[-1]:.4f} fused {accs_f[-1]:.4f}")
        rows.append({
            "variant": variant,
            "acc_student_mean": float(np.mean(accs_s)),
            "acc_fused_mean": float(np.mean(accs_f)),
            "acc_student": accs_s,
            "acc_fused": accs_f,
        })
    return rows


def run_fusion_sweep(base_cfg: RunConfig, data: DatasetHandle, seeds=(0,),
                     log=None) -> list[dict]:
    """Train every cut-point cell of the fusion grid with shared seeds."""
    rows = []
    for k, j in GRID_CELLS:
        accs_s, accs_f = [], []
        for seed in seeds:
            fus = replace(base_cfg.fusion, k=k, j=j)
            cfg = replace(base_cfg, fusion=fus, train=replace(base_cfg.train, seed=seed))
            art = run_distillation(cfg, data)
            accs_s.append(art.records[-1].acc_student)
            accs_f.append(art.records[-1].acc_fused)
            if log:
                log(f"cell k={k} j={j} seed {seed}: student {accs_s[-1]:.4f} fused {accs_f[-1]:.4f}")
        rows.append({
            "k": k,
            "j": j,
            "label": "ours" if (k, j) == (3, 4) else "",
            "acc_student_mean": float(np.mean(accs_s)),
            "acc_fused_mean": float(np.mean(accs_f)),
            "acc_student": accs_s,
            "acc_fused": accs_f,
        })
    return rows
