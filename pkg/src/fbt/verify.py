"""Gradient-oracle battery covering every primitive and every loss.

All checks run in float64 with central differences (step 1e-4): single
precision drowns the comparison in rounding noise. Shapes stay tiny because
every input element is perturbed twice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, grad_check
from .fusion import plan_fusion
from .losses import LossConfig, TransferHeads, fbt_loss, infonce_loss, ofa_loss, pair_loss
from .models import CNNConfig, Knowledge, MSAConfig, build_tiny_cnn, build_tiny_msa
from .tensor import Tensor


def _t(rng, *shape, lo=-1.0, hi=1.0, grad=True) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=grad)


def _away_from_zero(rng, *shape, grad=True) -> Tensor:
    # Keeps finite differences away from the relu kink / division blowups.
    mag = rng.uniform(0.25, 1.25, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(mag * sign, requires_grad=grad)


def _primitive_cases() -> dict[str, Callable]:
    """name -> builder(rng) returning (f, [inputs])."""

    def add(rng):
        return T.add, [_t(rng, 3, 4), _t(rng, 3, 4)]

    def add_broadcast(rng):
        return T.add, [_t(rng, 3, 4), _t(rng, 4)]

    def sub(rng):
        return T.sub, [_t(rng, 2, 3), _t(rng, 2, 3)]

    def mul(rng):
        return T.mul, [_t(rng, 3, 4), _t(rng, 3, 4)]

    def div(rng):
        return T.div, [_t(rng, 3, 3), _away_from_zero(rng, 3, 3)]

    def matmul(rng):
        return T.matmul, [_t(rng, 3, 4), _t(rng, 4, 2)]

    def matmul_batched(rng):
        return T.matmul, [_t(rng, 2, 3, 4), _t(rng, 2, 4, 2)]

    def linear(rng):
        return (lambda x, w, b: T.linear(x, w, b)), [_t(rng, 3, 5), _t(rng, 5, 2), _t(rng, 2)]

    def relu(rng):
        return T.relu, [_away_from_zero(rng, 4, 4)]

    def gelu(rng):
        return T.gelu, [_t(rng, 4, 4, lo=-2.0, hi=2.0)]

    def log(rng):
        return T.log, [_t(rng, 3, 3, lo=0.2, hi=2.0)]

    def exp(rng):
        return T.exp, [_t(rng, 3, 3)]

    def sqrt(rng):
        return T.sqrt, [_t(rng, 3, 3, lo=0.2, hi=2.0)]

    def softmax(rng):
        return (lambda x: T.softmax(x, axis=1)), [_t(rng, 3, 5, lo=-2.0, hi=2.0)]

    def log_softmax(rng):
        return (lambda x: T.log_softmax(x, axis=1)), [_t(rng, 3, 5, lo=-2.0, hi=2.0)]

    def cross_entropy(rng):
        labels = rng.integers(0, 5, size=3)
        return (lambda x: T.cross_entropy(x, labels)), [_t(rng, 3, 5, lo=-2.0, hi=2.0)]

    def mean_axis(rng):
        return (lambda x: T.mean(x, axis=1)), [_t(rng, 3, 4)]

    def sum_keepdims(rng):
        return (lambda x: T.sum_(x, axis=(0, 2), keepdims=True)), [_t(rng, 2, 3, 4)]

    def reshape(rng):
        return (lambda x: T.reshape(x, (4, 3))), [_t(rng, 3, 4)]

    def transpose(rng):
        return (lambda x: T.transpose(x, (1, 2, 0))), [_t(rng, 2, 3, 4)]

    def narrow(rng):
        return (lambda x: T.narrow(x, 1, 1, 2)), [_t(rng, 3, 5)]

    def concat(rng):
        return (lambda a, b: T.concat([a, b], axis=1)), [_t(rng, 2, 3), _t(rng, 2, 2)]

    def conv(rng):
        return (lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1)), [
            _t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)]

    def conv_strided(rng):
        return (lambda x, w: T.conv2d(x, w, stride=2, padding=0)), [
            _t(rng, 2, 2, 6, 6), _t(rng, 3, 2, 2, 2)]

    def avg_pool(rng):
        return (lambda x: T.avg_pool2d(x, 2)), [_t(rng, 2, 3, 4, 4)]

    def gap_grid(rng):
        return T.global_avg_pool, [_t(rng, 2, 3, 4, 4)]

    def gap_tokens(rng):
        return T.global_avg_pool, [_t(rng, 2, 5, 3)]

    def patchify(rng):
        return (lambda x: T.patchify(x, 2)), [_t(rng, 2, 3, 4, 4)]

    def layer_norm(rng):
        return (lambda x, g, b: T.layer_norm(x, g, b)), [
            _t(rng, 2, 3, 6), _t(rng, 6, lo=0.5, hi=1.5), _t(rng, 6)]

    def batch_norm_train(rng):
        rm, rv = np.zeros(3), np.ones(3)
        return (lambda x, g, b: T.batch_norm(x, g, b, rm.copy(), rv.copy(), train=True)), [
            _t(rng, 3, 3, 4, 4), _t(rng, 3, lo=0.5, hi=1.5), _t(rng, 3)]

    def batch_norm_eval(rng):
        rm = rng.uniform(-0.3, 0.3, size=3)
        rv = rng.uniform(0.5, 1.5, size=3)
        return (lambda x, g, b: T.batch_norm(x, g, b, rm, rv, train=False)), [
            _t(rng, 2, 3, 4, 4), _t(rng, 3, lo=0.5, hi=1.5), _t(rng, 3)]

    def attention(rng):
        return (lambda q, k, v: T.multi_head_attention(q, k, v, heads=2)), [
            _t(rng, 2, 4, 8), _t(rng, 2, 4, 8), _t(rng, 2, 4, 8)]

    def l2_normalize(rng):
        return (lambda x: T.l2_normalize(x)), [_away_from_zero(rng, 3, 5)]

    return {name: fn for name, fn in locals().items() if callable(fn)}


def _loss_cases() -> dict[str, Callable]:
    def ofa(rng):
        targets = rng.integers(0, 5, size=4)
        gamma = float(rng.choice([0.0, 0.5, 1.0, 2.0]))
        teacher = _t(rng, 4, 5, lo=-2.0, hi=2.0, grad=False)
        return (lambda s: ofa_loss(teacher, s, targets, gamma=gamma, temperature=2.0)), [
            _t(rng, 4, 5, lo=-2.0, hi=2.0)]

    def infonce(rng):
        keys = Tensor(_normalize_rows(rng.uniform(-1, 1, size=(4, 6))))
        tau = Tensor(np.asarray([0.4]), requires_grad=True)

        def f(q, tau_):
            return infonce_loss(T.l2_normalize(q), keys, tau_)

        return f, [_away_from_zero(rng, 4, 6), tau]

    def pair(rng):
        cfg = LossConfig(embed_dim=5)
        head_rng = np.random.default_rng(int(rng.integers(0, 2**31)))
        from .losses import ProjectionHead

        head_t = ProjectionHead(6, 5, head_rng)
        head_s = ProjectionHead(6, 5, head_rng)
        targets = rng.integers(0, 4, size=3)
        tau = Tensor(np.asarray([0.3]), requires_grad=True)
        k_t = Knowledge(f=_t(rng, 3, 6, grad=False), p=_t(rng, 3, 4, lo=-2, hi=2, grad=False))

        def f(f_s, p_s, tau_):
            k_s = Knowledge(f=f_s, p=p_s)
            loss, _ = pair_loss(k_t, k_s, targets, head_t, head_s, tau_, cfg)
            return loss

        return f, [_t(rng, 3, 6), _t(rng, 3, 4, lo=-2, hi=2), tau]

    return {name: fn for name, fn in locals().items() if callable(fn)}


def _normalize_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _micro_pair(seed: int):
    """Tiny teacher/student pair for whole-pipeline gradient checks."""
    teacher_cfg = MSAConfig(patch=4, dim=8, blocks_per_stage=1, heads=2,
                            mlp_ratio=1.0, image_size=16, num_classes=4)
    student_cfg = CNNConfig(widths=(4, 5, 6, 7), blocks_per_stage=(1, 1, 1, 1),
                            image_size=16, num_classes=4)
    teacher = build_tiny_msa(teacher_cfg, seed=seed)
    student = build_tiny_cnn(student_cfg, seed=seed + 1)
    return teacher, student


def check_fused_loss_gradient(n_samples: int = 20, step: float = 2e-5,
                              tolerance: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Finite differences on randomly sampled trainable parameter entries of
    the full three-model transfer loss.

    Runs with the fused-teacher detachment off so that the loss value is a
    pure function of every sampled parameter; the architecturally detached
    teacher projection head is excluded for the same reason. The step is
    smaller than the per-primitive default because truncation error grows
    with the depth of the composition (still far above the float64 roundoff
    floor for this loss scale).
    """
    report = GradCheckReport(name="fbt_loss_through_fused_model")
    rng = np.random.default_rng(seed)
    with T.using_dtype(np.float64):
        teacher, student = _micro_pair(seed)
        fusion = plan_fusion(teacher, student, seed=seed + 2)
        cfg = LossConfig(embed_dim=6, tau_init=0.3, detach_fused_teacher=False)
        heads = TransferHeads(teacher.feature_width, teacher.feature_width,
                              student.feature_width, cfg, seed=seed + 3)
        x = rng.uniform(-1, 1, size=(2, 3, 16, 16))
        targets = rng.integers(0, 4, size=2)

        from .engine import transfer_loss_once  # local import avoids a cycle

        analytic_total = transfer_loss_once(teacher, student, fusion, heads, cfg,
                                            x, targets, backward=True)
        if not np.isfinite(analytic_total):
            report.passed = False
            report.failure = "non-finite loss"
            return report

        pools = [*student.parameters(), *fusion.trainable_parameters(),
                 *heads.fused.parameters(), *heads.student.parameters(),
                 heads.temperature.log_tau]
        params = [p for p in {id(q): q for q in pools}.values() if p.requires_grad]
        worst = 0.0
        for _ in range(n_samples):
            p = params[int(rng.integers(0, len(params)))]
            idx = int(rng.integers(0, p.size))
            flat = p.data.reshape(-1)
            saved = flat[idx]
            flat[idx] = saved + step
            plus = transfer_loss_once(teacher, student, fusion, heads, cfg, x, targets)
            flat[idx] = saved - step
            minus = transfer_loss_once(teacher, student, fusion, heads, cfg, x, targets)
            flat[idx] = saved
            numeric = (plus - minus) / (2.0 * step)
            grad = 0.0 if p.grad is None else float(p.grad.reshape(-1)[idx])
            err = abs(grad - numeric) / max(abs(grad), abs(numeric), 1e-8)
            worst = max(worst, err)
        report.max_rel_errors.append(worst)
        if worst > tolerance:
            report.passed = False
            report.failure = f"relative error {worst:.3e} exceeds {tolerance:.1e}"
    return report


def run_gradient_suite(trials: int = 20, tolerance: float = 1e-5, step: float = 1e-4,
                       seed: int = 0, progress: Optional[Callable[[str], None]] = None
                       ) -> tuple[list[GradCheckReport], bool]:
    """Run every primitive and loss check; returns (reports, all_passed)."""
    import zlib

    reports: list[GradCheckReport] = []
    cases = {**_primitive_cases(), **_loss_cases()}
    with T.using_dtype(np.float64):
        for name, builder in cases.items():
            worst = GradCheckReport(name=name)
            for trial in range(trials):
                rng = np.random.default_rng(seed + 1009 * trial + zlib.crc32(name.encode()) % 10_000)
                f, inputs = builder(rng)
                rep = grad_check(f, inputs, step=step, tolerance=tolerance,
                                 seed=seed + trial, name=f"{name}[{trial}]")
                worst.max_rel_errors.extend(rep.max_rel_errors)
                if not rep.passed:
                    worst.passed = False
                    worst.failure = rep.failure
                    break
            reports.append(worst)
            if progress:
                progress(str(worst))
    fused = check_fused_loss_gradient(tolerance=tolerance, seed=seed)
    reports.append(fused)
    if progress:
        progress(str(fused))
    return reports, all(r.passed for r in reports)
