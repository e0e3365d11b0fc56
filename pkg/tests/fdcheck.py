"""Central finite-difference oracle for the factored student's gradients."""
import numpy as np

from tensorcomp import autograd as ag
from tensorcomp.distill import (
    DistillConfig, ToyTask, backward, gd_loss, student_forward, student_from_teacher, td_loss,
)
from tensorcomp.stack import TransformerConfig
from tensorcomp.transformer import EncoderParams, transformer_forward

EPS = 1e-5


def setup(seed, D=8, L=2, d=4, l=6, n_heads=2):
    rng = np.random.default_rng(seed)
    cfg = TransformerConfig(L=L, D=D, n_heads=n_heads)
    teacher = EncoderParams.random(cfg, 3, rng)
    student = student_from_teacher(teacher, l, d)
    # move off the fitted point so every gradient is far from zero
    for k, v in student.params.items():
        student.params[k] = v + rng.normal(0.0, 0.05, size=v.shape)
    task = ToyTask.make(D, DistillConfig(batch_size=2, seq_len=3, n_batches=1, n_classes=3), rng)
    x = task.embed(task.batches[0])
    return student, transformer_forward(x, teacher), x


def total_loss(params, x, cfg, target):
    h, maps, logits = student_forward(params, x, cfg)
    return ag.add(gd_loss((h, maps), target), td_loss(logits, target.logits, 2.0))


def check(seed):
    """Per-parameter relative error between tape and central differences.

    The denominator is floored at 1e-3 of the overall gradient norm so a
    parameter whose exact gradient is zero compares noise against noise
    on an absolute scale.
    """
    student, target, x = setup(seed)
    cfg = student.config
    tensors = {k: ag.parameter(v, k) for k, v in student.params.items()}
    grads = backward(total_loss(tensors, x, cfg, target), tensors)

    params = {k: v.copy() for k, v in student.params.items()}
    fd = {}
    for k, v in params.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + EPS
            up = float(total_loss(params, x, cfg, target))
            v[idx] = old - EPS
            down = float(total_loss(params, x, cfg, target))
            v[idx] = old
            g[idx] = (up - down) / (2 * EPS)
        fd[k] = g
    scale = np.sqrt(sum(np.sum(g**2) for g in fd.values()))
    errors = {}
    for k in params:
        denom = max(np.linalg.norm(grads[k]), np.linalg.norm(fd[k]), 1e-3 * scale)
        errors[k] = float(np.linalg.norm(grads[k] - fd[k]) / denom)
    return errors, grads
