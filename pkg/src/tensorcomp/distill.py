"""Two-stage distillation of a dense toy teacher into a matrix-bank student.

Stage GD matches the teacher's last-layer hidden states and attention maps,
stage TD matches its logits. The student forward pass is written once over
:mod:`tensorcomp.autograd`, so it runs on plain arrays as well as on tape
tensors.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .decomp import DEFAULT_MAX_ITERS, DEFAULT_TOL, TuckerFactors, decompose_tucker
from .stack import SLICES_PER_LAYER, LayerWeights, TransformerConfig, stack_weights
from .transformer import EncoderParams, transformer_forward

BIAS_NAMES = ("bq", "bk", "bv", "bo", "b_in", "b_out")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    seed: int = 0
    steps_gd: int = 500
    steps_td: int = 200
    lr: float = 1e-3
    batch_size: int = 8
    seq_len: int = 8
    w_hidden: float = 1.0
    w_attn: float = 1.0
    temperature: float = 1.0
    vocab: int = 32
    n_classes: int = 4
    n_batches: int = 16  # size of the fixed training pool

    def __post_init__(self):
        if self.steps_gd < 0 or self.steps_td < 0:
            raise ValueError("step counts must be non-negative")
        if not (self.lr > 0 and self.temperature > 0):
            raise ValueError("lr and temperature must be positive")
        if min(self.batch_size, self.seq_len, self.vocab, self.n_classes, self.n_batches) < 1:
            raise ValueError("batch_size, seq_len, vocab, n_classes and n_batches must be >= 1")


class GradientSet(dict):
    """Parameter name -> gradient array."""

    @property
    def u(self):
        return self["u"]

    @property
    def v(self):
        return self["v"]

    @property
    def bank(self):
        return self["bank"]

    @property
    def p(self):
        return self["p"]


# --- losses ---------------------------------------------------------------

def _same_shape(a, b, what):
    if np.shape(getattr(a, "value", a)) != np.shape(getattr(b, "value", b)):
        raise ValueError(f"{what}: shape mismatch {np.shape(getattr(a, 'value', a))} vs {np.shape(getattr(b, 'value', b))}")


def mse(a, b):
    _same_shape(a, b, "mse")
    diff = ag.add(a, ag.neg(b))
    return ag.mean(ag.mul(diff, diff))


def gd_loss(student, teacher, w_hidden=1.0, w_attn=1.0):
    """Weighted MSE on the last-layer hidden states and attention maps.

    Accepts ForwardTrace objects or (hidden, attention) pairs.
    """
    sh, sa = _last(student)
    th, ta = _last(teacher)
    return ag.add(ag.mul(w_hidden, mse(sh, th)), ag.mul(w_attn, mse(sa, ta)))


def _last(trace):
    if isinstance(trace, tuple):
        return trace
    return trace.hidden, trace.attention[-1]


def td_loss(student_logits, teacher_logits, temperature=1.0):
    """T^2 * KL(softmax(t/T) || softmax(s/T)), averaged over rows."""
    _same_shape(student_logits, teacher_logits, "td_loss")
    t = np.asarray(getattr(teacher_logits, "value", teacher_logits))
    log_pt = ag.log_softmax(t / temperature)
    pt = np.exp(log_pt)
    log_ps = ag.log_softmax(ag.mul(student_logits, 1.0 / temperature))
    per_row = ag.tsum(ag.mul(pt, ag.add(log_pt, ag.neg(log_ps))), axis=-1)
    return ag.mul(temperature**2, ag.mean(per_row))


def cross_entropy(logits, labels):
    lp = ag.log_softmax(logits)
    rows = np.arange(len(labels))
    return ag.neg(ag.mean(ag.getitem(lp, (rows, labels))))


# --- student --------------------------------------------------------------

@dataclass
class Student:
    """Factored encoder: shared u, v, bank, p plus undecomposed parameters."""

    config: TransformerConfig
    params: dict = field(default_factory=dict)

    @property
    def factors(self) -> TuckerFactors:
        p = self.params
        return TuckerFactors(u=p["u"], v=p["v"], bank=p["bank"], p=p["p"])

    def to_encoder(self) -> EncoderParams:
        """Dense-path container carrying the student's biases/LayerNorms/head."""
        cfg = self.config
        D, p = cfg.D, self.params
        layers = []
        for j in range(cfg.L):
            zero = np.zeros((D, D))
            layers.append(LayerWeights(
                wq=zero, wk=zero, wv=zero, wo=zero,
                w_in=np.zeros((D, 4 * D)), w_out=np.zeros((4 * D, D)),
                **{b: p[f"L{j}.{b}"] for b in BIAS_NAMES},
            ))
        return EncoderParams(
            config=cfg, layers=layers,
            ln_gamma=np.stack([p[f"L{j}.ln_g"] for j in range(cfg.L)]),
            ln_beta=np.stack([p[f"L{j}.ln_b"] for j in range(cfg.L)]),
            head_w=p["head_w"], head_b=p["head_b"],
        )

    def copy(self):
        return Student(self.config, {k: v.copy() for k, v in self.params.items()})


def student_from_teacher(
    teacher: EncoderParams, l: int, d: int, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS
) -> Student:
    cfg = teacher.config
    ws = stack_weights(teacher.layers, cfg)
    tk = decompose_tucker(ws, l, d, tol=tol, max_iters=max_iters)
    params = {"u": tk.u, "v": tk.v, "bank": tk.bank, "p": tk.p}
    for j, layer in enumerate(teacher.layers):
        for b in BIAS_NAMES:
            params[f"L{j}.{b}"] = getattr(layer, b).copy()
        params[f"L{j}.ln_g"] = teacher.ln_gamma[j].copy()
        params[f"L{j}.ln_b"] = teacher.ln_beta[j].copy()
    params["head_w"] = teacher.head_w.copy()
    params["head_b"] = teacher.head_b.copy()
    return Student(cfg, {k: np.array(v, dtype=np.float64) for k, v in params.items()})


def student_forward(params: dict, x, cfg: TransformerConfig):
    """Factored forward pass in IV3 order.

    ``params`` values may be arrays or tape tensors. Returns
    (last hidden, last attention maps, logits).
    """
    b, n, D = np.shape(x)
    nh, dh = cfg.n_heads, cfg.d_head
    u, v, bank, p = params["u"], params["v"], params["bank"], params["p"]
    l, d = np.shape(bank)[0], np.shape(bank)[1]
    mixed = ag.reshape(ag.matmul(p, ag.reshape(bank, (l, d * d))), (-1, d, d))
    right = ag.matmul(mixed, v)  # (P_i C) V
    right_t = ag.transpose(ag.matmul(u, mixed), (0, 2, 1))  # (U P_i C)^T
    v_t = ag.transpose(v)

    def lin(i, xf, transposed=False):
        if transposed:
            return ag.matmul(ag.matmul(xf, v_t), ag.getitem(right_t, i))
        return ag.matmul(ag.matmul(xf, u), ag.getitem(right, i))

    def heads(t):
        return ag.transpose(ag.reshape(t, (b, n, nh, dh)), (0, 2, 1, 3))

    h = x
    maps = None
    for j in range(cfg.L):
        base = SLICES_PER_LAYER * j
        pre = f"L{j}."
        xf = ag.reshape(h, (b * n, D))
        q = heads(ag.add(lin(base, xf), params[pre + "bq"]))
        k = heads(ag.add(lin(base + 1, xf), params[pre + "bk"]))
        vv = heads(ag.add(lin(base + 2, xf), params[pre + "bv"]))
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        maps = ag.softmax(scores)
        ctx = ag.reshape(ag.transpose(ag.matmul(maps, vv), (0, 2, 1, 3)), (b * n, D))
        attn = ag.add(lin(base + 3, ctx), params[pre + "bo"])
        h = ag.layer_norm(ag.add(h, ag.reshape(attn, (b, n, D))),
                          params[pre + "ln_g"][0], params[pre + "ln_b"][0])
        xf = ag.reshape(h, (b * n, D))
        ffn = None
        for s in range(4):
            b_in = ag.getitem(params[pre + "b_in"], slice(s * D, (s + 1) * D))
            hid = ag.gelu(ag.add(lin(base + 4 + s, xf), b_in))
            out = ag.add(lin(base + 8 + s, hid, transposed=True), ag.mul(params[pre + "b_out"], 0.25))
            ffn = out if ffn is None else ag.add(ffn, out)
        h = ag.layer_norm(ag.add(h, ag.reshape(ffn, (b, n, D))),
                          params[pre + "ln_g"][1], params[pre + "ln_b"][1])
    logits = ag.add(ag.matmul(ag.mean(h, axis=1), params["head_w"]), params["head_b"])
    return h, maps, logits


def backward(loss, tensors: dict) -> GradientSet:
    """Gradients of the scalar ``loss`` w.r.t. every tensor in ``tensors``."""
    if not isinstance(loss, ag.Tensor):
        loss = ag.Tensor(loss)
    loss.backward()
    return GradientSet({k: (t.grad if t.grad is not None else np.zeros_like(t.value))
                        for k, t in tensors.items()})


# --- data -----------------------------------------------------------------

@dataclass
class ToyTask:
    """Seeded token batches embedded by a fixed, untrained embedding."""

    embedding: np.ndarray  # (vocab, D)
    positions: np.ndarray  # (n, D)
    batches: list  # token arrays (b, n)
    eval_batch: np.ndarray

    @classmethod
    def make(cls, D: int, cfg: DistillConfig, rng: np.random.Generator):
        emb = rng.normal(0.0, 1.0, size=(cfg.vocab, D))
        pos = rng.normal(0.0, 0.1, size=(cfg.seq_len, D))
        shape = (cfg.batch_size, cfg.seq_len)
        batches = [rng.integers(0, cfg.vocab, size=shape) for _ in range(cfg.n_batches)]
        return cls(emb, pos, batches, rng.integers(0, cfg.vocab, size=(4 * cfg.batch_size, cfg.seq_len)))

    def embed(self, tokens):
        return self.embedding[tokens] + self.positions[: tokens.shape[1]]


# --- training -------------------------------------------------------------

class Adam:
    def __init__(self, lr):
        self.lr = lr
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - ADAM_BETA1**self.t
        c2 = 1.0 - ADAM_BETA2**self.t
        for k in sorted(params):
            g = grads[k]
            m = self.m.get(k, 0.0) * ADAM_BETA1 + (1.0 - ADAM_BETA1) * g
            v = self.v.get(k, 0.0) * ADAM_BETA2 + (1.0 - ADAM_BETA2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


@dataclass
class LossRecord:
    step: int
    stage: str
    loss: float


def _step(student: Student, opt: Adam, loss_fn, step, stage, x):
    tensors = {k: ag.parameter(v, k) for k, v in student.params.items()}
    out = student_forward(tensors, x, student.config)
    loss = loss_fn(out)
    value = float(loss.value)
    if not np.isfinite(value):
        raise DivergenceError(f"{stage} loss became non-finite at step {step}")
    grads = backward(loss, tensors)
    opt.step(student.params, grads)
    return LossRecord(step, stage, value)


def teacher_trace(teacher: EncoderParams, x):
    return transformer_forward(x, teacher)


def train(teacher: EncoderParams, student: Student, cfg: DistillConfig, task: ToyTask | None = None):
    """GD stage then TD stage with Adam. Returns (loss curve, trained student).

    The loss recorded at each step is the value before that step's update.
    """
    if student.config != teacher.config:
        raise ValueError("teacher and student configs differ")
    if task is None:
        task = ToyTask.make(teacher.config.D, cfg, np.random.default_rng(cfg.seed + 1))
    student = student.copy()
    inputs = [task.embed(t) for t in task.batches]
    targets = [teacher_trace(teacher, x) for x in inputs]
    curve = []
    opt = Adam(cfg.lr)
    for step in range(cfg.steps_gd):
        k = step % len(inputs)
        tr = targets[k]

        def gd(out, tr=tr):
            h, maps, _ = out
            return gd_loss((h, maps), tr, cfg.w_hidden, cfg.w_attn)

        curve.append(_step(student, opt, gd, step, "GD", inputs[k]))
    opt = Adam(cfg.lr)
    for step in range(cfg.steps_td):
        k = step % len(inputs)
        tr = targets[k]

        def td(out, tr=tr):
            return td_loss(out[2], tr.logits, cfg.temperature)

        curve.append(_step(student, opt, td, cfg.steps_gd + step, "TD", inputs[k]))
    return curve, student


def train_task_only(teacher: EncoderParams, student: Student, cfg: DistillConfig, task: ToyTask | None = None):
    """Baseline without distillation: cross-entropy on hard task labels
    (the teacher's predictions) for the same total number of steps."""
    if task is None:
        task = ToyTask.make(teacher.config.D, cfg, np.random.default_rng(cfg.seed + 1))
    student = student.copy()
    inputs = [task.embed(t) for t in task.batches]
    labels = [np.argmax(teacher_trace(teacher, x).logits, axis=1) for x in inputs]
    opt = Adam(cfg.lr)
    curve = []
    for step in range(cfg.steps_gd + cfg.steps_td):
        k = step % len(inputs)
        y = labels[k]
        curve.append(_step(student, opt, lambda out, y=y: cross_entropy(out[2], y), step, "TASK", inputs[k]))
    return curve, student


def teacher_agreement(teacher: EncoderParams, student: Student, task: ToyTask, temperature=1.0):
    """(TD loss, argmax agreement) of the student against the teacher on the
    held-out batch."""
    x = task.embed(task.eval_batch)
    t = teacher_trace(teacher, x).logits
    _, _, s = student_forward(student.params, x, student.config)
    return float(td_loss(s, t, temperature)), float(np.mean(np.argmax(s, 1) == np.argmax(t, 1)))


def distill_demo(L=2, D=16, n_heads=2, d=4, l=8, cfg: DistillConfig | None = None):
    """Seeded end-to-end run: random dense teacher, HOSVD/HOOI student, GD + TD."""
    cfg = DistillConfig() if cfg is None else cfg
    rng = np.random.default_rng(cfg.seed)
    tcfg = TransformerConfig(L=L, D=D, n_heads=n_heads)
    teacher = EncoderParams.random(tcfg, cfg.n_classes, rng)
    student = student_from_teacher(teacher, l, d)
    task = ToyTask.make(D, cfg, rng)
    curve, trained = train(teacher, student, cfg, task)
    return curve, trained, teacher, task


def write_curve_csv(path_or_file, curve) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh)
        w.writerow(["step", "stage", "loss"])
        for r in curve:
            w.writerow([r.step, r.stage, f"{r.loss:.17g}"])
    finally:
        if own:
            fh.close()

