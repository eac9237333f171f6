"""Teacher-student self-training of an affine adapter over frozen embeddings.

The student adapter maps z -> normalize(W z + b) and is scored against the
word bank by temperature-scaled cosine logits. Per batch it minimizes
cross-entropy to the per-epoch structural pseudo-labels plus a
confidence-masked cross-entropy to the teacher's on-the-fly nearest-word
labels; the teacher tracks the student by EMA and is the model used for
inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ValidationError
from .align import PipelineResult, run_cvpr
from .store import EmbeddingMatrix, Vocabulary


@dataclass
class AdapterParams:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        d = self.bias.shape[0]
        if self.weight.shape != (d, d):
            raise ValidationError(
                f"adapter weight {self.weight.shape} incompatible with bias ({d},)"
            )
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValidationError("adapter parameters must be finite")

    @classmethod
    def identity(cls, d: int) -> "AdapterParams":
        return cls(np.eye(d), np.zeros(d))

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.weight.copy(), self.bias.copy())

    def save(self, path) -> None:
        np.savez(path, weight=self.weight, bias=self.bias)

    @classmethod
    def load(cls, path) -> "AdapterParams":
        data = np.load(path)
        return cls(data["weight"], data["bias"])


@dataclass
class TrainConfig:
    tau: float = 0.5
    gamma: float = 0.25
    temperature: float = 0.01
    ema_init: float = 0.999
    ema_final: float = 0.9998
    ema_warmup_iters: int = 2000
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-5
    weight_decay: float = 0.05
    seed: int = 0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must be in [0, 1], got {self.tau}")
        if self.gamma < 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")
        for name in ("ema_init", "ema_final"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class BatchOutput:
    student_probs: np.ndarray
    teacher_probs: np.ndarray
    teacher_labels: np.ndarray
    mask: np.ndarray
    l_str: float
    l_in: float
    l_total: float


def _adapt(adapter: AdapterParams, z: np.ndarray):
    a = z @ adapter.weight.T + adapter.bias
    norms = np.linalg.norm(a, axis=1)
    bad = np.flatnonzero(norms < 1e-30)
    if bad.size:
        raise ValidationError(f"adapter maps row {int(bad[0])} to the zero vector")
    return a, norms, a / norms[:, None]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(
    adapter: AdapterParams, z: np.ndarray, bank: EmbeddingMatrix, temperature: float
) -> np.ndarray:
    """Softmax over the vocabulary of temperature-scaled cosine logits."""
    _, _, z_unit = _adapt(adapter, z)
    return _softmax((z_unit @ bank.data.T) / temperature)


def losses_and_grads(
    student: AdapterParams,
    teacher: AdapterParams,
    z_batch: np.ndarray,
    bank: EmbeddingMatrix,
    struct_words: np.ndarray,
    config: TrainConfig,
    student_input: np.ndarray | None = None,
):
    """Structural + confidence-masked instance losses with analytic gradients.

    L = mean_i[ -log p_S(y_i) ] + gamma * mean_i[ 1(max p_T > tau) * -log p_S(t_i) ]
    where y is the structural pseudo-label and t the teacher's argmax label.
    Returns (BatchOutput, dW, db).
    """
    z_in = z_batch if student_input is None else student_input
    b = z_in.shape[0]
    h = bank.data
    temp = config.temperature

    a, norms, z_unit = _adapt(student, z_in)
    probs = _softmax((z_unit @ h.T) / temp)

    t_probs = forward(teacher, z_batch, bank, temp)
    t_labels = t_probs.argmax(axis=1)
    mask = t_probs.max(axis=1) > config.tau

    rows = np.arange(b)
    l_str_terms = -np.log(np.maximum(probs[rows, struct_words], 1e-300))
    l_in_terms = np.where(
        mask, -np.log(np.maximum(probs[rows, t_labels], 1e-300)), 0.0
    )
    l_str = float(l_str_terms.mean())
    l_in = float(l_in_terms.mean())
    l_total = l_str + config.gamma * l_in

    g = probs.copy()
    g[rows, struct_words] -= 1.0
    g_in = probs.copy()
    g_in[rows, t_labels] -= 1.0
    g += config.gamma * mask[:, None] * g_in
    g /= b

    v = (g @ h) / temp
    proj = np.einsum("ij,ij->i", v, z_unit)
    u = (v - proj[:, None] * z_unit) / norms[:, None]
    d_weight = u.T @ z_in
    d_bias = u.sum(axis=0)

    if not (
        math.isfinite(l_total)
        and np.isfinite(d_weight).all()
        and np.isfinite(d_bias).all()
    ):
        raise ValidationError(
            f"non-finite training signal: l_str={l_str}, l_in={l_in}, "
            f"|dW|max={np.abs(d_weight).max()}"
        )
    out = BatchOutput(probs, t_probs, t_labels, mask, l_str, l_in, l_total)
    return out, d_weight, d_bias


def ema_update(teacher: AdapterParams, student: AdapterParams, eta: float) -> None:
    """teacher <- eta * teacher + (1 - eta) * student, elementwise."""
    if teacher.weight.shape != student.weight.shape or teacher.bias.shape != student.bias.shape:
        raise ValidationError("teacher/student shape mismatch")
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"eta must be in [0, 1], got {eta}")
    teacher.weight *= eta
    teacher.weight += (1.0 - eta) * student.weight
    teacher.bias *= eta
    teacher.bias += (1.0 - eta) * student.bias


def ema_schedule(iteration: int, config: TrainConfig) -> float:
    """Linear warmup from ema_init to ema_final, then constant."""
    if iteration < 0:
        raise ValidationError("iteration must be >= 0")
    if config.ema_warmup_iters <= 0 or iteration >= config.ema_warmup_iters:
        return config.ema_final
    frac = iteration / config.ema_warmup_iters
    return config.ema_init + frac * (config.ema_final - config.ema_init)


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, shapes, weight_decay: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= lr * (update + self.weight_decay * p)


def cosine_lr(iteration: int, total: int, base_lr: float) -> float:
    if total <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * iteration / total))


def adapter_embeddings(
    adapter: AdapterParams, x: EmbeddingMatrix, chunk: int = 8192
) -> EmbeddingMatrix:
    out = np.empty_like(x.data)
    for start in range(0, x.n, chunk):
        stop = min(start + chunk, x.n)
        _, _, z_unit = _adapt(adapter, x.data[start:stop])
        out[start:stop] = z_unit
    return EmbeddingMatrix(out, normalized=True)


@dataclass
class TrainResult:
    teacher: AdapterParams
    student: AdapterParams
    history: list[dict] = field(default_factory=list)
    final: PipelineResult | None = None


def train(
    x: EmbeddingMatrix,
    vocab: Vocabulary,
    vocab_bank: EmbeddingMatrix,
    k: int,
    config: TrainConfig,
    mode: str = "cvpr",
    m: int = 3,
    max_iter: int = 50,
    threads: int = 1,
    llm_client=None,
    cache=None,
    embedder=None,
    gt_labels: np.ndarray | None = None,
) -> TrainResult:
    """Run per-epoch pseudo-labeling on the teacher's embeddings and minibatch
    AdamW updates on the student, EMA-tracking the teacher each iteration.
    The returned pipeline result is a final pass with the trained teacher,
    which is the inference model."""
    d = x.d
    student = AdapterParams.identity(d)
    teacher = student.copy()
    rng = np.random.default_rng(np.random.PCG64(config.seed))

    iters_per_epoch = max(1, math.ceil(x.n / config.batch_size))
    total_iters = max(1, config.epochs * iters_per_epoch)
    opt = AdamW(
        [student.weight.shape, student.bias.shape], weight_decay=config.weight_decay
    )
    history: list[dict] = []
    catalog = None
    global_iter = 0

    def pseudo_label_pass(epoch: int) -> PipelineResult:
        zt = adapter_embeddings(teacher, x)
        return run_cvpr(
            zt,
            vocab,
            vocab_bank,
            k,
            seed=config.seed,
            m=m,
            mode=mode,
            max_iter=max_iter,
            threads=threads,
            llm_client=llm_client,
            cache=cache,
            embedder=embedder,
            catalog=catalog,
            epoch=epoch,
        )

    for epoch in range(config.epochs):
        result = pseudo_label_pass(epoch)
        if result.catalog is not None:
            catalog = result.catalog
        struct = result.labels.words

        perm = rng.permutation(x.n)
        sums = {"l_str": 0.0, "l_in": 0.0, "l": 0.0}
        eta = config.ema_final
        for start in range(0, x.n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            zb = x.data[idx]
            student_input = None
            if config.noise_sigma > 0:
                student_input = zb + config.noise_sigma * rng.standard_normal(zb.shape)
            out, d_weight, d_bias = losses_and_grads(
                student, teacher, zb, vocab_bank, struct[idx], config, student_input
            )
            lr = cosine_lr(global_iter, total_iters, config.learning_rate)
            opt.step([student.weight, student.bias], [d_weight, d_bias], lr)
            eta = ema_schedule(global_iter, config)
            ema_update(teacher, student, eta)
            global_iter += 1
            sums["l_str"] += out.l_str
            sums["l_in"] += out.l_in
            sums["l"] += out.l_total

        record = {
            "epoch": epoch,
            "l_str": sums["l_str"] / iters_per_epoch,
            "l_in": sums["l_in"] / iters_per_epoch,
            "l": sums["l"] / iters_per_epoch,
            "eta": eta,
        }
        if gt_labels is not None:
            record["cvpr_accuracy"] = float((struct == gt_labels).mean())
        history.append(record)

    final = pseudo_label_pass(config.epochs)
    return TrainResult(teacher=teacher, student=student, history=history, final=final)
