import numpy as np
import pytest

from vocalign import ValidationError
from vocalign.prompts import PrototypeSentenceEmbedder, FixtureLlmClient
from vocalign.store import EmbeddingMatrix
from vocalign.training import (
    AdamW,
    AdapterParams,
    TrainConfig,
    adapter_embeddings,
    cosine_lr,
    ema_schedule,
    ema_update,
    forward,
    losses_and_grads,
    train,
)

from worlds import PlantedWorld


def unit(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def random_problem(rng, n=6, d=7, vocab=12):
    z = unit(rng.standard_normal((n, d)))
    bank = EmbeddingMatrix(unit(rng.standard_normal((vocab, d))), normalized=True)
    struct = rng.integers(0, vocab, n)
    student = AdapterParams(
        np.eye(d) + 0.1 * rng.standard_normal((d, d)), 0.1 * rng.standard_normal(d)
    )
    teacher = AdapterParams(
        np.eye(d) + 0.1 * rng.standard_normal((d, d)), 0.1 * rng.standard_normal(d)
    )
    return z, bank, struct, student, teacher


# ---------------------------------------------------------------- forward


def test_forward_rows_sum_to_one():
    rng = np.random.default_rng(0)
    z, bank, _, student, _ = random_problem(rng)
    probs = forward(student, z, bank, temperature=0.05)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_forward_sharpens_at_low_temperature():
    d = 4
    bank = EmbeddingMatrix(np.eye(d), normalized=True)
    z = unit(np.array([[0.9, 0.1, 0.05, 0.0]]))
    probs = forward(AdapterParams.identity(d), z, bank, temperature=1e-3)
    assert probs[0, 0] > 0.99


def test_forward_uniform_bank_gives_uniform_probs():
    bank = EmbeddingMatrix(np.tile([0.6, 0.8], (5, 1)), normalized=True)
    z = unit(np.array([[1.0, 0.2]]))
    probs = forward(AdapterParams.identity(2), z, bank, temperature=0.1)
    np.testing.assert_allclose(probs, 0.2, atol=1e-12)


def test_forward_matches_softmax_oracle():
    rng = np.random.default_rng(1)
    z, bank, _, student, _ = random_problem(rng, n=8)
    probs = forward(student, z, bank, temperature=0.3)
    a = z @ student.weight.T + student.bias
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    logits = a @ bank.data.T / 0.3
    expect = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(probs, expect, atol=1e-8)


def test_forward_zero_map_errors():
    bank = EmbeddingMatrix(np.eye(3), normalized=True)
    dead = AdapterParams(np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(ValidationError, match="zero vector"):
        forward(dead, np.eye(3), bank, temperature=0.1)


# ---------------------------------------------------------------- losses


def test_gamma_zero_reduces_to_structural():
    rng = np.random.default_rng(2)
    z, bank, struct, student, teacher = random_problem(rng)
    cfg = TrainConfig(gamma=0.0, epochs=1)
    out, _, _ = losses_and_grads(student, teacher, z, bank, struct, cfg)
    assert out.l_total == pytest.approx(out.l_str, abs=1e-15)


def test_tau_one_empties_instance_loss():
    rng = np.random.default_rng(3)
    z, bank, struct, student, teacher = random_problem(rng)
    cfg = TrainConfig(tau=1.0, gamma=0.5, epochs=1)
    out, _, _ = losses_and_grads(student, teacher, z, bank, struct, cfg)
    assert out.l_in == 0.0
    assert not out.mask.any()
    assert out.l_total == pytest.approx(out.l_str)


def test_batch_output_invariants():
    rng = np.random.default_rng(4)
    z, bank, struct, student, teacher = random_problem(rng, n=10)
    cfg = TrainConfig(tau=0.2, temperature=0.5, epochs=1)
    out, _, _ = losses_and_grads(student, teacher, z, bank, struct, cfg)
    np.testing.assert_allclose(out.student_probs.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out.teacher_probs.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(out.mask, out.teacher_probs.max(axis=1) > cfg.tau)


def directional_fd(student, teacher, z, bank, struct, cfg, dw, db, h=1e-5):
    def at(scale):
        s = AdapterParams(student.weight + scale * dw, student.bias + scale * db)
        out, _, _ = losses_and_grads(s, teacher, z, bank, struct, cfg)
        return out.l_total

    return (at(h) - at(-h)) / (2 * h)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    temps = [1.0, 0.3, 0.1]
    for trial in range(12):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(3, 9))
        vocab = int(rng.integers(4, 16))
        z, bank, struct, student, teacher = random_problem(rng, n=n, d=d, vocab=vocab)
        if trial == 0:
            cfg = TrainConfig(gamma=0.0, epochs=1)
        elif trial == 1:
            cfg = TrainConfig(tau=1.0, epochs=1)
        else:
            cfg = TrainConfig(
                tau=float(rng.uniform(0, 0.9)),
                gamma=float(rng.uniform(0, 1.5)),
                temperature=temps[trial % 3],
                epochs=1,
            )
        _, d_weight, d_bias = losses_and_grads(student, teacher, z, bank, struct, cfg)
        # directional derivative along a random direction
        dw = rng.standard_normal(d_weight.shape)
        db = rng.standard_normal(d_bias.shape)
        analytic = float((d_weight * dw).sum() + (d_bias * db).sum())
        numeric = directional_fd(student, teacher, z, bank, struct, cfg, dw, db)
        assert abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10) < 1e-5
        # coordinatewise at 5 random entries
        for _ in range(5):
            i, j = rng.integers(d), rng.integers(d)
            ew = np.zeros_like(d_weight)
            ew[i, j] = 1.0
            num = directional_fd(student, teacher, z, bank, struct, cfg, ew, np.zeros(d))
            assert abs(d_weight[i, j] - num) / max(abs(num), abs(d_weight[i, j]), 1e-8) < 1e-5


# ---------------------------------------------------------------- ema


def test_ema_endpoints_and_midpoint():
    t = AdapterParams(np.full((2, 2), 2.0), np.full(2, 2.0))
    s = AdapterParams(np.zeros((2, 2)), np.zeros(2))
    ema_update(t, s, 1.0)
    assert (t.weight == 2.0).all()
    ema_update(t, s, 0.5)
    assert (t.weight == 1.0).all() and (t.bias == 1.0).all()
    ema_update(t, s, 0.0)
    assert (t.weight == 0.0).all()


def test_ema_shape_mismatch():
    with pytest.raises(ValidationError):
        ema_update(AdapterParams.identity(2), AdapterParams.identity(3), 0.5)


def test_ema_schedule_values():
    cfg = TrainConfig(ema_init=0.999, ema_final=0.9998, ema_warmup_iters=2000, epochs=1)
    assert ema_schedule(0, cfg) == pytest.approx(0.999)
    assert ema_schedule(2000, cfg) == pytest.approx(0.9998)
    assert ema_schedule(1000, cfg) == pytest.approx(0.99940, abs=1e-12)
    assert ema_schedule(5000, cfg) == pytest.approx(0.9998)


def test_teacher_stays_in_student_envelope():
    rng = np.random.default_rng(6)
    d = 4
    student = AdapterParams.identity(d)
    teacher = student.copy()
    low_w = np.minimum(student.weight, teacher.weight)
    high_w = np.maximum(student.weight, teacher.weight)
    cfg = TrainConfig(ema_init=0.9, ema_final=0.99, ema_warmup_iters=10, epochs=1)
    for it in range(40):
        student.weight += 0.05 * rng.standard_normal((d, d))
        low_w = np.minimum(low_w, student.weight)
        high_w = np.maximum(high_w, student.weight)
        ema_update(teacher, student, ema_schedule(it, cfg))
        assert (teacher.weight >= low_w - 1e-12).all()
        assert (teacher.weight <= high_w + 1e-12).all()


# ---------------------------------------------------------------- optimizer


def test_adamw_decoupled_decay_shrinks_params():
    p = np.full((3,), 10.0)
    opt = AdamW([p.shape], weight_decay=0.1)
    for _ in range(5):
        opt.step([p], [np.zeros(3)], lr=0.1)
    assert (np.abs(p) < 10.0).all()


def test_cosine_lr_decays_to_zero():
    assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------- train loop


def small_world():
    return PlantedWorld(seed=9, n=600, d=32, k=6, vocab_size=40, noise=0.08)


def train_kwargs(world):
    return dict(
        x=world.images,
        vocab=world.vocab,
        vocab_bank=world.bank,
        k=world.k,
        llm_client=FixtureLlmClient(),
        embedder=PrototypeSentenceEmbedder(world.bank, sigma=0.05),
        gt_labels=world.gt_words,
    )


def test_train_epochs_zero_returns_identity():
    world = small_world()
    cfg = TrainConfig(epochs=0, seed=0)
    result = train(config=cfg, **train_kwargs(world))
    np.testing.assert_array_equal(result.teacher.weight, np.eye(32))
    np.testing.assert_array_equal(result.teacher.bias, np.zeros(32))
    assert result.history == []
    assert result.final is not None
    assert (result.final.labels.words == world.gt_words).mean() >= 0.99


def test_train_accuracy_never_decreases_on_planted_world():
    world = small_world()
    cfg = TrainConfig(epochs=3, seed=1, ema_warmup_iters=50)
    result = train(config=cfg, **train_kwargs(world))
    accs = [rec["cvpr_accuracy"] for rec in result.history]
    assert len(accs) == 3
    assert all(b >= a - 1e-12 for a, b in zip(accs, accs[1:]))
    final_acc = (result.final.labels.words == world.gt_words).mean()
    assert final_acc >= accs[0]


def test_train_deterministic_history():
    world = small_world()
    cfg = TrainConfig(epochs=2, seed=3, ema_warmup_iters=50)
    r1 = train(config=cfg, **train_kwargs(world))
    r2 = train(config=cfg, **train_kwargs(world))
    assert r1.history == r2.history
    np.testing.assert_array_equal(r1.teacher.weight, r2.teacher.weight)
    np.testing.assert_array_equal(r1.final.labels.words, r2.final.labels.words)


def test_train_pure_structural_moves_toward_prototypes():
    world = small_world()
    cfg = TrainConfig(
        epochs=1, seed=0, gamma=0.0, tau=1.0, learning_rate=5e-3, ema_warmup_iters=20
    )
    result = train(config=cfg, **train_kwargs(world))
    assigned = result.final.assignment.words_in_cluster_order()
    protos_before = world.bank.data[world.gt_words]
    cos_before = np.einsum("ij,ij->i", world.images.data, protos_before).mean()
    adapted = adapter_embeddings(result.student, world.images)
    # student moved instances toward their cluster's assigned prototype
    assigned_protos = world.bank.data[result.final.labels.words]
    cos_after = np.einsum("ij,ij->i", adapted.data, assigned_protos).mean()
    assert cos_after > cos_before
