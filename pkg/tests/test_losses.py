import math

import numpy as np
import pytest

from repforget import losses
from repforget.diffcore import ShapeError, Tensor, backward, finite_diff_check, ops, stream
from repforget.selftest import LOSSES, SIZES, loss_closure


def param(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# ------------------------------------------------------- independent oracles

def cos_sim(a, b, tau):
    return math.exp(float(np.dot(a, b)) / (tau * math.sqrt(float(np.dot(a, a))) * math.sqrt(float(np.dot(b, b)))))


def supcon_oracle(Z, labels, tau):
    """Double loop straight from the definition; raw sum over anchors."""
    n = len(Z)
    total = 0.0
    for i in range(n):
        denom = sum(cos_sim(Z[a], Z[i], tau) for a in range(n) if a != i)
        pos = [p for p in range(n) if p != i and labels[p] == labels[i]]
        total += -sum(math.log(cos_sim(Z[p], Z[i], tau) / denom) for p in pos) / len(pos)
    return total


def simclr_oracle(Z, tau):
    n = len(Z)
    half = n // 2
    total = 0.0
    for i in range(n):
        p = (i + half) % n
        denom = sum(cos_sim(Z[a], Z[i], tau) for a in range(n) if a != i)
        total += -math.log(cos_sim(Z[p], Z[i], tau) / denom)
    return total


def ce_oracle(logits, labels):
    out = 0.0
    for row, y in zip(logits, labels):
        out += -row[y] + math.log(sum(math.exp(v) for v in row))
    return out / len(labels)


def kl_oracle(student, teacher, T):
    total = 0.0
    for s, t in zip(student, teacher):
        ps = [math.exp(v / T) for v in s]
        pt = [math.exp(v / T) for v in t]
        zs, zt = sum(ps), sum(pt)
        total += sum((b / zt) * math.log((b / zt) / (a / zs)) for a, b in zip(ps, pt))
    return T * T * total / len(student)


# ------------------------------------------------------------ cross entropy

def test_ce_uniform_is_ln2():
    v = losses.cross_entropy(Tensor([[0.0, 0.0]]), np.array([0])).item()
    assert abs(v - math.log(2)) < 1e-15


def test_ce_saturated_correct():
    assert losses.cross_entropy(Tensor([[100.0, 0.0]]), np.array([0])).item() < 1e-40


def test_ce_matches_direct_formula():
    rng = stream(0, "ce")
    z = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    assert abs(losses.cross_entropy(Tensor(z), y).item() - ce_oracle(z, y)) <= 1e-12


# --------------------------------------------------------------------- sim

def test_sim_examples():
    a = np.array([1.0, 2.0, -1.0])
    assert abs(losses.sim(a, a, 1.0) - math.e) < 1e-12
    assert abs(losses.sim([1.0, 0.0], [0.0, 3.0], 1.0) - 1.0) < 1e-15
    b = np.array([0.5, -1.0, 2.0])
    assert losses.sim(2 * a, b, 0.3) == pytest.approx(losses.sim(a, b, 0.3), rel=1e-14)
    with pytest.raises(ValueError):
        losses.sim([0.0, 0.0], a[:2], 1.0)
    with pytest.raises(ValueError):
        losses.sim(a, b, 0.0)


def test_sim_range():
    rng = stream(1, "sim")
    for _ in range(50):
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        v = losses.sim(a, b, 0.5)
        assert math.exp(-2.0) <= v <= math.exp(2.0)


# ------------------------------------------------------------------ SupCon

def test_supcon_hand_example():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    Z = np.stack([e1, e1, e2, e2])
    labels = np.array([0, 0, 1, 1])
    # each anchor: one positive at cosine 1 against a denominator of e + 1 + 1
    per_anchor = math.log(math.e + 2.0) - 1.0
    value = losses.supcon_loss(Tensor(Z), labels, temperature=1.0, reduction="sum").item()
    assert abs(value - 4 * per_anchor) <= 1e-12
    assert abs(value - 2.2057788557) <= 1e-6
    # the rounded figure 2.205783 sits 4.1e-6 above the exact value
    assert abs(value - 2.205783) <= 5e-6
    assert abs(supcon_oracle(Z, labels, 1.0) - value) <= 1e-12
    scaled = losses.supcon_loss(Tensor(7 * Z), labels, temperature=1.0, reduction="sum").item()
    assert abs(scaled - value) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_supcon_matches_oracle(seed):
    rng = stream(seed, "supcon-oracle")
    n = 8 + 2 * seed
    Z = rng.standard_normal((n, 5))
    labels = np.arange(n) % 3
    for tau in (0.1, 0.5, 1.0):
        got = losses.supcon_loss(Tensor(Z), labels, temperature=tau, reduction="sum").item()
        assert abs(got - supcon_oracle(Z, labels, tau)) <= 1e-10 * max(1.0, abs(got))
        mean = losses.supcon_loss(Tensor(Z), labels, temperature=tau).item()
        assert abs(mean - got / n) <= 1e-12 * max(1.0, abs(got))


def test_supcon_invariances():
    rng = stream(2, "supcon-inv")
    Z = rng.standard_normal((10, 4))
    labels = np.arange(10) % 2
    base = losses.supcon_loss(Tensor(Z), labels, 0.2, "sum").item()
    assert abs(losses.supcon_loss(Tensor(3.3 * Z), labels, 0.2, "sum").item() - base) <= 1e-12
    perm = rng.permutation(10)
    assert abs(losses.supcon_loss(Tensor(Z[perm]), labels[perm], 0.2, "sum").item() - base) <= 1e-12


def test_supcon_errors():
    with pytest.raises(ValueError, match="no positive"):
        losses.supcon_loss(Tensor(np.eye(3)), np.array([0, 0, 1]))
    with pytest.raises(ValueError):
        losses.supcon_loss(Tensor(np.eye(2)), np.array([0, 0]), temperature=0.0)
    with pytest.raises(ShapeError):
        losses.supcon_loss(Tensor(np.eye(2)), np.array([0, 0, 0]))


# ------------------------------------------------------------------ SimCLR

def test_simclr_single_pair_is_zero():
    Z = stream(3, "simclr").standard_normal((2, 4))
    assert abs(losses.simclr_loss(Tensor(Z), 0.5, "sum").item()) <= 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_simclr_matches_oracle(seed):
    Z = stream(seed, "simclr-oracle").standard_normal((8, 6))
    for tau in (0.1, 0.5, 2.0):
        got = losses.simclr_loss(Tensor(Z), tau, "sum").item()
        assert abs(got - simclr_oracle(Z, tau)) <= 1e-10 * max(1.0, abs(got))


def test_simclr_scale_invariance_and_errors():
    Z = stream(4, "simclr").standard_normal((6, 3))
    base = losses.simclr_loss(Tensor(Z)).item()
    assert abs(losses.simclr_loss(Tensor(0.01 * Z)).item() - base) <= 1e-12
    with pytest.raises(ValueError):
        losses.simclr_loss(Tensor(Z[:5]))
    with pytest.raises(ValueError):
        losses.simclr_loss(Tensor(Z), temperature=-1.0)


# ------------------------------------------------------------ distillation

def test_distillation_identical_is_zero():
    z = stream(5, "kd").standard_normal((4, 3))
    assert abs(losses.distillation_loss(Tensor(z), z, 2.0).item()) <= 1e-12


def test_distillation_uniform_teacher_oracle():
    s = stream(6, "kd").standard_normal((5, 4))
    t = np.zeros((5, 4))
    T = 2.0
    got = losses.distillation_loss(Tensor(s), t, T).item()
    # KL(u || p) = -ln K - mean_k log p_k
    logp = s / T - np.log(np.exp(s / T).sum(axis=1, keepdims=True))
    expected = T * T * np.mean(-math.log(4) - logp.mean(axis=1))
    assert abs(got - expected) <= 1e-12
    assert abs(got - kl_oracle(s, t, T)) <= 1e-12


def test_distillation_nonnegative_and_teacher_detached():
    rng = stream(7, "kd")
    for _ in range(20):
        s, t = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        v = losses.distillation_loss(Tensor(s), t, 1.5).item()
        assert v >= -1e-12
        assert abs(v - kl_oracle(s, t, 1.5)) <= 1e-12
    s, t = param(rng.standard_normal((3, 5))), param(rng.standard_normal((3, 5)))
    backward(losses.distillation_loss(s, t, 2.0))
    assert t.grad is None
    assert s.grad is not None


def test_distillation_shape_mismatch():
    with pytest.raises(ShapeError):
        losses.distillation_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 4)))


# --------------------------------------------------------------------- EWC

def anchor(theta_star, fisher):
    return losses.FisherAnchor(1, {"w": np.asarray(theta_star, float)}, {"w": np.asarray(fisher, float)})


def test_ewc_examples():
    w = {"w": param([4.0])}
    assert losses.ewc_penalty(w, [anchor([1.0], [1.0])], 2.0).item() == 9.0
    assert losses.ewc_penalty(w, [anchor([4.0], [1.0])], 2.0).item() == 0.0
    assert losses.ewc_penalty(w, [anchor([1.0], [1.0])], 0.0).item() == 0.0


def test_ewc_sums_anchors_and_is_monotone():
    w = {"w": param([1.0, 2.0])}
    a1, a2 = anchor([0.0, 0.0], [1.0, 2.0]), anchor([1.0, 1.0], [3.0, 1.0])
    both = losses.ewc_penalty(w, [a1, a2], 1.0).item()
    assert both == pytest.approx(losses.ewc_penalty(w, [a1], 1.0).item() + losses.ewc_penalty(w, [a2], 1.0).item())
    values = [losses.ewc_penalty(w, [a1], lam).item() for lam in (0.0, 0.5, 1.0, 8.0)]
    assert values == sorted(values)
    dists = [losses.ewc_penalty({"w": param([d, 0.0])}, [a1], 1.0).item() for d in (0.0, 0.5, 1.0, 3.0)]
    assert dists == sorted(dists)


def test_ewc_errors():
    w = {"w": param([1.0, 2.0])}
    with pytest.raises(ShapeError):
        losses.ewc_penalty(w, [anchor([0.0], [1.0])], 1.0)
    with pytest.raises(ValueError):
        losses.ewc_penalty(w, [anchor([0.0, 0.0], [1.0, 1.0])], -1.0)
    with pytest.raises(ValueError):
        anchor([0.0], [-1.0])


def tiny_model():
    # logits = [a * x, b * x]; two parameters, one input feature
    a, b = param([[0.7]]), param([[-0.4]])
    unused = param([[1.0]])

    def logits_fn(x):
        return ops.concat([ops.matmul(Tensor(x), a), ops.matmul(Tensor(x), b)], axis=1)

    return logits_fn, {"a": a, "b": b, "unused": unused}


def test_fisher_matches_exhaustive_expectation():
    logits_fn, params = tiny_model()
    X = np.array([[1.0], [-2.0], [0.5]])
    a, b = params["a"].data[0, 0], params["b"].data[0, 0]
    # exhaustive: d log p_y / d(a, b) = x * (onehot_y - p)
    exact = np.zeros(2)
    var = np.zeros(2)
    for (x,) in X:
        z = np.array([a * x, b * x])
        p = np.exp(z - z.max())
        p /= p.sum()
        g2 = np.array([[(x * ((y == k) - p[k])) ** 2 for k in range(2)] for y in range(2)])
        m = p @ g2
        exact += m / len(X)
        var += p @ (g2 - m) ** 2
    n = 3000
    # each input visited n/3 times; variance of the mean of n independent draws
    sigma = np.sqrt(var * (n / len(X))) / n
    est = losses.estimate_fisher(logits_fn, params, X, stream(0, "fisher"), n_samples=n)
    got = np.array([est.fisher["a"][0, 0], est.fisher["b"][0, 0]])
    assert np.all(np.abs(got - exact) <= 3 * sigma)
    assert est.fisher["unused"][0, 0] == 0.0
    np.testing.assert_array_equal(est.anchor["a"], params["a"].data)


def test_fisher_nonnegative_and_errors():
    logits_fn, params = tiny_model()
    est = losses.estimate_fisher(logits_fn, params, np.array([[1.0], [2.0]]), stream(1, "fisher"))
    assert all(np.all(f >= 0) for f in est.fisher.values())
    assert all(p.grad is None for p in params.values())
    with pytest.raises(ValueError):
        losses.estimate_fisher(logits_fn, params, np.zeros((0, 1)), stream(1, "fisher"))


# --------------------------------------------------------- gradient checks

@pytest.mark.parametrize("kind", LOSSES)
@pytest.mark.parametrize("size", SIZES)
def test_loss_gradients(kind, size):
    fn, params = loss_closure(kind, *size, seed=0)
    assert finite_diff_check(fn, params, epsilon=1e-5) <= 1e-4
