import numpy as np
import pytest

from repforget.diffcore import ShapeError, backward, ops, stream
from repforget.models import (ModelSpec, Snapshot, SnapshotError, build, permute_representation, restore,
                              snapshot)


def mlp(width=8, depth=2, d_in=5, **kw):
    return build(ModelSpec("mlp", (d_in,), depth=depth, width=width, **kw), stream(0, "init"))


def conv(depth=3, width=4, side=8):
    return build(ModelSpec("smallconv", (1, side, side), depth=depth, width=width), stream(0, "init"))


def test_build_is_deterministic():
    a, b = mlp(), mlp()
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("mlp", (4,), depth=0)
    with pytest.raises(ValueError):
        ModelSpec("mlp", (4,), width=0)
    with pytest.raises(ValueError):
        ModelSpec("resnet", (4,))
    with pytest.raises(ValueError):
        ModelSpec("smallconv", (4,))


def test_smallconv_exposes_one_tap_per_block():
    net = conv(depth=3)
    x = stream(1, "x").standard_normal((4, 1, 8, 8))
    feats = [net.features(x, tap) for tap in range(3)]
    assert len(feats) == 3
    assert [f.shape[1] for f in feats] == net.spec.tap_dims()
    with pytest.raises(ValueError):
        net.features(x, 3)
    with pytest.raises(ValueError):
        net.features(x, "middle")


def test_inner_parameter_count_scales_with_width_squared():
    # an inner mlp layer holds width*width weights plus width biases
    def inner(width):
        net = mlp(width=width, depth=3, d_in=10)
        return net.params["block1.W"].size + net.params["block1.b"].size

    assert inner(32) == 32 * 32 + 32
    assert inner(128) == 128 * 128 + 128
    ratio = inner(128) / inner(32)
    assert abs(ratio - 16.0) < 0.5
    total = mlp(width=32, depth=3, d_in=10).n_parameters()
    assert total == (10 * 32 + 32) + 2 * (32 * 32 + 32)


def test_depth1_final_tap_is_relu_affine():
    net = mlp(depth=1)
    x = stream(2, "x").standard_normal((6, 5))
    expected = np.maximum(x @ net.params["block0.W"].data + net.params["block0.b"].data, 0.0)
    np.testing.assert_array_equal(net.features(x), expected)


def test_features_deterministic_and_pure():
    net = mlp()
    x = stream(3, "x").standard_normal((7, 5))
    before = {n: p.data.copy() for n, p in net.named_parameters()}
    np.testing.assert_array_equal(net.features(x), net.features(x))
    for n, p in net.named_parameters():
        np.testing.assert_array_equal(p.data, before[n])


def test_features_batching_does_not_change_rows():
    net = conv()
    x = stream(4, "x").standard_normal((9, 1, 8, 8))
    np.testing.assert_array_equal(net.features(x, batch_size=2), net.features(x))


def test_permuted_final_layer_permutes_features():
    net = mlp()
    x = stream(5, "x").standard_normal((6, 5))
    perm = stream(5, "perm").permutation(8)
    np.testing.assert_array_equal(permute_representation(net, perm).features(x), net.features(x)[:, perm])
    with pytest.raises(ValueError):
        permute_representation(net, [0, 0, 1, 2, 3, 4, 5, 6])


def test_permuted_conv_features_too():
    net = conv()
    x = stream(6, "x").standard_normal((3, 1, 8, 8))
    perm = stream(6, "perm").permutation(4)
    np.testing.assert_allclose(permute_representation(net, perm).features(x), net.features(x)[:, perm], atol=1e-14)


def test_zero_head_gives_uniform_logits_and_shape():
    net = mlp()
    net.add_head(1, 2)
    logits = net.head_logits(1, stream(7, "x").standard_normal((5, 5))).data
    assert logits.shape == (5, 2)
    np.testing.assert_array_equal(logits, np.zeros((5, 2)))
    with pytest.raises(KeyError):
        net.head_logits(2, np.zeros((1, 5)))
    with pytest.raises(ValueError):
        net.add_head(1, 2)


def test_permutation_changes_logits_of_a_fixed_head():
    net = mlp()
    net.add_head(1, 3, stream(0, "head"))
    x = stream(8, "x").standard_normal((4, 5))
    perm = np.roll(np.arange(8), 1)
    other = permute_representation(net, perm)
    assert not np.allclose(net.head_logits(1, x).data, other.head_logits(1, x).data)


def test_adding_head_leaves_others_untouched():
    net = mlp()
    net.add_head(1, 2, stream(0, "h1"))
    x = stream(9, "x").standard_normal((4, 5))
    before = net.head_logits(1, x).data.copy()
    net.add_head(2, 3, stream(0, "h2"))
    np.testing.assert_array_equal(net.head_logits(1, x).data, before)


def test_loss_on_one_head_never_reaches_another():
    net = mlp()
    net.add_head(1, 2, stream(0, "h1"))
    net.add_head(2, 2, stream(0, "h2"))
    x = stream(10, "x").standard_normal((4, 5))
    backward(ops.softmax_cross_entropy(net.head_logits(2, x), np.array([0, 1, 0, 1])))
    assert all(p.grad is None for p in net.head_parameters(1))
    assert all(p.grad is not None for p in net.head_parameters(2))


def test_representation_dim_ignores_projection():
    net = mlp(projection_dim=3)
    x = np.ones((2, 5))
    assert net.features(x).shape == (2, 8)
    assert net.project(net.representation(x)).shape == (2, 3)
    with pytest.raises(ValueError):
        mlp().project(net.representation(x))


def test_wrong_input_shape():
    with pytest.raises(ShapeError):
        mlp().features(np.ones((2, 4)))


# ---------------------------------------------------------------- snapshots

def test_snapshot_round_trip_is_bit_exact(tmp_path):
    net = conv()
    net.add_head(1, 2, stream(0, "h"))
    snap = snapshot(net, 3)
    path = tmp_path / "s.snap"
    snap.save(path)
    back = restore(Snapshot.load(path))
    assert back.spec == net.spec and back.heads == net.heads
    x = stream(11, "x").standard_normal((3, 1, 8, 8))
    np.testing.assert_array_equal(back.features(x), net.features(x))
    np.testing.assert_array_equal(back.head_logits(1, x).data, net.head_logits(1, x).data)
    assert Snapshot.load(path).to_bytes() == snap.to_bytes()


def test_snapshot_is_isolated_from_live_network():
    net = mlp()
    snap = snapshot(net, 1)
    net.params["block0.W"].data += 1.0
    assert not np.array_equal(snap.params["block0.W"], net.params["block0.W"].data)
    restored = restore(snap)
    restored.params["block0.b"].data += 1.0
    np.testing.assert_array_equal(snap.params["block0.b"], np.zeros(8))
    with pytest.raises(ValueError):
        snap.params["block0.W"][0, 0] = 5.0


def test_snapshot_size_linear_in_parameter_count():
    sizes = []
    for width in (8, 16, 32):
        net = mlp(width=width, depth=1, d_in=4)
        sizes.append((net.n_parameters(), len(snapshot(net, 0).to_bytes())))
    # eight bytes per parameter plus a header whose size only varies by a few digits
    overhead = [s - 8 * n for n, s in sizes]
    assert max(overhead) - min(overhead) <= 4


@pytest.mark.parametrize("mutate", ["magic", "flip", "truncate", "version"])
def test_corrupt_snapshot_rejected(mutate):
    blob = bytearray(snapshot(mlp(), 0).to_bytes())
    if mutate == "magic":
        blob[0:2] = b"XX"
    elif mutate == "flip":
        blob[40] ^= 0xFF
    elif mutate == "truncate":
        blob = blob[:-20]
    else:
        blob[6] = 9
    with pytest.raises(SnapshotError):
        Snapshot.from_bytes(bytes(blob))
