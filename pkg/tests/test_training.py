import math
import struct

import numpy as np
import pytest

from drf.errors import CheckpointError, CheckpointTruncatedError, CheckpointVersionError, DataError
from drf.model import DRFModel, EncoderConfig
from drf.skeleton_map import RenderConfig
from drf.synth import GaitParams, generate_dataset
from drf.tensor import Tensor, no_grad
from drf.training import (
    SGD,
    ClassBalancedSampler,
    TrainConfig,
    accuracy,
    cross_entropy,
    load_checkpoint,
    log_to_csv,
    prepare,
    save_checkpoint,
    train,
    triplet_loss,
)

TOY = dict(
    render=RenderConfig(width=16, height=16, sigma=1.0),
    encoder=EncoderConfig((2, 3, 3), channels=4, strips=2),
    embed_dim=3,
    p=3,
    k=2,
    epochs=1,
)


@pytest.fixture(scope="module")
def toy_examples():
    seqs = generate_dataset(3, seed=5, base=GaitParams(num_frames=4, noise=1.0))
    return prepare(seqs, TOY["render"])


def brute_triplet(emb, labels, margin):
    b, h, _ = emb.shape
    total, count = 0.0, 0
    for a in range(b):
        for p in range(b):
            for n in range(b):
                if a == p or labels[a] != labels[p] or labels[a] == labels[n]:
                    continue
                count += 1
                for s in range(h):
                    d_ap = math.dist(emb[a, s], emb[p, s])
                    d_an = math.dist(emb[a, s], emb[n, s])
                    total += max(0.0, margin + d_ap - d_an)
    return total / (count * h)


def test_triplet_identical_embeddings_is_margin():
    emb = Tensor(np.ones((4, 3, 5)))
    assert triplet_loss(emb, [0, 0, 1, 1], 0.2).item() == pytest.approx(0.2, abs=1e-15)


def test_triplet_inactive_hinge():
    emb = np.zeros((4, 1, 2))
    emb[2:, 0, 0] = 5.0
    assert triplet_loss(Tensor(emb), [0, 0, 1, 1], 0.2).item() == 0.0


def test_triplet_matches_brute_force(rng):
    emb = rng.normal(size=(4, 2, 3))
    labels = [0, 1, 0, 2]
    assert abs(triplet_loss(Tensor(emb), labels, 0.3).item() - brute_triplet(emb, labels, 0.3)) < 1e-12
    emb = rng.normal(size=(8, 3, 4))
    labels = [0, 0, 1, 1, 2, 2, 0, 1]
    got = triplet_loss(Tensor(emb), labels, 0.2).item()
    assert abs(got - brute_triplet(emb, labels, 0.2)) < 1e-12
    perm = rng.permutation(8)
    assert abs(triplet_loss(Tensor(emb[perm]), [labels[i] for i in perm], 0.2).item() - got) < 1e-12


def test_triplet_no_valid_triplet_warns():
    with pytest.warns(RuntimeWarning):
        assert triplet_loss(Tensor(np.ones((3, 1, 2))), [0, 1, 2]).item() == 0.0


def test_cross_entropy_examples(rng):
    assert cross_entropy(Tensor(np.zeros(3)), 2).item() == pytest.approx(1.0986122886681098, abs=1e-15)
    big = cross_entropy(Tensor([1000.0, 0.0, 0.0]), 0).item()
    assert math.isfinite(big) and big < 1e-12
    z = rng.normal(0, 3, (5, 3))
    y = [0, 2, 1, 1, 0]
    ref = sum(-z[i, y[i]] + math.log(sum(math.exp(v) for v in z[i])) for i in range(5)) / 5
    assert abs(cross_entropy(Tensor(z), y).item() - ref) < 1e-12


def test_config_validation():
    for bad in (dict(margin=0.0), dict(p=1), dict(k=1), dict(lr=-1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_sampler_is_class_balanced(rng):
    labels = [0] * 5 + [1] * 3 + [2] * 9
    s = ClassBalancedSampler(labels, 3, 4, rng)
    for batch in s.epoch():
        counts = np.bincount([labels[i] for i in batch], minlength=3)
        assert counts.tolist() == [4, 4, 4]
    two = ClassBalancedSampler(labels, 2, 2, np.random.default_rng(0))
    for batch in two.epoch():
        assert len({labels[i] for i in batch}) == 2


def test_sgd_momentum():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([w], lr=0.1, momentum=0.9)
    for _ in range(2):
        w.grad = np.array([1.0])
        opt.step()
    # v1 = 1, w = 0.9; v2 = 1.9, w = 0.71
    assert w.data[0] == pytest.approx(0.71)


def test_lr_zero_leaves_parameters(toy_examples):
    res = train(toy_examples, TrainConfig(**{**TOY, "lr": 0.0}))
    fresh = TrainConfig(**TOY)
    seed = int(np.random.default_rng(fresh.seed).integers(0, 2**31 - 1))
    init = DRFModel(fresh.model_config(), seed=seed).state_dict()
    for k, v in res.checkpoint.state.items():
        assert np.array_equal(v, init[k])


def test_training_is_deterministic(toy_examples):
    cfg = TrainConfig(**{**TOY, "epochs": 2})
    a, b = train(toy_examples, cfg), train(toy_examples, cfg)
    assert a.log == b.log
    for k in a.checkpoint.state:
        assert np.array_equal(a.checkpoint.state[k], b.checkpoint.state[k])
    for row in a.log:
        assert math.isfinite(row["l_ce"]) and math.isfinite(row["l_triplet"])
    assert log_to_csv(a.log).splitlines()[0] == "epoch,l_ce,l_triplet,train_acc"


def test_single_class_rejected(toy_examples):
    with pytest.raises(DataError):
        train([e for e in toy_examples if e.label == 0], TrainConfig(**TOY))
    with pytest.raises(DataError):
        train([], TrainConfig(**TOY))


def test_checkpoint_round_trip(tmp_path, toy_examples):
    res = train(toy_examples, TrainConfig(**{**TOY, "guidance": "random", "guidance_seed": 4}))
    path = tmp_path / "m.ckpt"
    save_checkpoint(res.checkpoint, path)
    back = load_checkpoint(path)
    for k, v in res.checkpoint.state.items():
        assert np.array_equal(back.state[k], v)
    assert back.model == res.checkpoint.model and back.render == res.checkpoint.render
    assert np.array_equal(back.stats.minimum, res.checkpoint.stats.minimum)
    model = back.build_model()
    maps = [toy_examples[0].maps]
    with no_grad():
        assert np.array_equal(model(maps).logits.data, res.model(maps).logits.data)
    assert accuracy(model, toy_examples, back.stats) == back.meta["final_train_acc"]

    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path, toy_examples):
    res = train(toy_examples, TrainConfig(**{**TOY, "epochs": 0}))
    path = tmp_path / "m.ckpt"
    save_checkpoint(res.checkpoint, path)
    data = path.read_bytes()

    for cut in (5, 30, len(data) - 8):
        (tmp_path / "t.ckpt").write_bytes(data[:cut])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(tmp_path / "t.ckpt")

    bumped = data[:8] + struct.pack("<I", 99) + data[12:]
    (tmp_path / "v.ckpt").write_bytes(bumped)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.ckpt")

    flipped = bytearray(data)
    flipped[-3] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.ckpt")

    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
