import numpy as np
import pytest
import torch
from torch import nn

from scribblevc import mie
from scribblevc.mie import ClassMemoryBank


class LinearHead(nn.Module):
    def __init__(self, weight, bias=None):
        super().__init__()
        self.weight = torch.as_tensor(weight, dtype=torch.float32)
        self.bias = torch.zeros(self.weight.shape[0]) if bias is None else torch.as_tensor(bias)

    def on_vector(self, v):
        return v @ self.weight.t() + self.bias


def bank(K=3, D=2):
    return ClassMemoryBank(K, {"cnn": D, "trans": D})


# --- extraction -----------------------------------------------------------

def test_extract_zero_probs():
    feats = torch.randn(4, 5)
    v, counts = mie.extract_batch_class_vectors(feats, torch.zeros(4, 3))
    assert torch.all(v == 0)
    assert counts.tolist() == [4, 4, 4]


def test_extract_identity_weight():
    feats = torch.randn(1, 5)
    probs = torch.tensor([[0.3, 1.0, 0.0]])
    v, _ = mie.extract_batch_class_vectors(feats, probs)
    assert torch.equal(v[1], feats[0])


def test_extract_hand_case():
    feats = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    probs = torch.tensor([[0.5], [1.0]])
    v, _ = mie.extract_batch_class_vectors(feats, probs)
    assert torch.allclose(v[0], torch.tensor([0.25, 0.5]), atol=1e-7)


def test_extract_matches_loop():
    rng = np.random.default_rng(0)
    feats = torch.tensor(rng.normal(size=(6, 4)))
    probs = torch.tensor(rng.random((6, 3)))
    v, _ = mie.extract_batch_class_vectors(feats, probs)
    for k in range(3):
        expected = sum(probs[i, k] * feats[i] for i in range(6)) / 6
        assert torch.allclose(v[k], expected)


# --- bank updates ---------------------------------------------------------

def test_cold_start_accepts():
    b = bank()
    head = LinearHead(np.eye(3, 2))
    vecs = torch.tensor([[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]])
    mie.update_bank(b, "cnn", vecs, head)
    mem = b["cnn"]
    assert mem.valid.tolist() == [True, False, True]
    assert torch.equal(mem.vectors[0], vecs[0])
    assert mem.score[1] == float("-inf") and torch.all(mem.vectors[1] == 0)
    assert b["trans"].valid.sum() == 0


def test_reject_keeps_bank_bitwise():
    b = bank()
    head = LinearHead(np.eye(3, 2))
    mie.update_bank(b, "cnn", torch.tensor([[3.0, 0.0], [0.0, 0.0], [0.0, 0.0]]), head)
    before = b.clone()
    # averaging with a negative vector lowers class-0 confidence
    mie.update_bank(b, "cnn", torch.tensor([[-2.0, 0.0], [0.0, 0.0], [0.0, 0.0]]), head)
    assert b.equals(before)


def test_two_accepted_updates_raise_score():
    b = bank()
    head = LinearHead(np.eye(3, 2))
    scores = []
    for x in (1.0, 3.0, 9.0):
        mie.update_bank(b, "cnn", torch.tensor([[x, 0.0], [0, 0], [0, 0]]), head)
        scores.append(float(b["cnn"].score[0]))
    # candidates: 1 -> (3+1)/2=2 -> (9+2)/2=5.5, each more confident
    assert scores[0] < scores[1] < scores[2]
    assert torch.allclose(b["cnn"].vectors[0], torch.tensor([5.5, 0.0]))


def test_score_monotone_random_rounds():
    torch.manual_seed(0)
    b = bank(K=4, D=8)
    head = LinearHead(torch.randn(4, 8))
    prev = b["cnn"].score.clone()
    for _ in range(50):
        feats = torch.randn(5, 8)
        probs = torch.rand(5, 4)
        vecs, _ = mie.extract_batch_class_vectors(feats, probs)
        mie.update_bank(b, "cnn", vecs, head)
        cur = b["cnn"].score
        assert torch.all(cur >= prev)
        prev = cur.clone()
    assert b["cnn"].valid.all()


# --- fusion --------------------------------------------------------------------

def populated(K=3, D=2):
    b = bank(K, D)
    mem = b["cnn"]
    mem.vectors[:] = torch.arange(K * D, dtype=torch.float32).reshape(K, D) + 1
    mem.valid[:] = True
    mem.score[:] = 0.9
    return b


def test_fuse_train_no_predicted_class():
    b = populated()
    feats = torch.randn(2, 2, 3, 3)
    fused, report = mie.fuse_train(feats, torch.full((2, 3), 0.5), b, "cnn")
    assert torch.equal(fused, feats)
    assert report.fused == [False, False]


def test_fuse_train_unit_weight():
    b = populated()
    feats = torch.zeros(1, 2)
    fused, report = mie.fuse_train(feats, torch.tensor([[0.0, 1.0, 0.2]]), b, "cnn")
    assert torch.equal(fused[0], b["cnn"].vectors[1])
    assert report.fused == [True] and report.classes == [[1]]


def test_fuse_train_weighted_sum():
    b = populated()
    v1, v2 = b["cnn"].vectors[1], b["cnn"].vectors[2]
    feats = torch.tensor([[0.5, -1.0]])
    fused, report = mie.fuse_train(feats, torch.tensor([[0.1, 0.8, 0.6]]), b, "cnn")
    expected = feats[0] + 0.8 * v1 + 0.6 * v2
    assert torch.allclose(fused[0], expected, atol=1e-6)
    assert all(0.5 < w <= 1 for w in report.weights[0])


def test_fuse_train_veto_when_class_invalid():
    b = populated()
    b["cnn"].valid[2] = False
    feats = torch.randn(1, 2)
    fused, report = mie.fuse_train(feats, torch.tensor([[0.1, 0.8, 0.6]]), b, "cnn")
    assert torch.equal(fused, feats) and report.fused == [False]


def test_fuse_infer_excludes_invalid_class():
    b = populated()
    b["cnn"].valid[2] = False
    feats = torch.tensor([[0.5, -1.0]])
    fused = mie.fuse_infer(feats, torch.tensor([[0.1, 0.9, 0.6]]), b, "cnn")
    assert torch.allclose(fused[0], feats[0] + 0.9 * b["cnn"].vectors[1], atol=1e-6)


def test_fuse_infer_pure():
    b = populated()
    feats = torch.randn(3, 2, 4, 4)
    probs = torch.rand(3, 3)
    assert torch.equal(mie.fuse_infer(feats, probs, b, "cnn"), mie.fuse_infer(feats, probs, b, "cnn"))


@pytest.mark.parametrize("fuse", ["train", "infer"])
def test_empty_bank_identity(fuse):
    b = bank()
    feats = torch.randn(4, 2, 4, 4)
    probs = torch.rand(4, 3)
    if fuse == "train":
        out, _ = mie.fuse_train(feats, probs, b, "cnn")
    else:
        out = mie.fuse_infer(feats, probs, b, "cnn")
    assert float((out - feats).abs().max()) == 0.0


def test_fusion_locality():
    b = populated()
    feats = torch.randn(3, 2, 4, 4)
    probs = torch.rand(3, 3)
    base = mie.fuse_infer(feats, probs, b, "cnn")
    probs2 = probs.clone()
    probs2[1] = torch.tensor([0.9, 0.9, 0.9])
    feats2 = feats.clone()
    feats2[1] += 5
    out = mie.fuse_infer(feats2, probs2, b, "cnn")
    assert torch.equal(out[0], base[0]) and torch.equal(out[2], base[2])
    out_t, _ = mie.fuse_train(feats2, probs2, b, "cnn")
    base_t, _ = mie.fuse_train(feats, probs, b, "cnn")
    assert torch.equal(out_t[0], base_t[0]) and torch.equal(out_t[2], base_t[2])


def test_spatial_broadcast_constant():
    b = populated()
    feats = torch.randn(2, 2, 5, 5)
    probs = torch.tensor([[0.9, 0.7, 0.2], [0.6, 0.6, 0.6]])
    for out in (mie.fuse_infer(feats, probs, b, "cnn"), mie.fuse_train(feats, probs, b, "cnn")[0]):
        delta = out - feats
        assert torch.allclose(delta, delta[:, :, :1, :1].expand_as(delta), atol=1e-6)


def test_state_dict_round_trip():
    b = populated()
    again = ClassMemoryBank.from_state_dict(b.state_dict())
    assert again.equals(b)
