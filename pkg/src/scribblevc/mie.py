"""Class-embedding memory and feature enhancement.

Per branch, the bank keeps one historical feature vector per class along
with the classification confidence it earned when it was accepted. During
training each batch proposes new class vectors (probability-weighted batch
means), which replace the stored ones only when the branch's class head is
more confident on them. Fusion adds probability-weighted class vectors to
the bottleneck features, broadcast over every spatial position.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

BRANCHES = ("cnn", "trans")


@dataclass
class BranchMemory:
    vectors: torch.Tensor
    valid: torch.Tensor
    score: torch.Tensor

    @classmethod
    def empty(cls, num_classes, dim):
        return cls(
            vectors=torch.zeros(num_classes, dim),
            valid=torch.zeros(num_classes, dtype=torch.bool),
            score=torch.full((num_classes,), float("-inf")),
        )

    def clone(self):
        return BranchMemory(self.vectors.clone(), self.valid.clone(), self.score.clone())


@dataclass
class ClassMemoryBank:
    num_classes: int
    dims: dict
    branches: dict = field(default_factory=dict)

    def __post_init__(self):
        for b, d in self.dims.items():
            if b not in self.branches:
                self.branches[b] = BranchMemory.empty(self.num_classes, d)

    def __getitem__(self, branch):
        return self.branches[branch]

    def is_empty(self):
        return not any(m.valid.any() for m in self.branches.values())

    def clone(self):
        return ClassMemoryBank(self.num_classes, dict(self.dims),
                               {b: m.clone() for b, m in self.branches.items()})

    def state_dict(self):
        return {
            "num_classes": self.num_classes,
            "branches": {
                b: {"vectors": m.vectors.clone(), "valid": m.valid.clone(),
                    "score": m.score.clone()}
                for b, m in self.branches.items()
            },
        }

    @classmethod
    def from_state_dict(cls, state):
        branches = {b: BranchMemory(s["vectors"].clone(), s["valid"].clone(), s["score"].clone())
                    for b, s in state["branches"].items()}
        dims = {b: m.vectors.shape[1] for b, m in branches.items()}
        return cls(state["num_classes"], dims, branches)

    def equals(self, other):
        if set(self.branches) != set(other.branches):
            return False
        for b, m in self.branches.items():
            o = other.branches[b]
            if not (torch.equal(m.vectors, o.vectors) and torch.equal(m.valid, o.valid)
                    and torch.equal(m.score, o.score)):
                return False
        return True


@dataclass
class FusionReport:
    fused: list
    classes: list
    weights: list


def extract_batch_class_vectors(feats, probs):
    """Probability-weighted batch mean per class.

    ``v_k = (1/B) * sum_i probs[i, k] * feats[i]``; returns (K x D vectors,
    per-class counts, always B).
    """
    feats = feats.detach()
    probs = probs.detach()
    B = feats.shape[0]
    vectors = probs.t() @ feats / B
    counts = torch.full((probs.shape[1],), B, dtype=torch.long)
    return vectors, counts


@torch.no_grad()
def update_bank(bank, branch, batch_vectors, cls_head):
    """Accept or reject one candidate per class; mutates and returns ``bank``."""
    if isinstance(batch_vectors, tuple):
        batch_vectors = batch_vectors[0]
    mem = bank[branch]
    batch_vectors = batch_vectors.detach().to(mem.vectors.dtype)
    for k in range(bank.num_classes):
        v = batch_vectors[k]
        if not torch.any(v != 0):
            continue
        candidate = (v + mem.vectors[k]) / 2 if mem.valid[k] else v
        prob = torch.sigmoid(cls_head.on_vector(candidate.unsqueeze(0)))[0, k]
        if prob > mem.score[k]:
            mem.vectors[k] = candidate
            mem.valid[k] = True
            mem.score[k] = prob
    return bank


def _broadcast(offsets, feats):
    # B x D offsets onto B x D x h x w maps or B x N x D tokens
    if feats.dim() == 4:
        return feats + offsets[:, :, None, None]
    if feats.dim() == 3:
        return feats + offsets[:, None, :]
    return feats + offsets


def fuse_train(feats, probs, bank, branch):
    """Add weighted class vectors only when every predicted class has one.

    A sample whose predicted-present classes (probability > 0.5) include one
    without an accepted bank vector keeps its raw features.
    """
    mem = bank[branch]
    probs = probs.detach()
    present = probs > 0.5
    B = probs.shape[0]
    offsets = torch.zeros(B, mem.vectors.shape[1], dtype=feats.dtype)
    report = FusionReport(fused=[], classes=[], weights=[])
    for i in range(B):
        ks = torch.nonzero(present[i]).flatten()
        ok = len(ks) > 0 and bool(mem.valid[ks].all())
        if ok:
            w = probs[i, ks]
            offsets[i] = (w[:, None] * mem.vectors[ks]).sum(0).to(feats.dtype)
        report.fused.append(ok)
        report.classes.append(ks.tolist() if ok else [])
        report.weights.append(probs[i, ks].tolist() if ok else [])
    return _broadcast(offsets, feats), report


def fuse_infer(feats, probs, bank, branch):
    """Read-only fusion: predicted classes lacking a bank vector are skipped."""
    mem = bank[branch]
    probs = probs.detach()
    weights = torch.where((probs > 0.5) & mem.valid[None, :], probs, torch.zeros_like(probs))
    offsets = (weights @ mem.vectors).to(feats.dtype)
    return _broadcast(offsets, feats)


def make_bank(model_config):
    d = model_config.feature_dim
    dims = {}
    if model_config.branches in ("dual", "cnn"):
        dims["cnn"] = d
    if model_config.branches in ("dual", "trans"):
        dims["trans"] = d
    return ClassMemoryBank(model_config.num_classes, dims)


def bank_scores(bank):
    return {b: np.asarray(m.score) for b, m in bank.branches.items()}
