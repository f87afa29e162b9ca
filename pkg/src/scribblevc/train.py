"""Training loop, optimizer setup and checkpointing."""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import losses, mie
from .dataset import augment, class_vector_from_scribble
from .losses import CrfConfig, LossWeights, PseudoLabelConfig
from .model import ModelConfig, ScribbleVCNet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "scribblevc-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, breakdown):
        super().__init__(f"non-finite training loss: {breakdown}")
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    crf: CrfConfig = field(default_factory=CrfConfig)
    use_mie: bool = True
    grad_clip: float = 5.0
    aug_noise: float = 0.05
    augment: bool = True
    checkpoint_every: int = 0
    eval_every: int = 1
    # "branch": CRF on each branch output, averaged; "mixed": on the gated mixture Y
    crf_target: str = "branch"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        elif isinstance(self.weights, (list, tuple)):
            self.weights = LossWeights(*self.weights)
        if isinstance(self.pseudo, dict):
            self.pseudo = PseudoLabelConfig(**self.pseudo)
        if isinstance(self.crf, dict):
            self.crf = CrfConfig(**self.crf)
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.crf_target not in ("mixed", "branch"):
            raise ValueError(f"crf_target must be 'mixed' or 'branch', got {self.crf_target!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    model: ScribbleVCNet
    optimizer: torch.optim.Optimizer
    bank: mie.ClassMemoryBank
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    best_val: float = float("-inf")


def init_state(model_config, train_config):
    torch.manual_seed(train_config.seed)
    model = ScribbleVCNet(model_config)
    optimizer = torch.optim.AdamW(model.parameters(), lr=train_config.lr,
                                  weight_decay=train_config.weight_decay)
    bank = mie.make_bank(model_config)
    return TrainState(model, optimizer, bank, model_config, train_config)


def draw_alpha(rng):
    a = 0.0
    while a <= 0.0:
        a = float(rng.random())
    return a


def compute_losses(model, bank, images, scribbles, classes, alpha, config, use_mie=True):
    """Forward pass plus the four loss terms; returns (total, parts dict, prediction)."""
    pred = model(images, bank if use_mie else None, mode="train")
    t = config.pseudo.threshold
    L_ss = losses.scribble_loss(scribbles, pred.y_cnn, pred.y_trans)
    Y = losses.mix_pseudo(pred.y_cnn, pred.y_trans, alpha, t)
    # target for the Dice term never carries gradient
    L_pl = losses.pseudo_loss(pred.y_cnn, pred.y_trans, Y.detach())
    if config.crf_target == "mixed":
        L_crf = losses.gated_crf(Y, images[:, 0], config.crf)
    else:
        L_crf = (losses.gated_crf(pred.y_cnn, images[:, 0], config.crf)
                 + losses.gated_crf(pred.y_trans, images[:, 0], config.crf)) / 2
    L_cls = losses.class_loss(pred.p_cnn, pred.p_trans, classes)
    parts = {"L_ss": L_ss, "L_pl": L_pl, "L_crf": L_crf, "L_cls": L_cls}
    total = losses.total_loss(parts, config.weights)
    return total, parts, pred


def train_step(state, batch, rng):
    """One optimizer step; ``batch`` = (images B x 1 x H x W, scribbles, class vectors)."""
    images, scribbles, classes = batch
    cfg = state.train_config
    model = state.model
    model.train()
    alpha = draw_alpha(rng)
    state.optimizer.zero_grad(set_to_none=True)
    try:
        total, parts, _ = compute_losses(model, state.bank, images, scribbles, classes,
                                         alpha, cfg, use_mie=cfg.use_mie)
    except FloatingPointError as exc:
        raise NonFiniteLossError(str(exc)) from None
    breakdown = {k: float(torch.as_tensor(v).detach()) for k, v in parts.items()}
    breakdown["L_total"] = float(total.detach())
    breakdown["alpha"] = alpha
    if not math.isfinite(breakdown["L_total"]):
        raise NonFiniteLossError(breakdown)
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    return state, breakdown


def _to_tensor_batch(images, scribbles, num_classes):
    imgs = torch.as_tensor(np.asarray(images), dtype=torch.float32)[:, None]
    scr = torch.as_tensor(np.asarray(scribbles), dtype=torch.long)
    cls = torch.as_tensor(
        np.stack([class_vector_from_scribble(s, num_classes) for s in scribbles]),
        dtype=torch.float32)
    return imgs, scr, cls


def epoch_batches(images, scribbles, config, epoch, num_classes):
    """Yield augmented batches for one epoch plus the epoch RNG (seeded by epoch)."""
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(images))
    batches = []
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        imgs, scrs = [], []
        for i in idx:
            if config.augment:
                im, sc = augment(images[i], scribbles[i], seed=int(rng.integers(2 ** 32)),
                                 noise=config.aug_noise)
            else:
                im, sc = images[i], scribbles[i]
            imgs.append(im)
            scrs.append(sc)
        batches.append(_to_tensor_batch(imgs, scrs, num_classes))
    return batches, rng


def fit(model_config, train_config, train_data, val_data=None, state=None, out_dir=None,
        on_epoch=None):
    """Train from ``state`` (or a fresh one) until ``train_config.epochs``.

    ``train_data`` is (images, scribbles); ``val_data`` is (images, dense
    masks) or None. Returns the final TrainState; its ``history`` holds one
    record per epoch.
    """
    from .evaluation import evaluate

    if state is None:
        state = init_state(model_config, train_config)
    images, scribbles = train_data
    K = model_config.num_classes
    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        # a resumed run rewrites the history it carries, so the file matches an uninterrupted run
        with open(metrics_path, "w") as fh:
            for record in state.history:
                fh.write(json.dumps(record) + "\n")

    while state.epoch < train_config.epochs:
        epoch = state.epoch
        batches, rng = epoch_batches(images, scribbles, train_config, epoch, K)
        sums = {k: 0.0 for k in ("L_ss", "L_pl", "L_crf", "L_cls", "L_total")}
        for batch in batches:
            state, breakdown = train_step(state, batch, rng)
            for k in sums:
                sums[k] += breakdown[k]
        record = {"epoch": epoch + 1}
        record.update({k: v / max(len(batches), 1) for k, v in sums.items()})
        record["val_dice_per_class"] = None
        record["val_dice_mean"] = None
        last = epoch + 1 == train_config.epochs
        if val_data is not None and len(val_data[0]) and (
                last or (epoch + 1) % max(train_config.eval_every, 1) == 0):
            report = evaluate(state.model, state.bank, val_data[0], val_data[1], K)
            record["val_dice_per_class"] = report.dice_per_class
            record["val_dice_mean"] = report.dice_mean
        state.history.append(record)
        state.epoch += 1
        log.info("epoch %d total %.4f val %s", record["epoch"], record["L_total"],
                 record["val_dice_mean"])
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
            if train_config.checkpoint_every and state.epoch % train_config.checkpoint_every == 0:
                save_checkpoint(state, os.path.join(out_dir, f"epoch_{state.epoch:04d}.pt"))
            if record["val_dice_mean"] is not None and record["val_dice_mean"] > state.best_val:
                state.best_val = record["val_dice_mean"]
                save_checkpoint(state, os.path.join(out_dir, "best.pt"))
        if on_epoch is not None:
            on_epoch(state, record)

    if out_dir is not None:
        save_checkpoint(state, os.path.join(out_dir, "last.pt"))
    return state


def save_checkpoint(state, path):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "bank": state.bank.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "history": state.history,
        "best_val": state.best_val,
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, model_config=None, train_config=None):
    """Restore a TrainState; refuses foreign formats and mismatched class counts."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else type(payload).__name__
        raise CheckpointError(
            f"unsupported checkpoint format {found!r}, expected {CHECKPOINT_FORMAT!r}")
    saved = ModelConfig(**payload["model_config"])
    if model_config is not None and model_config.num_classes != saved.num_classes:
        raise CheckpointError(
            f"checkpoint has num_classes={saved.num_classes}, "
            f"config requests {model_config.num_classes}")
    if model_config is not None and model_config != saved:
        raise CheckpointError(f"model config mismatch: {model_config} vs {saved}")
    tcfg = train_config or TrainConfig(**payload["train_config"])
    state = init_state(saved, tcfg)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    for group in state.optimizer.param_groups:
        group["lr"] = tcfg.lr
        group["weight_decay"] = tcfg.weight_decay
    state.bank = mie.ClassMemoryBank.from_state_dict(payload["bank"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.history = list(payload["history"])
    state.best_val = payload["best_val"]
    torch.set_rng_state(payload["torch_rng"])
    return state
