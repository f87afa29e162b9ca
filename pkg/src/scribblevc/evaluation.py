"""Dice evaluation, prediction policy and experiment grids."""

import csv
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

log = logging.getLogger(__name__)

METRICS_SCHEMA = "scribblevc-metrics/1"
POLICIES = ("mean", "cnn", "trans")


@dataclass
class EvalReport:
    dice_per_class: list
    dice_mean: float
    num_samples: int
    policy: str = "mean"
    config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)

    def to_dict(self):
        return {
            "schema": METRICS_SCHEMA,
            "dice_per_class": [float(d) for d in self.dice_per_class],
            "dice_mean": float(self.dice_mean),
            "num_samples": int(self.num_samples),
            "policy": self.policy,
            "config": self.config,
            "seeds": list(self.seeds),
        }


def dice_score(pred, truth, num_classes):
    """Per-class Dice; 1.0 when a class is absent from both, 0.0 if from one."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    scores = np.empty(num_classes)
    for k in range(num_classes):
        p = pred == k
        t = truth == k
        denom = p.sum() + t.sum()
        scores[k] = 1.0 if denom == 0 else 2.0 * np.logical_and(p, t).sum() / denom
    return scores


def combine(y_cnn, y_trans, policy="mean"):
    if policy == "mean":
        return (y_cnn + y_trans) / 2
    if policy == "cnn":
        return y_cnn
    if policy == "trans":
        return y_trans
    raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")


@torch.no_grad()
def predict_proba(model, bank, images, policy="mean", batch_size=16):
    """Eval-mode class probabilities, N x K x H x W (numpy)."""
    model.eval()
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 2:
        images = images[None]
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(images[start:start + batch_size])[:, None]
        pred = model(x, bank, mode="eval")
        out.append(combine(pred.y_cnn, pred.y_trans, policy).numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def predict(model, bank, images, policy="mean", batch_size=16):
    return predict_proba(model, bank, images, policy, batch_size).argmax(axis=1)


def evaluate(model, bank, images, masks, num_classes, policy="mean", return_preds=False):
    """Mean per-image Dice over a set; the summary mean skips background."""
    preds = predict(model, bank, images, policy)
    per_image = np.stack([dice_score(p, t, num_classes) for p, t in zip(preds, masks)])
    per_class = per_image.mean(axis=0)
    report = EvalReport(
        dice_per_class=per_class.tolist(),
        dice_mean=float(per_class[1:].mean()),
        num_samples=len(preds),
        policy=policy,
    )
    if return_preds:
        return report, preds
    return report


def scribble_accuracy(preds, scribbles, num_classes):
    scribbles = np.asarray(scribbles)
    labeled = scribbles < num_classes
    if not labeled.any():
        return 1.0
    return float((np.asarray(preds)[labeled] == scribbles[labeled]).mean())


# --- experiment grids ------------------------------------------------------

ABLATION_VARIANTS = ("cnn", "trans", "dual", "full")


def ablation_variant(name, model_config, train_config):
    """Model/train configs for one ablation row.

    cnn / trans: one branch, scribble CE + CRF on the branch output only
    (pseudo-label mixing degenerates since both slots hold the same map). dual: both branches,
    scribble CE + pseudo-label + CRF, no class loss or memory. full: all
    four terms and the class memory.
    """
    w = train_config.weights
    if name in ("cnn", "trans"):
        mc = replace(model_config, branches=name)
        # no mixture exists without a second branch, so the CRF acts on the branch output
        tc = replace(train_config, use_mie=False, crf_target="branch",
                     weights=replace(w, pseudo=0.0, cls=0.0))
    elif name == "dual":
        mc = replace(model_config, branches="dual")
        tc = replace(train_config, use_mie=False, weights=replace(w, cls=0.0))
    elif name == "full":
        mc = replace(model_config, branches="dual")
        tc = replace(train_config, use_mie=True)
    else:
        raise ValueError(f"unknown ablation variant {name!r}")
    return mc, tc


def describe_variant(model_config, train_config):
    dual = model_config.branches == "dual"
    return {
        "branches": model_config.branches,
        "use_mie": train_config.use_mie,
        "weights": list(train_config.weights.as_tuple()),
        "alpha": "uniform(0,1) per batch" if dual else "degenerate (single branch)",
        "scribble_terms": 2 if dual else 1,
        "crf_target": train_config.crf_target,
    }


def _train_and_eval(model_config, train_config, train_data, val_data):
    from .train import fit

    state = fit(model_config, train_config, train_data, None)
    return evaluate(state.model, state.bank, val_data[0], val_data[1],
                    model_config.num_classes)


def _summarize(scores):
    arr = np.asarray([s for s in scores if s is not None], dtype=float)
    if arr.size == 0:
        return None, None
    return float(arr.mean()), float(arr.std(ddof=0))


def run_ablation(model_config, train_config, train_data, val_data, seeds=(0, 1, 2),
                 variants=ABLATION_VARIANTS, tolerance=0.01):
    """Train every variant for every seed; failed cells are recorded, not raised."""
    rows = []
    for name in variants:
        mc, tc = ablation_variant(name, model_config, train_config)
        cells = []
        for seed in seeds:
            try:
                report = _train_and_eval(mc, replace(tc, seed=seed), train_data, val_data)
                cells.append({"seed": seed, "dice_mean": report.dice_mean,
                              "dice_per_class": report.dice_per_class, "error": None})
            except Exception as exc:  # recorded per cell
                log.exception("ablation cell %s/%s failed", name, seed)
                cells.append({"seed": seed, "dice_mean": None, "dice_per_class": None,
                              "error": f"{type(exc).__name__}: {exc}"})
        mean, sd = _summarize([c["dice_mean"] for c in cells])
        rows.append({"variant": name, "config": describe_variant(mc, tc),
                     "mean": mean, "sd": sd, "cells": cells})
    return {"kind": "ablation", "rows": rows, "seeds": list(seeds),
            "checks": ablation_checks(rows, tolerance)}


def ablation_checks(rows, tolerance=0.01):
    by = {r["variant"]: r["mean"] for r in rows}
    checks = {}
    if all(by.get(k) is not None for k in ("cnn", "trans", "dual")):
        checks["dual_vs_single"] = by["dual"] >= max(by["cnn"], by["trans"]) - tolerance
    if all(by.get(k) is not None for k in ("dual", "full")):
        checks["full_vs_dual"] = by["full"] >= by["dual"] - tolerance
    checks["ordering_ok"] = bool(checks) and all(checks.values())
    return checks


def run_sensitivity(model_config, train_config, train_pool, val_data, sizes=(4, 8, 16, 32),
                    seeds=(0, 1, 2), tolerance=0.02):
    """One model per (training-set size, seed) on a fixed validation set.

    ``train_pool`` is (images, scribbles); size n uses its first n samples.
    """
    sizes = [int(s) for s in sizes]
    if len(set(sizes)) != len(sizes):
        raise ValueError(f"duplicate training-set sizes in {sizes}")
    if not sizes:
        raise ValueError("need at least one training-set size")
    if max(sizes) > len(train_pool[0]):
        raise ValueError(f"size {max(sizes)} exceeds pool of {len(train_pool[0])}")
    rows = []
    for n in sizes:
        cells = []
        for seed in seeds:
            data = (train_pool[0][:n], train_pool[1][:n])
            try:
                report = _train_and_eval(model_config, replace(train_config, seed=seed),
                                         data, val_data)
                cells.append({"seed": seed, "dice_mean": report.dice_mean,
                              "dice_per_class": report.dice_per_class, "error": None})
            except Exception as exc:
                log.exception("sensitivity cell %s/%s failed", n, seed)
                cells.append({"seed": seed, "dice_mean": None, "dice_per_class": None,
                              "error": f"{type(exc).__name__}: {exc}"})
        mean, sd = _summarize([c["dice_mean"] for c in cells])
        rows.append({"size": n, "mean": mean, "sd": sd, "cells": cells})
    return {"kind": "sensitivity", "rows": rows, "seeds": list(seeds),
            "checks": sensitivity_checks(rows, tolerance)}


def sensitivity_checks(rows, tolerance=0.02):
    means = [r["mean"] for r in rows]
    if any(m is None for m in means):
        return {"trend_ok": False}
    ok = all(b >= a - tolerance for a, b in zip(means, means[1:]))
    return {"trend_ok": ok}


# --- export -------------------------------------------------------------------

def write_metrics(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    doc = report.to_dict()
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for k, d in enumerate(doc["dice_per_class"]):
            writer.writerow([f"dice_class_{k}", repr(d)])
        writer.writerow(["dice_mean", repr(doc["dice_mean"])])
        writer.writerow(["num_samples", doc["num_samples"]])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    values = {k: float(v) for k, v in rows}
    per_class = [values[k] for k in sorted((k for k in values if k.startswith("dice_class_")),
                                           key=lambda s: int(s.rsplit("_", 1)[1]))]
    return {"dice_per_class": per_class, "dice_mean": values["dice_mean"],
            "num_samples": int(values["num_samples"])}


def overlay(image, labels, num_classes):
    """RGB uint8 image with prediction boundaries drawn in class colours."""
    from matplotlib import colormaps
    from skimage.segmentation import find_boundaries

    rgb = np.repeat(np.clip(np.asarray(image, dtype=float), 0, 1)[..., None], 3, axis=2)
    cmap = colormaps["tab10"]
    for k in range(1, num_classes):
        edge = find_boundaries(labels == k, mode="inner")
        rgb[edge] = cmap(k % 10)[:3]
    return np.round(rgb * 255).astype(np.uint8)


def write_overlays(images, preds, num_classes, out_dir, ids=None):
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, (img, pred) in enumerate(zip(images, preds)):
        name = ids[i] if ids is not None else f"sample_{i:04d}"
        path = os.path.join(out_dir, f"{name}_overlay.png")
        Image.fromarray(overlay(img, pred, num_classes), mode="RGB").save(path)
        paths.append(path)
    return paths


def write_curves(history, out_dir):
    """Loss and validation Dice against epoch."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("L_ss", "L_pl", "L_crf", "L_cls", "L_total"):
        ax.plot(epochs, [h[key] for h in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    loss_path = os.path.join(out_dir, "loss_curve.png")
    fig.savefig(loss_path)
    plt.close(fig)

    paths = [loss_path]
    pts = [(h["epoch"], h["val_dice_mean"]) for h in history if h.get("val_dice_mean") is not None]
    if pts:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(*zip(*pts), marker="o")
        ax.set_xlabel("epoch")
        ax.set_ylabel("val mean Dice")
        fig.tight_layout()
        dice_path = os.path.join(out_dir, "dice_curve.png")
        fig.savefig(dice_path)
        plt.close(fig)
        paths.append(dice_path)
    return paths


def export_report(report, out_dir, images=None, preds=None, history=None, ids=None):
    """Write metrics.json/csv, overlays for each sample and curves if a history is given."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"report directory {out_dir} is not writable")
    write_metrics(report, out_dir)
    files = {"metrics": [os.path.join(out_dir, "metrics.json"),
                         os.path.join(out_dir, "metrics.csv")]}
    if images is not None and preds is not None:
        K = len(report.dice_per_class)
        files["overlays"] = write_overlays(images, preds, K, os.path.join(out_dir, "overlays"), ids)
    if history:
        files["curves"] = write_curves(history, out_dir)
    return files


def write_grid(result, out_dir, name):
    """Grid table (ablation or sensitivity) as JSON and CSV."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    key = "variant" if result["kind"] == "ablation" else "size"
    with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([key, "mean", "sd"] + [f"seed_{c['seed']}" for c in result["rows"][0]["cells"]])
        for row in result["rows"]:
            writer.writerow([row[key], row["mean"], row["sd"]] + [c["dice_mean"] for c in row["cells"]])
