"""Evaluation metrics: F1, ICC(3,1), MSE/MAE and accuracy."""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, DimensionError
from .tasks import AU_DETECT, AU_INTENSITY, FER, TaskSpec


def _pair(predictions, targets):
    p = np.asarray(predictions)
    t = np.asarray(targets)
    if p.shape != t.shape:
        raise DimensionError(f"predictions {p.shape} and targets {t.shape} differ in shape")
    return p, t


def _check_binary(*arrays):
    for a in arrays:
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("F1 expects binary 0/1 entries")


def f1_score(predictions, targets):
    """Binary F1 = 2PR / (P + R), defined as 0 when there is no true positive."""
    p, t = _pair(predictions, targets)
    if p.ndim != 1:
        raise DimensionError(f"f1_score takes 1-d vectors, got {p.shape}; use macro_f1")
    _check_binary(p, t)
    tp = float(np.sum((p == 1) & (t == 1)))
    fp = float(np.sum((p == 1) & (t == 0)))
    fn = float(np.sum((p == 0) & (t == 1)))
    denom = 2.0 * tp + fp + fn
    return 0.0 if tp == 0 else 2.0 * tp / denom


def macro_f1(predictions, targets):
    """Per-label F1 over the columns of ``[n, labels]`` arrays and their unweighted mean."""
    p, t = _pair(predictions, targets)
    if p.ndim == 1:
        p, t = p[:, None], t[:, None]
    per_label = np.array([f1_score(p[:, j], t[:, j]) for j in range(p.shape[1])])
    return per_label, float(per_label.mean())


def icc(predictions, targets):
    """ICC(3,1): two-way mixed effects, consistency, single rater.

    Rows are subjects, the two columns are the prediction and the annotation.
    """
    p, t = _pair(predictions, targets)
    p = p.astype(np.float64).ravel()
    t = t.astype(np.float64).ravel()
    n = p.size
    if n < 2:
        raise DegenerateInputError("ICC needs at least two subjects")
    Y = np.stack([p, t], axis=1)
    k = 2
    grand = Y.mean()
    ss_rows = k * np.sum((Y.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((Y.mean(axis=0) - grand) ** 2)
    ss_total = np.sum((Y - grand) ** 2)
    ss_err = max(ss_total - ss_rows - ss_cols, 0.0)
    ms_rows = ss_rows / (n - 1)
    ms_err = ss_err / ((n - 1) * (k - 1))
    denom = ms_rows + (k - 1) * ms_err
    if denom <= 0:
        raise DegenerateInputError("ICC undefined: ratings have no variance across subjects")
    return float((ms_rows - ms_err) / denom)


def mse_mae(predictions, targets):
    p, t = _pair(predictions, targets)
    diff = p.astype(np.float64) - t.astype(np.float64)
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


def accuracy(predicted_classes, targets):
    p, t = _pair(predicted_classes, targets)
    return float(np.mean(p == t))


def evaluate_outputs(outputs, targets, task: TaskSpec):
    """Task metrics from raw head outputs.

    Returns ``(per_label, aggregate, headline)``; ``headline`` names the single
    score used when comparing variants (accuracy, macro F1 or mean ICC).
    """
    outputs = np.asarray(outputs)
    targets = np.asarray(targets)
    if task.kind == FER:
        acc = accuracy(outputs.argmax(axis=1), targets)
        per_class = {}
        pred = outputs.argmax(axis=1)
        for j, name in enumerate(task.label_names):
            mask = targets == j
            per_class[name] = float(np.mean(pred[mask] == j)) if mask.any() else 0.0
        return {"recall": per_class}, {"accuracy": acc}, "accuracy"
    if task.kind == AU_DETECT:
        # sigmoid(z) > 0.5 exactly when z > 0
        pred = (outputs > 0).astype(np.int64)
        per, macro = macro_f1(pred, targets.astype(np.int64))
        return ({"f1": dict(zip(task.label_names, per.tolist()))},
                {"macro_f1": macro}, "macro_f1")
    if task.kind == AU_INTENSITY:
        clipped = np.clip(outputs, 0.0, task.intensity_scale_max)
        iccs, mses, maes = [], [], []
        for j in range(task.n_labels):
            try:
                iccs.append(icc(clipped[:, j], targets[:, j]))
            except DegenerateInputError:
                iccs.append(0.0)
            mse, mae = mse_mae(clipped[:, j], targets[:, j])
            mses.append(mse)
            maes.append(mae)
        names = task.label_names
        return ({"icc": dict(zip(names, iccs)), "mse": dict(zip(names, mses)),
                 "mae": dict(zip(names, maes))},
                {"icc": float(np.mean(iccs)), "mse": float(np.mean(mses)),
                 "mae": float(np.mean(maes))}, "icc")
    raise ValueError(f"unknown task {task.kind}")
