"""Mini-batch training with adaptive moment estimation, and evaluation.

The loop is deterministic under a fixed seed: parameter init, batch order
and every numeric step depend only on the seed and the data. Each epoch
logs one line per split as ``epoch,split,loss,area_kappa,moment_kappa``;
the parameters with the best validation moment Kappa are kept and restored
into the store when training ends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CaimError, ConfigError
from .losses import total_loss
from .metrics import MetricsReport, _block, _per_class, confusion_matrix
from .refine import argmax_maps, forward
from .tensor import Tensor, no_grad


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    patch: int = 64

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


class Adam:
    """Adaptive moment estimation with standard defaults."""

    def __init__(self, store, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.params.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.store.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def _batches(n, batch_size, order=None):
    idx = np.arange(n) if order is None else order
    for lo in range(0, n, batch_size):
        yield idx[lo:lo + batch_size]


def _batch_arrays(dataset, picks):
    cubes = np.stack([dataset[i][0].images for i in picks])  # [B, T, C, H, W]
    x = np.ascontiguousarray(cubes.transpose(1, 0, 2, 3, 4))
    moment = np.stack([dataset[i][1].moment for i in picks]).astype(np.int64)
    area = np.stack([dataset[i][1].area for i in picks]).astype(np.int64)
    return x, moment, area


def evaluate(store, model_cfg, dataset, loss_cfg=None, batch_size=8):
    """Metrics (and mean loss when loss_cfg is given) over a dataset."""
    t_len = model_cfg.t_len
    m_area = np.zeros((2, 2), dtype=np.int64)
    m_moment = np.zeros((t_len, t_len), dtype=np.int64)
    losses = []
    with no_grad():
        for picks in _batches(len(dataset), batch_size):
            x, moment_lab, area_lab = _batch_arrays(dataset, picks)
            pred, area = forward(Tensor(x), store, model_cfg)
            pm, pa = argmax_maps(pred, area)
            m_area += confusion_matrix(area_lab, pa, 2)
            m_moment += confusion_matrix(moment_lab, pm, t_len)
            if loss_cfg is not None:
                loss, _ = total_loss(pred, area, (moment_lab, area_lab), loss_cfg)
                losses.append(float(loss.data) * len(picks))
    report = _report_from_confusions(m_area, m_moment)
    mean_loss = sum(losses) / len(dataset) if losses else float("nan")
    return report, mean_loss


def _report_from_confusions(m_area, m_moment):
    # same scoring as compute_metrics, but from accumulated confusion counts
    # so evaluation never holds every prediction in memory
    present = np.flatnonzero(m_moment.sum(axis=1) > 0)
    changed = present[present != 0]
    moment = _block(m_moment, classes=present if present.size else [0])
    if changed.size:
        moment_changed = _block(m_moment, classes=changed)
    else:
        moment_changed = dict(moment)
        moment_changed.update({"F1": 0.0, "Pre": 0.0, "Rec": 0.0})
    _, _, _, degenerate = _per_class(m_moment)
    return MetricsReport(
        area=_block(m_area, classes=[1]),
        moment=moment,
        moment_changed_only=moment_changed,
        area_confusion=m_area,
        moment_confusion=m_moment,
        degenerate_classes=degenerate,
    )


def train(store, model_cfg, train_set, val_set, train_cfg, loss_cfg, log_path=None):
    """Minimize the combined loss; keep the best-validation parameters.

    Returns (log_lines, history) where history holds per-epoch dicts. The
    store is left holding the parameters of the epoch with the highest
    validation moment Kappa.
    """
    if not train_set:
        raise ConfigError("empty training set")
    rng = np.random.default_rng(train_cfg.seed)
    opt = Adam(store, lr=train_cfg.learning_rate)
    t_len = model_cfg.t_len

    log_lines = []
    history = []
    best = {"moment_kappa": -np.inf, "state": None, "epoch": -1}

    def emit(line):
        log_lines.append(line)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(line + "\n")

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        seen = 0
        m_area = np.zeros((2, 2), dtype=np.int64)
        m_moment = np.zeros((t_len, t_len), dtype=np.int64)

        for picks in _batches(len(train_set), train_cfg.batch_size, order):
            x, moment_lab, area_lab = _batch_arrays(train_set, picks)
            pred, area = forward(Tensor(x), store, model_cfg)
            loss, _ = total_loss(pred, area, (moment_lab, area_lab), loss_cfg)
            if not np.isfinite(loss.data):
                raise CaimError(
                    f"non-finite loss at epoch {epoch} after {seen} samples; "
                    "check learning rate and input scaling")
            store.zero_grads()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.data) * len(picks)
            seen += len(picks)
            pm, pa = argmax_maps(pred, area)
            m_area += confusion_matrix(area_lab, pa, 2)
            m_moment += confusion_matrix(moment_lab, pm, t_len)
            del pred, area, loss

        train_report = _report_from_confusions(m_area, m_moment)
        train_loss = epoch_loss / seen
        emit(f"{epoch},train,{train_loss:.6f},"
             f"{train_report.area['Kappa']:.4f},{train_report.moment['Kappa']:.4f}")

        entry = {"epoch": epoch, "train_loss": train_loss,
                 "train_area_kappa": train_report.area["Kappa"],
                 "train_moment_kappa": train_report.moment["Kappa"]}
        if val_set:
            val_report, val_loss = evaluate(store, model_cfg, val_set, loss_cfg,
                                            batch_size=max(train_cfg.batch_size, 4))
            emit(f"{epoch},val,{val_loss:.6f},"
                 f"{val_report.area['Kappa']:.4f},{val_report.moment['Kappa']:.4f}")
            entry.update(val_loss=val_loss,
                         val_area_kappa=val_report.area["Kappa"],
                         val_moment_kappa=val_report.moment["Kappa"])
            if val_report.moment["Kappa"] > best["moment_kappa"]:
                best = {"moment_kappa": val_report.moment["Kappa"],
                        "state": {k: v.copy() for k, v in store.state_arrays().items()},
                        "epoch": epoch}
        history.append(entry)

    if best["state"] is not None:
        store.load_arrays(best["state"])
        emit(f"best,val,{best['epoch']},{best['moment_kappa']:.4f},")
    return log_lines, history
