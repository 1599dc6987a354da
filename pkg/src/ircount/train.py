"""Float and quantization-aware training: Adam, plateau LR schedule,
early stopping, class-weighted loss, best-snapshot selection.

Training monitors the epoch-mean training loss (no validation split):
the learning rate shrinks by 0.3 after ``plateau_patience`` epochs
without an improvement larger than 1e-4, and training stops after
``early_stop_patience`` non-improving epochs. The parameters returned
are the snapshot with the best epoch loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .models import Model
from .nn import weighted_softmax_xent
from .quant import QuantUnsupported, prepare_qat

IMPROVEMENT_THRESHOLD = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    lr0: float = 1e-3
    plateau_factor: float = 0.3
    plateau_patience: int = 5
    early_stop_patience: int = 10
    batch_size: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be >= 1")

    def for_qat(self) -> "TrainConfig":
        """The QAT variant: halved initial LR, doubled patiences."""
        return replace(
            self,
            lr0=5e-4,
            plateau_patience=10,
            early_stop_patience=20,
        )


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    stop_reason: str = "max_epochs"

    @property
    def epochs_run(self) -> int:
        return len(self.losses)


class AdamState:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-7):
    """One Adam update over named (param, grad) pairs, in place."""
    state.t += 1
    t = state.t
    for (name, p), (gname, g) in zip(params, grads):
        if name != gname or p.shape != g.shape:
            raise ValueError(f"parameter/gradient mismatch at {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


def plateau_and_stop(losses, cfg: TrainConfig) -> tuple[float, bool]:
    """Replay a loss history through the schedule: (current LR, stop?)."""
    lr = cfg.lr0
    best = np.inf
    wait_plateau = 0
    wait_stop = 0
    stop = False
    for loss in losses:
        if loss < best - IMPROVEMENT_THRESHOLD:
            best = loss
            wait_plateau = 0
            wait_stop = 0
        else:
            wait_plateau += 1
            wait_stop += 1
            if wait_plateau >= cfg.plateau_patience:
                lr *= cfg.plateau_factor
                wait_plateau = 0
            if wait_stop >= cfg.early_stop_patience:
                stop = True
                break
    return lr, stop


def train(
    model: Model,
    windows,
    labels,
    class_weights,
    cfg: TrainConfig,
    quant_aware: bool = False,
) -> tuple[Model, TrainHistory]:
    """Mini-batch training of one model on one fold's training split.

    With ``quant_aware`` the model is QAT-prepared first (batch norm
    folded, fake-quant on weights and activations); LSTM-family models
    raise QuantUnsupported. Returns the trained model carrying its
    best-loss parameter snapshot, plus the history.
    """
    if quant_aware:
        model = prepare_qat(model)  # raises for lstm
    windows = np.asarray(windows, dtype=model.dtype)
    labels = np.asarray(labels, dtype=int)
    weights = np.asarray(class_weights, dtype=np.float64)
    single_frame = model.spec.family == "mv"
    if single_frame:
        # the voting ensemble trains its single-frame net on W=1 samples
        if windows.shape[1] != 1:
            raise ValueError("mv training expects single-frame windows (W=1)")
        inputs = windows[:, 0]
    else:
        inputs = windows

    state = AdamState()
    history = TrainHistory()
    best_loss = np.inf
    best_state = model.state_dict()
    n = len(labels)
    for epoch in range(cfg.max_epochs):
        lr, _ = plateau_and_stop(history.losses, cfg)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = inputs[idx], labels[idx]
            model.zero_grads()
            if single_frame:
                logits = model.single_frame_logits(xb, train=True)
            else:
                logits = model.logits(xb, train=True)
            losses, dlogits = weighted_softmax_xent(logits, yb, weights)
            if single_frame:
                model.backward_single_frame(dlogits / len(idx))
            else:
                model.backward(dlogits / len(idx))
            adam_step(
                model.parameters(),
                model.gradients(),
                state,
                lr,
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
            )
            epoch_loss += float(losses.sum())
        epoch_loss /= n
        history.losses.append(epoch_loss)
        history.lrs.append(lr)
        if epoch_loss < best_loss - IMPROVEMENT_THRESHOLD:
            best_loss = epoch_loss
            best_state = model.state_dict()
        _, stop = plateau_and_stop(history.losses, cfg)
        if stop:
            history.stop_reason = "early_stop"
            break
    model.load_state_dict(best_state)
    return model, history
