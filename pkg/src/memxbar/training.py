"""Off-chip constrained training and chip-in-the-loop fine-tuning.

The crossbar-resident weights must be programmable, so they are confined to
the box [0, 1].  Downstream parameters (output biases, the second MLP layer)
stay unconstrained and are refined with the crossbar inside the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import Backend
from .errors import ConfigurationError, DimensionError, TrainingError

CE_FLOOR = 1e-12


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    kind: str = "classification"

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.labels = np.asarray(self.labels, dtype=float)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        if self.kind not in ("classification", "regression"):
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if len(self.inputs) != len(self.labels):
            raise DimensionError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")
        if np.any((self.inputs < 0) | (self.inputs > 1)):
            raise ConfigurationError("inputs must be normalized into [0, 1]")
        if self.kind == "classification":
            ok = np.all((self.labels == 0) | (self.labels == 1)) and np.all(self.labels.sum(1) == 1)
            if not ok:
                raise ConfigurationError("classification labels must be one-hot rows")

    def __len__(self):
        return len(self.inputs)

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.kind)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def softmax(z) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p, y) -> float:
    """Summed cross-entropy with a 1e-12 probability floor."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(-np.sum(y * np.log(np.maximum(p, CE_FLOOR))))


def bias_gradient(p, y) -> np.ndarray:
    """d CE(softmax(o + b), y) / db for one sample."""
    return np.asarray(p, dtype=float) - np.asarray(y, dtype=float)


# --- box-constrained softmax regression -------------------------------------------------------


@dataclass
class LinearModel:
    phi: np.ndarray  # (C, d), entries in [0, 1]
    bias: np.ndarray  # (C,)
    loss: float = float("nan")
    kkt_residual: float = float("nan")
    iterations: int = 0
    loss_trace: list[float] = field(default_factory=list)

    def logits(self, inputs) -> np.ndarray:
        return np.atleast_2d(inputs) @ self.phi.T + self.bias

    def predict_proba(self, inputs) -> np.ndarray:
        return softmax(self.logits(inputs))

    def crossbar_targets(self, rows: int, cols: int) -> np.ndarray:
        """Place ``phi`` on a rows x cols grid (inputs on rows); unused cells are NaN."""
        c, d = self.phi.shape
        if d > rows or c > cols:
            raise DimensionError(f"phi {self.phi.shape} does not fit a {rows}x{cols} crossbar")
        grid = np.full((rows, cols), np.nan)
        grid[:d, :c] = self.phi.T
        return grid


def _softmax_loss_grad(phi, bias, x, y):
    z = x @ phi.T + bias
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -float(np.sum(y * logp))
    g = np.exp(logp) - y
    return loss, g.T @ x, g.sum(axis=0)


def kkt_residual(phi, grad_phi, grad_bias, loss, lo=0.0, hi=1.0) -> float:
    """Worst first-order violation, scaled by ``1 + |loss|``.

    Interior coordinates need a vanishing gradient; coordinates on the lower
    bound may only have a non-negative gradient, on the upper bound a
    non-positive one.
    """
    at_lo = phi <= lo
    at_hi = phi >= hi
    viol = np.abs(grad_phi)
    viol = np.where(at_lo, np.maximum(-grad_phi, 0.0), viol)
    viol = np.where(at_hi, np.maximum(grad_phi, 0.0), viol)
    worst = viol.max(initial=0.0)
    if grad_bias is not None and np.size(grad_bias):
        worst = max(worst, float(np.abs(grad_bias).max()))
    return float(worst / (1.0 + abs(loss)))


def train_constrained_linear(data: LabeledDataset, dims: tuple[int, int] | None = None,
                             fit_bias: bool = True, tol: float = 1e-4, max_iter: int = 20000,
                             ) -> LinearModel:
    """Minimize summed softmax cross-entropy with ``0 <= phi <= 1``.

    Spectral projected gradient: Barzilai-Borwein step lengths with an
    Armijo backtracking search along the projected direction.  Stops once
    the KKT residual drops below ``tol``.

    Raises:
        TrainingError: if ``max_iter`` is reached first; the exception keeps
            the last iterate and its residual.
    """
    if data.kind != "classification":
        raise ConfigurationError("train_constrained_linear needs a classification dataset")
    x, y = data.inputs, data.labels
    n_classes, n_feat = dims if dims is not None else (data.n_outputs, data.n_features)
    if (n_classes, n_feat) != (y.shape[1], x.shape[1]):
        raise DimensionError(f"dims {(n_classes, n_feat)} do not match data {(y.shape[1], x.shape[1])}")

    phi = np.full((n_classes, n_feat), 0.5)
    bias = np.zeros(n_classes)

    def evaluate(phi, bias):
        loss, gp, gb = _softmax_loss_grad(phi, bias, x, y)
        return loss, gp, (gb if fit_bias else np.zeros_like(gb))

    loss, gp, gb = evaluate(phi, bias)
    step = 1.0 / max(1.0, float(np.abs(gp).max()), float(np.abs(gb).max()))
    trace = [loss]
    for it in range(1, max_iter + 1):
        res = kkt_residual(phi, gp, gb if fit_bias else None, loss)
        if res <= tol:
            return LinearModel(phi, bias, loss, res, it - 1, trace)
        # projected direction
        d_phi = np.clip(phi - step * gp, 0.0, 1.0) - phi
        d_b = -step * gb
        slope = float(np.sum(gp * d_phi) + np.sum(gb * d_b))
        t = 1.0
        while True:
            new_phi, new_b = phi + t * d_phi, bias + t * d_b
            new_loss, new_gp, new_gb = evaluate(new_phi, new_b)
            if new_loss <= loss + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        s = np.concatenate([(new_phi - phi).ravel(), new_b - bias])
        r = np.concatenate([(new_gp - gp).ravel(), new_gb - gb])
        sr = float(s @ r)
        step = float(s @ s) / sr if sr > 1e-16 else step * 2.0
        step = min(max(step, 1e-10), 1e10)
        phi, bias, loss, gp, gb = np.clip(new_phi, 0.0, 1.0), new_b, new_loss, new_gp, new_gb
        trace.append(loss)
        if not np.isfinite(loss):
            raise TrainingError("loss diverged", (phi, bias), float("nan"))
    res = kkt_residual(phi, gp, gb if fit_bias else None, loss)
    if res <= tol:
        return LinearModel(phi, bias, loss, res, max_iter, trace)
    raise TrainingError(f"no KKT point within {max_iter} iterations (residual {res:.3g})",
                        LinearModel(phi, bias, loss, res, max_iter, trace), res)


# --- chip-in-the-loop helpers ---------------------------------------------------------------------


def _pad(x, rows):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] > rows:
        raise DimensionError(f"{x.shape[-1]} features do not fit {rows} crossbar rows")
    out = np.zeros(rows)
    out[:x.shape[-1]] = x
    return out


def chip_outputs(h: Backend, inputs, n_out: int | None = None) -> np.ndarray:
    """One crossbar read per sample; inputs zero-padded to the row count."""
    n_out = h.cols if n_out is None else n_out
    return np.array([h.infer(_pad(x, h.rows))[:n_out] for x in np.atleast_2d(inputs)])


def finetune_bias_chip_in_loop(h: Backend, data: LabeledDataset, eta: float = 0.05,
                               n_step: int = 1000, seed: int = 0) -> np.ndarray:
    """Single-sample SGD on the output bias with the crossbar in the forward pass.

    The bias has one entry per class (label width); crossbar lanes beyond
    the class count are not used.
    """
    n_classes = data.n_outputs
    if n_classes > h.cols:
        raise DimensionError(f"{n_classes} classes exceed {h.cols} crossbar columns")
    rng = np.random.default_rng(seed)
    bias = rng.standard_normal(n_classes)
    for _ in range(n_step):
        i = int(rng.integers(len(data)))
        out = h.infer(_pad(data.inputs[i], h.rows))[:n_classes]
        p = softmax(out + bias)
        bias = bias - eta * bias_gradient(p, data.labels[i])
    return bias


# --- two-layer MLP --------------------------------------------------------------------------------


def relu(v):
    return np.maximum(v, 0.0)


@dataclass
class MlpModel:
    layer1: np.ndarray  # (H, d) in [0, 1], lives on the crossbar
    bias1: np.ndarray  # (H,)
    layer2: np.ndarray  # (m, H)
    bias2: np.ndarray  # (m,)
    loss_trace: list[float] = field(default_factory=list)

    @property
    def hidden(self) -> int:
        return self.layer1.shape[0]

    def hidden_preact(self, inputs):
        return np.atleast_2d(inputs) @ self.layer1.T

    def predict(self, inputs) -> np.ndarray:
        return self.predict_from_mac(self.hidden_preact(inputs))

    def predict_from_mac(self, mac) -> np.ndarray:
        """Forward pass given the first-layer MAC outputs (software or chip)."""
        return relu(np.atleast_2d(mac) + self.bias1) @ self.layer2.T + self.bias2

    def crossbar_targets(self, rows: int, cols: int) -> np.ndarray:
        hdim, d = self.layer1.shape
        if d > rows or hdim > cols:
            raise DimensionError(f"layer1 {self.layer1.shape} does not fit a {rows}x{cols} crossbar")
        grid = np.full((rows, cols), np.nan)
        grid[:d, :hdim] = self.layer1.T
        return grid

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer1.copy(), self.bias1.copy(), self.layer2.copy(),
                        self.bias2.copy(), list(self.loss_trace))


def layer2_gradients(hidden, pred, target):
    """Gradients of ``sum((pred - target)**2)`` w.r.t. layer2 and bias2 for one sample."""
    resid = 2.0 * (np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    return np.outer(resid, hidden), resid


def _sgd_mlp(x, ts, hidden, epochs, lr, batch, momentum, rng):
    d, m = x.shape[1], ts.shape[1]
    w1 = rng.uniform(0.0, 1.0, (hidden, d))
    # each hinge starts through a random training sample so no unit starts dead
    b1 = -np.sum(w1 * x[rng.integers(len(x), size=hidden)], axis=1)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), (m, hidden))
    b2 = np.zeros(m)
    params = [w1, b1, w2, b2]
    velocity = [np.zeros_like(p) for p in params]
    trace = []
    n = len(x)
    for epoch in range(epochs):
        rate = lr * (1.0 - epoch / epochs)  # linear decay to zero
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb, tb = x[idx], ts[idx]
            pre = xb @ w1.T + b1
            hid = relu(pre)
            pred = hid @ w2.T + b2
            g_out = 2.0 * (pred - tb) / len(idx)
            g_w2 = g_out.T @ hid
            g_b2 = g_out.sum(axis=0)
            g_hid = (g_out @ w2) * (pre > 0)
            g_w1 = g_hid.T @ xb
            g_b1 = g_hid.sum(axis=0)
            for p, v, g in zip(params, velocity, (g_w1, g_b1, g_w2, g_b2)):
                v *= momentum
                v -= rate * g
                p += v
            np.clip(w1, 0.0, 1.0, out=w1)
        pre_all = x @ w1.T + b1
        dead = ~np.any(pre_all > 0, axis=0)
        if dead.any():
            # revive units that no training sample activates
            picks = x[rng.integers(n, size=int(dead.sum()))]
            b1[dead] = -np.sum(w1[dead] * picks, axis=1) + 1e-3
            velocity[1][dead] = 0.0
        loss = float(np.mean((relu(x @ w1.T + b1) @ w2.T + b2 - ts) ** 2))
        if not np.isfinite(loss):
            raise TrainingError("MLP training diverged (loss is not finite)")
        trace.append(loss)
    return w1, b1, w2, b2, trace


def train_mlp_software(data: LabeledDataset, hidden: int = 8, epochs: int = 1000,
                       lr: float = 0.01, batch: int = 32, momentum: float = 0.9,
                       restarts: int = 3, seed: int = 0) -> MlpModel:
    """Train both layers by minibatch SGD on MSE.

    Heavy-ball momentum with a linearly decaying rate; layer1 is clipped
    into [0, 1] after every step so it stays programmable.  Hidden units
    that no training sample activates are re-anchored at the end of each
    epoch.  The best of ``restarts`` seeded runs (by final training loss)
    is returned.  Targets are standardized internally and the scaling is
    folded back into ``layer2``/``bias2``.

    Raises:
        TrainingError: when the loss becomes non-finite.
    """
    if data.kind != "regression":
        raise ConfigurationError("train_mlp_software needs a regression dataset")
    x, t = data.inputs, data.labels
    if x.shape[1] > 8:
        raise DimensionError("input dimension must be <= 8 to fit the crossbar")
    mu, sd = t.mean(axis=0), t.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    ts = (t - mu) / sd
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        run = _sgd_mlp(x, ts, hidden, epochs, lr, batch, momentum, rng)
        if best is None or run[-1][-1] < best[-1][-1]:
            best = run
    w1, b1, w2, b2, trace = best
    return MlpModel(w1, b1, w2 * sd[:, None], b2 * sd + mu, trace)


def finetune_layer2_chip_in_loop(h: Backend, model: MlpModel, data: LabeledDataset,
                                 eta: float = 0.01, n_step: int = 2000, seed: int = 0,
                                 schedule: str = "constant") -> tuple[np.ndarray, np.ndarray]:
    """SGD on ``layer2``/``bias2`` with the programmed crossbar as layer 1.

    The crossbar output is treated as a constant; nothing is differentiated
    through the device.  ``schedule="linear"`` decays the rate from ``eta``
    to zero over the run, which removes most of the single-sample noise
    from the final iterate.  Returns the updated ``(layer2, bias2)``;
    ``model`` itself is left untouched.
    """
    if model.hidden > h.cols:
        raise DimensionError(f"hidden width {model.hidden} exceeds {h.cols} columns")
    if schedule not in ("constant", "linear"):
        raise ConfigurationError(f"unknown schedule {schedule!r}")
    rng = np.random.default_rng(seed)
    w2, b2 = model.layer2.copy(), model.bias2.copy()
    for step in range(n_step):
        rate = eta * (1.0 - step / n_step) if schedule == "linear" else eta
        i = int(rng.integers(len(data)))
        mac = h.infer(_pad(data.inputs[i], h.rows))[:model.hidden]
        hid = relu(mac + model.bias1)
        pred = w2 @ hid + b2
        g_w2, g_b2 = layer2_gradients(hid, pred, data.labels[i])
        w2 -= rate * g_w2
        b2 -= rate * g_b2
    return w2, b2
