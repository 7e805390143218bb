"""1D CNN slowing detector over the 150-bin smoothed spectrum.

Architecture: valid (unpadded) stride-1 convolutions with ReLU, each
followed by a width-2 max-pool; flatten; 100-unit fully connected layers
with ReLU and dropout 0.5; a 2-way softmax head. Trained with Adam on
mean cross-entropy using class-balanced mini-batches, an 80/20
stratified split, and early stopping at the minimum validation loss.

Everything is plain numpy with hand-written reverse-mode gradients, so
the backward pass can be checked against central finite differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ModelError
from .spectral import CNN_BINS

logger = logging.getLogger(__name__)

GRID_CONV_LAYERS = (1, 2, 3)
GRID_FC_LAYERS = (1, 2, 3)
GRID_FILTERS = (8, 16, 32, 64, 128)
GRID_KERNELS = (3, 5, 7, 9, 11, 13)
HIDDEN_UNITS = 100
DROPOUT_P = 0.5
POOL_WIDTH = 2


@dataclass(frozen=True)
class CnnArch:
    """One point of the hyperparameter grid."""

    n_conv_layers: int = 1
    n_fc_layers: int = 1
    n_filters: int = 8
    kernel_len: int = 5
    hidden_units: int = HIDDEN_UNITS
    dropout_p: float = DROPOUT_P

    def __post_init__(self) -> None:
        if self.n_conv_layers not in GRID_CONV_LAYERS:
            raise ValueError(f"n_conv_layers {self.n_conv_layers} not in {GRID_CONV_LAYERS}")
        if self.n_fc_layers not in GRID_FC_LAYERS:
            raise ValueError(f"n_fc_layers {self.n_fc_layers} not in {GRID_FC_LAYERS}")
        if self.n_filters not in GRID_FILTERS:
            raise ValueError(f"n_filters {self.n_filters} not in {GRID_FILTERS}")
        if self.kernel_len not in GRID_KERNELS:
            raise ValueError(f"kernel_len {self.kernel_len} not in {GRID_KERNELS}")
        if self.spatial_length() < 1:
            raise ValueError(f"conv/pool stack of {self} shrinks below one sample")

    def spatial_length(self, input_len: int = CNN_BINS) -> int:
        length = input_len
        for _ in range(self.n_conv_layers):
            length = length - self.kernel_len + 1
            if length < 1:
                return 0
            length //= POOL_WIDTH
            if length < 1:
                return 0
        return length


@dataclass
class TrainConfig:
    """Adam/early-stopping settings. batch_size=None derives half the
    slowing count of the learning split (floored to an even >= 2)."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 10000
    batch_size: int | None = None
    val_fraction: float = 0.2
    patience: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction {self.val_fraction} outside (0, 1)")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class CnnModel:
    """Weights + architecture + training log of one detector."""

    def __init__(self, arch: CnnArch, seed: int = 0, input_len: int = CNN_BINS):
        self.arch = arch
        self.input_len = input_len
        if arch.spatial_length(input_len) < 1:
            raise ModelError(f"{arch} shrinks a {input_len}-bin input below one sample")
        rng = np.random.default_rng(seed)
        self.conv_w: list[np.ndarray] = []
        self.conv_b: list[np.ndarray] = []
        c_in = 1
        for _ in range(arch.n_conv_layers):
            k = arch.kernel_len
            self.conv_w.append(
                _glorot(rng, (arch.n_filters, c_in, k), c_in * k, arch.n_filters)
            )
            self.conv_b.append(np.zeros(arch.n_filters))
            c_in = arch.n_filters
        flat = arch.n_filters * arch.spatial_length(input_len)
        self.fc_w: list[np.ndarray] = []
        self.fc_b: list[np.ndarray] = []
        n_in = flat
        for _ in range(arch.n_fc_layers):
            self.fc_w.append(_glorot(rng, (n_in, arch.hidden_units), n_in, arch.hidden_units))
            self.fc_b.append(np.zeros(arch.hidden_units))
            n_in = arch.hidden_units
        self.out_w = _glorot(rng, (n_in, 2), n_in, 2)
        self.out_b = np.zeros(2)
        self.train_log: list[dict] = []
        self.best_val_loss: float | None = None
        self.best_epoch: int | None = None

    # -- parameter bookkeeping -------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for w, b in zip(self.conv_w, self.conv_b):
            params += [w, b]
        for w, b in zip(self.fc_w, self.fc_b):
            params += [w, b]
        params += [self.out_w, self.out_b]
        return params

    def n_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, s in zip(self.parameters(), snap):
            p[...] = s

    # -- forward / backward ----------------------------------------------

    def cast(self, dtype) -> "CnnModel":
        """Copy with converted weights (float32 halves bulk-scoring time)."""
        clone = CnnModel(self.arch, seed=0, input_len=self.input_len)
        clone.conv_w = [w.astype(dtype) for w in self.conv_w]
        clone.conv_b = [b.astype(dtype) for b in self.conv_b]
        clone.fc_w = [w.astype(dtype) for w in self.fc_w]
        clone.fc_b = [b.astype(dtype) for b in self.fc_b]
        clone.out_w = self.out_w.astype(dtype)
        clone.out_b = self.out_b.astype(dtype)
        return clone

    def _forward(self, x: np.ndarray, dropout_masks: list[np.ndarray] | None = None):
        """Full forward pass; returns (logits, cache) for backprop."""
        x = np.asarray(x, dtype=self.out_w.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_len:
            raise ModelError(f"expected {self.input_len}-bin spectra, got {x.shape[1]}")
        if not np.all(np.isfinite(x)):
            raise ModelError("non-finite values in the detector input")
        B = x.shape[0]
        a = x[:, None, :]
        conv_cache = []
        for w, b in zip(self.conv_w, self.conv_b):
            f_out, c_in, k = w.shape
            win = sliding_window_view(a, k, axis=2)  # [B, C, L', K]
            L = win.shape[2]
            cols = win.transpose(0, 2, 1, 3).reshape(B * L, c_in * k)
            z = (cols @ w.reshape(f_out, c_in * k).T).reshape(B, L, f_out)
            z = z.transpose(0, 2, 1) + b[None, :, None]
            relu_mask = z > 0
            h = z * relu_mask
            Lp = L // POOL_WIDTH
            blocks = h[:, :, : Lp * POOL_WIDTH].reshape(B, f_out, Lp, POOL_WIDTH)
            argmax = blocks.argmax(axis=3)
            pooled = np.take_along_axis(blocks, argmax[..., None], axis=3)[..., 0]
            conv_cache.append((a, cols, relu_mask, argmax, L, Lp))
            a = pooled
        flat = a.reshape(B, -1)
        fc_cache = []
        h = flat
        for i, (w, b) in enumerate(zip(self.fc_w, self.fc_b)):
            z = h @ w + b
            relu_mask = z > 0
            act = z * relu_mask
            mask = None
            if dropout_masks is not None:
                mask = dropout_masks[i]
                act = act * mask
            fc_cache.append((h, relu_mask, mask))
            h = act
        logits = h @ self.out_w + self.out_b
        return logits, (x, conv_cache, flat, fc_cache, h)

    @staticmethod
    def _softmax(logits: np.ndarray) -> np.ndarray:
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def forward(self, spec: np.ndarray) -> np.ndarray:
        """Slowing probability for one spectrum or a batch (inference mode)."""
        single = np.asarray(spec).ndim == 1
        logits, _ = self._forward(spec, dropout_masks=None)
        probs = self._softmax(logits)[:, 1]
        return float(probs[0]) if single else probs

    def predict_scores(self, X: np.ndarray, chunk: int = 16384) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X))
        out = np.empty(X.shape[0])
        for i in range(0, X.shape[0], chunk):
            out[i : i + chunk] = self.forward(X[i : i + chunk])
        return out

    def loss_only(
        self,
        X: np.ndarray,
        y: np.ndarray,
        dropout_masks: list[np.ndarray] | None = None,
    ) -> float:
        """Mean cross-entropy without building gradient caches (for probes)."""
        y = np.asarray(y, dtype=np.int64)
        logits, _ = self._forward(X, dropout_masks)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float(-np.mean(log_probs[np.arange(logits.shape[0]), y]))

    def loss_and_grads(
        self,
        X: np.ndarray,
        y: np.ndarray,
        dropout_masks: list[np.ndarray] | None = None,
    ) -> tuple[float, list[np.ndarray]]:
        """Mean cross-entropy and its exact gradients w.r.t. every weight."""
        y = np.asarray(y, dtype=np.int64)
        if y.size == 0:
            raise ModelError("empty batch")
        logits, cache = self._forward(X, dropout_masks)
        x, conv_cache, flat, fc_cache, h_last = cache
        B = logits.shape[0]
        probs = self._softmax(logits)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-np.mean(log_probs[np.arange(B), y]))

        dlogits = probs.copy()
        dlogits[np.arange(B), y] -= 1.0
        dlogits /= B

        g_out_w = h_last.T @ dlogits
        g_out_b = dlogits.sum(axis=0)
        d = dlogits @ self.out_w.T

        g_fc_w = [np.empty(0)] * len(self.fc_w)
        g_fc_b = [np.empty(0)] * len(self.fc_b)
        for i in range(len(self.fc_w) - 1, -1, -1):
            h_in, relu_mask, mask = fc_cache[i]
            if mask is not None:
                d = d * mask
            d = d * relu_mask
            g_fc_w[i] = h_in.T @ d
            g_fc_b[i] = d.sum(axis=0)
            d = d @ self.fc_w[i].T

        d = d.reshape(flat.shape[0], self.arch.n_filters, -1)
        g_conv_w = [np.empty(0)] * len(self.conv_w)
        g_conv_b = [np.empty(0)] * len(self.conv_b)
        for i in range(len(self.conv_w) - 1, -1, -1):
            a_in, cols, relu_mask, argmax, L, Lp = conv_cache[i]
            w = self.conv_w[i]
            f_out, c_in, k = w.shape
            d_blocks = np.zeros((d.shape[0], f_out, Lp, POOL_WIDTH))
            np.put_along_axis(d_blocks, argmax[..., None], d[..., None], axis=3)
            d_pre = np.zeros((d.shape[0], f_out, L))
            d_pre[:, :, : Lp * POOL_WIDTH] = d_blocks.reshape(d.shape[0], f_out, Lp * POOL_WIDTH)
            d_pre = d_pre * relu_mask
            g_conv_b[i] = d_pre.sum(axis=(0, 2))
            d_cols = d_pre.transpose(0, 2, 1).reshape(-1, f_out)  # [B*L, F]
            g_conv_w[i] = (d_cols.T @ cols).reshape(f_out, c_in, k)
            if i > 0:
                d_win = (d_cols @ w.reshape(f_out, c_in * k)).reshape(
                    d.shape[0], L, c_in, k
                )
                d_a = np.zeros_like(a_in)
                for kk in range(k):
                    d_a[:, :, kk : kk + L] += d_win[:, :, :, kk].transpose(0, 2, 1)
                d = d_a

        grads: list[np.ndarray] = []
        for gw, gb in zip(g_conv_w, g_conv_b):
            grads += [gw, gb]
        for gw, gb in zip(g_fc_w, g_fc_b):
            grads += [gw, gb]
        grads += [g_out_w, g_out_b]
        return loss, grads

    def hidden_activations(self, X: np.ndarray) -> np.ndarray:
        """Activations of the second fully connected layer (first if the
        model has only one), for external embedding analysis."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        layer = 1 if len(self.fc_w) >= 2 else 0
        if len(self.fc_w) < 2:
            logger.info("model has one FC layer; exporting its activations")
        logits, cache = self._forward(X, dropout_masks=None)
        _, _, flat, fc_cache, h_last = cache
        h = flat
        for i, (w, b) in enumerate(zip(self.fc_w, self.fc_b)):
            h = np.maximum(h @ w + b, 0.0)
            if i == layer:
                return h
        return h

    # -- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        from .shallow import SERIAL_FORMAT, SERIAL_VERSION

        tensors = {}
        for name, arrs in (("conv_w", self.conv_w), ("conv_b", self.conv_b),
                           ("fc_w", self.fc_w), ("fc_b", self.fc_b)):
            tensors[name] = [
                {"shape": list(a.shape), "data": a.reshape(-1).tolist()} for a in arrs
            ]
        tensors["out_w"] = {"shape": list(self.out_w.shape), "data": self.out_w.reshape(-1).tolist()}
        tensors["out_b"] = {"shape": list(self.out_b.shape), "data": self.out_b.reshape(-1).tolist()}
        return {
            "format": SERIAL_FORMAT,
            "version": SERIAL_VERSION,
            "kind": "cnn",
            "input_len": self.input_len,
            "arch": {
                "n_conv_layers": self.arch.n_conv_layers,
                "n_fc_layers": self.arch.n_fc_layers,
                "n_filters": self.arch.n_filters,
                "kernel_len": self.arch.kernel_len,
                "hidden_units": self.arch.hidden_units,
                "dropout_p": self.arch.dropout_p,
            },
            "state": tensors,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CnnModel":
        from .shallow import SERIAL_FORMAT, SERIAL_VERSION

        if doc.get("format") != SERIAL_FORMAT or doc.get("kind") != "cnn":
            raise ModelError("not a slowave CNN model document")
        if doc.get("version") != SERIAL_VERSION:
            raise ModelError(f"unsupported model version {doc.get('version')!r}")
        arch = CnnArch(**doc["arch"])
        model = cls(arch, seed=0, input_len=doc.get("input_len", CNN_BINS))

        def load(entry: dict) -> np.ndarray:
            return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])

        state = doc["state"]
        model.conv_w = [load(e) for e in state["conv_w"]]
        model.conv_b = [load(e) for e in state["conv_b"]]
        model.fc_w = [load(e) for e in state["fc_w"]]
        model.fc_b = [load(e) for e in state["fc_b"]]
        model.out_w = load(state["out_w"])
        model.out_b = load(state["out_b"])
        return model


class _Adam:
    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c = self.cfg
        bias1 = 1.0 - c.beta1**self.t
        bias2 = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= c.lr * (m / bias1) / (np.sqrt(v / bias2) + c.eps)


def _stratified_split(
    y: np.ndarray, val_fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    learn_idx, val_idx = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        n_val = max(1, int(round(val_fraction * idx.size)))
        if n_val >= idx.size:
            raise ModelError(f"class {cls} too small for an 80/20 split")
        val_idx.append(idx[:n_val])
        learn_idx.append(idx[n_val:])
    return np.sort(np.concatenate(learn_idx)), np.sort(np.concatenate(val_idx))


def _balanced_batch(
    idx_slow: np.ndarray, idx_bg: np.ndarray, batch_size: int, rng: np.random.Generator
) -> np.ndarray:
    half = batch_size // 2
    slow = rng.choice(idx_slow, size=half, replace=idx_slow.size < half)
    bg = rng.choice(idx_bg, size=half, replace=idx_bg.size < half)
    batch = np.concatenate([slow, bg])
    assert slow.size == bg.size, "mini-batch class counts must match"
    return batch


def train(
    X: np.ndarray,
    y: np.ndarray,
    arch: CnnArch | None = None,
    cfg: TrainConfig | None = None,
) -> CnnModel:
    """Train a detector on labeled spectra (rows of 150 bins).

    Stratified 80/20 learning/validation split; every mini-batch holds the
    same number of slowing and background samples; weights with the lowest
    validation loss are returned.
    """
    arch = arch or CnnArch()
    cfg = cfg or TrainConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if set(np.unique(y)) - {0, 1}:
        raise ModelError("labels must be binary 0/1")
    if len(np.unique(y)) < 2:
        raise ModelError("training needs both classes")
    rng = np.random.default_rng(cfg.seed)
    learn_idx, val_idx = _stratified_split(y, cfg.val_fraction, rng)
    X_learn, y_learn = X[learn_idx], y[learn_idx]
    X_val, y_val = X[val_idx], y[val_idx]
    if len(np.unique(y_learn)) < 2 or len(np.unique(y_val)) < 2:
        raise ModelError("a class is absent from the learning or validation split")

    idx_slow = np.flatnonzero(y_learn == 1)
    idx_bg = np.flatnonzero(y_learn == 0)
    batch_size = cfg.batch_size if cfg.batch_size is not None else max(2, idx_slow.size // 2)
    batch_size -= batch_size % 2
    batch_size = max(batch_size, 2)

    model = CnnModel(arch, seed=cfg.seed, input_len=X.shape[1])
    optimizer = _Adam(model.parameters(), cfg)
    steps_per_epoch = max(1, int(np.ceil(len(learn_idx) / batch_size)))

    best_snapshot = model.snapshot()
    best_val = np.inf
    best_epoch = -1
    stale = 0
    steps = 0
    epoch = 0
    while steps < cfg.max_iters:
        epoch_losses = []
        for _ in range(steps_per_epoch):
            if steps >= cfg.max_iters:
                break
            batch = _balanced_batch(idx_slow, idx_bg, batch_size, rng)
            masks = None
            if arch.dropout_p > 0:
                masks = [
                    (rng.random((batch.size, arch.hidden_units)) >= arch.dropout_p)
                    / (1.0 - arch.dropout_p)
                    for _ in range(arch.n_fc_layers)
                ]
            loss, grads = model.loss_and_grads(X_learn[batch], y_learn[batch], masks)
            optimizer.step(model.parameters(), grads)
            epoch_losses.append(loss)
            steps += 1
        val_loss = model.loss_only(X_val, y_val)
        model.train_log.append(
            {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "val_loss": val_loss}
        )
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snapshot = model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        epoch += 1
    model.restore(best_snapshot)
    model.best_val_loss = float(best_val)
    model.best_epoch = best_epoch
    return model


DEFAULT_GRID = tuple(
    CnnArch(n_conv_layers=c, n_fc_layers=1, n_filters=f, kernel_len=k)
    for c in (1, 2)
    for f in (8, 32, 64)
    for k in (5, 9, 13)
)


def grid_search(
    X: np.ndarray,
    y: np.ndarray,
    grid: tuple[CnnArch, ...] | list[CnnArch] | None = None,
    cfg: TrainConfig | None = None,
    tie_tol: float = 1e-2,
) -> tuple[CnnArch, list[dict]]:
    """Train each grid point on the inner split; best validation loss wins,
    with ties (within tie_tol) broken by fewer parameters. Grid points whose
    conv/pool stack would shrink the input below one sample are skipped."""
    grid = DEFAULT_GRID if grid is None else tuple(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    cfg = cfg or TrainConfig()
    X = np.atleast_2d(np.asarray(X))
    results: list[dict] = []
    for arch in grid:
        if arch.spatial_length(X.shape[1]) < 1:
            logger.warning("skipping %s: conv/pool stack shrinks below 1 sample", arch)
            continue
        model = train(X, y, arch, cfg)
        results.append(
            {"arch": arch, "val_loss": model.best_val_loss, "n_params": model.n_params()}
        )
    if not results:
        raise ValueError("no valid grid point")
    best_loss = min(r["val_loss"] for r in results)
    tied = [r for r in results if r["val_loss"] <= best_loss + tie_tol]
    winner = min(tied, key=lambda r: (r["n_params"], r["val_loss"]))
    return winner["arch"], results


def export_embeddings(model: CnnModel, X: np.ndarray) -> np.ndarray:
    """[n x hidden_units] activations of the second FC layer."""
    return model.hidden_activations(X)
