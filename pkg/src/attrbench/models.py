"""CNN architecture families, k-fold cross-validation and early-stopped training."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import (
    AdamState,
    BatchNorm3d,
    Conv3d,
    Dropout,
    Flatten,
    Linear,
    MaxPool3d,
    NonFiniteGradientError,
    ReLU,
    Sequential,
    Tape,
    Tensor,
    adam_step,
)
from .nn import functional as F
from .nn.serialize import CheckpointError, load_arrays, save_arrays

log = logging.getLogger(__name__)

FAMILIES = ("A", "B", "C", "D")
VARIANTS = ("full", "reduced2")

KERNELS = {
    ("A", "full"): (7, 5, 5, 3, 3),
    ("B", "full"): (3, 3, 3, 3, 3),
    ("C", "full"): (5, 5, 5, 5),
    ("D", "full"): (7, 7, 7),
    ("A", "reduced2"): (7, 5),
    ("B", "reduced2"): (3, 3),
    ("C", "reduced2"): (5, 5),
    ("D", "reduced2"): (7, 7),
}


class DimsTooSmallError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    Parameters
    ----------
    family : {"A", "B", "C", "D"}
    channels : int
        Filters per convolutional layer.
    variant : {"full", "reduced2"}
        ``reduced2`` keeps only the first two convolutional blocks.
    input_dims : tuple of int
        Spatial grid of the input volumes.
    hidden : int
        Width of the first fully connected layer.
    """

    family: str
    channels: int
    variant: str = "full"
    input_dims: tuple = (65, 77, 65)
    hidden: int = 64

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.channels < 1 or self.hidden < 1:
            raise ValueError("channels and hidden width must be positive")
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if len(self.input_dims) != 3:
            raise ValueError("input_dims must have three entries")

    @property
    def kernels(self) -> tuple:
        return KERNELS[(self.family, self.variant)]

    @property
    def name(self) -> str:
        suffix = "l2" if self.variant == "reduced2" else ""
        return f"Model{self.family}{self.channels}{suffix}"

    def feature_dims(self) -> tuple:
        """Spatial grid left after every pooling stage."""
        dims = self.input_dims
        for _ in self.kernels:
            if min(dims) < 2:
                raise DimsTooSmallError(f"{self.input_dims} too small for {len(self.kernels)} pooling stages")
            dims = tuple(d // 2 for d in dims)
        return dims

    def n_features(self) -> int:
        return self.channels * int(np.prod(self.feature_dims()))


class Cnn:
    """A built network plus the scalar that maps raw intensities to network input."""

    def __init__(self, spec: ModelSpec, net: Sequential, input_scale: float = 1.0):
        self.spec = spec
        self.net = net
        self.input_scale = float(input_scale)

    # layer bookkeeping used by the attribution code
    @property
    def layers(self):
        return self.net.layers

    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv3d)]

    def parameters(self):
        return self.net.parameters()

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def train(self):
        self.net.train(True)
        return self

    def eval(self):
        self.net.eval()
        return self

    @property
    def training(self) -> bool:
        return self.net.training

    def forward(self, x: Tensor, capture: bool = False):
        """Logits for a batch ``x`` of shape [N, 1, D, H, W] in raw intensity units."""
        if tuple(x.shape[2:]) != self.spec.input_dims:
            raise ValueError(f"input grid {x.shape[2:]} does not match model grid {self.spec.input_dims}")
        scaled = F.mul(x, np.asarray(1.0 / self.input_scale))
        return self.net.forward(scaled, capture=capture)

    __call__ = forward

    def logits(self, volumes: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Eval-mode logits for an array of volumes [N, D, H, W] (no tape)."""
        was_training = self.training
        self.eval()
        dtype = self.parameters()[0].dtype
        out = []
        try:
            for s in range(0, len(volumes), batch_size):
                xb = np.asarray(volumes[s : s + batch_size], dtype=dtype)[:, None]
                out.append(self.forward(Tensor(xb)).data)
        finally:
            self.net.train(was_training)
        return np.concatenate(out, axis=0) if out else np.zeros((0, 2), dtype=dtype)

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(n, t.data) for n, t in self.net.named_parameters()] + list(self.net.named_buffers())

    def snapshot(self) -> list[np.ndarray]:
        return [a.copy() for _, a in self.state()]

    def restore(self, arrays) -> None:
        for (_, dst), src in zip(self.state(), arrays):
            dst[...] = src


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Cnn:
    """Untrained network: (conv, BN, ReLU, maxpool) blocks, then FC-ReLU-dropout-FC."""
    n_feat = spec.n_features()
    rng = np.random.default_rng([seed, 0])
    drop_rng = np.random.default_rng([seed, 1])
    layers = []
    cin = 1
    for k in spec.kernels:
        layers += [Conv3d(cin, spec.channels, k, rng, dtype), BatchNorm3d(spec.channels, dtype=dtype), ReLU(), MaxPool3d()]
        cin = spec.channels
    layers += [
        Flatten(),
        Linear(n_feat, spec.hidden, rng, dtype),
        ReLU(),
        Dropout(0.5, drop_rng),
        Linear(spec.hidden, 2, rng, dtype),
    ]
    return Cnn(spec, Sequential(layers))


def parameter_count(spec: ModelSpec) -> int:
    """Trainable parameters (conv, batch-norm affine and FC), computed without building."""
    total, cin = 0, 1
    for k in spec.kernels:
        total += spec.channels * cin * k**3 + spec.channels + 2 * spec.channels
        cin = spec.channels
    total += spec.n_features() * spec.hidden + spec.hidden + spec.hidden * 2 + 2
    return total


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _split_units(n: int, folds: int, rng) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    chunk = n // folds
    n_train = int(np.floor(0.8 * (n - chunk) + 0.5))
    perm = rng.permutation(n)
    out = []
    for f in range(folds):
        lo = f * chunk
        hi = n if f == folds - 1 else lo + chunk
        test = perm[lo:hi]
        rest = np.concatenate([perm[:lo], perm[hi:]])
        n_val = len(rest) - n_train
        out.append((rest[n_val:], rest[:n_val], test))
    return out


def kfold_split(n_items: int, folds: int, seed: int, groups=None) -> list[Fold]:
    """Seeded k-fold split into (train, val, test) index sets.

    Test chunks have ``n // folds`` units, the last fold taking the remainder.
    The training size is fixed across folds at 80% of the non-test pool of a
    regular fold, the rest of each pool being validation. With ``groups``,
    whole groups are assigned so no group straddles two sets.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    if groups is None:
        if n_items < folds:
            raise ValueError(f"cannot split {n_items} items into {folds} folds")
        return [Fold(np.sort(a), np.sort(b), np.sort(c)) for a, b, c in _split_units(n_items, folds, rng)]
    groups = np.asarray(groups)
    if len(groups) != n_items:
        raise ValueError("groups must have one entry per item")
    uniq = np.unique(groups)
    if len(uniq) < folds:
        raise ValueError(f"cannot split {len(uniq)} groups into {folds} folds")
    members = {g: np.flatnonzero(groups == g) for g in uniq}

    def expand(units):
        return np.sort(np.concatenate([members[uniq[u]] for u in units])) if len(units) else np.zeros(0, int)

    return [Fold(expand(a), expand(b), expand(c)) for a, b, c in _split_units(len(uniq), folds, rng)]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    max_epochs: int = 100
    patience: int = 10
    folds: int = 5
    seed: int = 0
    batch_size: int = 4

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")


@dataclass
class FitHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")


@dataclass
class CvReport:
    model: str
    fold_accuracy: list
    best_epoch: list
    train_loss: list
    val_loss: list

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracy))

    def to_json(self) -> str:
        d = asdict(self)
        d["mean_accuracy"] = self.mean_accuracy
        return json.dumps(d, indent=2)


def _loss_on(model: Cnn, X, y, idx, batch_size=8) -> float:
    logits = model.logits(X[idx], batch_size=batch_size)
    logp = F.log_softmax_array(logits.astype(np.float64))
    return float(-logp[np.arange(len(idx)), y[idx]].mean())


def accuracy(model: Cnn, X, y, idx=None) -> float:
    idx = np.arange(len(y)) if idx is None else idx
    if len(idx) == 0:
        return float("nan")
    pred = model.logits(X[idx]).argmax(axis=1)
    return float((pred == y[idx]).mean())


def fit(model: Cnn, X, y, train_idx, val_idx, cfg: TrainConfig, seed: int = 0) -> FitHistory:
    """Train with Adam; stop after ``cfg.patience`` epochs without a lower
    validation loss and restore the parameters of the best epoch."""
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    hist = FitHistory()
    best = model.snapshot()
    stale = 0
    dtype = params[0].dtype
    for epoch in range(cfg.max_epochs):
        model.train()
        order = rng.permutation(train_idx)
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            b = order[s : s + cfg.batch_size]
            xb = Tensor(X[b][:, None].astype(dtype, copy=False))
            with Tape() as tape:
                loss = F.cross_entropy(model(xb), y[b])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            try:
                grads = tape.gradient(loss, params)
            except NonFiniteGradientError as exc:
                raise TrainingDivergedError(f"non-finite gradient at epoch {epoch}") from exc
            adam_step(params, grads, opt)
            losses.append(float(loss.data) * len(b))
        hist.train_loss.append(sum(losses) / len(order))
        vloss = _loss_on(model, X, y, val_idx) if len(val_idx) else hist.train_loss[-1]
        if not np.isfinite(vloss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        hist.val_loss.append(vloss)
        if vloss < hist.best_val_loss:
            hist.best_val_loss, hist.best_epoch = vloss, epoch
            best = model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        log.debug("epoch %d train %.4f val %.4f", epoch, hist.train_loss[-1], vloss)
    model.restore(best)
    model.eval()
    return hist


def intensity_scale(X, idx) -> float:
    """Scalar that brings training intensities to unit RMS."""
    sample = np.asarray(X[idx[: min(len(idx), 64)]], dtype=np.float64)
    rms = float(np.sqrt(np.mean(sample**2)))
    return rms if rms > 0 else 1.0


def train_cv(X, y, spec: ModelSpec, cfg: TrainConfig, groups=None, splits=None):
    """Cross-validate ``spec`` on volumes ``X`` [N, D, H, W] with labels ``y``.

    Returns the report, the per-fold trained models and the splits used.
    """
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64)
    if set(np.unique(y)) - {0, 1}:
        raise ValueError("labels must be 0/1")
    if splits is None:
        splits = kfold_split(len(y), cfg.folds, cfg.seed, groups=groups)
    accs, epochs, tl, vl, models = [], [], [], [], []
    for f, fold in enumerate(splits):
        model = build(spec, seed=cfg.seed * 1009 + f)
        model.input_scale = intensity_scale(X, fold.train)
        hist = fit(model, X, y, fold.train, fold.val, cfg, seed=cfg.seed * 1009 + f)
        acc = accuracy(model, X, y, fold.test)
        log.info("%s fold %d: acc %.3f best epoch %d", spec.name, f, acc, hist.best_epoch)
        accs.append(acc)
        epochs.append(hist.best_epoch)
        tl.append(hist.train_loss)
        vl.append(hist.val_loss)
        models.append(model)
    return CvReport(spec.name, accs, epochs, tl, vl), models, splits


def predict(model: Cnn, volumes) -> np.ndarray:
    """Class probabilities [N, 2] for a Volume3D, a [D, H, W] array or a [N, D, H, W] stack."""
    data = getattr(volumes, "data", volumes)
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[None]
    if tuple(arr.shape[1:]) != model.spec.input_dims:
        raise ValueError(f"volume grid {arr.shape[1:]} does not match model grid {model.spec.input_dims}")
    return F.softmax_array(model.logits(arr).astype(np.float64))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_model(model: Cnn, path) -> None:
    desc = {"spec": asdict(model.spec), "input_scale": model.input_scale}
    save_arrays(path, desc, model.state())


def load_model(path) -> Cnn:
    meta, arrays = load_arrays(path)
    try:
        s = meta["spec"]
        spec = ModelSpec(s["family"], s["channels"], s["variant"], tuple(s["input_dims"]), s["hidden"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model descriptor") from exc
    model = build(spec)
    model.input_scale = float(meta.get("input_scale", 1.0))
    names = [n for n, _ in model.state()]
    if sorted(names) != sorted(arrays):
        raise CheckpointError(f"{path}: tensor set does not match {spec.name}")
    for name, dst in model.state():
        if dst.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        dst[...] = arrays[name]
    return model.eval()
