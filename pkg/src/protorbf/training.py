"""Training of the dense head: combined cross-entropy + focal loss, Adam with
step decay, early stopping, and embedding-space augmentation.

Only W and b are trainable; prototypes and sigma stay frozen so explanations
remain anchored to real segments.  All arithmetic is 64-bit; given the same
seed, config and data the trained model is reproduced bit-for-bit.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ValidationError
from .model import RbfModel, predict_image, softmax
from .prototypes import PrototypeSet
from .store import DatasetManifest, EmbeddingStore, _atomic_write_text

PROB_FLOOR = 1e-12

# Instrumentation: augmentation must never run while validation metrics are
# being computed.  The guard is asserted inside every augmentation call.
_validation_active = False


@contextmanager
def _validation_pass():
    global _validation_active
    _validation_active = True
    try:
        yield
    finally:
        _validation_active = False


def _guard_augmentation():
    if _validation_active:
        raise RuntimeError("augmentation invoked during a validation pass")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32               # images per batch
    max_epochs: int = 50
    early_stop_patience: int = 10
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.5
    gamma: float = 2.0
    alpha: list[float] | None = None   # None -> inverse class frequency
    ce_weight: float = 1.0
    focal_weight: float = 1.0
    seed: int = 0
    val_fraction: float = 0.2
    sigma: float | None = None         # None -> the prototype set's default
    gaussian_noise_sigma: float = 0.0
    simple_noise_amplitude: float = 0.0
    mixup_alpha: float = 0.0           # Beta(a, a) parameter; 0 disables mixup
    smote: bool = False
    smote_neighbors: int = 5

    def validate(self) -> None:
        for name in ("learning_rate", "beta1", "beta2", "epsilon",
                     "lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0")
        for name in ("batch_size", "max_epochs", "early_stop_patience",
                     "lr_decay_every", "smote_neighbors"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.early_stop_patience > self.max_epochs:
            raise ValidationError("early_stop_patience exceeds max_epochs")
        if self.gamma < 0:
            raise ValidationError("gamma must be >= 0")
        if self.alpha is not None and any(a <= 0 for a in self.alpha):
            raise ValidationError("all alpha weights must be > 0")
        if not 0 < self.val_fraction < 1:
            raise ValidationError("val_fraction must be in (0, 1)")
        for name in ("gaussian_noise_sigma", "simple_noise_amplitude",
                     "mixup_alpha"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")

    def save(self, path) -> None:
        _atomic_write_text(path, json.dumps(asdict(self), indent=1))

    @staticmethod
    def load(path) -> "TrainConfig":
        cfg = TrainConfig(**json.loads(Path(path).read_text()))
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# losses and gradients
# ---------------------------------------------------------------------------

def _as_batch(probs, targets):
    P = np.asarray(probs, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    if Y.ndim == 1:
        Y = Y[None, :]
    if P.shape != Y.shape:
        raise ValidationError(f"probs shape {P.shape} != targets shape {Y.shape}")
    sums = P.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValidationError("probability rows must sum to 1 within 1e-6")
    return P, Y


def cross_entropy(probs, targets) -> float:
    """Mean over the batch of -sum_c y_c log p_c (probs floored at 1e-12)."""
    P, Y = _as_batch(probs, targets)
    ph = np.clip(P, PROB_FLOOR, 1.0)
    return float(-(Y * np.log(ph)).sum(axis=1).mean())


def focal_loss(probs, targets, alpha=None, gamma: float = 2.0) -> float:
    """Mean over the batch of -sum_c alpha_c (1 - p_c)^gamma y_c log p_c.

    With gamma=0 and unit alpha this reduces to the cross-entropy.
    """
    if gamma < 0:
        raise ValidationError("gamma must be >= 0")
    P, Y = _as_batch(probs, targets)
    C = P.shape[1]
    a = np.ones(C) if alpha is None else np.asarray(alpha, dtype=np.float64)
    if a.shape != (C,):
        raise ValidationError(f"alpha has shape {a.shape}, expected ({C},)")
    if np.any(a <= 0):
        raise ValidationError("all alpha weights must be > 0")
    ph = np.clip(P, PROB_FLOOR, 1.0)
    per = -(a[None, :] * (1.0 - ph) ** gamma * Y * np.log(ph)).sum(axis=1)
    return float(per.mean())


def total_loss(probs, targets, cfg: TrainConfig | None = None) -> float:
    """Weighted CE + focal combination (unit weights by default)."""
    cfg = cfg or TrainConfig()
    ce = cross_entropy(probs, targets)
    focal = focal_loss(probs, targets, cfg.alpha, cfg.gamma)
    return cfg.ce_weight * ce + cfg.focal_weight * focal


def head_forward(phi, W, b) -> np.ndarray:
    """softmax(phi @ W.T + b) over a batch of activation vectors."""
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    return softmax(phi @ np.asarray(W, dtype=np.float64).T
                   + np.asarray(b, dtype=np.float64))


def head_gradients(phi, targets, W, b, alpha=None, gamma: float = 2.0,
                   ce_weight: float = 1.0, focal_weight: float = 1.0):
    """Analytic (dL/dW, dL/db) of the combined loss through the softmax.

    Prototypes and sigma receive no gradient; ``phi`` is treated as data.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n, C = Y.shape
    if n == 0:
        raise ValidationError("batch is empty")
    P = head_forward(phi, W, b)
    a = np.ones(C) if alpha is None else np.asarray(alpha, dtype=np.float64)

    ph = np.clip(P, PROB_FLOOR, 1.0)
    active = P >= PROB_FLOOR       # below the floor the clamp zeroes dL/dp
    G = np.zeros_like(P)
    G += ce_weight * (-(Y / ph)) / n
    om = 1.0 - ph
    term1 = np.zeros_like(P)
    if gamma > 0:
        mask = om > 0
        term1[mask] = gamma * om[mask] ** (gamma - 1.0) * np.log(ph[mask])
    gprime = term1 - om ** gamma / ph
    G += focal_weight * a[None, :] * Y * gprime / n
    G = np.where(active, G, 0.0)

    dU = P * (G - (G * P).sum(axis=1, keepdims=True))
    dW = dU.T @ phi
    db = dU.sum(axis=0)
    if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
        raise ValidationError(
            f"non-finite gradient (batch size {n}, prob range "
            f"[{P.min():.3e}, {P.max():.3e}])"
        )
    return dW, db


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @staticmethod
    def init(params) -> "AdamState":
        return AdamState([np.zeros_like(p) for p in params],
                         [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment_noise(z, mode: str, amplitude: float, rng) -> np.ndarray:
    """Additive noise on embeddings; gaussian N(0, amplitude^2) or uniform
    U(-amplitude, amplitude) per coordinate.  Amplitude 0 is the identity
    (no rng draw).  Accepts a single vector or a batch."""
    _guard_augmentation()
    if amplitude < 0:
        raise ValidationError("amplitude must be >= 0")
    z = np.asarray(z, dtype=np.float64)
    if amplitude == 0:
        return z.copy()
    if mode == "gaussian":
        return z + rng.normal(0.0, amplitude, z.shape)
    if mode == "simple":
        return z + rng.uniform(-amplitude, amplitude, z.shape)
    raise ValidationError(f"unknown noise mode '{mode}'")


def augment_mixup(zi, zj, yi, yj, lam: float):
    """Convex combination of two embeddings and their label distributions."""
    _guard_augmentation()
    if not 0.0 <= lam <= 1.0:
        raise ValidationError("mixup lambda must lie in [0, 1]")
    zi = np.asarray(zi, dtype=np.float64)
    zj = np.asarray(zj, dtype=np.float64)
    yi = np.asarray(yi, dtype=np.float64)
    yj = np.asarray(yj, dtype=np.float64)
    return lam * zi + (1.0 - lam) * zj, lam * yi + (1.0 - lam) * yj


def smote_oversample(minority, target_count: int, neighbor_count: int = 5,
                     rng=None) -> np.ndarray:
    """Interpolated synthetic minority rows: x + u * (x_nn - x), u ~ U(0, 1).

    For each synthetic row the generator draws, in order, the base row, the
    neighbor ordinal among the base row's nearest ``neighbor_count`` minority
    rows, and the interpolation factor u.
    """
    _guard_augmentation()
    X = np.asarray(minority, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("SMOTE needs at least 2 minority rows")
    if target_count < 0:
        raise ValidationError("target_count must be >= 0")
    n = X.shape[0]
    if target_count == 0:
        return np.empty((0, X.shape[1]))
    k = min(neighbor_count, n - 1)
    D = cdist(X, X)
    np.fill_diagonal(D, np.inf)
    neighbors = np.argsort(D, axis=1, kind="stable")[:, :k]
    rng = rng if rng is not None else np.random.default_rng()
    out = np.empty((target_count, X.shape[1]))
    for s in range(target_count):
        i = int(rng.integers(n))
        j = int(neighbors[i, int(rng.integers(k))])
        u = float(rng.random())
        out[s] = X[i] + u * (X[j] - X[i])
    return out


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def stratified_split(manifest: DatasetManifest, val_fraction: float, seed: int):
    """Carve a validation set out of the train split, per class.

    Validation counts are round(class_count * val_fraction), at least 1 and
    at most class_count - 1.  Deterministic given the seed.
    """
    if not 0 < val_fraction < 1:
        raise ValidationError("val_fraction must be in (0, 1)")
    train_imgs = manifest.by_split("train")
    by_class: dict[int, list[str]] = {}
    for im in train_imgs:
        by_class.setdefault(im.class_index, []).append(im.image_id)
    rng = np.random.default_rng(seed)
    train_ids, val_ids = [], []
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        if len(ids) < 2:
            name = manifest.classes[cls]
            raise ValidationError(
                f"class '{name}' has {len(ids)} training images, needs >= 2"
            )
        n_val = int(len(ids) * val_fraction + 0.5)
        n_val = min(max(n_val, 1), len(ids) - 1)
        perm = rng.permutation(len(ids))
        chosen = {ids[i] for i in perm[:n_val]}
        val_ids.extend(sorted(chosen))
        train_ids.extend(i for i in ids if i not in chosen)
    return sorted(train_ids), sorted(val_ids)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Stops after ``patience`` consecutive epochs without a new best loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, loss: float, epoch: int) -> bool:
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad_epochs == 0


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class EvalMetrics:
    accuracy: float
    per_class_accuracy: dict
    confusion: list                  # C x C, rows = true class
    n_images: int

    def to_json(self) -> dict:
        return asdict(self)

    def format_table(self, classes: list[str]) -> str:
        width = max([len(c) for c in classes] + [10])
        lines = [f"accuracy: {self.accuracy:.4f}  ({self.n_images} images)"]
        header = " " * (width + 2) + "  ".join(f"{c:>{width}}" for c in classes)
        lines.append("confusion (rows = true):")
        lines.append(header)
        for i, row in enumerate(self.confusion):
            cells = "  ".join(f"{v:>{width}}" for v in row)
            lines.append(f"{classes[i]:>{width}}  {cells}")
        lines.append("per-class accuracy:")
        for name, acc in self.per_class_accuracy.items():
            shown = "n/a" if acc is None else f"{acc:.4f}"
            lines.append(f"  {name:>{width}}: {shown}")
        return "\n".join(lines)


@dataclass
class TrainReport:
    epochs: list
    best_epoch: int
    best_val_loss: float
    stop_reason: str                 # "early_stop" or "max_epochs"
    final_metrics: EvalMetrics
    seed: int

    def to_json(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "final_metrics": self.final_metrics.to_json(),
            "seed": self.seed,
        }

    def save(self, path) -> None:
        _atomic_write_text(path, json.dumps(self.to_json(), indent=1))


def _phi_batch(Z, P, sigma: float) -> np.ndarray:
    """Gaussian activations for a batch of embeddings against prototypes."""
    d2 = cdist(Z, P, "sqeuclidean")
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma ** 2))


def _group_rows(store: EmbeddingStore, manifest: DatasetManifest, image_ids):
    groups = []
    for image_id in image_ids:
        rows = store.rows_for_image(image_id)
        if not rows:
            raise ValidationError(f"image '{image_id}' has no embeddings")
        groups.append((image_id, manifest.class_of(image_id), rows))
    return groups


def _image_accuracy(probs, groups_slices, classes_true) -> float:
    correct = 0
    for sl, cls in zip(groups_slices, classes_true):
        image_probs = probs[sl].mean(axis=0)
        if int(np.argmax(image_probs)) == cls:
            correct += 1
    return correct / len(classes_true)


def train(store: EmbeddingStore, manifest: DatasetManifest,
          prototypes: PrototypeSet, cfg: TrainConfig):
    """Fit W and b on segment embeddings; returns (RbfModel, TrainReport)."""
    cfg.validate()
    manifest.validate(require_training_splits=True)
    store.validate()
    if prototypes.dim != store.dim:
        raise ValidationError(
            f"prototype dim {prototypes.dim} != embedding dim {store.dim}"
        )
    classes = list(manifest.classes)
    C = len(classes)
    sigma = cfg.sigma if cfg.sigma is not None else prototypes.sigma_default
    if sigma <= 0:
        raise ValidationError("sigma must be > 0")
    P = prototypes.matrix()
    k = P.shape[0]

    explicit_val = [im.image_id for im in manifest.by_split("val")]
    if explicit_val:
        train_ids = sorted(im.image_id for im in manifest.by_split("train"))
        val_ids = sorted(explicit_val)
    else:
        train_ids, val_ids = stratified_split(manifest, cfg.val_fraction, cfg.seed)
    if not train_ids:
        raise ValidationError("train split is empty")

    Z_all = store.matrix.astype(np.float64)
    train_groups = _group_rows(store, manifest, train_ids)
    val_groups = _group_rows(store, manifest, val_ids)

    # Flatten to segment-level arrays; each image keeps a contiguous slice.
    def flatten(groups):
        Z_parts, y, slices, img_classes = [], [], [], []
        pos = 0
        for _, cls, rows in groups:
            Z_parts.append(Z_all[rows])
            y.extend([cls] * len(rows))
            slices.append(slice(pos, pos + len(rows)))
            img_classes.append(cls)
            pos += len(rows)
        return np.concatenate(Z_parts), np.array(y), slices, img_classes

    Z_train, y_train, train_slices, train_img_classes = flatten(train_groups)
    Z_val, y_val, val_slices, val_img_classes = flatten(val_groups)

    counts = np.bincount(y_train, minlength=C)
    if np.any(counts == 0):
        missing = classes[int(np.argmin(counts))]
        raise ValidationError(f"class '{missing}' is empty after the split")
    if cfg.alpha is not None:
        if len(cfg.alpha) != C:
            raise ValidationError(f"alpha needs {C} entries")
        alpha = np.asarray(cfg.alpha, dtype=np.float64)
    else:
        alpha = y_train.size / (C * counts.astype(np.float64))

    rng = np.random.default_rng(cfg.seed)

    # SMOTE: balance every class up to the largest one, in embedding space.
    # Synthetic rows train as standalone single-segment pseudo-images.
    if cfg.smote:
        target = int(counts.max())
        extra_Z, extra_y = [], []
        for cls in range(C):
            deficit = target - int(counts[cls])
            if deficit <= 0:
                continue
            rows = Z_train[y_train == cls]
            synth = smote_oversample(rows, deficit, cfg.smote_neighbors, rng)
            extra_Z.append(synth)
            extra_y.extend([cls] * deficit)
        if extra_Z:
            base = Z_train.shape[0]
            Z_train = np.concatenate([Z_train] + extra_Z)
            y_train = np.concatenate([y_train, np.array(extra_y)])
            for i in range(len(extra_y)):
                train_slices.append(slice(base + i, base + i + 1))
                train_img_classes.append(int(extra_y[i]))

    eye = np.eye(C)
    Y_train = eye[y_train]
    Y_val = eye[y_val]
    phi_train = _phi_batch(Z_train, P, sigma)
    phi_val = _phi_batch(Z_val, P, sigma)

    W = np.zeros((C, k))
    b = np.zeros(C)
    state = AdamState.init([W, b])
    stopper = EarlyStopper(cfg.early_stop_patience)
    best_params = (W.copy(), b.copy())
    epochs: list[EpochStats] = []
    stop_reason = "max_epochs"
    augmented = (cfg.gaussian_noise_sigma > 0 or cfg.simple_noise_amplitude > 0
                 or cfg.mixup_alpha > 0)
    n_images = len(train_slices)

    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.learning_rate * cfg.lr_decay_factor ** ((epoch - 1) // cfg.lr_decay_every)
        order = rng.permutation(n_images)
        loss_sum = 0.0
        seg_count = 0
        for start in range(0, n_images, cfg.batch_size):
            batch_imgs = order[start:start + cfg.batch_size]
            rows = np.concatenate([
                np.arange(train_slices[i].start, train_slices[i].stop)
                for i in batch_imgs
            ])
            Zb = Z_train[rows]
            Yb = Y_train[rows]
            if augmented:
                if cfg.gaussian_noise_sigma > 0:
                    Zb = augment_noise(Zb, "gaussian", cfg.gaussian_noise_sigma, rng)
                if cfg.simple_noise_amplitude > 0:
                    Zb = augment_noise(Zb, "simple", cfg.simple_noise_amplitude, rng)
                if cfg.mixup_alpha > 0:
                    lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
                    perm = rng.permutation(Zb.shape[0])
                    Zb, Yb = augment_mixup(Zb, Zb[perm], Yb, Yb[perm], lam)
                phi = _phi_batch(Zb, P, sigma)
            else:
                phi = phi_train[rows]
            probs = head_forward(phi, W, b)
            loss = total_loss(probs, Yb, _loss_cfg(cfg, alpha))
            loss_sum += loss * Zb.shape[0]
            seg_count += Zb.shape[0]
            dW, db = head_gradients(phi, Yb, W, b, alpha, cfg.gamma,
                                    cfg.ce_weight, cfg.focal_weight)
            (W, b), state = adam_step([W, b], [dW, db], state, lr,
                                      cfg.beta1, cfg.beta2, cfg.epsilon)

        train_probs = head_forward(phi_train, W, b)
        train_acc = _image_accuracy(train_probs, train_slices, train_img_classes)
        with _validation_pass():
            val_probs = head_forward(phi_val, W, b)
            val_loss = total_loss(val_probs, Y_val, _loss_cfg(cfg, alpha))
            val_acc = _image_accuracy(val_probs, val_slices, val_img_classes)

        epochs.append(EpochStats(epoch, lr, loss_sum / seg_count, train_acc,
                                 val_loss, val_acc))
        should_stop = stopper.update(val_loss, epoch)
        if stopper.improved:
            best_params = (W.copy(), b.copy())
        if should_stop:
            stop_reason = "early_stop"
            break

    W_best, b_best = best_params
    model = RbfModel(
        prototypes=prototypes,
        sigma=float(sigma),
        W=W_best.astype(np.float32),
        b=b_best.astype(np.float32),
        classes=classes,
    )
    final = _evaluate_groups(model, Z_all, val_groups, classes)
    report = TrainReport(
        epochs=epochs,
        best_epoch=stopper.best_epoch,
        best_val_loss=float(stopper.best_loss),
        stop_reason=stop_reason,
        final_metrics=final,
        seed=cfg.seed,
    )
    return model, report


def _loss_cfg(cfg: TrainConfig, alpha) -> TrainConfig:
    resolved = TrainConfig(**asdict(cfg))
    resolved.alpha = [float(a) for a in alpha]
    return resolved


def _evaluate_groups(model: RbfModel, Z_all, groups, classes) -> EvalMetrics:
    C = len(classes)
    confusion = np.zeros((C, C), dtype=int)
    for _, cls, rows in groups:
        predicted, _, _ = predict_image(Z_all[rows], model)
        confusion[cls, predicted] += 1
    truth_counts = confusion.sum(axis=1)
    correct = np.trace(confusion)
    per_class = {}
    for c in range(C):
        per_class[classes[c]] = (
            None if truth_counts[c] == 0
            else float(confusion[c, c] / truth_counts[c])
        )
    return EvalMetrics(
        accuracy=float(correct / confusion.sum()),
        per_class_accuracy=per_class,
        confusion=confusion.tolist(),
        n_images=int(confusion.sum()),
    )


def evaluate(model: RbfModel, store: EmbeddingStore,
             manifest: DatasetManifest, split: str = "test") -> EvalMetrics:
    """Image-level accuracy, per-class accuracy and the confusion matrix."""
    images = manifest.by_split(split)
    if not images:
        raise ValidationError(f"split '{split}' is empty")
    groups = _group_rows(store, manifest, [im.image_id for im in images])
    return _evaluate_groups(model, store.matrix.astype(np.float64), groups,
                            list(manifest.classes))
