"""Convolutional classifier: unit stack, training loop, confidence metrics.

The network is a stack of processing units (3x3 conv, stride 1, pad 1 ->
batch norm -> ReLU) arranged in groups; a 2x2 max pool follows every group
but the last, a global average pool follows the last group, and a single
fully connected layer maps the pooled features to class logits. With the
default group layout (3, 3, 4, 4) x (16, 32, 64, 128) that is 14 units and a
128-feature head.

Everything runs in float64 numpy with hand-written backprop; convolutions go
through an explicit im2col so the heavy lifting is BLAS matmuls. All
randomness is owned by seeded generators, so training is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint as ck
from . import render as rd


@dataclass(frozen=True)
class ClassifierConfig:
    """Architecture and training recipe.

    The default layout is the 14-unit network (group sizes summing to 14,
    final width 128). Smaller layouts are legal and used by the gradient
    checks; invariants on the default are asserted in the test-suite.
    """

    group_sizes: tuple = (3, 3, 4, 4)
    group_widths: tuple = (16, 32, 64, 128)
    n_classes: int = 6
    resolution: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if len(self.group_sizes) != len(self.group_widths):
            raise ValueError("group_sizes and group_widths must align")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        pools = len(self.group_sizes) - 1
        if self.resolution % (2 ** pools) != 0:
            raise ValueError("resolution must be divisible by 2^(groups - 1)")

    @property
    def feature_width(self):
        return self.group_widths[-1]


class ClassifierModel:
    """Parameter container: conv kernels, batch-norm affines + running stats,
    and the fully connected head. ``params`` take gradients; ``stats`` are the
    batch-norm running mean/var updated only in training mode."""

    def __init__(self, config, params, stats):
        self.config = config
        self.params = params
        self.stats = stats

    def copy(self):
        return ClassifierModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.stats.items()},
        )

    def unit_names(self):
        return [f"u{i:02d}" for i in range(sum(self.config.group_sizes))]


def init_classifier(config, seed=None):
    """He-initialized conv stack, identity batch norms, small FC head."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    stats = {}
    c_in = 1
    idx = 0
    for size, width in zip(config.group_sizes, config.group_widths):
        for _ in range(size):
            name = f"u{idx:02d}"
            params[f"{name}.w"] = rng.standard_normal((width, c_in, 3, 3)) * np.sqrt(
                2.0 / (c_in * 9)
            )
            params[f"{name}.gamma"] = np.ones(width)
            params[f"{name}.beta"] = np.zeros(width)
            stats[f"{name}.mean"] = np.zeros(width)
            stats[f"{name}.var"] = np.ones(width)
            c_in = width
            idx += 1
    params["fc.w"] = rng.standard_normal((config.n_classes, c_in)) * np.sqrt(1.0 / c_in)
    params["fc.b"] = np.zeros(config.n_classes)
    return ClassifierModel(config, params, stats)


# ---------------------------------------------------------------------------
# Layer primitives (forward + backward)
# ---------------------------------------------------------------------------

def _im2col(x):
    """(n, c, h, w) -> (n, c*9, h*w) columns for 3x3/stride 1/pad 1 conv."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, c, 9, h, w))
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, k] = xp[:, :, di : di + h, dj : dj + w]
            k += 1
    return cols.reshape(n, c * 9, h * w)


def _col2im(dcols, shape):
    """Adjoint of _im2col: scatter-add columns back into the input layout."""
    n, c, h, w = shape
    dcols = dcols.reshape(n, c, 9, h, w)
    dxp = np.zeros((n, c, h + 2, w + 2))
    k = 0
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di : di + h, dj : dj + w] += dcols[:, :, k]
            k += 1
    return dxp[:, :, 1:-1, 1:-1]


def _conv_forward(x, w):
    n, c, h, width = x.shape
    f = w.shape[0]
    cols = _im2col(x)
    out = np.matmul(w.reshape(f, -1), cols).reshape(n, f, h, width)
    return out, cols


def _conv_backward(dout, cols, w, x_shape):
    n, c, h, width = x_shape
    f = w.shape[0]
    dflat = dout.reshape(n, f, h * width)
    dw = np.einsum("nfp,ncp->fc", dflat, cols).reshape(w.shape)
    dcols = np.matmul(w.reshape(f, -1).T, dflat)
    return _col2im(dcols, x_shape), dw


def _bn_forward(x, gamma, beta, eps, training, run_mean, run_var, momentum):
    """Channel-wise batch norm over (n, h, w); returns (out, cache).

    Training mode normalizes with biased batch statistics and updates the
    running stats in place (unbiased variance, torch convention). Inference
    uses the running stats only.
    """
    if training:
        axes = (0, 2, 3)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if count > 1:
            run_var *= 1.0 - momentum
            run_var += momentum * var * (count / (count - 1.0))
        else:
            run_var *= 1.0 - momentum
            run_var += momentum * var
        run_mean *= 1.0 - momentum
        run_mean += momentum * mean
    else:
        mean, var = run_mean, run_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, training)


def _bn_backward(dout, cache):
    xhat, inv_std, gamma, training = cache
    axes = (0, 2, 3)
    dgamma = np.sum(dout * xhat, axis=axes)
    dbeta = np.sum(dout, axis=axes)
    dxhat = dout * gamma[None, :, None, None]
    if training:
        dx = (
            dxhat
            - dxhat.mean(axis=axes)[None, :, None, None]
            - xhat * np.mean(dxhat * xhat, axis=axes)[None, :, None, None]
        ) * inv_std[None, :, None, None]
    else:
        dx = dxhat * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


def _maxpool_forward(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)  # first max wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _maxpool_backward(dout, cache):
    arg, (n, c, h, w) = cache
    dflat = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(dflat, arg[..., None], dout[..., None], axis=-1)
    return (
        dflat.reshape(n, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Forward / backward over the whole stack
# ---------------------------------------------------------------------------

def _forward_batch(model, x, training=False, want_cache=False):
    """Run (n, 1, h, w) inputs through the stack.

    Returns (probs, features, caches); caches is None unless requested.
    """
    cfg = model.config
    caches = [] if want_cache else None
    idx = 0
    n_groups = len(cfg.group_sizes)
    for g, size in enumerate(cfg.group_sizes):
        for _ in range(size):
            name = f"u{idx:02d}"
            w = model.params[f"{name}.w"]
            out, cols = _conv_forward(x, w)
            bn_out, bn_cache = _bn_forward(
                out,
                model.params[f"{name}.gamma"],
                model.params[f"{name}.beta"],
                cfg.bn_eps,
                training,
                model.stats[f"{name}.mean"],
                model.stats[f"{name}.var"],
                cfg.bn_momentum,
            )
            act = np.maximum(bn_out, 0.0)
            if want_cache:
                caches.append((name, x.shape, cols, w, bn_cache, bn_out > 0))
            x = act
            idx += 1
        if g < n_groups - 1:
            x, pool_cache = _maxpool_forward(x)
            if want_cache:
                caches.append(("pool", pool_cache))
    features = x.mean(axis=(2, 3))  # global average pool
    logits = features @ model.params["fc.w"].T + model.params["fc.b"]
    probs = _softmax(logits)
    if want_cache:
        caches.append(("head", x.shape, features))
    return probs, features, caches


def _as_batch(model, image):
    """Accept an Image, (h, w) array, or (n, 1, h, w) batch."""
    res = model.config.resolution
    if isinstance(image, rd.Image):
        image = image.pixels
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[2] != res or x.shape[3] != res:
        raise ValueError(f"expected {res}x{res} grayscale input, got shape {x.shape}")
    return x


def forward(model, image):
    """Class confidences (softmax probabilities) for one image, inference mode."""
    probs, _, _ = _forward_batch(model, _as_batch(model, image), training=False)
    return probs[0]


def forward_batch(model, images):
    """Inference-mode confidences for an (n, h, w) or (n, 1, h, w) batch."""
    probs, _, _ = _forward_batch(model, _as_batch(model, images), training=False)
    return probs


def extract_features(model, image):
    """Global-average-pool features (penultimate activations) of one image."""
    _, features, _ = _forward_batch(model, _as_batch(model, image), training=False)
    return features[0]


def extract_features_batch(model, images):
    _, features, _ = _forward_batch(model, _as_batch(model, images), training=False)
    return features


def confidence_difference(conf, target):
    """Target confidence minus the best non-target confidence (Eq.-style metric).

    Positive iff the target class is the unique argmax; bounded by [-1, 1].
    """
    conf = np.asarray(conf, dtype=np.float64)
    if conf.size < 2:
        raise ValueError("confidence difference needs at least 2 classes")
    if not 0 <= target < conf.size:
        raise ValueError(f"target index {target} out of range")
    others = np.delete(conf, target)
    return float(conf[target] - others.max())


def loss_and_gradients(model, batch):
    """Mean cross-entropy over a (images, labels) batch plus all gradients.

    Batch norm runs in training mode (batch statistics; running stats are
    updated as a side effect, as during real training steps).
    """
    images, labels = batch
    x = _as_batch(model, images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != x.shape[0] or len(labels) == 0:
        raise ValueError("batch needs one label per image and at least one image")
    probs, features, caches = _forward_batch(model, x, training=True, want_cache=True)
    n = x.shape[0]
    eps = 1e-300
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + eps)))

    grads = {}
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    kind = caches[-1]
    assert kind[0] == "head"
    _, pre_pool_shape, feats = kind
    grads["fc.w"] = dlogits.T @ feats
    grads["fc.b"] = dlogits.sum(axis=0)
    dfeatures = dlogits @ model.params["fc.w"]
    hw = pre_pool_shape[2] * pre_pool_shape[3]
    dx = np.broadcast_to(
        dfeatures[:, :, None, None] / hw, pre_pool_shape
    ).copy()

    for cache in reversed(caches[:-1]):
        if cache[0] == "pool":
            dx = _maxpool_backward(dx, cache[1])
            continue
        name, x_shape, cols, w, bn_cache, relu_mask = cache
        dx = dx * relu_mask
        dx, dgamma, dbeta = _bn_backward(dx, bn_cache)
        dx, dw = _conv_backward(dx, cols, w, x_shape)
        grads[f"{name}.w"] = dw
        grads[f"{name}.gamma"] = dgamma
        grads[f"{name}.beta"] = dbeta
    return loss, grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction, operating on a named param dict."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        correction = np.sqrt(1.0 - self.beta2 ** self.t) / (1.0 - self.beta1 ** self.t)
        for key, g in grads.items():
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[key] -= self.lr * correction * m / (np.sqrt(v) + self.eps)


# ---------------------------------------------------------------------------
# Dataset plumbing and the training loop
# ---------------------------------------------------------------------------

def class_indices(object_ids):
    """Stable class mapping: sorted object ids -> 0..n-1."""
    return {obj: i for i, obj in enumerate(sorted(set(object_ids)))}


def load_split(manifest, split):
    """Images (n, h, w) uint8 plus integer labels for one manifest split."""
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"manifest has no records in split {split!r}")
    mapping = class_indices(manifest.object_ids())
    images = np.stack(
        [
            np.clip(np.rint(rd.read_pgm(manifest.image_path(r)).pixels * 255.0), 0, 255)
            for r in records
        ]
    ).astype(np.uint8)
    labels = np.array([mapping[r.object_id] for r in records], dtype=np.int64)
    return images, labels


def _accuracy(model, images_u8, labels, batch_size=64):
    hits = 0
    for lo in range(0, len(labels), batch_size):
        chunk = images_u8[lo : lo + batch_size].astype(np.float64) / 255.0
        probs = forward_batch(model, chunk)
        hits += int(np.sum(probs.argmax(axis=1) == labels[lo : lo + batch_size]))
    return hits / len(labels)


def train_classifier(config, manifest, init=None, log_path=None):
    """Mini-batch Adam over the manifest's train split.

    Starting weights come from ``init`` when given (pre-training transfer),
    otherwise from the seeded initializer. After each epoch the validation
    accuracy is measured; the returned model is the best-validation snapshot
    (ties keep the earliest epoch). Bit-reproducible for a fixed config.
    """
    ids = manifest.object_ids()
    if len(ids) != config.n_classes:
        raise ValueError(
            f"manifest holds {len(ids)} object ids but config expects {config.n_classes} classes"
        )
    model = init.copy() if init is not None else init_classifier(config)
    if config.epochs == 0:
        return model

    train_x, train_y = load_split(manifest, "train")
    val_x, val_y = load_split(manifest, "val")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.learning_rate)

    best = model.copy()
    best_acc = -1.0
    log_rows = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_y))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            pick = order[lo : lo + config.batch_size]
            x = train_x[pick].astype(np.float64) / 255.0
            loss, grads = loss_and_gradients(model, (x, train_y[pick]))
            opt.step(model.params, grads)
            losses.append(loss)
        val_acc = _accuracy(model, val_x, val_y)
        log_rows.append((epoch, float(np.mean(losses)), val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best = model.copy()
    if log_path:
        with open(log_path, "w", encoding="ascii") as fh:
            fh.write("epoch,train_loss,val_acc\n")
            for epoch, loss, acc in log_rows:
                fh.write(f"{epoch},{loss:.17g},{acc:.17g}\n")
    return best


def evaluate_classifier(model, manifest, split):
    """(accuracy, row-normalized confusion matrix) over one split."""
    images, labels = load_split(manifest, split)
    n = model.config.n_classes
    counts = np.zeros((n, n))
    for lo in range(0, len(labels), 64):
        chunk = images[lo : lo + 64].astype(np.float64) / 255.0
        preds = forward_batch(model, chunk).argmax(axis=1)
        for t, p in zip(labels[lo : lo + 64], preds):
            counts[t, p] += 1
    accuracy = float(np.trace(counts) / counts.sum())
    row_sums = counts.sum(axis=1, keepdims=True)
    confusion = np.where(row_sums > 0, counts / np.maximum(row_sums, 1e-300), 0.0)
    return accuracy, confusion


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_classifier(model, path):
    cfg = model.config
    meta = {
        "group_sizes": ",".join(str(v) for v in cfg.group_sizes),
        "group_widths": ",".join(str(v) for v in cfg.group_widths),
        "n_classes": str(cfg.n_classes),
        "resolution": str(cfg.resolution),
        "learning_rate": format(cfg.learning_rate, ".17g"),
        "batch_size": str(cfg.batch_size),
        "epochs": str(cfg.epochs),
        "seed": str(cfg.seed),
        "bn_eps": format(cfg.bn_eps, ".17g"),
        "bn_momentum": format(cfg.bn_momentum, ".17g"),
    }
    blocks = dict(model.params)
    blocks.update({f"stats.{k}": v for k, v in model.stats.items()})
    ck.save_blocks(path, "classifier", meta, blocks)


def load_classifier(path):
    kind, meta, blocks = ck.load_blocks(path)
    if kind != "classifier":
        raise ValueError(f"{path}: expected a classifier checkpoint, got {kind!r}")
    config = ClassifierConfig(
        group_sizes=tuple(int(v) for v in meta["group_sizes"].split(",")),
        group_widths=tuple(int(v) for v in meta["group_widths"].split(",")),
        n_classes=int(meta["n_classes"]),
        resolution=int(meta["resolution"]),
        learning_rate=float(meta["learning_rate"]),
        batch_size=int(meta["batch_size"]),
        epochs=int(meta["epochs"]),
        seed=int(meta["seed"]),
        bn_eps=float(meta["bn_eps"]),
        bn_momentum=float(meta["bn_momentum"]),
    )
    params = {k: v for k, v in blocks.items() if not k.startswith("stats.")}
    stats = {k[len("stats.") :]: v for k, v in blocks.items() if k.startswith("stats.")}
    return ClassifierModel(config, params, stats)
