"""Forward-only toy classifiers with offsettable normalization parameters.

Two architectures are provided:

* ``mlp`` -- two linear+layernorm+relu layers and a softmax head;
* ``residual`` -- a linear+layernorm stem followed by ``blocks`` residual
  units (linear, layernorm, relu, skip connection) and a softmax head.

Base weights are frozen after training.  Test-time adaptation never touches
them: every forward call takes an offset vector that is partitioned across
the adaptable normalization scale/bias vectors and added functionally.  For
the residual model the first (stem) and last block's normalization layers are
kept fixed and excluded from the offset layout; the statistics used for shift
detection are taken from the stem's pre-normalization output, so they are
invariant to any offset.

Pre-deployment training uses plain gradient descent (Adam) implemented
locally; adaptation itself never computes gradients.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .validation import ParamsMixin, check_array, check_batch, check_positive_int

CHECKPOINT_SCHEMA_VERSION = 1
_LN_EPS = 1e-5


class PretrainError(RuntimeError):
    """Raised when training fails to reach the requested accuracy."""

    def __init__(self, message: str, accuracy: float):
        super().__init__(message)
        self.accuracy = accuracy


@dataclass(frozen=True)
class ArchitectureConfig:
    kind: str  # "mlp" or "residual"
    in_dim: int
    class_count: int
    width: int = 64
    blocks: int = 4  # residual units; ignored for "mlp"

    def __post_init__(self):
        if self.kind not in ("mlp", "residual"):
            raise ValueError(f"unknown architecture kind: {self.kind!r}")
        check_positive_int(self.in_dim, "in_dim")
        check_positive_int(self.width, "width")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.kind == "residual" and self.blocks < 2:
            raise ValueError("residual architecture needs at least 2 blocks")

    def norm_layers(self) -> list[str]:
        if self.kind == "mlp":
            return ["layer1", "layer2"]
        return ["stem"] + [f"block{i}" for i in range(1, self.blocks + 1)]

    def adaptable_norms(self) -> list[str]:
        """Normalization layers whose affine parameters receive offsets.

        The residual model keeps the first (stem) and last block fixed; the
        two-layer MLP is too shallow for that rule, so both layers adapt.
        """
        if self.kind == "mlp":
            return ["layer1", "layer2"]
        return [f"block{i}" for i in range(1, self.blocks)]


@dataclass
class ActivationStats:
    """Per-batch activation statistics emitted by a forward pass.

    ``means``/``stds`` hold per-feature batch statistics of each block
    output; ``stem_mean``/``stem_var`` are taken at the stem tap used for
    shift detection.  ``finite`` is False when the forward pass produced any
    non-finite value (degenerate offsets), letting the controller rank the
    candidate last instead of failing.
    """

    means: list[np.ndarray]
    stds: list[np.ndarray]
    stem_mean: np.ndarray
    stem_var: np.ndarray
    finite: bool = True


@dataclass
class SourceStats:
    """Streaming activation moments of in-distribution data."""

    means: list[np.ndarray]
    stds: list[np.ndarray]
    stem_mean: np.ndarray
    stem_var: np.ndarray
    sample_count: int = 0


def _layer_norm(z, scale, bias):
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (z - mu) * inv_std
    return xhat * scale + bias, xhat, inv_std


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class AdaptableModel(ParamsMixin):
    """A trained classifier whose normalization affine parameters accept offsets."""

    def __init__(self, config: ArchitectureConfig, weights: dict):
        self.config = config
        self.weights = dict(weights)
        for key, arr in self.weights.items():
            arr = np.asarray(arr, dtype=np.float64)
            arr.flags.writeable = False  # base weights are immutable
            self.weights[key] = arr
        self._check_weight_shapes()
        layout = []
        for layer in config.adaptable_norms():
            layout.append((layer, "scale", config.width))
            layout.append((layer, "bias", config.width))
        self.norm_param_layout: list[tuple[str, str, int]] = layout
        self._slices = {}
        start = 0
        for layer, role, length in layout:
            self._slices[(layer, role)] = slice(start, start + length)
            start += length
        self.offset_dim = start

    # -- structure ---------------------------------------------------------

    @property
    def block_count(self) -> int:
        return 2 if self.config.kind == "mlp" else self.config.blocks

    @property
    def class_count(self) -> int:
        return self.config.class_count

    @property
    def stem_dim(self) -> int:
        return self.config.width

    def _check_weight_shapes(self):
        cfg = self.config
        w, c, n = cfg.width, cfg.class_count, cfg.in_dim
        expected = {}
        if cfg.kind == "mlp":
            expected.update({"layer1.w": (n, w), "layer2.w": (w, w)})
            for layer in ("layer1", "layer2"):
                expected.update(
                    {f"{layer}.b": (w,), f"{layer}.ln_scale": (w,), f"{layer}.ln_bias": (w,)}
                )
        else:
            expected["stem.w"] = (n, w)
            expected.update({"stem.b": (w,), "stem.ln_scale": (w,), "stem.ln_bias": (w,)})
            for i in range(1, cfg.blocks + 1):
                expected[f"block{i}.w"] = (w, w)
                expected.update(
                    {
                        f"block{i}.b": (w,),
                        f"block{i}.ln_scale": (w,),
                        f"block{i}.ln_bias": (w,),
                    }
                )
        expected.update({"head.w": (w, c), "head.b": (c,)})
        for key, shape in expected.items():
            if key not in self.weights:
                raise ValueError(f"missing weight: {key}")
            if self.weights[key].shape != shape:
                raise ValueError(
                    f"weight {key} has shape {self.weights[key].shape}, expected {shape}"
                )

    def _norm_params(self, offset: np.ndarray, layer: str) -> tuple[np.ndarray, np.ndarray]:
        scale = self.weights[f"{layer}.ln_scale"]
        bias = self.weights[f"{layer}.ln_bias"]
        key = (layer, "scale")
        if key in self._slices:
            scale = scale + offset[self._slices[key]]
            bias = bias + offset[self._slices[(layer, "bias")]]
        return scale, bias

    # -- inference ---------------------------------------------------------

    def _activations(self, offset: np.ndarray, X: np.ndarray):
        """Returns (logits, block outputs, stem pre-normalization output)."""
        w = self.weights
        if self.config.kind == "mlp":
            z1 = X @ w["layer1.w"] + w["layer1.b"]
            s1, b1 = self._norm_params(offset, "layer1")
            n1, _, _ = _layer_norm(z1, s1, b1)
            h1 = np.maximum(n1, 0.0)
            z2 = h1 @ w["layer2.w"] + w["layer2.b"]
            s2, b2 = self._norm_params(offset, "layer2")
            n2, _, _ = _layer_norm(z2, s2, b2)
            h2 = np.maximum(n2, 0.0)
            logits = h2 @ w["head.w"] + w["head.b"]
            return logits, [h1, h2], z1
        z0 = X @ w["stem.w"] + w["stem.b"]
        s0, b0 = self._norm_params(offset, "stem")
        h, _, _ = _layer_norm(z0, s0, b0)
        blocks = []
        for i in range(1, self.config.blocks + 1):
            zi = h @ w[f"block{i}.w"] + w[f"block{i}.b"]
            si, bi = self._norm_params(offset, f"block{i}")
            ni, _, _ = _layer_norm(zi, si, bi)
            h = h + np.maximum(ni, 0.0)
            blocks.append(h)
        logits = h @ w["head.w"] + w["head.b"]
        return logits, blocks, z0

    def forward(self, offset, batch) -> tuple[np.ndarray, ActivationStats]:
        """Adapted forward pass: probabilities plus activation statistics.

        ``offset`` (length ``offset_dim``) is added to the adaptable
        normalization parameters for this call only.  The batch must be
        finite; non-finite *activations* (from extreme offsets) are tolerated
        and reported through ``stats.finite``.
        """
        X = check_batch(batch, "batch", width=self.config.in_dim)
        offset = check_array(offset, "offset", ndim=1, length=self.offset_dim)
        with np.errstate(over="ignore", invalid="ignore"):
            logits, blocks, stem = self._activations(offset, X)
            probs = _softmax(logits)
            means = [blk.mean(axis=0) for blk in blocks]
            stds = [blk.std(axis=0) for blk in blocks]
            stats = ActivationStats(
                means=means,
                stds=stds,
                stem_mean=stem.mean(axis=0),
                stem_var=stem.var(axis=0),
            )
        finite = np.all(np.isfinite(probs))
        for arr in means + stds:
            finite = finite and np.all(np.isfinite(arr))
        stats.finite = bool(finite)
        return probs, stats

    def zero_offset(self) -> np.ndarray:
        return np.zeros(self.offset_dim)

    def predict_proba(self, X) -> np.ndarray:
        return self.forward(self.zero_offset(), X)[0]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    # -- training (pre-deployment only) -------------------------------------

    def _forward_train(self, X: np.ndarray):
        """Forward pass with cached intermediates for backprop (zero offsets)."""
        w = self.weights
        cache = {"X": X}
        if self.config.kind == "mlp":
            h = X
            for layer in ("layer1", "layer2"):
                z = h @ w[f"{layer}.w"] + w[f"{layer}.b"]
                n, xhat, inv_std = _layer_norm(z, w[f"{layer}.ln_scale"], w[f"{layer}.ln_bias"])
                a = np.maximum(n, 0.0)
                cache[layer] = (h, n, xhat, inv_std)
                h = a
        else:
            z0 = X @ w["stem.w"] + w["stem.b"]
            h, xhat, inv_std = _layer_norm(z0, w["stem.ln_scale"], w["stem.ln_bias"])
            cache["stem"] = (X, None, xhat, inv_std)
            for i in range(1, self.config.blocks + 1):
                name = f"block{i}"
                h_in = h
                z = h_in @ w[f"{name}.w"] + w[f"{name}.b"]
                n, xhat, inv_std = _layer_norm(z, w[f"{name}.ln_scale"], w[f"{name}.ln_bias"])
                h = h_in + np.maximum(n, 0.0)
                cache[name] = (h_in, n, xhat, inv_std)
        cache["pre_head"] = h
        logits = h @ w["head.w"] + w["head.b"]
        return logits, cache

    @staticmethod
    def _layer_norm_backward(d_out, xhat, inv_std, scale):
        d_scale = (d_out * xhat).sum(axis=0)
        d_bias = d_out.sum(axis=0)
        d_xhat = d_out * scale
        d_z = inv_std * (
            d_xhat
            - d_xhat.mean(axis=1, keepdims=True)
            - xhat * (d_xhat * xhat).mean(axis=1, keepdims=True)
        )
        return d_z, d_scale, d_bias

    def _backward(self, cache: dict, d_logits: np.ndarray) -> dict:
        w = self.weights
        grads = {}
        h = cache["pre_head"]
        grads["head.w"] = h.T @ d_logits
        grads["head.b"] = d_logits.sum(axis=0)
        d_h = d_logits @ w["head.w"].T
        if self.config.kind == "mlp":
            for layer in ("layer2", "layer1"):
                h_in, n, xhat, inv_std = cache[layer]
                d_n = d_h * (n > 0)
                d_z, d_scale, d_bias = self._layer_norm_backward(
                    d_n, xhat, inv_std, w[f"{layer}.ln_scale"]
                )
                grads[f"{layer}.ln_scale"] = d_scale
                grads[f"{layer}.ln_bias"] = d_bias
                grads[f"{layer}.w"] = h_in.T @ d_z
                grads[f"{layer}.b"] = d_z.sum(axis=0)
                d_h = d_z @ w[f"{layer}.w"].T
        else:
            for i in range(self.config.blocks, 0, -1):
                name = f"block{i}"
                h_in, n, xhat, inv_std = cache[name]
                d_n = d_h * (n > 0)
                d_z, d_scale, d_bias = self._layer_norm_backward(
                    d_n, xhat, inv_std, w[f"{name}.ln_scale"]
                )
                grads[f"{name}.ln_scale"] = d_scale
                grads[f"{name}.ln_bias"] = d_bias
                grads[f"{name}.w"] = h_in.T @ d_z
                grads[f"{name}.b"] = d_z.sum(axis=0)
                d_h = d_h + d_z @ w[f"{name}.w"].T  # skip connection
            X, _, xhat, inv_std = cache["stem"]
            d_z, d_scale, d_bias = self._layer_norm_backward(
                d_h, xhat, inv_std, w["stem.ln_scale"]
            )
            grads["stem.ln_scale"] = d_scale
            grads["stem.ln_bias"] = d_bias
            grads["stem.w"] = X.T @ d_z
            grads["stem.b"] = d_z.sum(axis=0)
        return grads


def _init_weights(config: ArchitectureConfig, rng: np.random.Generator) -> dict:
    w, c, n = config.width, config.class_count, config.in_dim
    weights = {}

    def linear(name, fan_in, fan_out):
        weights[f"{name}.w"] = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        weights[f"{name}.b"] = np.zeros(fan_out)

    if config.kind == "mlp":
        linear("layer1", n, w)
        linear("layer2", w, w)
        norm_layers = ["layer1", "layer2"]
    else:
        linear("stem", n, w)
        for i in range(1, config.blocks + 1):
            linear(f"block{i}", w, w)
        norm_layers = config.norm_layers()
    for layer in norm_layers:
        weights[f"{layer}.ln_scale"] = np.ones(w)
        weights[f"{layer}.ln_bias"] = np.zeros(w)
    linear("head", w, c)
    return weights


def pretrain(
    config: ArchitectureConfig,
    X,
    y,
    seed: int = 0,
    epochs: int = 60,
    batch_size: int = 128,
    learning_rate: float = 3e-3,
    min_accuracy: float | None = None,
) -> AdaptableModel:
    """Train base weights on labeled source data with Adam; deterministic per seed.

    When ``min_accuracy`` is given, a final training accuracy below it raises
    ``PretrainError`` carrying the measured accuracy.
    """
    X = check_batch(X, "X", width=config.in_dim)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise ValueError("y must be a label vector matching X")
    if y.min() < 0 or y.max() >= config.class_count:
        raise ValueError("labels out of range")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(101,))))
    model = AdaptableModel(config, _init_weights(config, rng))
    # re-point to writable copies for the duration of training
    weights = {k: v.copy() for k, v in model.weights.items()}
    model.weights = weights

    onehot = np.eye(config.class_count)[y]
    mated = {k: np.zeros_like(v) for k, v in weights.items()}
    v_adam = {k: np.zeros_like(v) for k, v in weights.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    n_samples = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n_samples)
        for lo in range(0, n_samples, batch_size):
            idx = order[lo : lo + batch_size]
            logits, cache = model._forward_train(X[idx])
            probs = _softmax(logits)
            d_logits = (probs - onehot[idx]) / idx.shape[0]
            grads = model._backward(cache, d_logits)
            step += 1
            for key, g in grads.items():
                mated[key] = beta1 * mated[key] + (1 - beta1) * g
                v_adam[key] = beta2 * v_adam[key] + (1 - beta2) * g * g
                m_hat = mated[key] / (1 - beta1**step)
                v_hat = v_adam[key] / (1 - beta2**step)
                weights[key] = weights[key] - learning_rate * m_hat / (np.sqrt(v_hat) + eps)

    trained = AdaptableModel(config, weights)
    accuracy = float(np.mean(trained.predict(X) == y))
    if min_accuracy is not None and accuracy < min_accuracy:
        raise PretrainError(
            f"training did not converge: accuracy {accuracy:.4f} < {min_accuracy:.4f}",
            accuracy,
        )
    return trained


class _RunningMoments:
    """Streaming per-feature mean/variance (parallel-merge form)."""

    def __init__(self, width: int):
        self.count = 0
        self.mean = np.zeros(width)
        self.m2 = np.zeros(width)

    def update(self, batch: np.ndarray):
        n_b = batch.shape[0]
        b_mean = batch.mean(axis=0)
        b_m2 = batch.var(axis=0) * n_b
        total = self.count + n_b
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (n_b / total)
        self.m2 = self.m2 + b_m2 + delta**2 * (self.count * n_b / total)
        self.count = total

    def variance(self) -> np.ndarray:
        return self.m2 / self.count

    def std(self) -> np.ndarray:
        return np.sqrt(self.variance())


def compute_source_stats(model: AdaptableModel, source_batches) -> SourceStats:
    """Aggregate per-block and stem activation moments over in-distribution batches."""
    block_moments = [_RunningMoments(model.config.width) for _ in range(model.block_count)]
    stem_moments = _RunningMoments(model.stem_dim)
    zero = model.zero_offset()
    seen = 0
    for batch in source_batches:
        X = check_batch(batch, "source batch", width=model.config.in_dim)
        _, blocks, stem = model._activations(zero, X)
        for moments, blk in zip(block_moments, blocks):
            moments.update(blk)
        stem_moments.update(stem)
        seen += X.shape[0]
    if seen == 0:
        raise ValueError("source statistics require at least one sample")
    return SourceStats(
        means=[m.mean.copy() for m in block_moments],
        stds=[m.std() for m in block_moments],
        stem_mean=stem_moments.mean.copy(),
        stem_var=stem_moments.variance(),
        sample_count=seen,
    )


# -- persistence -------------------------------------------------------------


def save_checkpoint(path, model: AdaptableModel, source_stats: SourceStats | None = None):
    payload = {
        "schema_version": np.array([CHECKPOINT_SCHEMA_VERSION]),
        "config_json": np.array(
            json.dumps(
                {
                    "kind": model.config.kind,
                    "in_dim": model.config.in_dim,
                    "class_count": model.config.class_count,
                    "width": model.config.width,
                    "blocks": model.config.blocks,
                }
            )
        ),
    }
    for key, arr in model.weights.items():
        payload[f"weight.{key}"] = arr
    if source_stats is not None:
        payload["stats.count"] = np.array([source_stats.sample_count])
        payload["stats.stem_mean"] = source_stats.stem_mean
        payload["stats.stem_var"] = source_stats.stem_var
        for i, (mu, sd) in enumerate(zip(source_stats.means, source_stats.stds)):
            payload[f"stats.mean.{i}"] = mu
            payload[f"stats.std.{i}"] = sd
    with open(path, "wb") as fh:  # file handle keeps the exact filename
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[AdaptableModel, SourceStats | None]:
    with np.load(path) as data:
        version = int(data["schema_version"][0])
        if version != CHECKPOINT_SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema: {version}")
        config = ArchitectureConfig(**json.loads(str(data["config_json"])))
        weights = {
            key[len("weight.") :]: data[key] for key in data.files if key.startswith("weight.")
        }
        model = AdaptableModel(config, weights)
        stats = None
        if "stats.count" in data.files:
            means, stds = [], []
            i = 0
            while f"stats.mean.{i}" in data.files:
                means.append(data[f"stats.mean.{i}"])
                stds.append(data[f"stats.std.{i}"])
                i += 1
            stats = SourceStats(
                means=means,
                stds=stds,
                stem_mean=data["stats.stem_mean"],
                stem_var=data["stats.stem_var"],
                sample_count=int(data["stats.count"][0]),
            )
        return model, stats
