"""Standardization, PCA, least squares and a two-layer network.

Everything is fitted on a training partition only and is immutable once
fitted; :class:`TrainedPipeline` chains the pieces and maps predictions back
to target units.
"""

from __future__ import annotations

import functools
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericalError, TrainingDivergedError

log = logging.getLogger(__name__)


# --- standardization ------------------------------------------------------------

@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    target_mean: float
    target_std: float
    clip: float
    clip_target: bool = False

    def transform(self, X):
        return apply_standardizer(X, self)

    def transform_target(self, y):
        z = (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std
        if self.clip_target:
            z = np.clip(z, -self.clip, self.clip)
        return z

    def inverse_target(self, z):
        return np.asarray(z, dtype=np.float64) * self.target_std + self.target_mean


def fit_standardizer(X, y, clip: float, clip_target: bool = False) -> Standardizer:
    """Per-column mean and sample std (zero std stored as 1) plus target stats."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError(f"need >= 2 training rows, got shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise DataError(f"target has shape {y.shape}, expected ({X.shape[0]},)")
    if not clip > 0:
        raise ConfigError(f"clip_level must be > 0, got {clip}")
    with np.errstate(over="ignore", invalid="ignore"):
        mean = X.mean(axis=0)
        std = X.std(axis=0, ddof=1)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
        raise NumericalError("feature mean or standard deviation overflowed")
    std = np.where(std > 0, std, 1.0)
    ty = float(y.std(ddof=1))
    return Standardizer(mean, std, float(y.mean()), ty if ty > 0 else 1.0, float(clip), clip_target)


def apply_standardizer(X, s: Standardizer):
    """``clip((x - mean) / std, -c, c)`` column-wise."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(s.mean):
        raise DataError(f"expected {len(s.mean)} feature columns, got shape {X.shape}")
    return np.clip((X - s.mean) / s.std, -s.clip, s.clip)


# --- PCA ------------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (n_components, n_features), orthonormal rows
    explained_variance: np.ndarray

    @property
    def n_components(self):
        return self.components.shape[0]

    def transform(self, Z):
        return pca_transform(Z, self)

    def inverse_transform(self, scores):
        return np.asarray(scores) @ self.components + self.mean


def _fix_signs(components):
    """Flip each row so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit_pca(Z, n_components: int, method: str = "svd", batch_size: int | None = None) -> PcaModel:
    """Top-variance orthonormal basis of the centred rows of ``Z``.

    ``method="svd"`` is an exact thin SVD; ``"incremental"`` streams row
    batches through scikit-learn's IncrementalPCA.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n, d = Z.shape
    n_components = int(n_components)
    if not 1 <= n_components <= min(n, d):
        raise ConfigError(f"n_components={n_components} must lie in [1, {min(n, d)}] for data {Z.shape}")
    mean = Z.mean(axis=0)
    if not np.all(np.isfinite(Z)):
        raise NumericalError("PCA input contains non-finite values")
    if method == "svd":
        try:
            _, s, vt = np.linalg.svd(Z - mean, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD did not converge: {exc}") from None
        comps = vt[:n_components]
        var = s[:n_components] ** 2 / max(n - 1, 1)
    elif method == "incremental":
        from sklearn.decomposition import IncrementalPCA

        bs = max(int(batch_size or 5 * d), n_components)
        # carry as many directions as a batch allows, then truncate: exact when d <= batch
        keep = max(n_components, min(d, bs, n))
        ipca = IncrementalPCA(n_components=keep, batch_size=bs).fit(Z)
        comps = ipca.components_[:n_components]
        var = ipca.explained_variance_[:n_components]
    else:
        raise ConfigError(f"unknown pca method {method!r}; expected 'svd' or 'incremental'")
    return PcaModel(mean, _fix_signs(np.array(comps)), np.array(var))


def pca_transform(Z, m: PcaModel):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != m.components.shape[1]:
        raise DataError(f"expected {m.components.shape[1]} columns, got shape {Z.shape}")
    return (Z - m.mean) @ m.components.T


# --- least squares -------------------------------------------------------------------

@dataclass(frozen=True)
class LinearModel:
    coef: np.ndarray
    intercept: float
    rank: int
    rank_deficient: bool = False

    def predict(self, X):
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept


def fit_ols(X, y) -> LinearModel:
    """Least squares with intercept; minimum-norm slope when rank deficient."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DataError(f"design {X.shape} incompatible with target {y.shape}")
    xm = X.mean(axis=0)
    ym = float(y.mean())
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NumericalError("least squares input contains non-finite values")
    try:
        coef, _, rank, _ = np.linalg.lstsq(X - xm, y - ym, rcond=None)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"least squares did not converge: {exc}") from None
    deficient = rank < X.shape[1]
    if deficient:
        log.info("least squares design is rank deficient (%d < %d); using minimum-norm solution",
                 rank, X.shape[1])
    return LinearModel(coef, ym - float(xm @ coef), int(rank), bool(deficient))


# --- two-layer network ----------------------------------------------------------------

ACTIVATIONS = ("identity", "leaky_relu", "cubic", "scaled_sigmoid")
WIDTHS = (1, 8, 16, 32, 64)
LEAKY_SLOPE = 0.01


def activation(kind, a):
    """Return ``(f(a), f'(a))``."""
    if kind == "identity":
        return a, np.ones_like(a)
    if kind == "leaky_relu":
        return np.where(a > 0, a, LEAKY_SLOPE * a), np.where(a > 0, 1.0, LEAKY_SLOPE)
    if kind == "cubic":
        return a + a ** 3, 1.0 + 3.0 * a ** 2
    if kind == "scaled_sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * a))
        return 10.0 * s - 5.0, 10.0 * s * (1.0 - s)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class MlpConfig:
    width: int = 1
    activation: str = "identity"
    learning_rate: float = 1e-2
    l2: float = 1e-3
    batch_size: int = 256
    iterations: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.width not in WIDTHS:
            raise ConfigError(f"mlp.width must be one of {WIDTHS}, got {self.width}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"mlp.activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not self.learning_rate > 0 or self.batch_size < 1 or self.iterations < 1 or self.l2 < 0:
            raise ConfigError("mlp.learning_rate, batch_size and iterations must be positive")


@dataclass(frozen=True)
class MlpModel:
    config: MlpConfig
    w1: np.ndarray  # (width, n_in)
    b1: np.ndarray
    w2: np.ndarray  # (1, width)
    b2: np.ndarray

    def predict(self, X):
        h, _ = activation(self.config.activation, np.asarray(X, dtype=np.float64) @ self.w1.T + self.b1)
        return (h @ self.w2.T + self.b2)[:, 0]


def mlp_loss_and_grads(params, X, y, kind, l2):
    """MSE plus ``l2/2 * |W|^2`` on both weight matrices, with its gradients."""
    w1, b1, w2, b2 = params
    a = X @ w1.T + b1
    h, dh_da = activation(kind, a)
    out = (h @ w2.T + b2)[:, 0]
    r = out - y
    loss = float(np.mean(r * r) + 0.5 * l2 * (np.sum(w1 * w1) + np.sum(w2 * w2)))
    dout = (2.0 / len(y)) * r[:, None]
    gw2 = dout.T @ h + l2 * w2
    gb2 = dout.sum(axis=0)
    da = (dout @ w2) * dh_da
    gw1 = da.T @ X + l2 * w1
    gb1 = da.sum(axis=0)
    return loss, (gw1, gb1, gw2, gb2)


def init_mlp(n_in, config: MlpConfig):
    rng = np.random.default_rng(config.seed)
    k1 = 1.0 / np.sqrt(n_in)
    k2 = 1.0 / np.sqrt(config.width)
    return (
        rng.uniform(-k1, k1, size=(config.width, n_in)),
        rng.uniform(-k1, k1, size=config.width),
        rng.uniform(-k2, k2, size=(1, config.width)),
        rng.uniform(-k2, k2, size=1),
    )


def fit_mlp(X, y, config: MlpConfig = MlpConfig()) -> MlpModel:
    """Minibatch SGD on mean squared error; batches drawn with replacement."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DataError(f"design {X.shape} incompatible with target {y.shape}")
    params = list(init_mlp(X.shape[1], config))
    rng = np.random.default_rng((config.seed, 1))
    lr = config.learning_rate
    first = None
    for it in range(config.iterations):
        batch = rng.integers(0, len(y), size=config.batch_size)
        loss, grads = mlp_loss_and_grads(params, X[batch], y[batch], config.activation, config.l2)
        if first is None:
            first = loss
        if not np.isfinite(loss) or loss > 1e6 * max(first, 1.0):
            raise TrainingDivergedError(it, loss)
        for p, g in zip(params, grads):
            p -= lr * g
    return MlpModel(config, *params)


# --- pipeline --------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    clip_level: float = 1.0
    n_components: int = 550
    use_pca: bool = True
    regressor: str = "ols"
    pca_method: str = "svd"
    clip_target: bool = False
    mlp: MlpConfig = field(default_factory=MlpConfig)
    seed: int = 0

    def __post_init__(self):
        if self.regressor not in ("ols", "mlp"):
            raise ConfigError(f"regressor must be 'ols' or 'mlp', got {self.regressor!r}")
        if not self.clip_level > 0:
            raise ConfigError(f"clip_level must be > 0, got {self.clip_level}")
        if int(self.n_components) < 1:
            raise ConfigError(f"n_components must be >= 1, got {self.n_components}")

    def to_dict(self):
        d = asdict(self)
        mlp = d.pop("mlp")
        d.update({f"mlp.{k}": v for k, v in mlp.items()})
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        mlp = {k[4:]: d.pop(k) for k in list(d) if k.startswith("mlp.")}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
        mlp_known = {f.name for f in fields(MlpConfig)}
        if set(mlp) - mlp_known:
            raise ConfigError(f"unknown mlp config key(s): {sorted(set(mlp) - mlp_known)}")
        if "seed" in d and "seed" not in mlp:
            mlp["seed"] = d["seed"]
        return cls(**d, mlp=MlpConfig(**mlp))


@dataclass(frozen=True)
class TrainedPipeline:
    config: PipelineConfig
    standardizer: Standardizer
    pca: PcaModel | None
    regressor: LinearModel | MlpModel
    columns: tuple = ()

    def reduce(self, X):
        z = apply_standardizer(X, self.standardizer)
        return z if self.pca is None else pca_transform(z, self.pca)

    def predict_z(self, X):
        return self.regressor.predict(self.reduce(X))

    def predict(self, X):
        return self.standardizer.inverse_target(self.predict_z(X))


@functools.lru_cache(maxsize=64)
def _warn_cap(requested, n, n_rows, n_cols):
    log.warning("n_components=%d capped to %d for %d rows x %d features", requested, n, n_rows, n_cols)


def effective_components(config: PipelineConfig, n_rows, n_cols):
    n = min(int(config.n_components), n_rows, n_cols)
    if n < config.n_components:
        _warn_cap(int(config.n_components), n, n_rows, n_cols)  # once per shape, not per fold
    return n


def fit_pipeline(X, y, config: PipelineConfig = PipelineConfig(), columns=()) -> TrainedPipeline:
    """Standardize, clip, optionally reduce with PCA, then regress."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    std = fit_standardizer(X, y, config.clip_level, config.clip_target)
    Z = apply_standardizer(X, std)
    yz = std.transform_target(y)
    pca = None
    if config.use_pca:
        pca = fit_pca(Z, effective_components(config, *Z.shape), method=config.pca_method)
        Z = pca_transform(Z, pca)
    if config.regressor == "ols":
        reg = fit_ols(Z, yz)
    else:
        reg = fit_mlp(Z, yz, config.mlp)
    return TrainedPipeline(config, std, pca, reg, tuple(columns))


def predict(p: TrainedPipeline, X_raw, columns=None):
    """Predictions in target units; ``columns`` is checked against training when given."""
    X_raw = np.asarray(X_raw, dtype=np.float64)
    if columns is not None and p.columns and tuple(columns) != tuple(p.columns):
        raise DataError("feature columns differ from the columns the pipeline was trained on")
    if X_raw.ndim != 2 or X_raw.shape[1] != len(p.standardizer.mean):
        raise DataError(f"expected {len(p.standardizer.mean)} columns, got shape {X_raw.shape}")
    return p.predict(X_raw)


# --- serialization ----------------------------------------------------------------------

MAGIC = b"HMPIPE\x00\x00"
FORMAT_VERSION = 1


def save_pipeline(p: TrainedPipeline, path) -> None:
    """Versioned binary file: magic, version, JSON header, raw little-endian arrays."""
    arrays = {
        "std.mean": p.standardizer.mean,
        "std.std": p.standardizer.std,
    }
    if p.pca is not None:
        arrays.update({"pca.mean": p.pca.mean, "pca.components": p.pca.components,
                       "pca.explained_variance": p.pca.explained_variance})
    if isinstance(p.regressor, LinearModel):
        arrays["ols.coef"] = p.regressor.coef
        kind = "ols"
    else:
        arrays.update({"mlp.w1": p.regressor.w1, "mlp.b1": p.regressor.b1,
                       "mlp.w2": p.regressor.w2, "mlp.b2": p.regressor.b2})
        kind = "mlp"

    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "dtype": "<f8", "shape": list(a.shape),
                        "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    meta = {
        "config": p.config.to_dict(),
        "regressor": kind,
        "target_mean": p.standardizer.target_mean,
        "target_std": p.standardizer.target_std,
        "clip": p.standardizer.clip,
        "clip_target": p.standardizer.clip_target,
        "columns": [str(c) for c in p.columns],
        "arrays": entries,
    }
    if kind == "ols":
        meta["ols"] = {"intercept": p.regressor.intercept, "rank": p.regressor.rank,
                       "rank_deficient": p.regressor.rank_deficient}
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_pipeline(path) -> TrainedPipeline:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise DataError(f"{path}: not a pipeline file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported pipeline format version {version}")
    try:
        return _decode_pipeline(json.loads(raw[16:16 + hlen].decode("utf-8")), raw[16 + hlen:], path)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: corrupt pipeline header ({exc!r})") from None


def _decode_pipeline(meta, body, path):
    arr = {}
    for e in meta["arrays"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise DataError(f"{path}: truncated array {e['name']}")
        arr[e["name"]] = np.frombuffer(chunk, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float64)
    config = PipelineConfig.from_dict(meta["config"])
    std = Standardizer(arr["std.mean"], arr["std.std"], meta["target_mean"], meta["target_std"],
                       meta["clip"], meta["clip_target"])
    pca = None
    if "pca.components" in arr:
        pca = PcaModel(arr["pca.mean"], arr["pca.components"], arr["pca.explained_variance"])
    if meta["regressor"] == "ols":
        o = meta["ols"]
        reg = LinearModel(arr["ols.coef"], o["intercept"], o["rank"], o["rank_deficient"])
    else:
        reg = MlpModel(config.mlp, arr["mlp.w1"], arr["mlp.b1"], arr["mlp.w2"], arr["mlp.b2"])
    return TrainedPipeline(config, std, pca, reg, tuple(meta.get("columns", ())))
