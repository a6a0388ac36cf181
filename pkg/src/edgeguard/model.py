"""Fused autoencoder / CNN / BiLSTM intrusion detector.

Three branches read the same standardized flow vector ``x`` of width ``D``:

* autoencoder: ``Dense(128) -> Dropout -> Dense(64)`` bottleneck, plus a
  ``Dense(128) -> Dense(D)`` decoder used only for the reconstruction loss;
* CNN: ``x`` as a length-``D`` single-channel signal through
  ``Conv1D(64) -> MaxPool -> Conv1D(128) -> GlobalMaxPool -> Dense(64)``;
* BiLSTM: ``x`` as a one-step sequence through ``BiLSTM(64) -> BiLSTM(32) -> Dense(64)``.

The three 64-wide embeddings are concatenated (AE | CNN | BiLSTM) and passed through
``Dense(128, L2) -> Dropout(0.4) -> Dense(1, sigmoid)``.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .errors import DimensionError, ModelFileError, NumericalError, ParameterError, StateError

MAGIC = b"EGRD"
FORMAT_VERSION = 1

DECODER_KEYS = ("ae.dec.W", "ae.dec.b", "ae.out.W", "ae.out.b")
L2_KEYS = ("fusion.dense.W",)


@dataclass(frozen=True)
class Architecture:
    input_dim: int = 53
    ae_hidden: int = 128
    bottleneck: int = 64
    cnn_filters: tuple = (64, 128)
    cnn_kernel: int = 3
    cnn_pool: int = 2
    lstm_units: tuple = (64, 32)
    branch_dim: int = 64
    fusion_hidden: int = 128
    ae_dropout: float = 0.2
    fusion_dropout: float = 0.4
    recon_weight: float = 0.1
    l2_weight: float = 1e-4
    hidden_activation: str = "relu"
    forget_bias: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "cnn_filters", tuple(int(v) for v in self.cnn_filters))
        object.__setattr__(self, "lstm_units", tuple(int(v) for v in self.lstm_units))
        widths = [self.input_dim, self.ae_hidden, self.bottleneck, self.cnn_kernel, self.cnn_pool,
                  self.branch_dim, self.fusion_hidden, *self.cnn_filters, *self.lstm_units]
        if any(w < 1 for w in widths):
            raise ParameterError(f"all layer widths must be positive: {self}")
        if len(self.cnn_filters) != 2 or len(self.lstm_units) != 2:
            raise ParameterError("cnn_filters and lstm_units each need exactly two entries")
        for rate in (self.ae_dropout, self.fusion_dropout):
            if not 0.0 <= rate < 1.0:
                raise ParameterError(f"dropout rate {rate} outside [0, 1)")
        if self.recon_weight < 0 or self.l2_weight < 0:
            raise ParameterError("loss weights must be non-negative")
        if self.hidden_activation not in nn.ACTIVATIONS:
            raise ParameterError(f"unknown hidden activation {self.hidden_activation!r}")

    @property
    def fusion_dim(self):
        return self.bottleneck + 2 * self.branch_dim

    @property
    def pooled_len(self):
        return -(-self.input_dim // self.cnn_pool)

    def to_dict(self):
        d = asdict(self)
        d["cnn_filters"] = list(self.cnn_filters)
        d["lstm_units"] = list(self.lstm_units)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_shapes(arch):
    """Parameter names and shapes in their fixed serialization order."""
    D, H = arch.input_dim, arch.ae_hidden
    f1, f2 = arch.cnn_filters
    u1, u2 = arch.lstm_units
    k = arch.cnn_kernel
    shapes = {
        "ae.enc.W": (D, H), "ae.enc.b": (H,),
        "ae.bottleneck.W": (H, arch.bottleneck), "ae.bottleneck.b": (arch.bottleneck,),
        "ae.dec.W": (arch.bottleneck, H), "ae.dec.b": (H,),
        "ae.out.W": (H, D), "ae.out.b": (D,),
        "cnn.conv1.W": (k, 1, f1), "cnn.conv1.b": (f1,),
        "cnn.conv2.W": (k, f1, f2), "cnn.conv2.b": (f2,),
        "cnn.proj.W": (f2, arch.branch_dim), "cnn.proj.b": (arch.branch_dim,),
    }
    for name, d_in, units in (("lstm1", D, u1), ("lstm2", 2 * u1, u2)):
        for direction in ("fwd", "bwd"):
            p = f"{name}.{direction}"
            shapes[f"{p}.Wx"] = (d_in, 4 * units)
            shapes[f"{p}.Wh"] = (units, 4 * units)
            shapes[f"{p}.b"] = (4 * units,)
    shapes.update({
        "lstm.proj.W": (2 * u2, arch.branch_dim), "lstm.proj.b": (arch.branch_dim,),
        "fusion.dense.W": (arch.fusion_dim, arch.fusion_hidden), "fusion.dense.b": (arch.fusion_hidden,),
        "fusion.out.W": (arch.fusion_hidden, 1), "fusion.out.b": (1,),
    })
    return shapes


# layers followed by the hidden activation get a wider (He) init range
_RELU_LAYERS = {"ae.enc", "ae.bottleneck", "ae.dec", "cnn.conv1", "cnn.conv2", "cnn.proj",
                "lstm.proj", "fusion.dense"}


def _init_array(name, shape, arch, rng):
    if name.endswith(".b"):
        b = np.zeros(shape)
        if name.startswith("lstm") and not name.startswith("lstm.proj"):
            units = shape[0] // 4
            b[units:2 * units] = arch.forget_bias
        return b
    fan_in = int(np.prod(shape[:-1]))
    layer = name.rsplit(".", 1)[0]
    scale = 6.0 if layer in _RELU_LAYERS and arch.hidden_activation == "relu" else 3.0
    limit = np.sqrt(scale / fan_in)
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ModelParams:
    arch: Architecture
    params: dict
    metadata: dict = field(default_factory=dict)

    @property
    def stripped(self):
        return not all(k in self.params for k in DECODER_KEYS)

    @property
    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    def copy(self):
        return ModelParams(self.arch, {k: v.copy() for k, v in self.params.items()}, dict(self.metadata))

    def strip_decoder(self):
        """Deployment copy without reconstruction-only parameters."""
        kept = {k: v.copy() for k, v in self.params.items() if k not in DECODER_KEYS}
        return ModelParams(self.arch, kept, dict(self.metadata))


def build(arch, seed):
    rng = np.random.default_rng(seed)
    params = {name: _init_array(name, shape, arch, rng) for name, shape in param_shapes(arch).items()}
    return ModelParams(arch, params, {"seed": int(seed), "epochs": 0})


# ---------------------------------------------------------------------------
# graph


class Network:
    """Forward/backward executor for one :class:`ModelParams`.

    ``forward`` caches every intermediate needed by ``backward``; the parameter
    arrays are read, never copied, so an optimizer may update them between steps.
    """

    def __init__(self, model):
        self.model = model
        self._cache = None

    @property
    def arch(self):
        return self.model.arch

    def _lstm(self, name):
        p = self.model.params
        return tuple((p[f"{name}.{d}.Wx"], p[f"{name}.{d}.Wh"], p[f"{name}.{d}.b"]) for d in ("fwd", "bwd"))

    def forward(self, X, training=False, rng=None, reconstruct=True):
        """Return ``(probabilities, reconstruction)``; reconstruction is None when skipped."""
        arch, p = self.arch, self.model.params
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != arch.input_dim:
            raise DimensionError(f"model expects (N, {arch.input_dim}) input, got {X.shape}")
        if reconstruct and self.model.stripped:
            raise StateError("decoder parameters are absent; use forward_infer")
        act = arch.hidden_activation
        c = {"X": X, "reconstruct": reconstruct}

        h1, c["enc"] = nn.fc_forward(X, p["ae.enc.W"], p["ae.enc.b"], act)
        h1d, c["ae_drop"] = nn.dropout_forward(h1, arch.ae_dropout, training, rng)
        z, c["bottleneck"] = nn.fc_forward(h1d, p["ae.bottleneck.W"], p["ae.bottleneck.b"], act)
        recon = None
        if reconstruct:
            d1, c["dec"] = nn.fc_forward(z, p["ae.dec.W"], p["ae.dec.b"], act)
            recon, c["out"] = nn.fc_forward(d1, p["ae.out.W"], p["ae.out.b"], "linear")

        k1, c["conv1"] = nn.conv1d_forward(X[:, :, None], p["cnn.conv1.W"], p["cnn.conv1.b"], 1, "same", act)
        k1p, c["pool"] = nn.maxpool1d_forward(k1, arch.cnn_pool)
        k2, c["conv2"] = nn.conv1d_forward(k1p, p["cnn.conv2.W"], p["cnn.conv2.b"], 1, "same", act)
        g, c["gmax"] = nn.global_maxpool_forward(k2)
        e_cnn, c["cnn_proj"] = nn.fc_forward(g, p["cnn.proj.W"], p["cnn.proj.b"], act)

        s1, c["lstm1"] = nn.bilstm_forward(X[:, None, :], *self._lstm("lstm1"), return_sequences=True)
        s2, c["lstm2"] = nn.bilstm_forward(s1, *self._lstm("lstm2"), return_sequences=False)
        e_lstm, c["lstm_proj"] = nn.fc_forward(s2, p["lstm.proj.W"], p["lstm.proj.b"], act)

        fused = np.concatenate([z, e_cnn, e_lstm], axis=1)
        u, c["fusion"] = nn.fc_forward(fused, p["fusion.dense.W"], p["fusion.dense.b"], act)
        ud, c["fusion_drop"] = nn.dropout_forward(u, arch.fusion_dropout, training, rng)
        probs, c["head"] = nn.fc_forward(ud, p["fusion.out.W"], p["fusion.out.b"], "sigmoid")
        c["probs"], c["recon"], c["fused_width"] = probs[:, 0], recon, fused.shape[1]
        self._cache = c
        return probs[:, 0], recon

    def loss(self, y):
        c = self._require_cache()
        arch, p = self.arch, self.model.params
        return nn.composite_loss(c["probs"], y, c["recon"], c["X"], arch.recon_weight, arch.l2_weight,
                                 [p[k] for k in L2_KEYS])

    def _require_cache(self):
        if self._cache is None:
            raise StateError("backward/loss called before forward")
        return self._cache

    def backward(self, y):
        """Exact gradients of the composite loss for the cached batch."""
        c = self._require_cache()
        arch, p = self.arch, self.model.params
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        n = y.shape[0]
        grads = {}

        probs = c["probs"]
        inside = (probs > nn.BCE_EPS) & (probs < 1.0 - nn.BCE_EPS)
        # d BCE / d logit, zero where the clamp is active
        dlogit = np.where(inside, (probs - y) / n, 0.0)[:, None]
        x_h = c["head"][0]
        dud = dlogit @ p["fusion.out.W"].T
        grads["fusion.out.W"] = x_h.T @ dlogit
        grads["fusion.out.b"] = dlogit.sum(axis=0)
        du = nn.dropout_backward(dud, c["fusion_drop"])
        dfused, gW, gb = nn.fc_backward(du, p["fusion.dense.W"], c["fusion"])
        grads["fusion.dense.W"] = gW + 2.0 * arch.l2_weight * p["fusion.dense.W"]
        grads["fusion.dense.b"] = gb

        bw = arch.bottleneck
        dz = dfused[:, :bw]
        de_cnn = dfused[:, bw:bw + arch.branch_dim]
        de_lstm = dfused[:, bw + arch.branch_dim:]

        # autoencoder, including the reconstruction path
        if c["reconstruct"]:
            drecon = arch.recon_weight * 2.0 * (c["recon"] - c["X"]) / c["X"].size
            dd1, grads["ae.out.W"], grads["ae.out.b"] = nn.fc_backward(drecon, p["ae.out.W"], c["out"])
            dz_dec, grads["ae.dec.W"], grads["ae.dec.b"] = nn.fc_backward(dd1, p["ae.dec.W"], c["dec"])
            dz = dz + dz_dec
        dh1d, grads["ae.bottleneck.W"], grads["ae.bottleneck.b"] = nn.fc_backward(
            dz, p["ae.bottleneck.W"], c["bottleneck"])
        dh1 = nn.dropout_backward(dh1d, c["ae_drop"])
        _, grads["ae.enc.W"], grads["ae.enc.b"] = nn.fc_backward(dh1, p["ae.enc.W"], c["enc"], need_dx=False)

        # CNN
        dg, grads["cnn.proj.W"], grads["cnn.proj.b"] = nn.fc_backward(de_cnn, p["cnn.proj.W"], c["cnn_proj"])
        dk2 = nn.global_maxpool_backward(dg, c["gmax"])
        dk1p, grads["cnn.conv2.W"], grads["cnn.conv2.b"] = nn.conv1d_backward(dk2, p["cnn.conv2.W"], c["conv2"])
        dk1 = nn.maxpool1d_backward(dk1p, c["pool"])
        _, grads["cnn.conv1.W"], grads["cnn.conv1.b"] = nn.conv1d_backward(
            dk1, p["cnn.conv1.W"], c["conv1"], need_dx=False)

        # BiLSTM
        ds2, grads["lstm.proj.W"], grads["lstm.proj.b"] = nn.fc_backward(de_lstm, p["lstm.proj.W"], c["lstm_proj"])
        dout = ds2
        for name in ("lstm2", "lstm1"):
            fwd, bwd = self._lstm(name)
            dout, gf, gbk = nn.bilstm_backward(dout, fwd, bwd, c[name])
            for direction, gset in (("fwd", gf), ("bwd", gbk)):
                for suffix, g in zip(("Wx", "Wh", "b"), gset):
                    grads[f"{name}.{direction}.{suffix}"] = g
        return {k: grads[k] for k in p}


def forward_train(model, X, training=True, rng=None):
    """Probabilities and reconstructions; dropout active when ``training``."""
    return Network(model).forward(X, training=training, rng=rng, reconstruct=True)


def forward_infer(model, X, batch_size=None):
    """Decoder-free, dropout-free probabilities; works on stripped parameters."""
    net = Network(model)
    X = np.asarray(X, dtype=np.float64)
    if batch_size is None or X.shape[0] <= batch_size:
        return net.forward(X, training=False, reconstruct=False)[0]
    return np.concatenate([net.forward(X[i:i + batch_size], reconstruct=False)[0]
                           for i in range(0, X.shape[0], batch_size)])


def evaluate_loss(model, X, y, batch_size=1024):
    """Composite loss in inference mode, averaged exactly as a single full batch would be."""
    net = Network(model)
    n = X.shape[0]
    bce = recon = 0.0
    probs = []
    for i in range(0, n, batch_size):
        xb, yb = X[i:i + batch_size], y[i:i + batch_size]
        pr, _ = net.forward(xb, training=False, reconstruct=not model.stripped)
        terms = net.loss(yb)
        bce += terms.bce * xb.shape[0]
        recon += terms.recon * xb.shape[0]
        probs.append(pr)
    l2 = float(sum(np.sum(model.params[k] ** 2) for k in L2_KEYS))
    terms = nn.LossTerms(bce / n, recon / n, l2, model.arch.recon_weight, model.arch.l2_weight)
    return terms, np.concatenate(probs)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int | None = 5
    restore_best: bool = True
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if self.patience is not None and self.patience < 1:
            raise ParameterError("patience must be >= 1 or None")


def _rates(y, pred):
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    acc = float(np.mean(pred == y)) if y.size else float("nan")
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return acc, precision, recall


def train(model, train_data, val_data=None, config=None, on_epoch=None):
    """Mini-batch Adam on the composite loss.

    ``train_data``/``val_data`` are objects with ``X`` and ``y`` arrays.  Returns a new
    ``ModelParams`` and the per-epoch history.  Epoch numbering continues from
    ``model.metadata['epochs']`` so a resumed run extends the previous history.
    """
    config = config or TrainConfig()
    model = model.copy()
    if model.stripped:
        raise StateError("cannot train a model without its decoder")
    history = []
    if config.epochs == 0:
        return model, history
    X = np.asarray(train_data.X, dtype=np.float64)
    y = np.asarray(train_data.y, dtype=np.float64).reshape(-1)
    if X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise DimensionError(f"training matrix {X.shape} and labels {y.shape} misaligned or empty")

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    order_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    opt = nn.Adam(config.lr, config.beta1, config.beta2, config.eps)
    net = Network(model)
    start = int(model.metadata.get("epochs", 0))
    best_loss, best_params, stale = np.inf, None, 0
    n = X.shape[0]

    for epoch in range(start + 1, start + config.epochs + 1):
        perm = order_rng.permutation(n)
        total_loss = 0.0
        preds = np.empty(n)
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            xb, yb = X[idx], y[idx]
            probs, _ = net.forward(xb, training=True, rng=dropout_rng)
            loss = net.loss(yb).total
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}", checkpoint=model.copy())
            try:
                opt.step(model.params, net.backward(yb))
            except NumericalError as exc:
                # Adam validates before mutating, so the params are still the last good ones
                raise NumericalError(str(exc), checkpoint=model.copy()) from exc
            total_loss += loss * idx.size
            preds[idx] = probs >= config.threshold
        acc, prec, rec = _rates(y, preds)
        record = {"epoch": epoch, "train_loss": total_loss / n, "train_accuracy": acc,
                  "train_precision": prec, "train_recall": rec}
        model.metadata["epochs"] = epoch
        if val_data is not None and len(val_data.y):
            vy = np.asarray(val_data.y, dtype=np.float64)
            terms, vp = evaluate_loss(model, val_data.X, vy)
            vacc, vprec, vrec = _rates(vy, vp >= config.threshold)
            record.update(val_loss=terms.total, val_accuracy=vacc, val_precision=vprec, val_recall=vrec,
                          accuracy_gap=acc - vacc)
            if terms.total < best_loss:
                best_loss, stale = terms.total, 0
                best_params = {k: v.copy() for k, v in model.params.items()}
                record["best"] = True
            else:
                stale += 1
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if config.patience is not None and best_params is not None and stale >= config.patience:
            break
    if config.restore_best and best_params is not None:
        model.params = best_params
    return model, history


# ---------------------------------------------------------------------------
# serialization


def to_bytes(model):
    header = json.dumps({"architecture": model.arch.to_dict(), "metadata": model.metadata,
                         "params": [[k, list(v.shape)] for k, v in model.params.items()]},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    for v in model.params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob):
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ModelFileError("not an edgeguard model file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ModelFileError("model file checksum mismatch (truncated or corrupted)")
    version, hlen = struct.unpack("<II", body[4:12])
    if version != FORMAT_VERSION:
        raise ModelFileError(f"model file version {version} unsupported (expected {FORMAT_VERSION})")
    header = json.loads(body[12:12 + hlen])
    arch = Architecture.from_dict(header["architecture"])
    expected = param_shapes(arch)
    offset = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        if name not in expected or tuple(shape) != expected[name]:
            raise ModelFileError(f"parameter {name} {shape} does not fit the stored architecture")
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(body):
            raise ModelFileError("model file truncated")
        params[name] = np.frombuffer(body[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(body):
        raise ModelFileError("trailing bytes after parameter buffers")
    missing = set(expected) - set(params) - set(DECODER_KEYS)
    if missing:
        raise ModelFileError(f"model file lacks parameters: {sorted(missing)}")
    return ModelParams(arch, params, header["metadata"])


def save(model, path):
    Path(path).write_bytes(to_bytes(model))


def load(path):
    return from_bytes(Path(path).read_bytes())


def with_overrides(arch, **overrides):
    return replace(arch, **overrides)
