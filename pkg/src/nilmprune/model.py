"""Window-to-window CNN disaggregator: layer chain, training, accounting, file I/O.

A model is an ordered chain of Conv1D / activation / Flatten / Linear layers
sized so the final Sigmoid output has the same length as the input window.
Two presets ship with the package:

* ``desk-small``: ~1e5 parameters, trains in seconds on synthetic data.
* ``paper-shape``: the full-scale layout (conv widths 30/30/40/50/50 with
  kernels 10/8/6/5/5, hidden width 960, window 480); 22,146,000 weights /
  22,147,640 parameters including biases.

Model files use a versioned binary format: magic ``NPRM``, version byte,
length-prefixed JSON header, then little-endian parameter blocks in layer
order, optional initial-parameter blocks, and per-layer mask bitsets
(1 bit per parameter, padded to a byte).
"""

from __future__ import annotations

import copy
import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError, ShapeError

MAGIC = b"NPRM"
VERSION = 1

CONV, RELU, SIGMOID, FLATTEN, LINEAR = "conv", "relu", "sigmoid", "flatten", "linear"
_ACT_KINDS = (RELU, SIGMOID)


@dataclass
class LayerSpec:
    """One layer of the chain; only conv/linear carry parameters."""

    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    in_f: int = 0
    out_f: int = 0
    prunable: bool = True

    @property
    def has_params(self) -> bool:
        return self.kind in (CONV, LINEAR)

    def weight_shape(self):
        if self.kind == CONV:
            return (self.out_ch, self.in_ch, self.kernel)
        if self.kind == LINEAR:
            return (self.out_f, self.in_f)
        return None

    def bias_shape(self):
        if self.kind == CONV:
            return (self.out_ch,)
        if self.kind == LINEAR:
            return (self.out_f,)
        return None

    def units(self) -> int:
        """Output units removable as a whole (filters / neurons)."""
        return self.out_ch if self.kind == CONV else self.out_f

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == CONV:
            d.update(in_ch=self.in_ch, out_ch=self.out_ch, kernel=self.kernel,
                     stride=self.stride, prunable=self.prunable)
        elif self.kind == LINEAR:
            d.update(in_f=self.in_f, out_f=self.out_f, prunable=self.prunable)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(in_ch, out_ch, kernel, stride=1):
    return LayerSpec(CONV, in_ch=in_ch, out_ch=out_ch, kernel=kernel, stride=stride)


def linear(in_f, out_f):
    return LayerSpec(LINEAR, in_f=in_f, out_f=out_f)


def act(kind):
    return LayerSpec(kind, prunable=False)


def flatten():
    return LayerSpec(FLATTEN, prunable=False)


# ---------------------------------------------------------------------------
# shape chaining
# ---------------------------------------------------------------------------

def infer_shapes(specs, window_len):
    """Walk the chain and return the (channels, length) or (features,) shape
    after each layer. Raises ConfigError when adjacent layers disagree or the
    window is too short for the kernel stack.
    """
    shape = (1, window_len)  # (channels, length)
    out = []
    seen_flatten = False
    for i, s in enumerate(specs):
        if s.kind == CONV:
            if len(shape) != 2:
                raise ConfigError(f"layer {i}: conv after flatten is not supported")
            ch, length = shape
            if ch != s.in_ch:
                raise ConfigError(
                    f"layer {i}: conv expects {s.in_ch} input channels, chain provides {ch}")
            if length < s.kernel:
                raise ConfigError(
                    f"layer {i}: window length {length} shorter than kernel {s.kernel}")
            shape = (s.out_ch, (length - s.kernel) // s.stride + 1)
        elif s.kind in _ACT_KINDS:
            pass
        elif s.kind == FLATTEN:
            if seen_flatten:
                raise ConfigError(f"layer {i}: flatten appears more than once")
            if len(shape) != 2:
                raise ConfigError(f"layer {i}: flatten input is already flat")
            seen_flatten = True
            shape = (shape[0] * shape[1],)
        elif s.kind == LINEAR:
            if len(shape) != 1:
                raise ConfigError(f"layer {i}: linear requires flattened input")
            if shape[0] != s.in_f:
                raise ConfigError(
                    f"layer {i}: linear expects {s.in_f} input features, chain provides {shape[0]}")
            shape = (s.out_f,)
        else:
            raise ConfigError(f"layer {i}: unknown layer kind {s.kind!r}")
        out.append(shape)
    return out


class ModelGraph:
    """Layer chain plus parameters, their initial snapshot, and masks.

    ``masks`` maps a layer index to a boolean array over that layer's weight
    tensor (False = pruned). Biases are never masked; they go away only when
    their unit is structurally removed.
    """

    def __init__(self, specs, window_len, seed=0, dtype=np.float64):
        self.specs = list(specs)
        self.window_len = int(window_len)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.epochs_trained = 0
        self.masks: dict[int, np.ndarray] | None = None

        infer_shapes(self.specs, self.window_len)

        rng = np.random.default_rng(self.seed)
        self.weights: list[T.Tensor | None] = []
        self.biases: list[T.Tensor | None] = []
        for s in self.specs:
            if not s.has_params:
                self.weights.append(None)
                self.biases.append(None)
                continue
            # He-scaled uniform: keeps activation variance flat through the
            # ReLU stack, which matters at this depth
            fan_in = s.in_ch * s.kernel if s.kind == CONV else s.in_f
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=s.weight_shape()).astype(self.dtype)
            b = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in),
                            size=s.bias_shape()).astype(self.dtype)
            self.weights.append(T.Tensor(w, requires_grad=True))
            self.biases.append(T.Tensor(b, requires_grad=True))
        self.init_weights = [None if w is None else w.data.copy() for w in self.weights]
        self.init_biases = [None if b is None else b.data.copy() for b in self.biases]

    # -- basic introspection ------------------------------------------------

    def param_layers(self):
        return [i for i, s in enumerate(self.specs) if s.has_params]

    def parameters(self):
        out = []
        for i in self.param_layers():
            out.append(self.weights[i])
            out.append(self.biases[i])
        return out

    def flat_shapes(self):
        return infer_shapes(self.specs, self.window_len)

    def clone(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def apply_masks(self) -> None:
        if not self.masks:
            return
        for i, m in self.masks.items():
            self.weights[i].data[~m] = 0.0

    def rewind_to_init(self) -> None:
        """Reset parameters to their construction-time values, then re-mask."""
        for i in self.param_layers():
            if self.init_weights[i].shape != self.weights[i].data.shape:
                raise ConfigError("initial snapshot no longer matches parameter shapes")
            self.weights[i].data = self.init_weights[i].copy()
            self.biases[i].data = self.init_biases[i].copy()
        self.apply_masks()


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _chain(conv_widths, kernels, strides, hidden, window_len):
    specs = []
    ch = 1
    length = window_len
    for w, k, st in zip(conv_widths, kernels, strides):
        specs.append(conv(ch, w, k, st))
        specs.append(act(RELU))
        ch = w
        if length < k:
            raise ConfigError(
                f"window {window_len} too short for the kernel stack (need >= {k} at depth)")
        length = (length - k) // st + 1
    specs.append(flatten())
    specs.append(linear(ch * length, hidden))
    specs.append(act(RELU))
    specs.append(linear(hidden, window_len))
    specs.append(act(SIGMOID))
    return specs


def desk_small_layers(window_len: int):
    # Strided early convs keep the flatten close to the hidden width; with
    # near-equal fan-ins the two linear layers initialize at the same scale,
    # so a deep global magnitude mask thins both instead of severing one.
    return _chain((4, 8, 8, 16, 16), (9, 7, 5, 5, 3), (2, 2, 2, 2, 1), 192,
                  window_len)


def paper_shape_layers(window_len: int = 480):
    return _chain((30, 30, 40, 50, 50), (10, 8, 6, 5, 5), (1, 1, 1, 1, 1), 960,
                  window_len)


PRESETS = {"desk-small": desk_small_layers, "paper-shape": paper_shape_layers}


def build_default_model(window_len: int, preset: str = "desk-small",
                        seed: int = 0, dtype=np.float64) -> ModelGraph:
    """Five conv stages plus two linear layers ending in a Sigmoid whose
    output length equals the input window."""
    if window_len < 64:
        raise ConfigError(f"window length must be >= 64, got {window_len}")
    try:
        specs = PRESETS[preset](window_len)
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
    model = ModelGraph(specs, window_len, seed=seed, dtype=dtype)
    final = model.flat_shapes()[-1]
    if final != (window_len,):
        raise ConfigError(
            f"chain output shape {final} does not match window length {window_len}")
    return model


# ---------------------------------------------------------------------------
# forward and training
# ---------------------------------------------------------------------------

def _forward_graph(model: ModelGraph, x: T.Tensor) -> T.Tensor:
    h = x
    for i, s in enumerate(model.specs):
        if s.kind == CONV:
            h = T.conv1d(h, model.weights[i], model.biases[i], s.stride)
        elif s.kind in _ACT_KINDS:
            h = T.activation(h, s.kind)
        elif s.kind == FLATTEN:
            batched = h.data.ndim == 3
            h = T.reshape(h, (h.data.shape[0], -1) if batched else (-1,))
        elif s.kind == LINEAR:
            h = T.linear(h, model.weights[i], model.biases[i])
    return h


def forward(model: ModelGraph, x_window) -> np.ndarray:
    """Predict normalized appliance windows; accepts [W] or [B, W] input."""
    x = np.asarray(x_window, dtype=model.dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.window_len:
        raise ShapeError(
            f"forward: input window axis is {x.shape} but the model expects length {model.window_len}")
    out = _forward_graph(model, T.Tensor(x[:, None, :])).data
    return out[0] if single else out


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    loss: str = "mse"
    optimizer: str = "adam"
    patience: int | None = None
    shuffle: bool = True

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss != "mse":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        return self


def _dataset_arrays(dataset):
    if hasattr(dataset, "X") and hasattr(dataset, "Y"):
        return np.asarray(dataset.X), np.asarray(dataset.Y)
    x, y = dataset
    return np.asarray(x), np.asarray(y)


def train(model: ModelGraph, dataset, cfg: TrainConfig, loss_extra=None):
    """Run the optimizer for cfg.epochs; returns the per-epoch loss history.

    Masked weights are re-zeroed after every optimizer step so sparsity never
    leaks. ``loss_extra``, when given, is called once per batch and must
    return a scalar Tensor added to the data loss (used for sparse training).
    """
    cfg.validate()
    x, y = _dataset_arrays(dataset)
    if x.size == 0:
        raise ConfigError("training dataset is empty")
    if x.shape != y.shape:
        raise ShapeError(f"train: window arrays disagree, {x.shape} vs {y.shape}")
    if x.shape[1] != model.window_len:
        raise ShapeError(
            f"train: dataset window axis {x.shape[1]} != model window {model.window_len}")
    x = x.astype(model.dtype, copy=False)
    y = y.astype(model.dtype, copy=False)

    params = model.parameters()
    opt = T.make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    debug = os.environ.get("NILMPRUNE_DEBUG", "") not in ("", "0")

    n = x.shape[0]
    history = []
    best = np.inf
    stale = 0
    model.apply_masks()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = T.Tensor(x[idx][:, None, :])
            yb = T.Tensor(y[idx])
            pred = _forward_graph(model, xb)
            loss = T.mse_loss(pred, yb)
            if loss_extra is not None:
                loss = T.add(loss, loss_extra(model))
            lv = loss.item()
            if not np.isfinite(lv):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches} (loss={lv})")
            T.zero_grad(params)
            T.backward(loss)
            opt.step()
            model.apply_masks()
            epoch_loss += lv
            n_batches += 1
        if debug:
            for p in params:
                if not np.all(np.isfinite(p.data)):
                    raise NumericError(f"non-finite parameter after epoch {epoch}")
        history.append(epoch_loss / n_batches)
        model.epochs_trained += 1
        if cfg.patience is not None:
            if history[-1] < best - 1e-12:
                best = history[-1]
                stale = 0
            else:
                stale += 1
                if stale > cfg.patience:
                    break
    return history


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def param_counts_from_specs(specs) -> dict:
    """Parameter totals derived from shapes alone (no allocation needed)."""
    weights = 0
    biases = 0
    for s in specs:
        if s.kind == CONV:
            weights += s.out_ch * s.in_ch * s.kernel
            biases += s.out_ch
        elif s.kind == LINEAR:
            weights += s.out_f * s.in_f
            biases += s.out_f
    return {"weights": weights, "biases": biases, "total": weights + biases}


def count_params(model: ModelGraph) -> dict:
    """Allocated / surviving parameter counts.

    ``total`` covers every allocated parameter (structurally removed units no
    longer exist, so they are excluded by construction); ``nonzero`` subtracts
    mask zeros; ``prunable_weights`` is the weight-only population that
    magnitude masking ranks over.
    """
    counts = param_counts_from_specs(model.specs)
    masked_zeros = 0
    if model.masks:
        masked_zeros = sum(int((~m).sum()) for m in model.masks.values())
    return {
        "total": counts["total"],
        "prunable_weights": counts["weights"],
        "masked_zeros": masked_zeros,
        "nonzero": counts["total"] - masked_zeros,
    }


def count_macs(model_or_specs, window_len=None) -> int:
    """Multiply-accumulate count of one forward pass.

    Structural removal shrinks the count; unstructured masks do not (zeros are
    still multiplied on dense hardware).
    """
    if isinstance(model_or_specs, ModelGraph):
        specs = model_or_specs.specs
        window_len = window_len or model_or_specs.window_len
    else:
        specs = model_or_specs
        if window_len is None:
            raise ConfigError("count_macs needs window_len when given raw specs")
    macs = 0
    length = window_len
    for s in specs:
        if s.kind == CONV:
            length = (length - s.kernel) // s.stride + 1
            macs += s.out_ch * s.in_ch * s.kernel * length
        elif s.kind == LINEAR:
            macs += s.in_f * s.out_f
    return macs


def count_flops(model_or_specs, window_len=None) -> int:
    return 2 * count_macs(model_or_specs, window_len)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _mask_bits(model: ModelGraph, i: int) -> np.ndarray:
    s = model.specs[i]
    n_w = int(np.prod(s.weight_shape()))
    n_b = int(np.prod(s.bias_shape()))
    bits = np.ones(n_w + n_b, dtype=bool)
    bits[:n_w] = model.masks[i].reshape(-1)
    return bits


def serialize_bytes(model: ModelGraph, include_initial=True, include_masks=True) -> bytes:
    masked_layers = sorted(model.masks) if (model.masks and include_masks) else []
    header = {
        "dtype": model.dtype.name,
        "window_len": model.window_len,
        "seed": model.seed,
        "epochs_trained": model.epochs_trained,
        "layers": [s.to_dict() for s in model.specs],
        "initial_params": include_initial,
        "masks": masked_layers,
    }
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(bytes([VERSION]))
    buf.write(struct.pack("<I", len(hj)))
    buf.write(hj)
    le = model.dtype.newbyteorder("<")
    for i in model.param_layers():
        buf.write(np.ascontiguousarray(model.weights[i].data, dtype=le).tobytes())
        buf.write(np.ascontiguousarray(model.biases[i].data, dtype=le).tobytes())
    if include_initial:
        for i in model.param_layers():
            buf.write(np.ascontiguousarray(model.init_weights[i], dtype=le).tobytes())
            buf.write(np.ascontiguousarray(model.init_biases[i], dtype=le).tobytes())
    for i in masked_layers:
        buf.write(np.packbits(_mask_bits(model, i)).tobytes())
    return buf.getvalue()


def serialize(model: ModelGraph, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_bytes(model))


def deserialize_bytes(blob: bytes) -> ModelGraph:
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise DataError("not a model file: bad magic")
    if blob[4] != VERSION:
        raise DataError(f"unsupported model format version {blob[4]}")
    (hlen,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + hlen:
        raise DataError("truncated model file: incomplete header")
    try:
        header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt model header: {e}") from e

    specs = [LayerSpec.from_dict(d) for d in header["layers"]]
    dtype = np.dtype(header["dtype"])
    model = ModelGraph.__new__(ModelGraph)
    model.specs = specs
    model.window_len = header["window_len"]
    model.seed = header["seed"]
    model.dtype = dtype
    model.epochs_trained = header.get("epochs_trained", 0)
    model.masks = None

    le = dtype.newbyteorder("<")
    off = 9 + hlen

    def read_block(shape):
        nonlocal off
        n = int(np.prod(shape)) * dtype.itemsize
        if off + n > len(blob):
            raise DataError("truncated model file: incomplete parameter block")
        arr = np.frombuffer(blob[off:off + n], dtype=le).astype(dtype).reshape(shape)
        off += n
        return arr

    model.weights = []
    model.biases = []
    for s in specs:
        if not s.has_params:
            model.weights.append(None)
            model.biases.append(None)
            continue
        model.weights.append(T.Tensor(read_block(s.weight_shape()), requires_grad=True))
        model.biases.append(T.Tensor(read_block(s.bias_shape()), requires_grad=True))
    if header.get("initial_params"):
        model.init_weights = []
        model.init_biases = []
        for s in specs:
            if not s.has_params:
                model.init_weights.append(None)
                model.init_biases.append(None)
            else:
                model.init_weights.append(read_block(s.weight_shape()))
                model.init_biases.append(read_block(s.bias_shape()))
    else:
        model.init_weights = [None if w is None else w.data.copy() for w in model.weights]
        model.init_biases = [None if b is None else b.data.copy() for b in model.biases]
    masked_layers = header.get("masks") or []
    if masked_layers:
        masks = {}
        for i in masked_layers:
            s = specs[i]
            n_w = int(np.prod(s.weight_shape()))
            n_b = int(np.prod(s.bias_shape()))
            nbytes = (n_w + n_b + 7) // 8
            if off + nbytes > len(blob):
                raise DataError("truncated model file: incomplete mask bitset")
            bits = np.unpackbits(np.frombuffer(blob[off:off + nbytes], dtype=np.uint8))
            off += nbytes
            masks[i] = bits[:n_w].astype(bool).reshape(s.weight_shape())
        model.masks = masks
    return model


def deserialize(path) -> ModelGraph:
    with open(path, "rb") as f:
        return deserialize_bytes(f.read())


def size_on_disk_bytes(model: ModelGraph) -> int:
    """Deployment footprint: header plus parameter blocks only, matching the
    convention that an unstructured mask does not change reported size."""
    return len(serialize_bytes(model, include_initial=False, include_masks=False))
