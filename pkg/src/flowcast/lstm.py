"""Stacked LSTM sequence-to-one regressor with exact gradients.

The network is split into a *representation* (the LSTM stack) and a *head*
(an affine map from the top layer's final hidden state to one discharge
value).  The split is structural: the head can be swapped out and
reinitialized without touching a single representation weight, which is
what the source-to-target transfer workflow relies on.

Gate layout: weight rows are stacked in blocks ``[input, forget, output,
cell candidate]``, each ``hidden_dim`` rows tall (the three sigmoid gates
are adjacent so one vectorized call covers them).  The recurrence is the
standard one (no peepholes):

    i = sigmoid(Wx_i x + Wh_i h + b_i)        f = sigmoid(... + b_f)
    g = tanh(...)                             o = sigmoid(...)
    c' = f * c + i * g                        h' = o * tanh(c')

All arithmetic is float64.  ``forward``/``backward`` are pure; batched
variants exist because the training loop feeds hundreds of windows at
once, and they accept a reusable :class:`Workspace` so the hot loop does
not reallocate multi-megabyte trace buffers every batch.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import List, Optional

import numpy as np


class ShapeMismatchError(ValueError):
    """An array dimension does not match what the model config dictates."""


CHECKPOINT_VERSION = 1

# Row-block offsets into the stacked gate matrices.
_I, _F, _O, _G = 0, 1, 2, 3


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``input_dim`` counts dynamic features plus, when ``use_static`` is on,
    the static attributes concatenated onto every timestep.
    """

    input_dim: int
    hidden_dim: int = 128
    num_layers: int = 1
    sequence_length: int = 270
    use_static: bool = False

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_layers", "sequence_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    def layer_input_dim(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.hidden_dim


@dataclass
class LayerParams:
    """One LSTM layer: stacked gate weights for input, recurrence, and bias."""

    w_x: np.ndarray  # (4*hidden, layer_input_dim)
    w_h: np.ndarray  # (4*hidden, hidden)
    b: np.ndarray    # (4*hidden,)

    def copy(self) -> "LayerParams":
        return LayerParams(self.w_x.copy(), self.w_h.copy(), self.b.copy())


@dataclass
class Head:
    """Affine regression head: hidden state -> scalar discharge."""

    w: np.ndarray  # (hidden,)
    b: float

    def copy(self) -> "Head":
        return Head(self.w.copy(), float(self.b))


@dataclass
class ParameterSet:
    """All trainable weights: the LSTM stack plus the regression head.

    Doubles as the gradient container (gradients are parameter-shaped).
    """

    config: ModelConfig
    layers: List[LayerParams]
    head: Head

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, [l.copy() for l in self.layers], self.head.copy())

    def blocks(self):
        """Yield (name, array) for every parameter block, canonical order."""
        for i, layer in enumerate(self.layers):
            yield f"layer{i}.w_x", layer.w_x
            yield f"layer{i}.w_h", layer.w_h
            yield f"layer{i}.b", layer.b
        yield "head.w", self.head.w
        yield "head.b", np.array([self.head.b])

    def flatten(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.blocks()])

    @property
    def n_parameters(self) -> int:
        return self.flatten().size

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray) -> "ParameterSet":
        flat = np.asarray(flat, dtype=np.float64)
        h = config.hidden_dim
        layers = []
        pos = 0

        def take(shape):
            nonlocal pos
            n = int(np.prod(shape))
            out = flat[pos:pos + n].reshape(shape).copy()
            pos += n
            return out

        for layer in range(config.num_layers):
            d = config.layer_input_dim(layer)
            layers.append(LayerParams(take((4 * h, d)), take((4 * h, h)), take((4 * h,))))
        head = Head(take((h,)), float(take((1,))[0]))
        if pos != flat.size:
            raise ShapeMismatchError(
                f"flat vector has {flat.size} entries, config needs {pos}"
            )
        return cls(config, layers, head)

    def representation_hash(self) -> str:
        """SHA-256 over the raw bytes of every representation block."""
        digest = hashlib.sha256()
        for layer in self.layers:
            for arr in (layer.w_x, layer.w_h, layer.b):
                digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, for a batch of windows.

    Arrays are timestep-major so each step's slice is contiguous.  Per
    layer: gate activations stacked as (T, batch, 4*hidden) in
    [i, f, o, g] block order, cell states, tanh(cell), and hidden states.
    """

    inputs: np.ndarray             # (T, batch, input_dim) layer-0 inputs
    gates: List[np.ndarray]        # per layer (T, batch, 4*hidden)
    cell: List[np.ndarray]         # per layer (T, batch, hidden)
    cell_tanh: List[np.ndarray]    # per layer (T, batch, hidden)
    hidden: List[np.ndarray]       # per layer (T, batch, hidden)
    predictions: np.ndarray        # (batch,)

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[1]

    @property
    def sequence_length(self) -> int:
        return self.inputs.shape[0]

    def replay_predictions(self, params: ParameterSet) -> np.ndarray:
        """Recompute predictions from the stored final hidden states."""
        h_final = self.hidden[-1][-1]
        return h_final @ params.head.w + params.head.b


def _rep_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))


def _head_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))


def _init_head(config: ModelConfig, seed: int) -> Head:
    rng = _head_rng(seed)
    scale = 1.0 / np.sqrt(config.hidden_dim)
    return Head(w=rng.uniform(-scale, scale, config.hidden_dim), b=0.0)


def init_parameters(config: ModelConfig, seed: int) -> ParameterSet:
    """Deterministic initialization for a given (config, seed).

    Weights are uniform in [-1/sqrt(hidden_dim), +1/sqrt(hidden_dim)];
    forget-gate biases start at 1.0 (keeps early memory open), every other
    bias at 0.  The head draws from its own RNG stream so that
    :func:`swap_head` with the same seed reproduces it bit for bit.
    """
    rng = _rep_rng(seed)
    h = config.hidden_dim
    scale = 1.0 / np.sqrt(h)
    layers = []
    for layer in range(config.num_layers):
        d = config.layer_input_dim(layer)
        w_x = rng.uniform(-scale, scale, (4 * h, d))
        w_h = rng.uniform(-scale, scale, (4 * h, h))
        b = np.zeros(4 * h)
        b[_F * h:(_F + 1) * h] = 1.0
        layers.append(LayerParams(w_x, w_h, b))
    return ParameterSet(config, layers, _init_head(config, seed))


def swap_head(params: ParameterSet, seed: int) -> ParameterSet:
    """Replace the regression head with a freshly initialized one.

    The representation is copied bitwise unchanged; the old head is
    discarded.  Uses the same head distribution and RNG stream as
    :func:`init_parameters`, so swapping with the seed a model was
    initialized with restores its original head.
    """
    return ParameterSet(params.config, [l.copy() for l in params.layers],
                        _init_head(params.config, seed))


def _check_windows(config: ModelConfig, windows: np.ndarray) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3:
        raise ShapeMismatchError(f"expected (batch, T, input_dim), got {windows.shape}")
    if windows.shape[1] != config.sequence_length:
        raise ShapeMismatchError(
            f"window length {windows.shape[1]} != sequence_length {config.sequence_length}"
        )
    if windows.shape[2] != config.input_dim:
        raise ShapeMismatchError(
            f"window feature dim {windows.shape[2]} != input_dim {config.input_dim}"
        )
    if not np.all(np.isfinite(windows)):
        raise ValueError("window contains non-finite entries")
    return windows


class Workspace:
    """Reusable buffers for the training hot loop.

    Traces for a big source domain run to tens of megabytes per batch;
    reallocating them every step costs more than the arithmetic.  Passing
    one workspace through ``forward_batch``/``backward_batch`` recycles
    the buffers.  A trace built on a workspace is only valid until the
    next call that uses the same workspace.
    """

    def __init__(self):
        self._arrays = {}

    def array(self, key, shape) -> np.ndarray:
        arr = self._arrays.get(key)
        if arr is None or arr.shape != shape:
            arr = np.empty(shape)
            self._arrays[key] = arr
        return arr


def _sigmoid_into(z: np.ndarray, out: np.ndarray) -> np.ndarray:
    # 1 / (1 + exp(-z)); the exp overflow branch saturates to exactly 0,
    # which is the correct sigmoid limit, so the warning is suppressed.
    np.negative(z, out=out)
    with np.errstate(over="ignore"):
        np.exp(out, out=out)
    out += 1.0
    np.reciprocal(out, out=out)
    return out


def forward_batch(params: ParameterSet, windows: np.ndarray,
                  workspace: Optional[Workspace] = None):
    """Run a batch of windows through the stack; returns (predictions, trace)."""
    config = params.config
    windows = _check_windows(config, windows)
    batch, seq_len, _ = windows.shape
    h_dim = config.hidden_dim
    ws = workspace if workspace is not None else Workspace()

    inputs = ws.array("inputs", (seq_len, batch, config.input_dim))
    np.copyto(inputs, windows.transpose(1, 0, 2))

    gates_all, cell_all, cell_tanh_all, hidden_all = [], [], [], []
    layer_input = inputs
    for li, layer in enumerate(params.layers):
        # One big matmul covers the input projection of every timestep.
        x_flat = ws.array(("x_proj", li), (seq_len * batch, 4 * h_dim))
        np.matmul(layer_input.reshape(seq_len * batch, -1), layer.w_x.T, out=x_flat)
        x_proj = x_flat.reshape(seq_len, batch, 4 * h_dim)
        x_proj += layer.b

        gates = ws.array(("gates", li), (seq_len, batch, 4 * h_dim))
        cell = ws.array(("cell", li), (seq_len, batch, h_dim))
        cell_tanh = ws.array(("cell_tanh", li), (seq_len, batch, h_dim))
        hidden = ws.array(("hidden", li), (seq_len, batch, h_dim))
        rec = ws.array(("rec", li), (batch, 4 * h_dim))

        h_prev = np.zeros((batch, h_dim))
        c_prev = np.zeros((batch, h_dim))
        for t in range(seq_len):
            z = x_proj[t]
            np.matmul(h_prev, layer.w_h.T, out=rec)
            z += rec
            act = gates[t]
            # Gate blocks [i, f, o, g]: one sigmoid call, one tanh call.
            _sigmoid_into(z[:, :3 * h_dim], act[:, :3 * h_dim])
            np.tanh(z[:, 3 * h_dim:], out=act[:, 3 * h_dim:])

            c = cell[t]
            np.multiply(act[:, h_dim:2 * h_dim], c_prev, out=c)  # f * c_prev
            c += act[:, :h_dim] * act[:, 3 * h_dim:]             # + i * g
            tc = cell_tanh[t]
            np.tanh(c, out=tc)
            np.multiply(act[:, 2 * h_dim:3 * h_dim], tc, out=hidden[t])  # o * tanh(c)
            h_prev = hidden[t]
            c_prev = c

        gates_all.append(gates)
        cell_all.append(cell)
        cell_tanh_all.append(cell_tanh)
        hidden_all.append(hidden)
        layer_input = hidden

    predictions = hidden_all[-1][-1] @ params.head.w + params.head.b
    trace = ForwardTrace(inputs, gates_all, cell_all, cell_tanh_all, hidden_all, predictions)
    return predictions, trace


def forward(params: ParameterSet, window: np.ndarray):
    """Sequence-to-one prediction for a single (T, input_dim) window.

    The prediction is the affine head applied to the top layer's hidden
    state at the final timestep.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ShapeMismatchError(f"expected a (T, input_dim) window, got shape {window.shape}")
    preds, trace = forward_batch(params, window[None, :, :])
    return float(preds[0]), trace


def backward_batch(params: ParameterSet, trace: ForwardTrace,
                   d_predictions: np.ndarray,
                   workspace: Optional[Workspace] = None) -> ParameterSet:
    """Backpropagation through time over every window in the trace.

    ``d_predictions`` holds d(loss)/d(prediction) per window; the returned
    gradient set is the sum over the batch (gradients are linear in the
    upstream scalar, so a batch loss gradient is exactly this sum).
    """
    config = params.config
    h_dim = config.hidden_dim
    batch = trace.batch_size
    seq_len = trace.sequence_length
    if seq_len != config.sequence_length:
        raise ShapeMismatchError(
            f"trace length {seq_len} != sequence_length {config.sequence_length}"
        )
    if trace.hidden[-1].shape[2] != h_dim or len(trace.hidden) != config.num_layers:
        raise ShapeMismatchError("trace does not match the parameter shapes")
    d_predictions = np.asarray(d_predictions, dtype=np.float64).reshape(batch)
    ws = workspace if workspace is not None else Workspace()

    h_final = trace.hidden[-1][-1]
    grad_head = Head(w=d_predictions @ h_final, b=float(d_predictions.sum()))

    # Upstream dL/dh for the top layer: only the final timestep is read.
    d_hidden_up = ws.array("d_hidden", (seq_len, batch, h_dim))
    d_hidden_up.fill(0.0)
    d_hidden_up[-1] = d_predictions[:, None] * params.head.w

    grad_layers: List[LayerParams] = [None] * config.num_layers  # type: ignore
    for li in range(config.num_layers - 1, -1, -1):
        layer = params.layers[li]
        gates = trace.gates[li]
        cell = trace.cell[li]
        cell_tanh = trace.cell_tanh[li]

        dz_all = ws.array(("dz", li), (seq_len, batch, 4 * h_dim))
        dh_next = np.zeros((batch, h_dim))
        dc_next = np.zeros((batch, h_dim))
        zeros = np.zeros((batch, h_dim))
        for t in range(seq_len - 1, -1, -1):
            act = gates[t]
            i = act[:, :h_dim]
            f = act[:, h_dim:2 * h_dim]
            o = act[:, 2 * h_dim:3 * h_dim]
            g = act[:, 3 * h_dim:]
            tc = cell_tanh[t]
            c_prev = cell[t - 1] if t > 0 else zeros

            dh = d_hidden_up[t]
            dh += dh_next
            dc = dh * o          # d(tanh c) path ...
            dc *= 1.0 - tc * tc  # ... through tanh'
            dc += dc_next
            do = dh * tc

            dz = dz_all[t]
            np.multiply(dc * g, i * (1.0 - i), out=dz[:, :h_dim])
            np.multiply(dc * c_prev, f * (1.0 - f), out=dz[:, h_dim:2 * h_dim])
            np.multiply(do, o * (1.0 - o), out=dz[:, 2 * h_dim:3 * h_dim])
            np.multiply(dc * i, 1.0 - g * g, out=dz[:, 3 * h_dim:])

            dh_next = dz @ layer.w_h
            dc_next = dc
            dc_next *= f

        layer_input = trace.inputs if li == 0 else trace.hidden[li - 1]
        dz_flat = dz_all.reshape(seq_len * batch, 4 * h_dim)
        # h_prev is hidden shifted one step; t=0 contributes nothing.
        hidden = trace.hidden[li]
        dz_tail = dz_all[1:].reshape((seq_len - 1) * batch, 4 * h_dim)
        grad_layers[li] = LayerParams(
            w_x=dz_flat.T @ layer_input.reshape(seq_len * batch, -1),
            w_h=dz_tail.T @ hidden[:-1].reshape((seq_len - 1) * batch, h_dim),
            b=dz_flat.sum(axis=0),
        )
        if li > 0:
            d_hidden_up = ws.array(("d_hidden_low", li), (seq_len, batch, h_dim))
            np.matmul(dz_flat, layer.w_x,
                      out=d_hidden_up.reshape(seq_len * batch, h_dim))

    return ParameterSet(config, grad_layers, grad_head)


def backward(params: ParameterSet, trace: ForwardTrace, d_prediction) -> ParameterSet:
    """Gradient of ``d_prediction * prediction`` w.r.t. every parameter.

    ``trace`` must come from :func:`forward`/:func:`forward_batch` under
    the same parameters.  For a batch trace pass one upstream scalar per
    window.
    """
    d_prediction = np.atleast_1d(np.asarray(d_prediction, dtype=np.float64))
    if d_prediction.size != trace.batch_size:
        raise ShapeMismatchError(
            f"got {d_prediction.size} upstream gradients for a batch of {trace.batch_size}"
        )
    return backward_batch(params, trace, d_prediction)


def zero_representation_gradients(grads: ParameterSet) -> ParameterSet:
    """Zero every representation block in place; the head is left alone."""
    for layer in grads.layers:
        layer.w_x[:] = 0.0
        layer.w_h[:] = 0.0
        layer.b[:] = 0.0
    return grads


def save_checkpoint(params: ParameterSet, path) -> None:
    """Write a self-describing JSON checkpoint (bit-exact round trip)."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "params": params.flatten().tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> ParameterSet:
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version: {version!r}")
    config = ModelConfig(**payload["config"])
    return ParameterSet.from_flat(config, np.array(payload["params"], dtype=np.float64))
