"""How a model acquires knowledge: batch training, transfer/retrain, online updates, files."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn_core
from .data import SLOTS_PER_DAY, WindowBatch
from .errors import ContractError, CorruptFileError, DataError, SpecificationError
from .nn_core import NetworkModel, NetworkSpec

log = logging.getLogger(__name__)

BATCH_POLICIES = ("day", "window")


@dataclass
class TrainingConfig:
    epochs: int = 10000
    learning_rate: float = 1e-3
    seed: int = 0
    batch_policy: str = "day"
    normalizer_source: str = "year1"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ContractError("learning_rate must be >= 0")
        if self.batch_policy not in BATCH_POLICIES:
            raise ContractError(f"batch_policy must be one of {BATCH_POLICIES}")


def retrain_defaults(**overrides) -> TrainingConfig:
    return TrainingConfig(**{"epochs": 2000, "normalizer_source": "january_year2", **overrides})


@dataclass
class OnlineConfig:
    learning_rate: float = 1e-4
    updates_per_sample: int = 1

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ContractError("online learning_rate must be >= 0")
        if self.updates_per_sample < 0:
            raise ContractError("updates_per_sample must be >= 0")


def _day_groups(slots: np.ndarray) -> list[slice]:
    day = np.asarray(slots) // SLOTS_PER_DAY
    cuts = np.flatnonzero(np.diff(day)) + 1
    bounds = np.concatenate([[0], cuts, [len(day)]])
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def train_batch(model: NetworkModel, windows: WindowBatch, config: TrainingConfig, on_epoch=None):
    """Chronological mini-batch gradient descent on normalized windows.

    Each epoch resets the LSTM state, then walks the calendar days in order;
    the state is carried through each day and on to the next, and one
    averaged update is applied per day (or per window with
    ``batch_policy="window"``). Returns ``(model, per_epoch_mean_loss)``.
    """
    config.validate()
    if len(windows) == 0:
        raise ContractError("no training windows")
    if np.any(np.diff(windows.slots) <= 0):
        raise ContractError("training windows must be in chronological order")
    if config.batch_policy == "day":
        groups = _day_groups(windows.slots)
    else:
        groups = [slice(i, i + 1) for i in range(len(windows))]
    X, y = windows.features, windows.targets
    trace = []
    for epoch in range(config.epochs):
        nn_core.reset_state(model)
        total = 0.0
        for g in groups:
            sq, _, grads = nn_core.batch_gradients(model, X[g], y[g], carry_state=True)
            total += float(sq.sum())
            nn_core.apply_update(model, grads, config.learning_rate)
        trace.append(total / len(windows))
        if on_epoch is not None:
            on_epoch(epoch, trace[-1])
    nn_core.reset_state(model)
    return model, trace


def fit_new(spec: NetworkSpec, windows: WindowBatch, config: TrainingConfig, on_epoch=None):
    """Initialize from ``config.seed`` and train."""
    model = nn_core.init_model(spec, config.seed)
    return train_batch(model, windows, config, on_epoch=on_epoch)


def transfer(source: NetworkModel) -> NetworkModel:
    """Independent copy of every weight with the carried LSTM state cleared."""
    return nn_core.reset_state(source.copy())


def retrain(model: NetworkModel, windows: WindowBatch, config: TrainingConfig | None = None, on_epoch=None):
    """Continue training from existing (usually transferred) weights."""
    return train_batch(model, windows, config or retrain_defaults(), on_epoch=on_epoch)


def online_step(model: NetworkModel, window, observed: float, config: OnlineConfig):
    """Predict, then learn from the observed value.

    The prediction uses the carried state and the pre-update weights. The
    update(s) replay the same window from the state it started in; afterwards
    the carried state is the one produced by the prediction pass.
    """
    config.validate()
    if not np.isfinite(observed):
        raise DataError("observed value is not finite")
    h0, c0 = model.hidden, model.cell
    prediction, _ = nn_core.forward(model, window, carry_state=True)
    if config.updates_per_sample:
        after = model.hidden, model.cell
        model.hidden, model.cell = h0, c0
        for _ in range(config.updates_per_sample):
            _, grads = nn_core.compute_gradients(model, window, observed, carry_state=True)
            nn_core.apply_update(model, grads, config.learning_rate)
        model.hidden, model.cell = after
    return prediction, model


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

MAGIC = b"FCW"
FORMAT_VERSION = b"1"
_SPEC_FIELDS = ("input_lags", "input_loops", "conv_filters", "conv_kernel", "lstm_cells", "dense_units", "stateful")
_SPEC_STRUCT = struct.Struct("<" + "q" * len(_SPEC_FIELDS))
_CHECKSUM_BYTES = 8


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=_CHECKSUM_BYTES).digest()


def model_to_bytes(model: NetworkModel) -> bytes:
    model.audit_shapes()
    spec = model.spec
    payload = bytearray(_SPEC_STRUCT.pack(*(int(getattr(spec, f)) for f in _SPEC_FIELDS)))
    for name in nn_core.PARAM_ORDER:
        payload += np.ascontiguousarray(model.params[name], dtype="<f8").tobytes()
    return MAGIC + FORMAT_VERSION + bytes(payload) + _checksum(bytes(payload))


def model_from_bytes(blob: bytes) -> NetworkModel:
    head = len(MAGIC) + len(FORMAT_VERSION)
    if len(blob) < head or blob[: len(MAGIC)] != MAGIC:
        raise CorruptFileError("not a model file (bad magic)")
    if blob[len(MAGIC) : head] != FORMAT_VERSION:
        raise CorruptFileError(f"unsupported model file version {blob[len(MAGIC):head]!r}")
    if len(blob) < head + _SPEC_STRUCT.size + _CHECKSUM_BYTES:
        raise CorruptFileError("model file truncated in header")
    values = _SPEC_STRUCT.unpack_from(blob, head)
    try:
        kw = dict(zip(_SPEC_FIELDS, values))
        kw["stateful"] = bool(kw["stateful"])
        spec = NetworkSpec(**kw)
    except SpecificationError as exc:
        raise CorruptFileError(f"invalid architecture in model file: {exc}") from None
    expected = head + _SPEC_STRUCT.size + 8 * spec.param_count() + _CHECKSUM_BYTES
    if len(blob) != expected:
        raise CorruptFileError(f"model file is {len(blob)} bytes, expected {expected}")
    payload = blob[head:-_CHECKSUM_BYTES]
    if _checksum(payload) != blob[-_CHECKSUM_BYTES:]:
        raise CorruptFileError("model file checksum mismatch")
    params = {}
    offset = head + _SPEC_STRUCT.size
    for name, shape in spec.param_shapes().items():
        count = int(np.prod(shape))
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    H = spec.lstm_cells
    return NetworkModel(spec, params, np.zeros(H), np.zeros(H))


def save_model(model: NetworkModel, sink) -> None:
    blob = model_to_bytes(model)
    if isinstance(sink, (str, os.PathLike)):
        Path(sink).write_bytes(blob)
    else:
        sink.write(blob)


def load_model(source) -> NetworkModel:
    if isinstance(source, (str, os.PathLike)):
        blob = Path(source).read_bytes()
    else:
        blob = source.read()
    return model_from_bytes(blob)
