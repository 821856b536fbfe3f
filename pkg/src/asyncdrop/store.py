"""The shared global model and its write-back rules.

All merges go through :class:`GlobalStore`. In serialized mode (the default)
the caller drives every fetch and merge from one timeline. In concurrent mode
each tensor has its own lock, so a reader may see different tensors at
different versions, while merges of one tensor never interleave.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError, ParseError
from .masking import DropoutMask, ScoreTable, update_scores
from .params import ModelParams

BUFFERED = "buffered"
CHECKPOINT_MAGIC = b"ADRP"
CHECKPOINT_FORMAT = 1


@dataclass
class UpdateEnvelope:
    """One client's trained submodel.

    ``local_params`` holds the client's values on kept coordinates and zeros
    elsewhere. ``staleness`` is filled in by the store when the envelope is
    written back.
    """

    client_id: int
    mask: DropoutMask | None
    local_params: ModelParams
    base_version: int
    staleness: int | None = None
    strategy: str = ""


def _check_alpha(alpha):
    if not (0.0 < alpha <= 1.0):
        raise ConfigError(f"mixing alpha must be in (0, 1], got {alpha}")


def mix(current: np.ndarray, local: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination ``(1 - alpha) * current + alpha * local``.

    Evaluated as ``current + alpha * (local - current)`` and clamped to the
    segment, so ``alpha = 1`` replaces exactly and equal inputs are fixed points.
    """
    if alpha == 1.0:
        return np.array(local, dtype=np.float64, copy=True)
    out = current + alpha * (local - current)
    return np.clip(out, np.minimum(current, local), np.maximum(current, local))


class GlobalStore:
    def __init__(self, params: ModelParams, concurrent: bool = False,
                 track_scores: str | None = None):
        params.check_finite()
        self._layout = params
        self._values = {k: v.copy() for k, v in params.groups.items()}
        self._version = params.version
        self.concurrent = concurrent
        self._locks = {k: threading.Lock() for k in params.names}
        self._version_lock = threading.Lock()
        self._buffer: list[UpdateEnvelope] = []
        self.commits = 0
        self.scores: ScoreTable | None = None
        if track_scores is not None:
            self.scores = ScoreTable.initial(params, by_layer=(track_scores == "layer"))

    @property
    def version(self) -> int:
        return self._version

    @property
    def unit_axes(self):
        return self._layout.unit_axes

    @property
    def buffered_count(self) -> int:
        return len(self._buffer)

    def fetch(self) -> tuple[ModelParams, int]:
        """Snapshot of the global model and the version it was taken at."""
        if self.concurrent:
            version = self._version
            groups = {}
            for k in self._layout.names:
                with self._locks[k]:
                    groups[k] = self._values[k].copy()
        else:
            version = self._version
            groups = {k: v.copy() for k, v in self._values.items()}
        return ModelParams(groups, self._layout.unit_axes, version), version

    def snapshot(self) -> ModelParams:
        return self.fetch()[0]

    # -- merge rules ---------------------------------------------------------

    def masked_merge(self, update: UpdateEnvelope, alpha: float) -> int:
        """Mix kept coordinates toward the local values; leave the rest alone."""
        _check_alpha(alpha)
        local = update.local_params
        if not local.same_layout(self._layout):
            raise DimensionError("update does not match the store layout")
        masks = None if update.mask is None else local.element_masks(update.mask)
        for k in local.names:
            kept_vals = local.groups[k] if masks is None else local.groups[k][masks[k]]
            if not np.all(np.isfinite(kept_vals)):
                raise NumericError(f"non-finite local values in {k!r}; merge rejected")
        return self._commit(update, local.groups, masks, alpha)

    def plain_merge(self, update: UpdateEnvelope, alpha: float) -> int:
        full = UpdateEnvelope(update.client_id, None, update.local_params,
                              update.base_version, strategy=update.strategy)
        version = self.masked_merge(full, alpha)
        update.staleness = full.staleness
        return version

    def weighted_merge(self, update: UpdateEnvelope, alpha_base: float) -> int:
        """Plain merge with ``alpha = alpha_base / (1 + staleness)``."""
        _check_alpha(alpha_base)
        delta = self._version - update.base_version
        return self.plain_merge(update, staleness_weight(alpha_base, delta))

    def buffered_merge(self, update: UpdateEnvelope, buffer_size: int, alpha: float):
        """Buffer updates; every ``buffer_size``-th write applies their average."""
        if buffer_size < 1:
            raise ConfigError("buffer size must be >= 1")
        _check_alpha(alpha)
        update.local_params.check_finite()
        update.staleness = self._version - update.base_version
        self._buffer.append(update)
        if len(self._buffer) < buffer_size:
            return BUFFERED
        batch, self._buffer = self._buffer, []
        groups = {}
        for k in self._layout.names:
            total = batch[0].local_params.groups[k]
            for env in batch[1:]:
                total = total + env.local_params.groups[k]
            groups[k] = total / float(len(batch))
        avg = UpdateEnvelope(update.client_id, None,
                             ModelParams(groups, self._layout.unit_axes),
                             update.base_version, strategy=update.strategy)
        staleness = update.staleness
        version = self.plain_merge(avg, alpha)
        update.staleness = staleness
        return version

    def group_averaged_merge(self, updates: list[UpdateEnvelope], alpha: float) -> int:
        """Merge ``S`` simultaneous submodels, averaging overlapping units.

        Each coordinate takes the mean over the submodels that kept it; the
        result is written with the union mask, so coordinates no submodel
        kept are untouched.
        """
        if not updates:
            raise ContractError("group_averaged_merge needs at least one update")
        bases = {u.base_version for u in updates}
        if len(bases) != 1:
            raise ContractError(f"mixed base versions {sorted(bases)}")
        _check_alpha(alpha)
        layout = self._layout
        sums = {k: np.zeros_like(v) for k, v in self._values.items()}
        counts = {k: np.zeros(v.shape) for k, v in self._values.items()}
        for u in updates:
            if not u.local_params.same_layout(layout):
                raise DimensionError("update does not match the store layout")
            masks = (u.local_params.element_masks(u.mask) if u.mask is not None
                     else {k: np.ones(v.shape, dtype=bool) for k, v in self._values.items()})
            for k in layout.names:
                vals = np.where(masks[k], u.local_params.groups[k], 0.0)
                if not np.all(np.isfinite(vals)):
                    raise NumericError(f"non-finite local values in {k!r}; merge rejected")
                sums[k] = sums[k] + vals
                counts[k] = counts[k] + masks[k]
        local = {k: sums[k] / np.maximum(counts[k], 1.0) for k in layout.names}
        union = {k: counts[k] >= 1 for k in layout.names}
        head = updates[0]
        merged = UpdateEnvelope(head.client_id, None, ModelParams(local, layout.unit_axes),
                                head.base_version, strategy=head.strategy)
        version = self._commit(merged, local, union, alpha)
        for u in updates:
            u.staleness = merged.staleness
        return version

    # -- internals -----------------------------------------------------------

    def _commit(self, update, local_groups, masks, alpha) -> int:
        with self._version_lock:
            update.staleness = self._version - update.base_version
            if update.staleness < 0:
                raise ContractError("update is newer than the store")
        for k in self._layout.names:
            with self._locks[k]:
                current = self._values[k]
                mixed = mix(current, local_groups[k], alpha)
                self._values[k] = mixed if masks is None else np.where(masks[k], mixed, current)
        with self._version_lock:
            self._version += 1
            self.commits += 1
            version = self._version
        if self.scores is not None:
            self.scores = update_scores(self.scores, self.snapshot())
        return version


def staleness_weight(alpha_base: float, staleness: int) -> float:
    return alpha_base / (1.0 + staleness)


def save_checkpoint(path, params) -> None:
    """Write tensors as ``ADRP`` | u32 format | u64 count | per tensor:
    u64 name length, name, u64 rank, u64 dims, little-endian f64 values."""
    groups = params.groups if isinstance(params, ModelParams) else params
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", CHECKPOINT_FORMAT)
    out += struct.pack("<Q", len(groups))
    for name, arr in groups.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        out += struct.pack("<Q", len(raw)) + raw
        out += struct.pack("<Q", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, unit_axes=None):
    """Read a checkpoint; returns a dict, or ModelParams when ``unit_axes`` is given."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ParseError("truncated checkpoint", column=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic")
    (fmt,) = struct.unpack("<I", take(4))
    if fmt != CHECKPOINT_FORMAT:
        raise ParseError(f"unsupported checkpoint format {fmt}")
    (count,) = struct.unpack("<Q", take(8))
    groups = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        groups[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(data):
        raise ParseError("trailing bytes in checkpoint", column=pos)
    if unit_axes is None:
        return groups
    return ModelParams(groups, unit_axes)
