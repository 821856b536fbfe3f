"""Versioned model parameters partitioned into maskable units."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError


@dataclass(frozen=True)
class ModelParams:
    """Ordered named tensors plus the axis along which each is split into units.

    Every tensor must have the same extent along its unit axis; unit ``r`` is
    the union of slice ``r`` of every tensor (a CNN filter is one row of ``W``;
    an MLP neuron is a row of ``W1`` plus a column of ``W2``).
    """

    groups: dict
    unit_axes: dict
    version: int = 0
    names: tuple = field(init=False)

    def __post_init__(self):
        groups = {k: np.asarray(v, dtype=np.float64) for k, v in self.groups.items()}
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "names", tuple(groups))
        if set(self.unit_axes) != set(groups):
            raise DimensionError("unit_axes must name every group")
        counts = {groups[k].shape[ax] for k, ax in self.unit_axes.items()}
        if len(counts) > 1:
            raise DimensionError(f"groups disagree on unit count: {sorted(counts)}")

    @property
    def num_units(self) -> int:
        first = self.names[0]
        return self.groups[first].shape[self.unit_axes[first]]

    @property
    def num_layers(self) -> int:
        return len(self.names)

    @property
    def size(self) -> int:
        return sum(v.size for v in self.groups.values())

    def __getitem__(self, name):
        return self.groups[name]

    def replace(self, groups=None, version=None) -> "ModelParams":
        return ModelParams(
            dict(self.groups if groups is None else groups),
            self.unit_axes,
            self.version if version is None else version,
        )

    def copy(self) -> "ModelParams":
        return self.replace({k: v.copy() for k, v in self.groups.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.groups.values())

    def check_finite(self):
        if not self.is_finite():
            raise NumericError("non-finite parameter values")

    def same_layout(self, other: "ModelParams") -> bool:
        return self.names == other.names and all(
            self.groups[k].shape == other.groups[k].shape for k in self.names
        )

    def element_masks(self, mask) -> dict:
        """Boolean arrays, one per tensor, marking coordinates the mask keeps."""
        kept = np.asarray(mask.kept, dtype=bool)
        if getattr(mask, "mode", None) == "layerwise":
            if kept.shape != (self.num_layers,):
                raise DimensionError(f"layer mask over {kept.shape}, model has {self.num_layers} layers")
            return {k: np.full(v.shape, kept[i]) for i, (k, v) in enumerate(self.groups.items())}
        if kept.shape != (self.num_units,):
            raise DimensionError(f"mask over {kept.shape}, model has {self.num_units} units")
        out = {}
        for k, v in self.groups.items():
            shape = [1] * v.ndim
            shape[self.unit_axes[k]] = -1
            out[k] = np.broadcast_to(kept.reshape(shape), v.shape)
        return out

    def kept_count(self, mask) -> int:
        """Number of scalar parameters belonging to kept units."""
        if mask is None:
            return self.size
        return int(sum(m.sum() for m in self.element_masks(mask).values()))

    def unit_l1(self, baseline: "ModelParams") -> np.ndarray:
        """Per-unit L1 distance to ``baseline``."""
        self._check_layout(baseline)
        out = np.zeros(self.num_units)
        for k, v in self.groups.items():
            ax = self.unit_axes[k]
            diff = np.abs(v - baseline.groups[k])
            out += diff.sum(axis=tuple(i for i in range(v.ndim) if i != ax))
        return out

    def layer_l1(self, baseline: "ModelParams") -> np.ndarray:
        """Per-tensor L1 distance to ``baseline``."""
        self._check_layout(baseline)
        return np.array([np.abs(v - baseline.groups[k]).sum() for k, v in self.groups.items()])

    def _check_layout(self, other):
        if not self.same_layout(other):
            raise DimensionError("parameter layouts differ")
