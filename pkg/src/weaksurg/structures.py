"""Instance sets and label maps shared by the generator, pseudo masks and metrics.

Class ids inside an :class:`Instance` are zero-based (``0 .. C-1``). A label
map stores ``class_id + 1`` per pixel and reserves ``0`` for background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Instance:
    class_id: int
    score: float
    mask: np.ndarray  # bool, (H, W)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and self.score == other.score
            and self.mask.shape == other.mask.shape
            and bool(np.array_equal(self.mask, other.mask))
        )

    @property
    def area(self) -> int:
        return int(self.mask.sum())


InstanceSet = list  # list[Instance]


def instances_to_labelmap(instances, shape) -> np.ndarray:
    """Paint instances into a label map; later instances win on overlap."""
    out = np.zeros(shape, dtype=np.int64)
    for inst in instances:
        out[inst.mask] = inst.class_id + 1
    return out


def idmap_to_instances(id_map: np.ndarray, id_to_class) -> list[Instance]:
    """Split an instance-id map (0 = background) into GT instances of score 1."""
    instances = []
    for inst_id in np.unique(id_map):
        if inst_id == 0:
            continue
        key = int(inst_id)
        if key not in id_to_class:
            raise KeyError(f"instance id {key} has no class entry")
        instances.append(Instance(int(id_to_class[key]), 1.0, id_map == inst_id))
    return instances


def presence_from_instances(instances, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes, dtype=np.uint8)
    for inst in instances:
        if inst.mask.any():
            y[inst.class_id] = 1
    return y
