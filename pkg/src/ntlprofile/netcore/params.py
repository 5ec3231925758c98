"""Named parameter registry and the manifest + blob checkpoint format."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ParamSet:
    """Trainable tensors, batch-norm running statistics and a step counter."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    bn_updates: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        self.buffers[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def astype(self, dtype) -> "ParamSet":
        out = self.copy()
        out.tensors = {k: v.astype(dtype) for k, v in self.tensors.items()}
        out.buffers = {k: v.astype(np.float64) for k, v in self.buffers.items()}
        return out

    def copy(self) -> "ParamSet":
        return ParamSet(
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.step,
            copy.copy(self.bn_updates),
        )

    def check_compatible(self, other: "ParamSet") -> None:
        for mine, theirs, kind in ((self.tensors, other.tensors, "tensor"), (self.buffers, other.buffers, "buffer")):
            if mine.keys() != theirs.keys():
                diff = sorted(set(mine) ^ set(theirs))
                raise ValueError(f"{kind} names differ: {diff[:5]}")
            for name in mine:
                if mine[name].shape != theirs[name].shape:
                    raise ValueError(f"{kind} {name}: shape {mine[name].shape} != {theirs[name].shape}")

    def all_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.tensors.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out


_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def save_checkpoint(
    path: str | Path,
    student: ParamSet,
    teacher: ParamSet,
    meta: dict[str, str] | None = None,
) -> None:
    """Write ``<path>.manifest`` (text) and ``<path>.bin`` (raw little-endian)."""
    path = Path(path)
    lines = [f"# step={student.step}"]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"# {key}={value}")
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as blob:
        for prefix, ps in (("student", student), ("teacher", teacher)):
            for name, arr in ps.all_arrays().items():
                code = "f8" if arr.dtype == np.float64 else "f4"
                raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
                blob.write(raw)
                shape = "x".join(str(d) for d in arr.shape) or "scalar"
                lines.append(f"{prefix}/{name} {shape} {offset} {code}")
                offset += len(raw)
    path.with_suffix(".manifest").write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ParamSet, ParamSet, dict[str, str]]:
    path = Path(path)
    manifest = path.with_suffix(".manifest").read_text().splitlines()
    blob = path.with_suffix(".bin").read_bytes()
    meta: dict[str, str] = {}
    sets = {"student": ParamSet(), "teacher": ParamSet()}
    for line in manifest:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
            continue
        if not line.strip():
            continue
        name, shape_text, offset, code = line.split()
        shape = () if shape_text == "scalar" else tuple(int(d) for d in shape_text.split("x"))
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=int(offset)).reshape(shape).copy()
        which, kind, pname = name.split("/", 2)
        target = sets[which]
        if kind == "param":
            target.tensors[pname] = arr.astype(dtype.newbyteorder("="))
        else:
            target.buffers[pname] = arr.astype(np.float64)
    step = int(meta.pop("step", "0"))
    for ps in sets.values():
        ps.step = step
    return sets["student"], sets["teacher"], meta
