"""Minimal extended-XYZ reader/writer for non-periodic labeled structures.

Comment line is ``key=value`` pairs (values with spaces are double-quoted).
Recognised keys: ``energy``, ``label_source``, ``structure_id``,
``system_id``, ``prior_energy`` and ``Properties``. A ``Lattice`` key is
rejected since periodic systems are not supported.
"""

from __future__ import annotations

import shlex
from pathlib import Path

import numpy as np

from .structures import LabeledStructure, Structure


class ExtXYZError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def _fmt(x: float) -> str:
    return repr(float(x))


def _quote(v: str) -> str:
    if v == "" or any(c.isspace() for c in v) or '"' in v or "=" in v:
        return '"' + v.replace('"', "'") + '"'
    return v


def _parse_properties(spec: str, path, lineno: int) -> list[tuple[str, str, int]]:
    parts = spec.split(":")
    if len(parts) % 3:
        raise ExtXYZError(path, lineno, f"bad Properties string {spec!r}")
    out = []
    for k in range(0, len(parts), 3):
        name, kind, ncols = parts[k], parts[k + 1], parts[k + 2]
        try:
            out.append((name, kind, int(ncols)))
        except ValueError:
            raise ExtXYZError(path, lineno, f"bad column count in {spec!r}") from None
    return out


def write_frames(frames, path) -> None:
    """Write generic frames.

    Each frame is ``(species, positions, info, arrays)`` where ``info`` is an
    ordered mapping of comment-line values and ``arrays`` maps per-atom
    property names to (n, k) float arrays, written after the positions.
    """
    lines = []
    for species, positions, info, arrays in frames:
        n = len(species)
        props = ["species:S:1", "pos:R:3"]
        cols = [np.asarray(positions, dtype=float).reshape(n, 3)]
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=float).reshape(n, -1)
            props.append(f"{name}:R:{arr.shape[1]}")
            cols.append(arr)
        block = np.hstack(cols)
        fields = []
        for key, val in info.items():
            if isinstance(val, float):
                val = _fmt(val)
            fields.append(f"{key}={_quote(str(val))}")
        fields.append("Properties=" + ":".join(props))
        lines.append(str(n))
        lines.append(" ".join(fields))
        for s, row in zip(species, block):
            lines.append(" ".join([s] + [_fmt(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_frames(path):
    """Inverse of :func:`write_frames`; yields (species, positions, info, arrays)."""
    text = Path(path).read_text().splitlines()
    i = 0
    while i < len(text):
        if not text[i].strip():
            i += 1
            continue
        try:
            n = int(text[i].strip())
        except ValueError:
            raise ExtXYZError(path, i + 1, f"expected atom count, got {text[i]!r}") from None
        if n < 1:
            raise ExtXYZError(path, i + 1, "atom count must be positive")
        if i + 1 >= len(text):
            raise ExtXYZError(path, i + 2, "missing comment line")
        comment_lineno = i + 2
        try:
            tokens = shlex.split(text[i + 1])
        except ValueError as err:
            raise ExtXYZError(path, comment_lineno, str(err)) from None
        info = {}
        for tok in tokens:
            if "=" not in tok:
                raise ExtXYZError(path, comment_lineno, f"expected key=value, got {tok!r}")
            key, val = tok.split("=", 1)
            info[key] = val
        if "Lattice" in info:
            raise ExtXYZError(path, comment_lineno, "periodic structures are not supported")
        props = _parse_properties(
            info.pop("Properties", "species:S:1:pos:R:3"), path, comment_lineno
        )
        width = sum(c for _, _, c in props)
        species, rows = [], []
        for k in range(n):
            lineno = i + 3 + k
            if lineno - 1 >= len(text):
                raise ExtXYZError(path, lineno, f"expected {n} atom lines, file ended")
            parts = text[lineno - 1].split()
            if len(parts) != width:
                raise ExtXYZError(
                    path, lineno, f"expected {width} fields, found {len(parts)}"
                )
            species.append(parts[0])
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise ExtXYZError(path, lineno, "non-numeric atom field") from None
        block = np.array(rows, dtype=float).reshape(n, width - 1)
        arrays = {}
        col = 0
        for name, kind, ncols in props:
            if name == "species":
                continue
            arrays[name] = block[:, col : col + ncols]
            col += ncols
        if "pos" not in arrays:
            raise ExtXYZError(path, comment_lineno, "Properties lacks pos")
        positions = arrays.pop("pos")
        yield species, positions, info, arrays
        i += 2 + n


def write_extxyz(items, path) -> None:
    frames = []
    for item in items:
        if isinstance(item, LabeledStructure):
            s = item.structure
            info = {
                "structure_id": s.structure_id,
                "system_id": s.system_id,
                "label_source": item.label_source,
                "energy": item.energy,
            }
            arrays = {"forces": item.forces}
            if item.prior_forces is not None:
                info["prior_energy"] = item.prior_energy
                arrays["prior_forces"] = item.prior_forces
        else:
            s = item
            info = {"structure_id": s.structure_id, "system_id": s.system_id}
            arrays = {}
        frames.append((s.species, s.positions, info, arrays))
    write_frames(frames, path)


def read_structures(path) -> list[Structure]:
    out = []
    for species, positions, info, _ in read_frames(path):
        out.append(
            Structure(
                tuple(species),
                positions,
                structure_id=info.get("structure_id", ""),
                system_id=info.get("system_id", ""),
            )
        )
    return out


def parse_extxyz(path) -> list[LabeledStructure]:
    """Read labeled structures; every frame must carry energy and forces."""
    out = []
    lineno = 1
    for species, positions, info, arrays in read_frames(path):
        if "energy" not in info or "forces" not in arrays:
            raise ExtXYZError(path, lineno + 1, "frame lacks energy or forces")
        s = Structure(
            tuple(species),
            positions,
            structure_id=info.get("structure_id", ""),
            system_id=info.get("system_id", ""),
        )
        prior_e = info.get("prior_energy")
        out.append(
            LabeledStructure(
                s,
                float(info["energy"]),
                arrays["forces"],
                label_source=info.get("label_source", "reference"),
                prior_energy=None if prior_e is None else float(prior_e),
                prior_forces=arrays.get("prior_forces"),
            )
        )
        lineno += 2 + len(species)
    return out
