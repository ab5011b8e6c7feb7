"""Manifest + raw little-endian float64 array container.

Layout::

    EEN-CONTAINER 1
    key=value                      (free-form header, one per line)
    @array <name> shape=2,3 offset=0 nbytes=48
    ...
    @end
    <concatenated array bytes>

Offsets are relative to the first byte after the ``@end`` line. Files are
written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MAGIC = "EEN-CONTAINER"
VERSION = 1
_END = b"@end\n"


class ContainerError(ValueError):
    pass


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    lines = [f"{MAGIC} {VERSION}"]
    for key, value in header.items():
        value = str(value)
        if "\n" in value or "=" in key or key.startswith("@"):
            raise ContainerError(f"header entry {key!r} is not a single key=value line")
        lines.append(f"{key}={value}")
    blobs, offset = [], 0
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise ContainerError(f"array name {name!r} contains whitespace")
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        shape = ",".join(str(s) for s in np.shape(arr))
        lines.append(f"@array {name} shape={shape} offset={offset} nbytes={len(data)}")
        blobs.append(data)
        offset += len(data)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        fh.write(_END)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    first = raw.split(b"\n", 1)[0].decode(errors="replace")
    if first != f"{MAGIC} {VERSION}":
        raise ContainerError(f"{path}: unsupported container header {first!r}")
    cut = raw.find(b"\n" + _END)
    if cut < 0:
        raise ContainerError(f"{path}: missing @end marker")
    body = raw[cut + 1 + len(_END):]
    header, arrays = {}, {}
    for line in raw[:cut].decode().split("\n")[1:]:
        if line.startswith("@array "):
            _, name, *fields = line.split(" ")
            f = dict(item.split("=", 1) for item in fields)
            shape = tuple(int(s) for s in f["shape"].split(",")) if f["shape"] else ()
            start, nbytes = int(f["offset"]), int(f["nbytes"])
            if start + nbytes > len(body):
                raise ContainerError(f"{path}: array {name} is truncated")
            arrays[name] = np.frombuffer(body[start:start + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        elif line:
            key, value = line.split("=", 1)
            header[key] = value
    return header, arrays
