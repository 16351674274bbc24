"""MRtrix-style .tck track file I/O.

Layout: an ASCII header starting with the line ``mrtrix tracks``, then
``key: value`` lines (``datatype: Float32LE`` and ``file: . <offset>``
mandatory), a line ``END``, and at ``<offset>`` little-endian float32 xyz
triplets. Streamlines are separated by a (NaN, NaN, NaN) triplet and the
stream ends with an (Inf, Inf, Inf) triplet. Writing is deterministic, so
write -> read -> write is byte-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError

_CORE_KEYS = ("datatype", "file", "count", "total_count")


def write_tck(path, streamlines, metadata: dict | None = None) -> None:
    """Write streamlines (iterable of (n, 3) world-mm arrays) to ``path``.

    ``metadata`` entries become extra header lines (sorted by key) and come
    back verbatim from :func:`read_tck` — used for config provenance.
    """
    tracks = [np.asarray(s.points if hasattr(s, "points") else s, dtype=np.float32)
              for s in streamlines]
    for t in tracks:
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValueError("each streamline must be an (n, 3) array")
    lines = ["mrtrix tracks", f"count: {len(tracks)}", "datatype: Float32LE",
             f"total_count: {len(tracks)}"]
    for key in sorted(metadata or {}):
        if key in _CORE_KEYS:
            raise ValueError(f"metadata may not override core key {key!r}")
        value = str((metadata or {})[key])
        if "\n" in value:
            raise ValueError("metadata values must be single-line")
        lines.append(f"{key}: {value}")
    base = "\n".join(lines) + "\n"
    # the offset names the first data byte; its own digit count feeds back
    # into the header length, so iterate to the fixpoint
    offset = len(base.encode())
    while True:
        header = base + f"file: . {offset}\nEND\n"
        if len(header.encode()) == offset:
            break
        offset = len(header.encode())

    sep = np.full((1, 3), np.nan, dtype=np.float32)
    chunks = []
    for t in tracks:
        chunks.append(t)
        chunks.append(sep)
    chunks.append(np.full((1, 3), np.inf, dtype=np.float32))
    blob = np.concatenate(chunks).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(blob)


def read_tck(path):
    """Read a .tck file -> (streamlines, metadata).

    Streamlines come back as float64 (n, 3) arrays (exact upcasts of the
    stored float32 values); metadata holds the non-core header entries.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        head_end = blob.index(b"END\n") + 4
    except ValueError:
        raise FormatError(f"{path}: no END line in header") from None
    header = blob[:head_end].decode("ascii", errors="replace").splitlines()
    if not header or header[0].strip() != "mrtrix tracks":
        raise FormatError(f"{path}: not an mrtrix tracks file")
    meta = {}
    offset = None
    for line in header[1:]:
        if line.strip() == "END" or ":" not in line:
            continue
        key, value = line.split(":", 1)
        key, value = key.strip(), value.strip()
        if key == "file":
            parts = value.split()
            if len(parts) != 2 or parts[0] != ".":
                raise FormatError(f"{path}: unsupported file spec {value!r}")
            offset = int(parts[1])
        elif key == "datatype":
            if value not in ("Float32LE", "Float32"):
                raise FormatError(f"{path}: unsupported datatype {value}")
        elif key not in ("count", "total_count"):
            meta[key] = value
    if offset is None:
        raise FormatError(f"{path}: missing file offset")

    raw = np.frombuffer(blob[offset:], dtype="<f4")
    if raw.size % 3:
        raise FormatError(f"{path}: data section is not xyz triplets")
    pts = raw.reshape(-1, 3)
    inf_rows = np.flatnonzero(np.all(np.isinf(pts), axis=1))
    if inf_rows.size == 0:
        raise FormatError(f"{path}: missing Inf terminator")
    pts = pts[: inf_rows[0]]
    nan_rows = np.flatnonzero(np.any(np.isnan(pts), axis=1))
    streamlines = []
    start = 0
    for i in nan_rows:
        streamlines.append(pts[start:i].astype(np.float64))
        start = i + 1
    if start != len(pts):  # trailing track without its NaN separator
        streamlines.append(pts[start:].astype(np.float64))
    return streamlines, meta
