"""
Binary tensor files and model checkpoints.

Layout of both formats (all integers little-endian u32)::

    magic (4 bytes) | version | ndim | dims... | payload

``NTSR`` carries a little-endian float32 payload, ``SPKT`` a uint8
payload of 0/1 spikes. Both are row-major.
"""

import json
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from neurospike import __version__
from neurospike.errors import FormatError
from neurospike.tensor import Tensor

NTSR_MAGIC = b"NTSR"
SPKT_MAGIC = b"SPKT"
FORMAT_VERSION = 1

_PAYLOAD_DTYPES = {NTSR_MAGIC: np.dtype("<f4"), SPKT_MAGIC: np.dtype("u1")}


def _encode(magic: bytes, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPES[magic])
    header = struct.pack(
        f"<4sII{array.ndim}I",
        magic,
        FORMAT_VERSION,
        array.ndim,
        *array.shape,
    )
    return header + array.tobytes()


def _decode(magic: bytes, raw: bytes, source: str) -> np.ndarray:
    if len(raw) < 12 or raw[:4] != magic:
        raise FormatError(
            f"'{source}' is not a {magic.decode()} file (bad magic)"
        )
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(
            f"'{source}' has unsupported format version {version}"
        )
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    offset = 12 + 4 * ndim
    dtype = _PAYLOAD_DTYPES[magic]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise FormatError(
            f"'{source}' payload has {len(raw) - offset} bytes, "
            f"expected {expected} for shape {tuple(dims)}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims)


def write_ntsr(path: Path, array: Union[np.ndarray, Tensor]) -> None:
    if isinstance(array, Tensor):
        array = array.data
    Path(path).write_bytes(_encode(NTSR_MAGIC, np.asarray(array)))


def read_ntsr(path: Path) -> np.ndarray:
    """Read an NTSR file into a writable float32 array."""
    path = Path(path)
    return _decode(NTSR_MAGIC, path.read_bytes(), str(path)).astype(
        np.float32
    )


def write_spkt(path: Path, spikes: np.ndarray) -> None:
    spikes = np.asarray(spikes)
    if np.any((spikes != 0) & (spikes != 1)):
        raise FormatError("spike payload must be binary")
    Path(path).write_bytes(_encode(SPKT_MAGIC, spikes))


def read_spkt(path: Path) -> np.ndarray:
    path = Path(path)
    return _decode(SPKT_MAGIC, path.read_bytes(), str(path)).copy()


def save_checkpoint(
    directory: Path,
    parameters: Mapping[str, Union[Tensor, np.ndarray]],
    metadata: Mapping,
) -> Path:
    """
    Save named parameters as NTSR files plus an ``index.json``.

    :param directory: Output directory, created if missing.
    :param parameters: Layer-qualified parameter names to tensors.
    :param metadata: Model description (kind, shapes, LIF constants...).
    :return: Path of the written index.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, tensor in parameters.items():
        file_name = f"{name.replace('/', '.')}.ntsr"
        write_ntsr(directory / file_name, tensor)
        files[name] = {"file": file_name, "shape": list(tensor.shape)}
    index = {
        "version": __version__,
        "metadata": dict(metadata),
        "tensors": files,
    }
    index_path = directory / "index.json"
    index_path.write_text(
        json.dumps(index, indent=2, sort_keys=True), encoding="utf-8"
    )
    return index_path


def load_checkpoint(directory: Path) -> tuple[dict, dict[str, np.ndarray]]:
    """
    Load a checkpoint written by :func:`save_checkpoint`.

    :return: The metadata mapping and the named parameter arrays.
    """
    directory = Path(directory)
    index_path = directory / "index.json"
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
        entries = index["tensors"]
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(
            f"'{index_path}' is not a checkpoint index: {exc}"
        ) from exc
    arrays = {}
    for name, entry in entries.items():
        array = read_ntsr(directory / entry["file"])
        if list(array.shape) != entry["shape"]:
            raise FormatError(
                f"checkpoint tensor '{name}' has shape {array.shape}, "
                f"index says {entry['shape']}"
            )
        arrays[name] = array
    return index.get("metadata", {}), arrays
