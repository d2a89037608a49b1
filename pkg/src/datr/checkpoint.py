"""Model checkpoint file format.

Layout (all integers little-endian):

    magic   6 bytes  "DATRW\\0"
    version u16      (currently 1)
    clen    u32      length of the config block
    config  clen     UTF-8 "key=value" lines: model hyperparameters plus the
                     vocabulary as a JSON list under key "vocab"
    width   u8       scalar width in bytes (4 or 8)
    count   u32      number of parameter entries
    entries          per parameter: u16 name length, name UTF-8, u8 ndim,
                     ndim * u32 dims, u64 byte offset into the payload
    plen    u64      payload length in bytes
    payload          raw little-endian scalars, row-major

Round trips are bit-exact: save followed by load reproduces every scalar
and the config verbatim.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from datr.model import Model, ModelConfig, Vocabulary, init_params, named_parameters

MAGIC = b"DATRW\x00"
VERSION = 1


class FormatError(ValueError):
    """Malformed file; carries the byte offset of the violation."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: {message} (at byte {offset})")
        self.path = str(path)
        self.offset = offset


def _read_exact(f, n: int, path, what: str) -> bytes:
    offset = f.tell()
    data = f.read(n)
    if len(data) != n:
        raise FormatError(path, offset, f"truncated while reading {what}: "
                                        f"wanted {n} bytes, got {len(data)}")
    return data


def _config_block(model: Model) -> bytes:
    lines = [f"{k}={v}" for k, v in model.config.to_dict().items()]
    lines.append(f"vocab={model.vocab.to_json()}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config_block(blob: bytes, path) -> tuple[ModelConfig, Vocabulary]:
    entries = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        entries[key] = value
    try:
        vocab = Vocabulary.from_json(entries.pop("vocab"))
        config = ModelConfig.from_dict(entries)
    except (KeyError, ValueError) as exc:
        raise FormatError(path, 0, f"bad config block: {exc}") from exc
    return config, vocab


def save_model(model: Model, path) -> None:
    path = Path(path)
    width = np.dtype(model.config.np_dtype).itemsize
    le_dtype = f"<f{width}"
    params = named_parameters(model.params)

    manifest = io.BytesIO()
    payload = io.BytesIO()
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        manifest.write(struct.pack("<H", len(encoded)))
        manifest.write(encoded)
        manifest.write(struct.pack("<B", tensor.data.ndim))
        for dim in tensor.data.shape:
            manifest.write(struct.pack("<I", dim))
        manifest.write(struct.pack("<Q", payload.tell()))
        payload.write(np.ascontiguousarray(tensor.data, dtype=le_dtype).tobytes())

    config = _config_block(model)
    body = payload.getvalue()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(config)))
        f.write(config)
        f.write(struct.pack("<B", width))
        f.write(struct.pack("<I", len(params)))
        f.write(manifest.getvalue())
        f.write(struct.pack("<Q", len(body)))
        f.write(body)


def load_model(path) -> Model:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 6, path, "magic")
        if magic != MAGIC:
            raise FormatError(path, 0, f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2, path, "version"))
        if version != VERSION:
            raise FormatError(path, 6, f"unsupported version {version}")
        (clen,) = struct.unpack("<I", _read_exact(f, 4, path, "config length"))
        config_blob = _read_exact(f, clen, path, "config block")
        config, vocab = _parse_config_block(config_blob, path)
        (width,) = struct.unpack("<B", _read_exact(f, 1, path, "scalar width"))
        if width not in (4, 8):
            raise FormatError(path, f.tell() - 1, f"scalar width must be 4 or 8, got {width}")
        (count,) = struct.unpack("<I", _read_exact(f, 4, path, "entry count"))
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, path, "name length"))
            name = _read_exact(f, nlen, path, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, path, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, path, "dimension"))[0]
                for _ in range(ndim))
            (offset,) = struct.unpack("<Q", _read_exact(f, 8, path, "offset"))
            entries.append((name, shape, offset))
        (plen,) = struct.unpack("<Q", _read_exact(f, 8, path, "payload length"))
        payload = _read_exact(f, plen, path, "payload")
        trailing = f.read(1)
        if trailing:
            raise FormatError(path, f.tell() - 1, "trailing bytes after payload")

    expected_dtype = "float32" if width == 4 else "float64"
    if config.dtype != expected_dtype:
        raise FormatError(path, 0, f"scalar width {width} disagrees with config "
                                   f"dtype {config.dtype}")
    params = init_params(config, seed=0)
    tensors = named_parameters(params)
    if set(tensors) != {name for name, _, _ in entries}:
        missing = set(tensors) ^ {name for name, _, _ in entries}
        raise FormatError(path, 0, f"parameter names disagree with model structure: "
                                   f"{sorted(missing)[:4]}")
    le_dtype = np.dtype(f"<f{width}")
    for name, shape, offset in entries:
        tensor = tensors[name]
        if tensor.data.shape != shape:
            raise FormatError(path, 0, f"{name}: shape {shape} does not match "
                                       f"model structure {tensor.data.shape}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * width if shape else width
        if offset + nbytes > plen:
            raise FormatError(path, 0, f"{name}: payload slice [{offset}, "
                                       f"{offset + nbytes}) exceeds payload {plen}")
        arr = np.frombuffer(payload, dtype=le_dtype, count=nbytes // width,
                            offset=offset).reshape(shape)
        tensor.data = arr.astype(config.np_dtype).copy()
    return Model(config, vocab, params)


def file_sha256(path) -> bytes:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.digest()
