"""Weight container: magic, version, JSON header, raw little-endian float64 data."""
import json
import struct
from pathlib import Path

import numpy as np

from hallulrp.model.transformer import ModelConfig, TransformerWeights, param_shapes
from hallulrp.model.vocab import Vocabulary

MAGIC = b"HLRPW\x00"
FORMAT_VERSION = 1
_DTYPE = "<f8"


class WeightFileError(ValueError):
    pass


def dumps_weights(w):
    cfg = w.config
    names = sorted(w.params)
    tensors, offset = [], 0
    for name in names:
        arr = w.params[name]
        nbytes = arr.size * 8
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPE, "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format": "hallulrp-weights",
        "version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "vocab": w.vocab.to_dict() if w.vocab is not None else None,
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(w.params[n], dtype=_DTYPE).tobytes() for n in names)
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + body


def loads_weights(data, expected_config=None):
    head = len(MAGIC) + 12
    if len(data) < head or data[:len(MAGIC)] != MAGIC:
        raise WeightFileError("not a weight file (bad magic or truncated header)")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported weight format version {version}")
    if len(data) < head + hlen:
        raise WeightFileError("truncated header")
    try:
        header = json.loads(data[head:head + hlen])
    except ValueError as e:
        raise WeightFileError(f"corrupt header: {e}") from None
    cfg = ModelConfig.from_dict(header["config"])
    if cfg.hash() != header["config_hash"]:
        raise WeightFileError("config hash mismatch: header config does not match its recorded hash")
    if expected_config is not None and expected_config.hash() != cfg.hash():
        raise WeightFileError(f"config hash mismatch: file {cfg.hash()} != expected {expected_config.hash()}")
    body = data[head + hlen:]
    expected = param_shapes(cfg)
    listed = {t["name"]: t for t in header["tensors"]}
    if set(listed) != set(expected):
        raise WeightFileError("tensor names do not match the configuration")
    total = sum(t["nbytes"] for t in header["tensors"])
    if len(body) != total:
        raise WeightFileError(f"truncated or oversized data: {len(body)} bytes, expected {total}")
    params = {}
    for name, t in listed.items():
        if tuple(t["shape"]) != tuple(expected[name]) or t["dtype"] != _DTYPE:
            raise WeightFileError(f"tensor {name}: shape/dtype mismatch")
        arr = np.frombuffer(body, dtype=_DTYPE, count=int(np.prod(t["shape"])), offset=t["offset"])
        params[name] = arr.reshape(t["shape"]).astype(np.float64)
        if not np.isfinite(params[name]).all():
            raise WeightFileError(f"tensor {name} has non-finite values")
    vocab = Vocabulary.from_dict(header["vocab"]) if header.get("vocab") else None
    if vocab is not None and len(vocab) != cfg.vocab_size:
        raise WeightFileError("vocabulary size does not match config")
    return TransformerWeights(cfg, params, vocab)


def save_weights(w, path):
    Path(path).write_bytes(dumps_weights(w))


def load_weights(path, expected_config=None):
    return loads_weights(Path(path).read_bytes(), expected_config)
