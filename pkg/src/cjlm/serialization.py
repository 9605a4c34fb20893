"""Self-describing binary model files.

Layout, all little-endian:

* magic ``CJLM``, uint32 format version
* uint64 length-prefixed UTF-8 JSON block: encoder and training configs,
  hidden layer sizes, EOS emission flag, both vocabularies, and a provenance
  record (seed, corpus line counts, per-epoch metrics)
* uint32 tensor count, then per tensor: uint16 name length, name, uint8 rank,
  uint32 per-dim sizes, row-major float32 payload
* trailing 8 bytes: the first 8 bytes of SHA-256 over everything before them

Loading needs no external configuration, validates the checksum before
parsing, and reproduces tensors bit-for-bit; the JSON block is serialized
with sorted keys so identical models produce identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import CONV_WINDOW, LOCAL_PAIR, EncoderConfig, EncoderParams
from .errors import ConfigError, CorpusError, ModelFormatError
from .jointlm import JointModelParams
from .training import TrainConfig
from .vocab import Vocabulary

MAGIC = b"CJLM"
FORMAT_VERSION = 1
CHECKSUM_BYTES = 8
TENSOR_DTYPE = np.dtype("<f4")


@dataclass
class ModelArtifact:
    """A trained model plus everything needed to use it standalone."""

    encoder_config: EncoderConfig
    source_vocab: Vocabulary
    target_vocab: Vocabulary
    params: JointModelParams
    train_config: TrainConfig | None = None
    emit_eos: bool = True
    provenance: dict = field(default_factory=dict)


def _header_json(artifact: ModelArtifact) -> bytes:
    header = {
        "encoder_config": asdict(artifact.encoder_config),
        "train_config": None if artifact.train_config is None
        else asdict(artifact.train_config),
        "hidden_dims": list(artifact.params.hidden_dims),
        "emit_eos": artifact.emit_eos,
        "source_vocab": {
            "tokens": list(artifact.source_vocab.tokens),
            "limit": artifact.source_vocab.limit,
        },
        "target_vocab": {
            "tokens": list(artifact.target_vocab.tokens),
            "limit": artifact.target_vocab.limit,
        },
        "provenance": artifact.provenance,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_model(artifact: ModelArtifact, path) -> None:
    """Write the artifact, fsyncing before return so success means durable."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    header = _header_json(artifact)
    blob += struct.pack("<Q", len(header))
    blob += header
    tensors = artifact.params.tensors()
    blob += struct.pack("<I", len(tensors))
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", tensor.ndim)
        for dim in tensor.shape:
            blob += struct.pack("<I", dim)
        blob += np.ascontiguousarray(tensor, dtype=TENSOR_DTYPE).tobytes()
    blob += hashlib.sha256(blob).digest()[:CHECKSUM_BYTES]
    with open(path, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("truncated model file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        (value,) = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return value


def _expected_shapes(cfg: EncoderConfig, src_size: int, tgt_size: int,
                     hidden_dims: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    shapes = {
        "src_embeddings": (src_size, cfg.emb_dim),
        "conv1_w": (cfg.filters1, cfg.conv1_width),
        "conv1_b": (cfg.filters1,),
        "conv3_w": (cfg.filters3, CONV_WINDOW * cfg.filters1),
        "conv3_b": (cfg.filters3,),
        "proj_w": (cfg.repr_dim, cfg.filters3),
        "proj_b": (cfg.repr_dim,),
    }
    if cfg.fusion == "gating":
        shapes["gate_local_w"] = (2 * LOCAL_PAIR * cfg.input_dim,)
        shapes["gate_local_b"] = (1,)
        shapes["gate_global_w"] = (cfg.filters3,)
    if cfg.arch == "attention":
        in_dim = cfg.history * cfg.tgt_emb_dim
        for i in range(cfg.attn_depth):
            shapes[f"attn_{i}_w"] = (cfg.attn_dim, in_dim)
            shapes[f"attn_{i}_b"] = (cfg.attn_dim,)
            in_dim = cfg.attn_dim
    shapes["tgt_embeddings"] = (tgt_size, cfg.tgt_emb_dim)
    in_dim = cfg.repr_dim + cfg.history * cfg.tgt_emb_dim
    for i, dim in enumerate(hidden_dims):
        shapes[f"hidden_{i}_w"] = (dim, in_dim)
        shapes[f"hidden_{i}_b"] = (dim,)
        in_dim = dim
    shapes["softmax_w"] = (tgt_size, in_dim)
    shapes["softmax_b"] = (tgt_size,)
    return shapes


def _assemble_params(cfg: EncoderConfig, tensors: dict[str, np.ndarray],
                     hidden_dims: tuple[int, ...]) -> JointModelParams:
    encoder = EncoderParams(
        src_embeddings=tensors["src_embeddings"],
        conv1_w=tensors["conv1_w"],
        conv1_b=tensors["conv1_b"],
        conv3_w=tensors["conv3_w"],
        conv3_b=tensors["conv3_b"],
        proj_w=tensors["proj_w"],
        proj_b=tensors["proj_b"],
        gate_local_w=tensors.get("gate_local_w"),
        gate_local_b=tensors.get("gate_local_b"),
        gate_global_w=tensors.get("gate_global_w"),
        attn_layers=tuple(
            (tensors[f"attn_{i}_w"], tensors[f"attn_{i}_b"])
            for i in range(cfg.attn_depth if cfg.arch == "attention" else 0)
        ),
    )
    return JointModelParams(
        encoder=encoder,
        tgt_embeddings=tensors["tgt_embeddings"],
        hidden_layers=tuple(
            (tensors[f"hidden_{i}_w"], tensors[f"hidden_{i}_b"])
            for i in range(len(hidden_dims))
        ),
        softmax_w=tensors["softmax_w"],
        softmax_b=tensors["softmax_b"],
    )


def load_model(path) -> ModelArtifact:
    """Read, validate, and reconstruct a saved model."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(MAGIC) + 4 + CHECKSUM_BYTES:
        raise ModelFormatError("truncated model file")
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise ModelFormatError("not a model file (bad magic bytes)")
    version = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    digest = hashlib.sha256(data[: -CHECKSUM_BYTES]).digest()[:CHECKSUM_BYTES]
    if data[-CHECKSUM_BYTES:] != digest:
        raise ModelFormatError("checksum mismatch: file is corrupted")

    header_len = reader.unpack("<Q")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"malformed header block: {e}") from None
    try:
        cfg = EncoderConfig(**header["encoder_config"])
        train_cfg = (None if header["train_config"] is None
                     else TrainConfig(**header["train_config"]))
        hidden_dims = tuple(int(d) for d in header["hidden_dims"])
        emit_eos = bool(header["emit_eos"])
        src_vocab = Vocabulary(
            tokens=tuple(header["source_vocab"]["tokens"]),
            limit=int(header["source_vocab"]["limit"]),
        )
        tgt_vocab = Vocabulary(
            tokens=tuple(header["target_vocab"]["tokens"]),
            limit=int(header["target_vocab"]["limit"]),
        )
        provenance = header["provenance"]
    except (KeyError, TypeError, ValueError, ConfigError, CorpusError) as e:
        raise ModelFormatError(f"malformed header block: {e}") from None

    count = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        rank = reader.unpack("<B")
        shape = tuple(reader.unpack("<I") for _ in range(rank))
        n_items = int(np.prod(shape)) if shape else 1
        payload = reader.take(n_items * TENSOR_DTYPE.itemsize)
        if name in tensors:
            raise ModelFormatError(f"duplicate tensor {name!r}")
        tensors[name] = (
            np.frombuffer(payload, dtype=TENSOR_DTYPE)
            .reshape(shape)
            .astype(np.float32)
        )
    if reader.pos != len(data) - CHECKSUM_BYTES:
        raise ModelFormatError("trailing bytes after tensor block")

    expected = _expected_shapes(cfg, len(src_vocab), len(tgt_vocab), hidden_dims)
    missing = sorted(expected.keys() - tensors.keys())
    if missing:
        raise ModelFormatError(f"missing tensor {missing[0]!r}")
    extra = sorted(tensors.keys() - expected.keys())
    if extra:
        raise ModelFormatError(f"unexpected tensor {extra[0]!r}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ModelFormatError(
                f"tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {shape}"
            )

    return ModelArtifact(
        encoder_config=cfg,
        source_vocab=src_vocab,
        target_vocab=tgt_vocab,
        params=_assemble_params(cfg, tensors, hidden_dims),
        train_config=train_cfg,
        emit_eos=emit_eos,
        provenance=provenance,
    )
