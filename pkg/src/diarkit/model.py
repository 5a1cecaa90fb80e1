"""The local speaker-activity model: encoder, channel communication, backend.

The first ``num_multichannel_layers`` encoder layers run on every channel with
shared weights; after each, a communication block (for the chatt/tac variants)
exchanges information across channels and a channel average is tapped for the
weighted layer combination. Later layers run on the aggregated stream only.

Checkpoints are a single JSON document::

    {"config": {...}, "params": {name: {"shape": [...], "data": [flat f64]}}}
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import numerics as nm
from .backend import BackendConfig, ConformerBackend, PowersetCodec, powerset_decode_probs
from .channel_comm import ChAttBlock, TACBlock, channel_average
from .encoder import Encoder, EncoderConfig, superb_combine
from .layers import ParamFactory

VARIANTS = ("single", "chatt", "tac")


class CompatibilityError(ValueError):
    """Checkpoint and model configuration do not match."""


@dataclass
class ModelConfig:
    variant: str = "single"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    max_speakers: int = 4
    max_concurrent: int = 2
    comm_hidden: int = 32
    comm_heads: int = 4
    combiner_trainable: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise nm.ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.backend.model_dim != self.encoder.model_dim:
            raise nm.ConfigError(
                f"backend model_dim {self.backend.model_dim} must equal encoder "
                f"model_dim {self.encoder.model_dim}"
            )


def _strict_dataclass(cls, data: dict):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise nm.ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def model_config_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    enc = _strict_dataclass(EncoderConfig, data.pop("encoder", {}))
    bk = _strict_dataclass(BackendConfig, data.pop("backend", {}))
    allowed = {f.name for f in fields(ModelConfig)} - {"encoder", "backend"}
    unknown = set(data) - allowed
    if unknown:
        raise nm.ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
    return ModelConfig(encoder=enc, backend=bk, **data)


class EendModel:
    """Per-window speaker-activity model over one or more channels."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        factory = ParamFactory(np.random.default_rng(seed))
        self.encoder = Encoder(config.encoder, factory)
        self.codec = PowersetCodec(config.max_speakers, config.max_concurrent)
        m = config.encoder.num_multichannel_layers
        d = config.encoder.model_dim
        self.comm_blocks: list[ChAttBlock | TACBlock] = []
        if config.variant == "chatt":
            self.comm_blocks = [
                ChAttBlock(factory, f"comm{i}", d, config.comm_hidden, config.comm_heads)
                for i in range(m)
            ]
        elif config.variant == "tac":
            self.comm_blocks = [
                TACBlock(factory, f"comm{i}", d, config.comm_hidden) for i in range(m)
            ]
        self.combiner_logits = factory.zeros("combiner.logits", (config.encoder.num_layers + 1,))
        self.backend = ConformerBackend(config.backend, self.codec.num_classes, factory)
        self.params = factory.params

    def forward(self, features) -> tuple[nm.Tensor, list[nm.Tensor]]:
        """[C, T, F] features -> (class logits [T, K], per-block attention [T, H, C, C])."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[None]
        if feats.ndim != 3:
            raise nm.ShapeError(f"expected [C, T, F] features, got shape {feats.shape}")
        if self.config.variant == "single" and feats.shape[0] > 1:
            feats = feats[:1]  # single variant consumes channel 0 only
        x = nm.tensor(feats)
        h = self.encoder.embed(x)  # [C, T, D]
        taps = [channel_average(h)]
        attn: list[nm.Tensor] = []
        cfg = self.config.encoder
        for m in range(cfg.num_multichannel_layers):
            h = self.encoder.layer(m, h)
            if self.config.variant == "chatt":
                h, weights = self.comm_blocks[m].forward(h)
                attn.append(weights)
            elif self.config.variant == "tac":
                h = self.comm_blocks[m].forward(h)
            taps.append(channel_average(h))
        stream = taps[-1]  # later layers run single-channel on the aggregate
        for m in range(cfg.num_multichannel_layers, cfg.num_layers):
            stream = self.encoder.layer(m, stream)
            taps.append(stream)
        combined = superb_combine(taps, self.combiner_logits)
        return self.backend.forward(combined), attn

    def activity(self, features) -> tuple[np.ndarray, list[np.ndarray]]:
        """Per-frame speaker marginals [T, S] plus detached attention tensors."""
        logits, attn = self.forward(features)
        return powerset_decode_probs(logits.data, self.codec), [w.data for w in attn]

    def trainable_params(self, freeze_encoder: bool = False) -> list[nm.Parameter]:
        out = []
        for name, p in self.params.items():
            if not self.config.combiner_trainable and name == "combiner.logits":
                continue
            if freeze_encoder and name.startswith("enc."):
                continue
            out.append(p)
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def init_identity_blocks(self) -> None:
        for block in self.comm_blocks:
            block.init_identity()


def build_multichannel_from_single(single: EendModel, variant: str, seed: int = 0) -> EendModel:
    """Clone a single-channel model into a multi-channel variant.

    Every parameter is copied by name; the newly inserted communication blocks
    get fresh random inner weights and identity-initialized layer norms, so the
    new model initially reproduces the single-channel behavior.
    """
    if single.config.variant != "single":
        raise CompatibilityError(f"base model must be the single variant, got {single.config.variant!r}")
    if variant not in ("chatt", "tac"):
        raise CompatibilityError(f"variant must be chatt or tac, got {variant!r}")
    config = replace(single.config, variant=variant)
    model = EendModel(config, seed=seed)
    expected = {n for n in model.params if not n.startswith("comm")}
    if expected != set(single.params):
        missing = sorted(expected - set(single.params))
        extra = sorted(set(single.params) - expected)
        raise CompatibilityError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name in expected:
        src = single.params[name].data
        dst = model.params[name]
        if src.shape != dst.data.shape:
            raise CompatibilityError(f"shape mismatch for {name}: {src.shape} vs {dst.data.shape}")
        dst.data[...] = src
    model.init_identity_blocks()
    return model


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def checkpoint_to_json(model: EendModel) -> str:
    doc = {
        "config": asdict(model.config),
        "params": {
            name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in model.params.items()
        },
    }
    return json.dumps(doc, sort_keys=True)


def model_from_checkpoint_json(text: str) -> EendModel:
    doc = json.loads(text)
    config = model_config_from_dict(doc["config"])
    model = EendModel(config, seed=0)
    stored = doc["params"]
    if set(stored) != set(model.params):
        missing = sorted(set(model.params) - set(stored))
        extra = sorted(set(stored) - set(model.params))
        raise CompatibilityError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, p in model.params.items():
        entry = stored[name]
        data = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if data.shape != p.data.shape:
            raise CompatibilityError(f"shape mismatch for {name}: {data.shape} vs {p.data.shape}")
        p.data[...] = data
    return model


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str, blob: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: EendModel, path: str) -> None:
    atomic_write_text(path, checkpoint_to_json(model))


def load_checkpoint(path: str) -> EendModel:
    with open(path) as fh:
        return model_from_checkpoint_json(fh.read())
