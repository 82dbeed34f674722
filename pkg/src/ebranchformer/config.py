"""Model/training configuration with strict JSON round-tripping.

Unknown keys are rejected and every invariant of the nested configs is
enforced at load time, so an experiment definition is reproducible
bit-for-bit from its file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

from .tensor import ConfigError

MERGE_VARIANTS = (
    "concat",
    "weighted_average",
    "depth_conv",
    "multi_kernel",
    "depth_conv_se",
    "conv_module_internal",
    "conv_module_external",
)

FFN_STYLES = ("none", "single", "macaron")

BLANK_TOKEN = "<blank>"
SOS_EOS_TOKEN = "<sos/eos>"
PAD_TOKEN = "<pad>"
SPECIAL_TOKENS = (BLANK_TOKEN, SOS_EOS_TOKEN, PAD_TOKEN)


@dataclass
class EncoderConfig:
    d: int = 256
    num_layers: int = 16
    heads: int = 0                 # 0 -> default d // 64
    d_inter_cgmlp: int = 0         # 0 -> default 6d
    d_ffn: int = 0                 # 0 -> 4d for single/none, 2d (narrowed) for macaron
    ffn_style: str = "single"
    merge_variant: str = "depth_conv"
    merge_weights: Tuple[float, float] = (0.5, 0.5)
    cgmlp_kernel: int = 31
    merge_kernel: int = 31
    merge_kernel_secondary: int = 3
    se_bottleneck: int = 0         # 0 -> merge channels (2d) // 8
    dropout: float = 0.1
    layer_dropout: float = 0.1
    input_dim: int = 80

    def __post_init__(self):
        if self.heads == 0:
            if self.d % 64 != 0:
                raise ConfigError(f"d={self.d} not divisible by 64; set heads explicitly")
            self.heads = self.d // 64
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 2 != 0:
            raise ConfigError(f"d={self.d} must be even for sinusoidal position tables")
        if self.d_inter_cgmlp == 0:
            self.d_inter_cgmlp = 6 * self.d
        if self.d_inter_cgmlp % 2 != 0:
            raise ConfigError(f"d_inter_cgmlp={self.d_inter_cgmlp} must be even (gate splits it in half)")
        if self.d_ffn == 0:
            self.d_ffn = 2 * self.d if self.ffn_style == "macaron" else 4 * self.d
        if self.ffn_style not in FFN_STYLES:
            raise ConfigError(f"unknown ffn_style {self.ffn_style!r}, expected one of {FFN_STYLES}")
        if self.merge_variant not in MERGE_VARIANTS:
            raise ConfigError(f"unknown merge_variant {self.merge_variant!r}, expected one of {MERGE_VARIANTS}")
        for name in ("cgmlp_kernel", "merge_kernel", "merge_kernel_secondary"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name}={k} must be odd and positive")
        if self.se_bottleneck == 0:
            self.se_bottleneck = max(1, (2 * self.d) // 8)
        self.merge_weights = (float(self.merge_weights[0]), float(self.merge_weights[1]))
        for w in self.merge_weights:
            if not (w == w and abs(w) != float("inf")):
                raise ConfigError("weighted-average merge weights must be finite")
        for name in ("dropout", "layer_dropout"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"{name}={r} outside [0, 1)")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def merge_channels(self) -> int:
        return 2 * self.d


@dataclass
class DecoderConfig:
    layers: int = 6
    d: int = 256                   # matches the encoder hidden size
    heads: int = 0
    d_ffn: int = 0                 # 0 -> 4d
    dropout: float = 0.2
    vocab_size: int = 0            # filled from the vocab section
    max_positions: int = 512

    def __post_init__(self):
        if self.heads == 0:
            if self.d % 64 != 0:
                raise ConfigError(f"decoder d={self.d} not divisible by 64; set heads explicitly")
            self.heads = self.d // 64
        if self.d % self.heads != 0:
            raise ConfigError(f"decoder d={self.d} not divisible by heads={self.heads}")
        if self.d_ffn == 0:
            self.d_ffn = 4 * self.d
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"decoder dropout={self.dropout} outside [0, 1)")
        if self.layers < 1:
            raise ConfigError("decoder layers must be >= 1")


@dataclass
class TrainConfig:
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1
    adam_betas: Tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    weight_decay: float = 1e-6
    warmup_steps: int = 1000
    peak_lr: float = 2e-3
    total_steps: int = 5000
    average_top_k: int = 10
    batch_size: int = 16
    eval_every: int = 250
    grad_clip: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight={self.ctc_weight} outside [0, 1]")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing={self.label_smoothing} outside [0, 1)")
        if self.average_top_k < 1:
            raise ConfigError("average_top_k must be >= 1")


@dataclass
class Vocabulary:
    tokens: List[str]

    def __post_init__(self):
        for special in SPECIAL_TOKENS:
            if special not in self.tokens:
                raise ConfigError(f"vocab must contain {special!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocab tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def blank_id(self) -> int:
        return self.tokens.index(BLANK_TOKEN)

    @property
    def sos_eos_id(self) -> int:
        return self.tokens.index(SOS_EOS_TOKEN)

    @property
    def pad_id(self) -> int:
        return self.tokens.index(PAD_TOKEN)

    @property
    def regular_ids(self) -> List[int]:
        return [i for i, t in enumerate(self.tokens) if t not in SPECIAL_TOKENS]

    def text(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig
    training: TrainConfig
    vocab: Vocabulary


def make_vocab(num_regular: int, names: Optional[List[str]] = None) -> Vocabulary:
    """Specials first, then ``num_regular`` plain tokens."""
    if names is None:
        names = [f"tok{i}" for i in range(num_regular)]
    return Vocabulary(list(SPECIAL_TOKENS) + names)


def _build_section(cls, raw: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r} section: {sorted(unknown)}")
    fixed = {}
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        fixed[key] = value
    return cls(**fixed)


def _parse_vocab(raw) -> Vocabulary:
    if isinstance(raw, list):
        return Vocabulary([str(t) for t in raw])
    # shorthand for full-scale profiling configs where a real subword list
    # would be thousands of entries
    if isinstance(raw, int):
        return make_vocab(raw - len(SPECIAL_TOKENS))
    raise ConfigError("vocab section must be a token list or an integer size")


def config_from_dict(doc: dict) -> ModelConfig:
    known_sections = {"encoder", "decoder", "training", "vocab"}
    unknown = set(doc) - known_sections
    if unknown:
        raise ConfigError(f"unknown top-level sections: {sorted(unknown)}")
    if "encoder" not in doc:
        raise ConfigError("config requires an 'encoder' section")
    encoder = _build_section(EncoderConfig, doc["encoder"], "encoder")
    vocab = _parse_vocab(doc.get("vocab", 8))
    dec_raw = dict(doc.get("decoder", {}))
    dec_raw.setdefault("d", encoder.d)
    dec_raw.setdefault("heads", encoder.heads)
    decoder = _build_section(DecoderConfig, dec_raw, "decoder")
    if decoder.vocab_size == 0:
        decoder.vocab_size = vocab.size
    if decoder.vocab_size != vocab.size:
        raise ConfigError(f"decoder.vocab_size={decoder.vocab_size} disagrees with vocab size {vocab.size}")
    training = _build_section(TrainConfig, doc.get("training", {}), "training")
    return ModelConfig(encoder=encoder, decoder=decoder, training=training, vocab=vocab)


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(doc)


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "encoder": dataclasses.asdict(cfg.encoder),
        "decoder": dataclasses.asdict(cfg.decoder),
        "training": dataclasses.asdict(cfg.training),
        "vocab": list(cfg.vocab.tokens),
    }


def save_config(cfg: ModelConfig, path) -> None:
    doc = config_to_dict(cfg)
    doc["encoder"]["merge_weights"] = list(doc["encoder"]["merge_weights"])
    doc["training"]["adam_betas"] = list(doc["training"]["adam_betas"])
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
