"""Flat ``key=value`` run configuration with dotted keys.

Every tunable of the pipeline has a typed default below. A config file
may set any subset; unknown keys are rejected, and command-line overrides
are applied last.
"""

from __future__ import annotations

from pathlib import Path

from rilm.asr import AsrConfig, EncoderConfig, RilmDecoderConfig
from rilm.corpus import make_domains
from rilm.decoding import FUSION_MODES, DecodeConfig
from rilm.lm import TransformerLmConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    # synthetic data
    "data.n_train": 2000,
    "data.n_dev": 150,
    "data.dim": 16,
    "data.noise": 0.3,
    "data.confusion": 0.6,
    "data.confusable_pairs": 6,
    "data.source_tilt": 1.1,
    "data.target_tilt": 0.0,
    "data.shift": 0.0,
    "data.source_pair_bias": -2.5,
    "data.target_pair_bias": 0.0,
    "data.sharpness": 1.0,
    "data.min_words": 2,
    "data.max_words": 4,
    "data.min_frames": 1,
    "data.max_frames": 3,
    # tokenizer
    "bpe.vocab_size": 40,
    # language model (also the shape of the decoder's internal LM)
    "lm.n_layers": 2,
    "lm.d_model": 64,
    "lm.n_heads": 4,
    "lm.d_ff": 128,
    "lm.max_len": 128,
    "lm.epochs": 8,
    "lm.lr": 2e-3,
    "lm.batch_size": 32,
    "finetune.epochs": 5,
    "finetune.lr": 1e-3,
    # acoustic model
    "encoder.stack": 1,
    "encoder.n_layers": 2,
    "encoder.d_model": 64,
    "encoder.n_heads": 4,
    "encoder.d_ff": 128,
    "encoder.max_len": 1024,
    "decoder.n_cross_layers": 2,
    "decoder.beta": 1.0,
    "decoder.bridge_input": "prob",
    "train.ctc_weight": 0.3,
    "train.epochs": 12,
    "train.lr": 5e-3,
    "train.warmup_steps": 100,
    "train.batch_size": 32,
    "train.average_last": 4,
    "train.freeze_ilm": True,
    # decoding
    "decode.beam": 10,
    "decode.ctc_weight": 0.5,
    "decode.fusion": "none",
    "decode.lm_weight": 0.1,
    "decode.target_lm_weight": 0.2,
    "decode.source_lm_weight": 0.1,
    "decode.max_len": 0,
    "decode.length_bonus": 0.0,
    "decode.nbest": 1,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def parse_assignments(lines, origin: str = "<overrides>") -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value.strip())
    return out


class RunConfig:
    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        self.values.update(values or {})
        self.validate()

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        values = {}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise FileNotFoundError(f"config file {p} not found")
            values.update(parse_assignments(p.read_text(encoding="utf-8").splitlines(), str(p)))
        values.update(parse_assignments(overrides))
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, **updates) -> "RunConfig":
        """Copy with ``updates``; a double underscore in a key stands for a dot."""
        vals = dict(self.values)
        for k, v in updates.items():
            key = k.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            vals[key] = v
        return RunConfig(vals)

    def dump(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in sorted(self.values.items()))

    def validate(self) -> None:
        v = self.values
        if v["lm.d_model"] % v["lm.n_heads"]:
            raise ConfigError("lm.d_model must be divisible by lm.n_heads")
        if v["encoder.d_model"] % v["encoder.n_heads"]:
            raise ConfigError("encoder.d_model must be divisible by encoder.n_heads")
        if v["encoder.d_model"] != v["lm.d_model"]:
            raise ConfigError("encoder.d_model must equal lm.d_model (cross-attention memory width)")
        if v["decode.fusion"] not in FUSION_MODES:
            raise ConfigError(f"decode.fusion must be one of {FUSION_MODES}")
        for key in ("train.ctc_weight", "decode.ctc_weight"):
            if not 0.0 <= v[key] <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]")
        if not v["data.min_words"] <= v["data.max_words"]:
            raise ConfigError("data.min_words exceeds data.max_words")
        if not 1 <= v["data.min_frames"] <= v["data.max_frames"]:
            raise ConfigError("data.min_frames/max_frames must satisfy 1 <= min <= max")

    # -- builders -------------------------------------------------------
    def domains(self, seed: int):
        v = self.values
        return make_domains(
            seed=seed,
            dim=v["data.dim"],
            noise=v["data.noise"],
            confusion=v["data.confusion"],
            confusable_pairs=v["data.confusable_pairs"],
            source_tilt=v["data.source_tilt"],
            target_tilt=v["data.target_tilt"],
            shift=v["data.shift"],
            source_pair_bias=v["data.source_pair_bias"],
            target_pair_bias=v["data.target_pair_bias"],
            sharpness=v["data.sharpness"],
            length_range=(v["data.min_words"], v["data.max_words"]),
            frames_per_token=(v["data.min_frames"], v["data.max_frames"]),
        )

    def lm_config(self, vocab_size: int) -> TransformerLmConfig:
        v = self.values
        return TransformerLmConfig(
            n_layers=v["lm.n_layers"], d_model=v["lm.d_model"], n_heads=v["lm.n_heads"],
            d_ff=v["lm.d_ff"], vocab_size=vocab_size, max_len=v["lm.max_len"],
        )

    def asr_config(self, vocab_size: int, input_dim: int) -> AsrConfig:
        v = self.values
        enc = EncoderConfig(
            input_dim=input_dim, stack=v["encoder.stack"], n_layers=v["encoder.n_layers"],
            d_model=v["encoder.d_model"], n_heads=v["encoder.n_heads"], d_ff=v["encoder.d_ff"],
            max_len=v["encoder.max_len"],
        )
        dec = RilmDecoderConfig(
            n_lm_layers=v["lm.n_layers"], n_cross_layers=v["decoder.n_cross_layers"], beta=v["decoder.beta"],
            d_model=v["lm.d_model"], n_heads=v["lm.n_heads"], d_ff=v["lm.d_ff"], vocab_size=vocab_size,
            max_len=v["lm.max_len"], bridge_input=v["decoder.bridge_input"],
        )
        return AsrConfig(enc, dec, ctc_weight=v["train.ctc_weight"])

    def decode_config(self, **overrides) -> DecodeConfig:
        v = self.values
        base = dict(
            beam=v["decode.beam"], ctc_weight=v["decode.ctc_weight"], fusion=v["decode.fusion"],
            lm_weight=v["decode.lm_weight"], target_lm_weight=v["decode.target_lm_weight"],
            source_lm_weight=v["decode.source_lm_weight"], max_len=v["decode.max_len"],
            length_bonus=v["decode.length_bonus"], nbest=v["decode.nbest"],
        )
        base.update(overrides)
        return DecodeConfig(**base)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
