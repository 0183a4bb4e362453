"""Flat ``key = value`` run configuration with typed defaults.

Every field has a default; unknown keys are rejected so typos never pass
silently. A config round-trips through ``to_file``/``from_file``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict

from .errors import ContractError
from .model import EncoderConfig
from .training import TrainPlan


@dataclass
class RunConfig:
    # encoder architecture
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ff: int = 128
    max_len: int = 64
    n_projections: int = 15
    pooling: str = "mean"
    dropout: float = 0.1
    vocab_size: int = 256
    # training plan
    strategy: str = "cmlm_only"
    stage1_steps: int = 2000
    stage2_steps: int = 0
    nli_steps: int = 0
    alpha: float = 0.2
    margin: float = 0.3
    batch_size: int = 32
    num_mask: int = 0
    variant: str = "standard"
    optimizer: str = "lamb"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    warmup_steps: int = 100
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 500
    # inference
    representation: str = "pooled"
    # data and outputs
    corpus_path: str = ""
    bitext_path: str = ""
    nli_path: str = ""
    out_dir: str = ""

    @classmethod
    def field_types(cls) -> dict[str, type]:
        # every field has a typed default, so the default's type is the schema
        return {f.name: type(f.default) for f in fields(cls)}

    @classmethod
    def _coerce(cls, key: str, raw: str):
        kind = cls.field_types()[key]
        try:
            if kind is int:
                return int(raw)
            if kind is float:
                return float(raw)
            return str(raw)
        except ValueError as exc:
            raise ContractError(f"config key {key!r}: cannot parse {raw!r} "
                                f"as {kind.__name__}") from exc

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        values = {}
        known = {f.name for f in fields(cls)}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ContractError(
                        f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in known:
                    raise ContractError(f"{path}:{lineno}: unknown config key {key!r}")
                if key in values:
                    raise ContractError(f"{path}:{lineno}: duplicate key {key!r}")
                values[key] = cls._coerce(key, value)
        return cls(**values)

    def to_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for f in fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """New config with the given fields replaced; unknown keys error."""
        known = {f.name for f in fields(self)}
        values = asdict(self)
        for key, value in overrides.items():
            if key not in known:
                raise ContractError(f"unknown config key {key!r}")
            values[key] = value
        return RunConfig(**values)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=self.vocab_size, layers=self.layers, heads=self.heads,
            hidden=self.hidden, ff=self.ff, max_len=self.max_len,
            n_projections=self.n_projections, pooling=self.pooling,
            dropout=self.dropout)

    def train_plan(self) -> TrainPlan:
        return TrainPlan(
            strategy=self.strategy, stage1_steps=self.stage1_steps,
            stage2_steps=self.stage2_steps, nli_steps=self.nli_steps,
            alpha=self.alpha, margin=self.margin, batch_size=self.batch_size,
            num_mask=self.num_mask, variant=self.variant,
            optimizer=self.optimizer, learning_rate=self.learning_rate,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            weight_decay=self.weight_decay, warmup_steps=self.warmup_steps,
            seed=self.seed, log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
            corpus_path=self.corpus_path, bitext_path=self.bitext_path,
            nli_path=self.nli_path, out_dir=self.out_dir)
