"""Run configuration. Defaults follow the published experimental settings."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

ABLATIONS = ("no_rewards", "no_preranker", "no_evidence", "no_rl_action", "no_gate")


@dataclass
class TrainConfig:
    # model
    d_e: int = 300
    d_g: int = 128
    mlp_hidden: int = 128
    dropout: float = 0.5
    threshold: float = 0.5
    max_q_len: int = 40
    max_c_len: int = 200
    share_summary_encoder: bool = True
    train_embeddings: bool = True
    # optimisation
    lr: float = 1e-3
    rl_lr: float | None = None  # RL-stage learning rate; None reuses lr
    lr_decay: float = 0.99
    batch_questions: int = 10
    preranker_epochs: int = 5
    rl_epochs: int = 30
    optimizer: str = "adam"
    baseline: bool = False
    rl_dropout: bool = True
    warm_start_policy: bool = True
    seed: int = 0
    # episode semantics
    reward_ranking: str = "action"  # "action": sampled action picks the tier; "score": P_pos only
    gate_on_sampled_action: bool = False
    reward_to_go: bool = False  # credit each action with the sum of its own and later step rewards
    # ablations
    no_rewards: bool = False
    no_preranker: bool = False
    no_evidence: bool = False
    no_rl_action: bool = False
    no_gate: bool = False
    # data
    min_count: int = 1

    def validate(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.reward_ranking not in ("action", "score"):
            raise ValueError(f"unknown reward_ranking {self.reward_ranking!r}")
        for name in ("d_e", "d_g", "mlp_hidden", "batch_questions", "max_q_len", "max_c_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or (self.rl_lr is not None and self.rl_lr < 0):
            raise ValueError("learning rates must be non-negative")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def model_fingerprint(self) -> dict:
        keys = ("d_e", "d_g", "mlp_hidden", "share_summary_encoder", "no_evidence")
        return {k: getattr(self, k) for k in keys}


def load_config(path: str) -> dict:
    """Read a JSON (or YAML, if the suffix says so) config file mirroring TrainConfig fields."""
    with open(path, encoding="utf-8") as f:
        if path.endswith((".yaml", ".yml")):
            import yaml

            return yaml.safe_load(f) or {}
        return json.load(f)


# Sized for the 500-question synthetic evidence-chain corpus with frozen random word vectors.
SYNTHETIC_PRESET = dict(d_e=64, d_g=16, mlp_hidden=16, dropout=0.3, train_embeddings=False, lr=3e-3, rl_lr=1e-3,
                        preranker_epochs=6, rl_epochs=10)
