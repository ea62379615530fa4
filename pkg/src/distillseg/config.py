"""Experiment configuration: one flat dataclass fully determines a run."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class ExperimentConfig:
    # seeds
    seed_data: int = 0
    seed_model: int = 0
    seed_train: int = 0
    # data
    n_volumes: int = 40
    extents: tuple[int, int, int] = (16, 64, 64)
    num_classes: int = 4
    noise_sigma: float = 0.05
    n_labeled: int = 12
    n_validation: int | None = None
    calib_fraction: float = 0.15
    skip_empty_slices: bool = False
    # model
    channels_base: int = 8
    depth: int = 2
    # training
    lr: float = 3e-4
    crop: int = 32
    batch: int = 16
    epochs_teacher: int = 15
    epochs_student: int = 15
    epochs_student_init: int = 5
    epochs_qc: int = 40
    # losses / filtering
    alpha: float = 0.1
    tau: float = 4.0
    theta_q: float = 0.7
    qc_threshold: float = 0.5
    # ablation flags
    use_kd: bool = True
    use_teacher_ckpt: bool = True
    use_qc: bool = True
    # evaluation
    include_background: bool = True

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(self.extents))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.qc_threshold <= 1.0:
            raise ValueError(f"qc_threshold must lie in [0, 1], got {self.qc_threshold}")
        for name in ("epochs_teacher", "epochs_student", "epochs_student_init", "epochs_qc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extents"] = list(self.extents)
        return d

    @property
    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def with_flags(self, use_kd: bool, use_teacher_ckpt: bool, use_qc: bool) -> "ExperimentConfig":
        return replace(self, use_kd=use_kd, use_teacher_ckpt=use_teacher_ckpt, use_qc=use_qc)


def config_from_dict(data: dict) -> ExperimentConfig:
    known = ExperimentConfig.__dataclass_fields__
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "extents" in data:
        data = dict(data)
        data["extents"] = tuple(data["extents"])
    return ExperimentConfig(**data)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
