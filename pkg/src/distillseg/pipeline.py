"""End-to-end self-training pipeline: teacher training, pseudo-labeling,
quality-classifier filtering, student distillation, evaluation, and the
component ablation.

Every stage is a pure function of its inputs plus the config's seeds, so
rerunning a stage reproduces its outputs bitwise.
"""
from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ExperimentConfig
from .losses import LossWeights, bce_with_logits, cross_entropy, kd_loss, student_loss
from .metrics import ConfusionMatrix, mean_iou, metrics_report
from .models import (
    Checkpoint,
    QualityModel,
    SegModel,
    checkpoint_bytes,
    checkpoint_of,
    init_from_checkpoint,
)
from .optim import Adam
from .phantom import (
    DatasetSplit,
    MaskVolume,
    PseudoLabelEntry,
    PseudoLabelSet,
    SliceRecord,
    Volume,
    collect_slices,
    generate_phantom,
    make_split,
    slice_batches,
    standardize,
)
from .tensor import Tensor, backward

log = logging.getLogger("distillseg")

THREADS_ENV = "DISTILL_SEG_THREADS"

ABLATION_ROWS: list[tuple[str, dict]] = [
    ("Fully supervised", {}),
    ("Pseudo-Labeling", {"use_kd": False, "use_teacher_ckpt": False, "use_qc": False}),
    ("Knowledge Distillation", {"use_kd": True, "use_teacher_ckpt": False, "use_qc": False}),
    ("Teacher Checkpoint", {"use_kd": False, "use_teacher_ckpt": True, "use_qc": False}),
    ("Quality Classifier", {"use_kd": False, "use_teacher_ckpt": False, "use_qc": True}),
    ("Proposed", {"use_kd": True, "use_teacher_ckpt": True, "use_qc": True}),
]

def _epoch_seed(base: int, stage_tag: int, epoch: int) -> int:
    return (base * 1_000_003 + stage_tag * 7919 + epoch) % (2**31)


@dataclass
class PhantomSet:
    """All generated volumes of one run, keyed by volume id."""

    volumes: dict[int, Volume]
    masks: dict[int, MaskVolume]
    num_classes: int


def generate_dataset(cfg: ExperimentConfig) -> PhantomSet:
    volumes: dict[int, Volume] = {}
    masks: dict[int, MaskVolume] = {}
    for vid in range(cfg.n_volumes):
        vol, mask = generate_phantom(
            seed=cfg.seed_data * 100_000 + vid,
            num_classes=cfg.num_classes,
            extents=cfg.extents,
            noise_sigma=cfg.noise_sigma,
        )
        volumes[vid] = vol
        masks[vid] = mask
    return PhantomSet(volumes, masks, cfg.num_classes)


def split_for(cfg: ExperimentConfig) -> DatasetSplit:
    return make_split(
        cfg.n_volumes,
        cfg.n_labeled,
        cfg.seed_data,
        n_validation=cfg.n_validation,
        calib_fraction=cfg.calib_fraction,
    )


def checkpoint_hash(ckpt: Checkpoint) -> str:
    return hashlib.sha256(checkpoint_bytes(ckpt)).hexdigest()[:16]


# ---------------------------------------------------------------------------
# inference helpers


def _num_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def predict_logits(model: SegModel, images: np.ndarray, batch: int) -> np.ndarray:
    """Frozen forward over standardized images [N,1,H,W] -> logits [N,K,H,W]."""
    chunks = [images[i : i + batch] for i in range(0, len(images), batch)]
    threads = _num_threads()

    def run(chunk: np.ndarray) -> np.ndarray:
        return model.forward(Tensor(chunk)).data

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, chunks))  # order-preserving merge
    else:
        outs = [run(c) for c in chunks]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,), dtype=np.float32)


def predict_masks(model: SegModel, slices: list[np.ndarray], batch: int) -> list[np.ndarray]:
    """Argmax masks for raw (unstandardized) full slices."""
    if not slices:
        return []
    images = np.stack([standardize(s)[None] for s in slices]).astype(np.float32)
    logits = predict_logits(model, images, batch)
    return [m.astype(np.uint8) for m in logits.argmax(axis=1)]


# ---------------------------------------------------------------------------
# teacher


def train_teacher(cfg: ExperimentConfig, data: PhantomSet, split: DatasetSplit) -> tuple[SegModel, list[dict]]:
    """Train the teacher with cross-entropy on the labeled slices only."""
    if not split.labeled:
        raise ValueError("labeled split is empty; cannot train a teacher")
    records = collect_slices(
        data.volumes, data.masks, split.labeled, source="labeled", skip_empty=cfg.skip_empty_slices
    )
    model = SegModel(cfg.channels_base, cfg.depth, cfg.num_classes, seed=cfg.seed_model)
    opt = Adam(model.parameters(), lr=cfg.lr)
    curve = []
    step = 0
    for epoch in range(cfg.epochs_teacher):
        losses = []
        batches = slice_batches(
            records, cfg.crop, cfg.batch, _epoch_seed(cfg.seed_train, 1, epoch), augment=True
        )
        for images, masks, _ids in batches:
            loss = cross_entropy(model.forward(Tensor(images)), masks)
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(f"teacher training diverged: loss not finite at step {step}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(value)
            step += 1
        curve.append({"epoch": epoch, "loss": float(np.mean(losses))})
        log.info("teacher epoch %d/%d loss %.4f", epoch + 1, cfg.epochs_teacher, curve[-1]["loss"])
    model.freeze()  # downstream stages only ever read the teacher
    return model, curve


# ---------------------------------------------------------------------------
# pseudo-labels


def generate_pseudo_labels(
    cfg: ExperimentConfig, teacher: SegModel, data: PhantomSet, split: DatasetSplit
) -> PseudoLabelSet:
    """Full-slice argmax pseudo-labels for every unlabeled slice."""
    teacher_hash = checkpoint_hash(checkpoint_of(teacher))
    records = collect_slices(data.volumes, None, split.unlabeled, source="pseudo")
    masks = predict_masks(teacher, [r.image for r in records], cfg.batch)
    entries = [PseudoLabelEntry(slice_id=r.slice_id, mask=m) for r, m in zip(records, masks)]
    return PseudoLabelSet(entries=entries, teacher_hash=teacher_hash, config_hash=cfg.config_hash)


# ---------------------------------------------------------------------------
# quality classifier


def slice_miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, include_background: bool) -> float:
    cm = ConfusionMatrix(num_classes).accumulate(pred, gt)
    return mean_iou(cm, include_background)


def _shift_or(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _shift_and(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] &= mask[:-1]
    out[:-1] &= mask[1:]
    out[:, 1:] &= mask[:, :-1]
    out[:, :-1] &= mask[:, 1:]
    return out


def corrupt_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray | None:
    """Damaged copy of a gt mask (dilate / erode / drop an organ).

    Returns None when the slice has no organs to corrupt.
    """
    present = [int(c) for c in np.unique(mask) if c != 0]
    if not present:
        return None
    out = mask.copy()
    ops = rng.choice(3, size=2, replace=True)
    for op in ops:
        if op == 0:  # dilate every organ into background
            r = int(rng.integers(2, 4))
            for c in present:
                m = out == c
                for _ in range(r):
                    m = _shift_or(m)
                out[m & (out == 0)] = c
        elif op == 1:  # erode every organ
            r = int(rng.integers(1, 3))
            for c in present:
                m = out == c
                er = m
                for _ in range(r):
                    er = _shift_and(er)
                out[m & ~er] = 0
        else:  # drop one organ region
            c = int(present[int(rng.integers(0, len(present)))])
            out[out == c] = 0
    return out


@dataclass
class QcExample:
    slice_id: str
    image: np.ndarray  # [H,W] raw
    mask: np.ndarray  # [H,W] uint8
    good: bool
    origin: str  # "teacher" | "corrupt"


@dataclass
class QcDataset:
    train: list[QcExample]
    heldout: list[QcExample]
    num_classes: int
    score_histogram: list[int] = field(default_factory=list)


def score_calibration_slices(
    cfg: ExperimentConfig, teacher: SegModel, data: PhantomSet, split: DatasetSplit
) -> list[tuple[SliceRecord, np.ndarray, float]]:
    """Teacher pseudo-label + oracle mIoU for every calibration slice."""
    records = collect_slices(data.volumes, data.masks, split.calibration, source="labeled")
    preds = predict_masks(teacher, [r.image for r in records], cfg.batch)
    out = []
    for rec, pred in zip(records, preds):
        score = slice_miou(pred, rec.mask, cfg.num_classes, cfg.include_background)
        out.append((rec, pred, score))
    return out


def make_qc_dataset(
    cfg: ExperimentConfig, teacher: SegModel, data: PhantomSet, split: DatasetSplit
) -> QcDataset:
    """Oracle-labeled quality-classifier dataset from calibration slices.

    Teacher pseudo-labels are good iff slice mIoU >= theta_q; corrupted
    ground-truth masks provide negatives by construction. The train side is
    resampled to keep each class within [30%, 70%].
    """
    if not split.calibration:
        raise ValueError("calibration split is empty; cannot build a QC dataset")
    scored = score_calibration_slices(cfg, teacher, data, split)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed_data, 0x9C])))

    examples: list[QcExample] = []
    for rec, pred, score in scored:
        examples.append(QcExample(rec.slice_id, rec.image, pred, score >= cfg.theta_q, "teacher"))
        bad = corrupt_mask(rec.mask, rng)
        if bad is not None:
            examples.append(QcExample(rec.slice_id, rec.image, bad, False, "corrupt"))

    hist, _ = np.histogram([s for _, _, s in scored], bins=10, range=(0.0, 1.0))
    n_good = sum(e.good for e in examples)
    n_bad = len(examples) - n_good
    if n_good == 0 or n_bad == 0:
        raise ValueError(
            "quality-classifier dataset has a single class "
            f"(good={n_good}, bad={n_bad}, theta_q={cfg.theta_q}); "
            f"calibration mIoU histogram (10 bins over [0,1]): {hist.tolist()}"
        )

    # split by slice so one image never straddles train and heldout
    slice_ids = sorted({e.slice_id for e in examples})
    order = rng.permutation(len(slice_ids))
    n_held = max(1, len(slice_ids) // 4)
    held_ids = {slice_ids[i] for i in order[:n_held]}
    train = [e for e in examples if e.slice_id not in held_ids]
    heldout = [e for e in examples if e.slice_id in held_ids]

    # rebalance the train side into [30%, 70%] by duplicating the minority
    def balance(items: list[QcExample]) -> list[QcExample]:
        items = list(items)
        for _ in range(4 * len(items)):
            good = [e for e in items if e.good]
            bad = [e for e in items if not e.good]
            if not good or not bad:
                break
            frac = len(good) / len(items)
            if 0.3 <= frac <= 0.7:
                break
            minority = good if frac < 0.3 else bad
            items.append(minority[int(rng.integers(0, len(minority)))])
        return items

    train = balance(train)
    return QcDataset(train=train, heldout=heldout, num_classes=cfg.num_classes, score_histogram=hist.tolist())


def qc_input(image: np.ndarray, mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Stack standardized image with one-hot mask channels: [1+K,H,W]."""
    onehot = (mask[None, :, :] == np.arange(num_classes)[:, None, None]).astype(np.float32)
    return np.concatenate([standardize(image)[None], onehot], axis=0)


def _qc_batch(examples: list[QcExample], num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([qc_input(e.image, e.mask, num_classes) for e in examples])
    y = np.array([1.0 if e.good else 0.0 for e in examples], dtype=np.float32)
    return x, y


def qc_accuracy(model: QualityModel, examples: list[QcExample], num_classes: int, batch: int) -> float:
    if not examples:
        return float("nan")
    correct = 0
    for i in range(0, len(examples), batch):
        chunk = examples[i : i + batch]
        x, y = _qc_batch(chunk, num_classes)
        logits = model.forward(Tensor(x)).data.reshape(-1)
        correct += int(((logits >= 0) == (y >= 0.5)).sum())
    return correct / len(examples)


def train_quality_classifier(cfg: ExperimentConfig, qcset: QcDataset) -> tuple[QualityModel, float, list[dict]]:
    """Train the QC with BCE; returns (model, held-out accuracy, curve)."""
    if not any(e.good for e in qcset.train) or not any(not e.good for e in qcset.train):
        raise ValueError("QC training set must contain both classes")
    model = QualityModel(cfg.num_classes, seed=cfg.seed_model)
    opt = Adam(model.parameters(), lr=cfg.lr)
    curve = []
    step = 0
    for epoch in range(cfg.epochs_qc):
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([_epoch_seed(cfg.seed_train, 3, epoch), 0x9C17]))
        )
        order = rng.permutation(len(qcset.train))
        losses = []
        for i in range(0, len(order), cfg.batch):
            chunk = [qcset.train[j] for j in order[i : i + cfg.batch]]
            x, y = _qc_batch(chunk, cfg.num_classes)
            loss = bce_with_logits(model.forward(Tensor(x)), y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(f"QC training diverged: loss not finite at step {step}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(value)
            step += 1
        curve.append({"epoch": epoch, "loss": float(np.mean(losses))})
    model.freeze()
    acc = qc_accuracy(model, qcset.heldout, cfg.num_classes, cfg.batch)
    log.info("QC held-out accuracy %.3f (%d examples)", acc, len(qcset.heldout))
    return model, acc, curve


def qc_scores(
    model: QualityModel, pls: PseudoLabelSet, data: PhantomSet, num_classes: int, batch: int
) -> np.ndarray:
    """Sigmoid good-probability for every pseudo-label entry."""
    scores = np.zeros(len(pls.entries), dtype=np.float64)
    for i in range(0, len(pls.entries), batch):
        chunk = pls.entries[i : i + batch]
        x = np.stack(
            [
                qc_input(_slice_image(data, e.slice_id), e.mask, num_classes)
                for e in chunk
            ]
        )
        logits = model.forward(Tensor(x)).data.reshape(-1).astype(np.float64)
        scores[i : i + len(chunk)] = 1.0 / (1.0 + np.exp(-logits))
    return scores


def _slice_image(data: PhantomSet, sid: str) -> np.ndarray:
    vid, depth = (int(p) for p in sid.split(":"))
    return data.volumes[vid].data[depth]


def filter_pseudo_labels(
    cfg: ExperimentConfig,
    qc_model: QualityModel,
    pls: PseudoLabelSet,
    data: PhantomSet,
    threshold: float | None = None,
) -> PseudoLabelSet:
    """Score every entry and accept those with score >= threshold."""
    threshold = cfg.qc_threshold if threshold is None else threshold
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    scores = qc_scores(qc_model, pls, data, cfg.num_classes, cfg.batch)
    entries = [
        PseudoLabelEntry(
            slice_id=e.slice_id,
            mask=e.mask,
            quality_score=float(s),
            accepted=bool(s >= threshold),
        )
        for e, s in zip(pls.entries, scores)
    ]
    out = PseudoLabelSet(
        entries=entries,
        teacher_hash=pls.teacher_hash,
        logits_mode=pls.logits_mode,
        config_hash=cfg.config_hash,
    )
    rate = acceptance_rate(out)
    log.info("filter threshold %.2f -> acceptance rate %.3f (%d/%d)", threshold, rate,
             sum(e.accepted for e in entries), len(entries))
    return out


def acceptance_rate(pls: PseudoLabelSet) -> float:
    if not pls.entries:
        return float("nan")
    return sum(bool(e.accepted) for e in pls.entries) / len(pls.entries)


# ---------------------------------------------------------------------------
# student


def build_combined(
    cfg: ExperimentConfig, data: PhantomSet, split: DatasetSplit, pls: PseudoLabelSet
) -> list[SliceRecord]:
    """Union of labeled slices and (filtered or all) pseudo-labeled slices."""
    combined = collect_slices(
        data.volumes, data.masks, split.labeled, source="labeled", skip_empty=cfg.skip_empty_slices
    )
    if cfg.use_qc and any(e.accepted is None for e in pls.entries):
        raise ValueError("pseudo-labels are unscored; run the quality filter first")
    for e in pls.entries:
        if cfg.use_qc and not e.accepted:
            continue
        combined.append(
            SliceRecord(e.slice_id, _slice_image(data, e.slice_id), e.mask, source="pseudo")
        )
    ids = [r.slice_id for r in combined]
    if len(ids) != len(set(ids)):
        raise ValueError("combined dataset contains duplicate slices")
    return combined


def train_student(
    cfg: ExperimentConfig,
    data: PhantomSet,
    split: DatasetSplit,
    teacher: SegModel,
    pls: PseudoLabelSet,
    eval_each_epoch: bool = False,
) -> tuple[SegModel, list[dict]]:
    """Train the student on the combined dataset under the config's flags.

    use_teacher_ckpt: initialize from the teacher's weights (and train for
    epochs_student_init epochs instead of epochs_student).
    use_kd: add the tempered KL term, with teacher logits recomputed on the
    student's exact augmented crops each step.
    use_qc: restrict pseudo-labels to accepted entries (handled upstream in
    build_combined).
    """
    combined = build_combined(cfg, data, split, pls)
    if not combined:
        raise ValueError("combined dataset is empty; cannot train a student")
    # fresh students share the teacher's init seed: the student is the same
    # architecture and size, and warm-start vs from-scratch then differ only
    # in the weights, not in the draw
    student = SegModel(cfg.channels_base, cfg.depth, cfg.num_classes, seed=cfg.seed_model)
    if cfg.use_teacher_ckpt:
        ckpt = checkpoint_of(teacher)
        if student.arch_hash != ckpt.arch_hash:
            raise ValueError(
                f"student architecture {student.arch_hash} does not match "
                f"teacher checkpoint {ckpt.arch_hash}"
            )
        init_from_checkpoint(student, ckpt)
        epochs = cfg.epochs_student_init
    else:
        epochs = cfg.epochs_student
    opt = Adam(student.parameters(), lr=cfg.lr)
    weights = LossWeights(cfg.alpha)
    curve = []
    step = 0
    for epoch in range(epochs):
        losses = []
        batches = slice_batches(
            combined, cfg.crop, cfg.batch, _epoch_seed(cfg.seed_train, 2, epoch), augment=True
        )
        for images, masks, _ids in batches:
            x = Tensor(images)
            logits = student.forward(x)
            seg = cross_entropy(logits, masks)
            if cfg.use_kd:
                teacher_logits = teacher.forward(x)  # frozen: no grad tracking
                loss = student_loss(seg, kd_loss(logits, teacher_logits, cfg.tau), weights)
            else:
                loss = seg
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(f"student training diverged: loss not finite at step {step}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(value)
            step += 1
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        if eval_each_epoch:
            entry["val_miou"] = evaluate_model(cfg, student, data, split.validation)["mean_iou"]
        curve.append(entry)
        log.info("student epoch %d/%d loss %.4f", epoch + 1, epochs, entry["loss"])
    return student, curve


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(
    cfg: ExperimentConfig, model: SegModel, data: PhantomSet, vol_ids: list[int]
) -> dict:
    """Full-slice inference and volume-level confusion accumulation."""
    if not vol_ids:
        raise ValueError("evaluation split is empty")
    cm = ConfusionMatrix(cfg.num_classes)
    for vid in vol_ids:
        vol = data.volumes[vid]
        preds = predict_masks(model, [vol.data[d] for d in range(vol.data.shape[0])], cfg.batch)
        cm.accumulate(np.stack(preds), data.masks[vid].labels)
    return metrics_report(cm, cfg.config_hash, cfg.include_background)


# ---------------------------------------------------------------------------
# full runs


@dataclass
class PipelineResult:
    cfg: ExperimentConfig
    data: PhantomSet
    split: DatasetSplit
    teacher: SegModel
    teacher_curve: list[dict]
    teacher_metrics: dict
    pls: PseudoLabelSet | None = None
    qcset: QcDataset | None = None
    qc_model: QualityModel | None = None
    qc_heldout_accuracy: float | None = None
    student: SegModel | None = None
    student_curve: list[dict] | None = None
    student_metrics: dict | None = None


def run_pipeline(cfg: ExperimentConfig, train_student_model: bool = True) -> PipelineResult:
    """Run every stage in memory; the proposed method is all flags on."""
    data = generate_dataset(cfg)
    split = split_for(cfg)
    teacher, teacher_curve = train_teacher(cfg, data, split)
    result = PipelineResult(
        cfg=cfg,
        data=data,
        split=split,
        teacher=teacher,
        teacher_curve=teacher_curve,
        teacher_metrics=evaluate_model(cfg, teacher, data, split.validation),
    )
    if not train_student_model:
        return result
    result.pls = generate_pseudo_labels(cfg, teacher, data, split)
    if cfg.use_qc:
        result.qcset = make_qc_dataset(cfg, teacher, data, split)
        result.qc_model, result.qc_heldout_accuracy, _ = train_quality_classifier(cfg, result.qcset)
        result.pls = filter_pseudo_labels(cfg, result.qc_model, result.pls, data)
    result.student, result.student_curve = train_student(cfg, data, split, teacher, result.pls)
    result.student_metrics = evaluate_model(cfg, result.student, data, split.validation)
    return result


def run_ablation(cfg: ExperimentConfig) -> dict:
    """The six-row component ablation on one seed triple.

    Teacher, pseudo-labels, and QC artifacts are shared across rows; each
    named row toggles exactly its component on top of Pseudo-Labeling.
    """
    data = generate_dataset(cfg)
    split = split_for(cfg)
    teacher, _ = train_teacher(cfg, data, split)
    teacher_metrics = evaluate_model(cfg, teacher, data, split.validation)
    pls = generate_pseudo_labels(cfg, teacher, data, split)
    qcset = make_qc_dataset(cfg, teacher, data, split)
    qc_model, qc_acc, _ = train_quality_classifier(cfg, qcset)
    pls = filter_pseudo_labels(cfg, qc_model, pls, data)

    rows = []
    for name, flags in ABLATION_ROWS:
        if name == "Fully supervised":
            rows.append({"name": name, "mean_iou": teacher_metrics["mean_iou"],
                         "mean_dice": teacher_metrics["mean_dice"]})
            continue
        row_cfg = replace(cfg, **flags)
        student, _ = train_student(row_cfg, data, split, teacher, pls)
        m = evaluate_model(row_cfg, student, data, split.validation)
        rows.append({"name": name, "mean_iou": m["mean_iou"], "mean_dice": m["mean_dice"]})
        log.info("ablation row '%s': mIoU %.4f dice %.4f", name, m["mean_iou"], m["mean_dice"])

    baseline = next(r for r in rows if r["name"] == "Pseudo-Labeling")
    for r in rows:
        if r["name"] in ("Fully supervised", "Pseudo-Labeling"):
            r["delta_iou"] = None
            r["delta_dice"] = None
        else:
            r["delta_iou"] = r["mean_iou"] - baseline["mean_iou"]
            r["delta_dice"] = r["mean_dice"] - baseline["mean_dice"]
    return {
        "stage": "ablate",
        "config_hash": cfg.config_hash,
        "qc_heldout_accuracy": qc_acc,
        "acceptance_rate": acceptance_rate(pls),
        "rows": rows,
    }


def run_label_sweep(cfg: ExperimentConfig, levels: list[int], n_validation: int | None = None) -> dict:
    """Proposed-vs-baseline mIoU/Dice at several labeled-volume budgets.

    A fixed validation count keeps every level comparable (defaults to the
    ratio-derived count of the largest level).
    """
    if n_validation is None:
        n_validation = round(max(levels) / 3)
    rows = []
    for level in sorted(levels):
        level_cfg = replace(
            cfg, n_labeled=level, n_validation=n_validation,
            use_kd=True, use_teacher_ckpt=True, use_qc=True,
        )
        result = run_pipeline(level_cfg)
        rows.append(
            {
                "n_labeled": level,
                "proposed_iou": result.student_metrics["mean_iou"],
                "proposed_dice": result.student_metrics["mean_dice"],
                "baseline_iou": result.teacher_metrics["mean_iou"],
                "baseline_dice": result.teacher_metrics["mean_dice"],
            }
        )
        log.info(
            "sweep n_labeled=%d: proposed %.4f vs baseline %.4f",
            level, rows[-1]["proposed_iou"], rows[-1]["baseline_iou"],
        )
    return {"stage": "label_sweep", "config_hash": cfg.config_hash, "rows": rows}
