import numpy as np
import pytest

from distillseg.models import (
    QualityModel,
    SegModel,
    checkpoint_bytes,
    checkpoint_of,
    init_from_checkpoint,
    load_checkpoint,
    parameter_checksum,
    save_checkpoint,
)
from distillseg.optim import Adam
from distillseg.tensor import Tensor, backward, sum_all


def test_seg_model_shape_contract():
    model = SegModel(channels_base=8, depth=2, num_classes=4, seed=0)
    out = model.forward(Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))
    assert out.shape == (1, 4, 32, 32)


def test_seg_model_deterministic_from_seed():
    a = SegModel(8, 2, 4, seed=123)
    b = SegModel(8, 2, 4, seed=123)
    assert parameter_checksum(a) == parameter_checksum(b)
    c = SegModel(8, 2, 4, seed=124)
    assert parameter_checksum(a) != parameter_checksum(c)


def test_divisibility_contract():
    ok = SegModel(8, 3, 4, seed=0)
    ok.forward(Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))  # 32 % 8 == 0
    bad = SegModel(8, 6, 4, seed=0)
    with pytest.raises(ValueError, match="divisible by 64"):
        bad.forward(Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))


def test_teacher_student_same_parameter_sets():
    teacher = SegModel(8, 2, 4, seed=1)
    student = SegModel(8, 2, 4, seed=99)
    assert list(teacher.params) == list(student.params)
    for name in teacher.params:
        assert teacher.params[name].shape == student.params[name].shape
    assert teacher.arch_hash == student.arch_hash


def test_quality_model_contract():
    model = QualityModel(num_classes=4, seed=0)
    out = model.forward(Tensor(np.zeros((2, 5, 32, 32), dtype=np.float32)))
    assert out.shape == (2, 1)
    assert np.isfinite(out.data).all()
    with pytest.raises(ValueError, match=r"\[N,5,H,W\]"):
        model.forward(Tensor(np.zeros((2, 4, 32, 32), dtype=np.float32)))


def test_quality_model_deterministic():
    assert parameter_checksum(QualityModel(4, seed=7)) == parameter_checksum(
        QualityModel(4, seed=7)
    )


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = SegModel(8, 2, 4, seed=5)
        path = tmp_path / "m.ckpt"
        save_checkpoint(checkpoint_of(model, step=3), path)
        loaded = load_checkpoint(path)
        assert loaded.step == 3 and loaded.seed == 5
        assert loaded.arch_hash == model.arch_hash
        for name, p in model.params.items():
            assert np.array_equal(loaded.tensors[name], p.data)
        # byte-level determinism of serialization
        assert checkpoint_bytes(checkpoint_of(model, step=3)) == path.read_bytes()

    def test_weight_copy_gives_identical_logits(self, tmp_path):
        teacher = SegModel(8, 2, 4, seed=5)
        path = tmp_path / "t.ckpt"
        save_checkpoint(checkpoint_of(teacher), path)
        student = SegModel(8, 2, 4, seed=99)
        init_from_checkpoint(student, load_checkpoint(path))
        x = Tensor(
            np.random.Generator(np.random.Philox(0)).standard_normal(
                (2, 1, 16, 16), dtype=np.float32
            )
        )
        assert np.array_equal(teacher.forward(x).data, student.forward(x).data)

    def test_adam_step_after_load_diverges(self, tmp_path):
        teacher = SegModel(8, 2, 4, seed=5)
        path = tmp_path / "t.ckpt"
        save_checkpoint(checkpoint_of(teacher), path)
        student = SegModel(8, 2, 4, seed=99)
        init_from_checkpoint(student, load_checkpoint(path))
        opt = Adam(student.parameters(), lr=1e-3)
        loss = sum_all(
            student.forward(Tensor(np.ones((1, 1, 16, 16), dtype=np.float32)))
        )
        backward(loss)
        opt.step()
        assert parameter_checksum(student) != parameter_checksum(teacher)

    def test_arch_hash_mismatch_names_both(self, tmp_path):
        small = SegModel(8, 2, 4, seed=0)
        big = SegModel(16, 2, 4, seed=0)
        path = tmp_path / "s.ckpt"
        save_checkpoint(checkpoint_of(small), path)
        with pytest.raises(ValueError) as err:
            init_from_checkpoint(big, load_checkpoint(path))
        assert small.arch_hash in str(err.value) and big.arch_hash in str(err.value)

    def test_tampered_manifest_shape_rejected(self, tmp_path):
        model = SegModel(8, 2, 4, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(checkpoint_of(model), path)
        raw = path.read_bytes()
        tampered = raw.replace(b'"shape":[8,1,3,3]', b'"shape":[8,1,3,4]', 1)
        assert tampered != raw
        path.write_bytes(tampered)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_truncated_blob_rejected(self, tmp_path):
        model = SegModel(8, 2, 4, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(checkpoint_of(model), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(ValueError, match="blob"):
            load_checkpoint(path)

    def test_missing_parameter_rejected(self, tmp_path):
        model = SegModel(8, 2, 4, seed=0)
        ckpt = checkpoint_of(model)
        dropped = dict(ckpt.tensors)
        dropped.pop("head.bias")
        ckpt.tensors = dropped
        path = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, path)
        with pytest.raises(ValueError, match="missing parameters"):
            init_from_checkpoint(SegModel(8, 2, 4, seed=1), load_checkpoint(path))


def test_frozen_model_forward_builds_no_graph():
    model = SegModel(8, 2, 4, seed=0)
    model.freeze()
    out = model.forward(Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32)))
    assert not out.requires_grad
