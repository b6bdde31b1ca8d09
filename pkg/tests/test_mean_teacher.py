import numpy as np
import pytest
import torch
from torch import nn

from frcseg.config import desk_config
from frcseg.errors import ConfigError
from frcseg.mean_teacher import EmaTeacher
from frcseg.model import SegModel
from frcseg.trainer import build_optimizer


def tiny_model(seed=0) -> nn.Module:
    torch.manual_seed(seed)
    return nn.Sequential(nn.Linear(4, 8), nn.GELU(), nn.Linear(8, 2))


class TestInit:
    def test_teacher_starts_as_exact_copy(self):
        student = tiny_model()
        teacher = EmaTeacher(student)
        for (ns, ps), (nt, pt) in zip(student.named_parameters(),
                                      teacher.model.named_parameters()):
            assert ns == nt and torch.equal(ps, pt)

    def test_teacher_params_never_require_grad(self):
        teacher = EmaTeacher(tiny_model())
        assert all(not p.requires_grad for p in teacher.model.parameters())

    def test_forward_matches_student_at_init(self):
        cfg = desk_config()
        torch.manual_seed(1)
        student = SegModel(cfg.backbone, cfg.region, cfg.fem)
        teacher = EmaTeacher(student)
        x = torch.rand(1, 3, 64, 64)
        student.eval()
        with torch.no_grad():
            out_s = student(x)
        out_t = teacher.forward(x)
        assert torch.allclose(out_s.probs, out_t.probs, atol=1e-6)

    def test_invalid_decay_rejected(self):
        with pytest.raises(ConfigError):
            EmaTeacher(tiny_model(), ema_decay=1.0)
        with pytest.raises(ConfigError):
            EmaTeacher(tiny_model(), ema_decay=-0.1)


class TestUpdate:
    def test_exact_arithmetic_with_override(self):
        # teacher 0, student 1, alpha 0.99 -> teacher becomes 0.01
        student = nn.Linear(2, 2, bias=False)
        with torch.no_grad():
            student.weight.fill_(0.0)
        teacher = EmaTeacher(student)
        with torch.no_grad():
            student.weight.fill_(1.0)
        teacher.update(student, alpha_override=0.99)
        expected = torch.full_like(student.weight, 0.01)
        assert torch.allclose(teacher.model.weight, expected, atol=1e-7)

    def test_alpha_zero_copies_student(self):
        student = tiny_model(2)
        teacher = EmaTeacher(student)
        with torch.no_grad():
            for p in student.parameters():
                p.add_(torch.randn_like(p))
        teacher.update(student, alpha_override=0.0)
        for ps, pt in zip(student.parameters(), teacher.model.parameters()):
            assert torch.allclose(ps, pt, atol=1e-7)

    def test_warmup_follows_min_rule(self):
        student = tiny_model(3)
        teacher = EmaTeacher(student, ema_decay=0.99)
        applied = [teacher.update(student) for _ in range(5)]
        expected = [min(0.99, (k + 1) / (k + 10)) for k in range(5)]
        assert applied == pytest.approx(expected)

    def test_warmup_caps_at_decay(self):
        student = tiny_model(4)
        teacher = EmaTeacher(student, ema_decay=0.5)
        teacher.step = 1000
        assert teacher.update(student) == pytest.approx(0.5)

    def test_contraction_toward_fixed_student(self):
        # with a frozen student the parameter gap shrinks by alpha each step
        student = tiny_model(5)
        teacher = EmaTeacher(student, ema_decay=0.99)
        with torch.no_grad():
            for p in teacher.model.parameters():
                p.add_(1.0)
        gap0 = sum(float((pt - ps).detach().pow(2).sum()) for ps, pt in
                   zip(student.parameters(), teacher.model.parameters())) ** 0.5
        n = 100
        for _ in range(n):
            teacher.update(student, alpha_override=0.99)
        gap = sum(float((pt - ps).detach().pow(2).sum()) for ps, pt in
                  zip(student.parameters(), teacher.model.parameters())) ** 0.5
        assert gap == pytest.approx(gap0 * 0.99 ** n, rel=1e-4)

    def test_bad_override_rejected(self):
        teacher = EmaTeacher(tiny_model())
        with pytest.raises(ConfigError):
            teacher.update(tiny_model(), alpha_override=1.5)


class TestIsolation:
    def test_teacher_parameters_not_in_optimizer(self):
        cfg = desk_config()
        student = SegModel(cfg.backbone, cfg.region, cfg.fem)
        teacher = EmaTeacher(student)
        optimizer = build_optimizer(student, cfg)
        optimizer_ids = {id(p) for group in optimizer.param_groups
                         for p in group["params"]}
        teacher_ids = {id(p) for p in teacher.model.parameters()}
        assert not optimizer_ids & teacher_ids

    def test_forward_builds_no_graph(self):
        cfg = desk_config()
        student = SegModel(cfg.backbone, cfg.region, cfg.fem)
        teacher = EmaTeacher(student)
        out = teacher.forward(torch.rand(1, 3, 64, 64))
        assert not out.probs.requires_grad
        assert out.freq.enhanced.grad_fn is None

    def test_state_dict_round_trip(self):
        student = tiny_model(6)
        teacher = EmaTeacher(student, ema_decay=0.9)
        teacher.update(student)
        state = teacher.state_dict()
        other = EmaTeacher(tiny_model(7), ema_decay=0.9)
        other.load_state_dict(state)
        assert other.step == 1
        for pa, pb in zip(teacher.model.parameters(), other.model.parameters()):
            assert torch.equal(pa, pb)
