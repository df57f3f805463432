import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("ci", max_examples=30, deadline=None)
settings.register_profile("fast", max_examples=5, deadline=None)
settings.load_profile("ci")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_backbone_ckpt():
    from ganorcon.backbone import BackboneSpec, backbone_checkpoint, build_backbone
    spec = BackboneSpec("resnet_tiny")
    return backbone_checkpoint(build_backbone(spec, seed=0), spec)


@pytest.fixture(scope="session")
def toy_splits():
    from ganorcon.toy import make_toy_splits
    return make_toy_splits(seed=3, n_unlabeled=24, n_fewshot=4, n_test=10, size=32)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
