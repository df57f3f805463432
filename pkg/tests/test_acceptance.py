"""The ten primary acceptance criteria, one test each.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary under "acceptance criteria". Criteria 7-9 share one default-seed run
of the synthetic end-to-end experiment.
"""

import json
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import record
from ganorcon.backbone import BackboneSpec, backbone_checkpoint, build_backbone, extract_hypercolumns, forward_stages
from ganorcon.cli import main
from ganorcon.contrastive import NegativeQueue, info_nce_loss, negative_cosine, simsiam_loss, symmetric_simsiam_loss
from ganorcon.data import LabelMask, load_remap, remap_labels
from ganorcon.distill import DistillConfig, GeneratorTeacher, StudentSpec, distill_train, generate_pseudo_labels
from ganorcon.evaluation import ShiftProbe, confusion, cross_validate, iou, shift_equivariance_check, weighted_miou
from ganorcon.pipeline import toy_e2e
from ganorcon.projector import ProjectorSpec, ProjectorTrainConfig, Segmenter, build_projector, project, train_projector
from ganorcon.toy import TOY_SCHEMA, render_latent
from oracles import (bilinear_align_corners, central_differences, count_iou, cross_validate_enumeration,
                     info_nce_scalar, max_rel_error, neg_cosine_scalar)
from test_projector import MODEL_A_ROWS, MODEL_B_ROWS, TINY_TABLE

# The published class merges, typed out independently of the shipped JSON tables
FACE19_TO_10 = {0: 0, 1: 1, 2: 2, 3: 3, 4: 3, 5: 3, 6: 4, 7: 4, 8: 5, 9: 5, 10: 6, 11: 6, 12: 6, 13: 7,
                14: 0, 15: 0, 16: 0, 17: 8, 18: 9}
FACE10_TO_8 = {i: i for i in range(8)} | {8: 0, 9: 0}

E2E_BUDGET_S = 15 * 60


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_e2e")
    t = time.perf_counter()
    manifest = toy_e2e(seed=0, profile="default", output_dir=out)
    return manifest, time.perf_counter() - t


def test_criterion_01_loss_oracles():
    t = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(100):
        d, k = int(torch.randint(2, 17, (1,), generator=g)), int(torch.randint(1, 33, (1,), generator=g))
        tau = float(torch.empty(1).uniform_(0.05, 1.0, generator=g))
        q, p = (F.normalize(torch.randn(d, generator=g, dtype=torch.float64), dim=0) for _ in range(2))
        negs = F.normalize(torch.randn(k, d, generator=g, dtype=torch.float64), dim=1)
        want = info_nce_scalar(q.tolist(), p.tolist(), negs.tolist(), tau)
        worst = max(worst, abs(float(info_nce_loss(q, p, negs, tau)) - want) / abs(want))
        h, z = torch.randn(d, generator=g, dtype=torch.float64), torch.randn(d, generator=g, dtype=torch.float64)
        want = neg_cosine_scalar(h.tolist(), z.tolist())
        worst = max(worst, abs(float(simsiam_loss(h, torch.nn.Identity(), z)) - want) / abs(want))
    v = torch.tensor([0.6, 0.8], dtype=torch.float64)
    tagged = (float(info_nce_loss(v, v, NegativeQueue(8, 2, torch.float64))) == 0.0
              and float(negative_cosine(v, v)) == -1.0
              and float(negative_cosine(torch.tensor([3.0, 4.0], dtype=torch.float64),
                                        torch.tensor([1.0, 0.0], dtype=torch.float64))) == -0.6)
    elapsed = time.perf_counter() - t
    ok = worst <= 1e-6 and tagged and elapsed < 1.0
    record(1, ok, f"max rel err {worst:.2e} (<=1e-6), tagged examples exact={tagged}, {elapsed:.2f}s (<1s)")
    assert ok


def test_criterion_02_gradient_checks():
    t = time.perf_counter()
    errs = {}
    g = torch.Generator().manual_seed(1)
    raw = [torch.randn(3, 5, generator=g, dtype=torch.float64, requires_grad=True) for _ in range(3)]
    f = lambda: info_nce_loss(*(F.normalize(r, dim=1) for r in raw), 0.2)
    f().backward()
    errs["infonce"] = max_rel_error([r.grad for r in raw], central_differences(f, raw))

    torch.manual_seed(2)
    pred = torch.nn.Sequential(torch.nn.Linear(5, 7), torch.nn.Tanh(), torch.nn.Linear(7, 5)).double()
    z1, z2 = (torch.randn(3, 5, dtype=torch.float64, requires_grad=True) for _ in range(2))
    t1, t2 = z1.detach().clone(), z2.detach().clone()
    params = [z1, z2, *pred.parameters()]
    symmetric_simsiam_loss(z1, z2, pred).backward()
    f = lambda: 0.5 * (negative_cosine(pred(z1), t2) + negative_cosine(pred(z2), t1))
    errs["stop-gradient"] = max_rel_error([p.grad.clone() for p in params], central_differences(f, params))

    for name, spec in (("mlp-ce", ProjectorSpec("mlp", 3, in_channels=6, mlp_hidden=(8,))),
                       ("conv-ce", ProjectorSpec("conv-a", 3, in_channels=3, layers=TINY_TABLE))):
        model = build_projector(spec, seed=3).double()
        assert sum(p.numel() for p in model.parameters()) <= 1000
        x = torch.randn(2, spec.in_channels, 4, 4, generator=g, dtype=torch.float64)
        y = torch.randint(0, 3, (2, 4, 4), generator=g)
        f = lambda: F.cross_entropy(project(x, model, spec), y)
        f().backward()
        ps = list(model.parameters())
        errs[name] = max_rel_error([p.grad.clone() for p in ps], central_differences(f, ps))
    elapsed = time.perf_counter() - t
    ok = max(errs.values()) <= 1e-3 and elapsed < 60
    record(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f" (<=1e-3), {elapsed:.1f}s (<60s)")
    assert ok


def test_criterion_03_hypercolumn_invariants():
    spec = BackboneSpec()
    ck = backbone_checkpoint(build_backbone(spec, seed=0), spec)
    x = torch.rand(1, 3, 64, 64)
    std = forward_stages(x, spec, ck)
    s1 = forward_stages(x, spec.with_stride("stride1-first-conv"), ck)
    channels = extract_hypercolumns(std, 64).shape[1]
    doubled = all(s1[k].shape[-2:] == tuple(2 * v for v in std[k].shape[-2:]) for k in std)
    out = extract_hypercolumns({"s": torch.tensor([[0.0, 1.0], [2.0, 3.0]], dtype=torch.float64).view(1, 1, 2, 2)}, 4)
    oracle = torch.tensor(bilinear_align_corners([[0.0, 1.0], [2.0, 3.0]], 4, 4), dtype=torch.float64)
    err = float((out[0, 0] - oracle).abs().max())
    ok = channels == 3840 and doubled and err <= 1e-6
    record(3, ok, f"channels={channels} (3840), bilinear 2x2->4x4 err {err:.1e} (<=1e-6), stride1 doubles={doubled}")
    assert ok


def test_criterion_04_remap_goldens():
    r19, r10 = load_remap("face19_to_face10"), load_remap("face10_to_face8")
    got19 = {s: int(remap_labels(LabelMask(np.array([[s]]), "face19"), r19).values[0, 0]) for s in range(19)}
    got10 = {s: int(remap_labels(LabelMask(np.array([[s]]), "face10"), r10).values[0, 0]) for s in range(10)}
    direct = r19.then(r10)
    composite = all(
        int(remap_labels(LabelMask(np.array([[s]]), "face19"), direct).values[0, 0])
        == FACE10_TO_8[FACE19_TO_10[s]] for s in range(19))
    ok = got19 == FACE19_TO_10 and got10 == FACE10_TO_8 and composite
    record(4, ok, f"19->10 exact={got19 == FACE19_TO_10}, 10->8 exact={got10 == FACE10_TO_8}, "
                  f"composite={composite} (all 19+10 single-pixel masks)")
    assert ok


def test_criterion_05_metric_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        c = int(rng.integers(2, 6))
        h, w = rng.integers(1, 8, 2)
        gt = rng.integers(0, c, (h, w))
        pred = np.where(rng.random((h, w)) < 0.5, gt, rng.integers(0, c, (h, w)))
        _, miou, weighted = count_iou(pred.tolist(), gt.tolist(), c)
        r = iou(pred, gt, c)
        worst = max(worst, abs(r.miou - float(miou)), abs(weighted_miou(pred, gt, c) - float(weighted)))
    ex_gt, ex_pred = np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]])
    worked = (abs(iou(ex_pred, ex_gt, 2).miou - 7 / 12) < 1e-12
              and abs(weighted_miou(ex_pred, ex_gt, 2) - 7 / 12) < 1e-12)
    cv_ok = True
    for seed in range(5):
        g = np.random.default_rng(seed)
        gts = g.integers(0, 3, (10, 4, 4))
        preds = np.where(g.random((3, 10, 4, 4)) < g.random((3, 10, 1, 1)), gts[None],
                         g.integers(0, 3, (3, 10, 4, 4)))
        confs = np.stack([[confusion(p, t, 3) for p, t in zip(ps, gts)] for ps in preds])
        for metric in ("miou", "weighted"):
            plan = cross_validate(confs, metric, seed=seed)
            want, chosen = cross_validate_enumeration(preds.tolist(), gts.tolist(), 3, plan.folds, metric)
            cv_ok &= [r.chosen for r in plan.results] == chosen and abs(plan.score - float(want)) <= 1e-12
    ok = worst <= 1e-12 and worked and cv_ok
    record(5, ok, f"1000 masks max err {worst:.1e} (<=1e-12), 7/12 example={worked}, CV enumeration={cv_ok}")
    assert ok


def test_criterion_06_architecture_contracts(tiny_backbone_ckpt, toy_splits):
    spec = ProjectorSpec("mlp", 5, in_channels=12, mlp_hidden=(16, 8))
    mlp = build_projector(spec).double()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 12, 6, 7, generator=g, dtype=torch.float64)
    perm = torch.randperm(42, generator=g)
    with torch.no_grad():
        equivariant = torch.equal(mlp(x).flatten(2)[..., perm], mlp(x.flatten(2)[..., perm].view(1, 12, 6, 7)).flatten(2))

    traces_ok = True
    for head, table, size in (("conv-a", MODEL_A_ROWS, 32), ("conv-b", MODEL_B_ROWS, 16)):
        trace = []
        with torch.no_grad():
            build_projector(ProjectorSpec(head, 34)).eval()(torch.zeros(1, 3840, size, size), trace=trace)
        want = [(n, (34 if c == "C" else c, size // d, size // d)) for n, d, c in table]
        traces_ok &= trace == want

    before = {k: v.clone() for k, v in tiny_backbone_ckpt.state.items()}
    bspec = BackboneSpec("resnet_tiny", stride_mode="stride1-first-conv")
    pspec = ProjectorSpec("conv-b", 4, in_channels=bspec.channels, width=0.05)
    seg, _ = train_projector(toy_splits["fewshot"], tiny_backbone_ckpt, pspec,
                             ProjectorTrainConfig("conv-b", epochs=1), 0, bspec)
    teacher = Segmenter.from_checkpoint(seg)
    pseudo = generate_pseudo_labels(teacher, toy_splits["unlabeled"][:4], TOY_SCHEMA)
    distill_train(pseudo, StudentSpec(4, width=8), DistillConfig(epochs=1, batch_size=2))
    live = teacher.extractor.net.state_dict()
    frozen = all(torch.equal(tiny_backbone_ckpt.state[k], v) and torch.equal(seg.children["backbone"].state[k], v)
                 and torch.equal(live[k], v) for k, v in before.items())
    ok = equivariant and traces_ok and frozen
    record(6, ok, f"MLP permutation-equivariant={equivariant}, CONV-A/B traces match tables={traces_ok}, "
                  f"backbone bit-identical={frozen}")
    assert ok


@pytest.mark.slow
def test_criterion_07_distillation_fidelity(e2e):
    manifest, _ = e2e
    agree = manifest["metrics"]["conv_distill"]["teacher_agreement_test"]
    teacher = GeneratorTeacher(lambda z: render_latent(int(z), 32), TOY_SCHEMA.num_classes)
    pseudo = generate_pseudo_labels(teacher, range(4), TOY_SCHEMA)
    ck, _ = distill_train(pseudo, StudentSpec(4, width=8), DistillConfig(epochs=1, batch_size=2))
    generator_path = ck.kind == "student" and len(pseudo) == 4
    ok = agree >= 0.95 and generator_path
    record(7, ok, f"student-teacher agreement on held-out toy images {agree:.4f} (>=0.95), "
                  f"generator-teacher path ran={generator_path}")
    assert ok


@pytest.mark.slow
def test_criterion_08_robustness_harness(e2e):
    rng = np.random.default_rng(0)
    teacher = lambda img: (img[..., 0] > 0.5).astype(int) + (img[..., 1] > 0.5)
    exact = []
    for dx, dy in [(0, 0), (8, 8), (3, -5), (-7, 2), (15, -15)]:
        img = rng.random((32, 32, 3))
        exact.append(shift_equivariance_check(teacher, img, ShiftProbe(dx, dy)))
    zero = shift_equivariance_check(lambda im: (im.sum(-1) * 3).astype(int) % 4, rng.random((16, 16, 3)),
                                    ShiftProbe(0, 0))
    trained = e2e[0]["metrics"]["shift_agreement"]
    ok = all(v == 1.0 for v in exact) and zero == 1.0
    summary = "; ".join(f"{m} aligned {v['aligned']:.3f} unaligned {v['unaligned']:.3f}" for m, v in trained.items())
    record(8, ok, f"dummy teacher exactly 1.0={all(v == 1.0 for v in exact)}, zero shift 1.0={zero == 1.0}; "
                  f"reported: {summary}")
    assert ok


@pytest.mark.slow
def test_criterion_09_end_to_end_surrogate(e2e):
    manifest, elapsed = e2e
    m = manifest["metrics"]
    conv, mlp = m["conv"]["miou"], m["mlp"]["miou"]
    ok = conv >= 0.85 and elapsed <= E2E_BUDGET_S
    record(9, ok, f"CONV CV mIoU {conv:.4f} (>=0.85), runtime {elapsed / 60:.1f} min (<=15); "
                  f"soft check CONV>=MLP: {conv:.4f} vs {mlp:.4f} -> {conv >= mlp}")
    assert ok


def _run_cli(*args):
    assert main([str(a) for a in args]) == 0


def test_criterion_10_reproducibility(tmp_path, capsys):
    # the full experiment at the quick profile, then re-run from its own manifest
    _run_cli("toy-e2e", "--profile", "quick", "--seed", 7, "--output-dir", tmp_path / "first")
    _run_cli("toy-e2e", "--config", tmp_path / "first" / "manifest.json", "--output-dir", tmp_path / "again")
    # and a single stage re-run from its manifest
    _run_cli("train-projector", "--backbone", tmp_path / "first" / "backbone.pt", "--fewshot",
             tmp_path / "first" / "data" / "fewshot", "--classes", 4, "--resolution", 64, "--epochs", 2,
             "--head", "mlp", "--seed", 3, "--output-dir", tmp_path / "stage")
    _run_cli("train-projector", "--config", tmp_path / "stage" / "manifest.json", "--output-dir", tmp_path / "stage2")
    capsys.readouterr()
    load = lambda d: json.loads((tmp_path / d / "manifest.json").read_text())["metrics"]
    same_e2e = json.dumps(load("first"), sort_keys=True) == json.dumps(load("again"), sort_keys=True)
    same_stage = json.dumps(load("stage"), sort_keys=True) == json.dumps(load("stage2"), sort_keys=True)
    ok = same_e2e and same_stage
    record(10, ok, f"toy-e2e metrics bit-identical on manifest re-run={same_e2e}, "
                   f"train-projector re-run identical={same_stage}")
    assert ok
