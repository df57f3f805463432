import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from ganorcon.contrastive import (ContrastiveConfig, MomentumPair, NegativeQueue, canonical_method, info_nce_loss,
                                  momentum_update, negative_cosine, pretrain, simsiam_loss, symmetric_simsiam_loss)
from ganorcon.errors import ConfigError, ContractViolation, NormalizationError
from ganorcon.toy import make_toy_splits
from oracles import central_differences, info_nce_scalar, max_rel_error, neg_cosine_scalar


def unit(*shape, gen):
    return F.normalize(torch.randn(*shape, generator=gen, dtype=torch.float64), dim=-1)


class TestLossOracles:
    def test_infonce_matches_scalar_oracle(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(100):
            d, k = int(torch.randint(2, 9, (1,), generator=g)), int(torch.randint(0, 12, (1,), generator=g))
            tau = float(torch.empty(1).uniform_(0.05, 1.0, generator=g))
            q, p, negs = unit(d, gen=g), unit(d, gen=g), unit(k, d, gen=g)
            want = info_nce_scalar(q.tolist(), p.tolist(), negs.tolist(), tau)
            got = float(info_nce_loss(q, p, negs, tau))
            assert abs(got - want) <= 1e-6 * max(abs(want), 1e-12) or abs(got - want) < 1e-15

    def test_simsiam_matches_scalar_oracle(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(100):
            d = int(torch.randint(2, 9, (1,), generator=g))
            h, t = torch.randn(d, generator=g, dtype=torch.float64), torch.randn(d, generator=g, dtype=torch.float64)
            want = neg_cosine_scalar(h.tolist(), t.tolist())
            got = float(simsiam_loss(h, nn.Identity(), t))
            assert abs(got - want) <= 1e-6 * abs(want)

    def test_tagged_examples_exact(self):
        v = torch.tensor([0.6, 0.8], dtype=torch.float64)
        assert float(info_nce_loss(v, v, NegativeQueue(4, 2, torch.float64))) == 0.0
        assert float(info_nce_loss(v, v, torch.zeros(0, 2, dtype=torch.float64))) == 0.0
        assert float(negative_cosine(v, v)) == -1.0
        assert float(negative_cosine(torch.tensor([3.0, 4.0]), torch.tensor([1.0, 0.0]))) == pytest.approx(-0.6, abs=1e-7)
        assert float(negative_cosine(torch.tensor([3.0, 4.0], dtype=torch.float64),
                                     torch.tensor([1.0, 0.0], dtype=torch.float64))) == -0.6

    def test_runtime(self):
        g = torch.Generator().manual_seed(2)
        t = time.perf_counter()
        for _ in range(100):
            q, p, negs = unit(128, gen=g), unit(128, gen=g), unit(256, 128, gen=g)
            info_nce_loss(q, p, negs)
            simsiam_loss(q, nn.Identity(), p)
        assert time.perf_counter() - t < 1.0

    def test_batched_is_mean_of_rows(self):
        g = torch.Generator().manual_seed(3)
        q, p, negs = unit(5, 4, gen=g), unit(5, 4, gen=g), unit(7, 4, gen=g)
        rows = [float(info_nce_loss(q[i], p[i], negs)) for i in range(5)]
        assert float(info_nce_loss(q, p, negs)) == pytest.approx(np.mean(rows), rel=1e-12)

    def test_contracts(self):
        with pytest.raises(ContractViolation):
            info_nce_loss(torch.ones(3), torch.ones(3) / 3 ** 0.5, None)
        with pytest.raises(ContractViolation):
            info_nce_loss(torch.tensor([1.0, 0]), torch.tensor([1.0, 0]), None, tau=0.0)
        with pytest.raises(NormalizationError):
            negative_cosine(torch.zeros(3), torch.ones(3))

    def test_stop_gradient(self):
        h = torch.randn(4, 3, requires_grad=True)
        t = torch.randn(4, 3, requires_grad=True)
        negative_cosine(h, t).backward()
        assert h.grad is not None and t.grad is None

    def test_symmetric(self):
        g = torch.Generator().manual_seed(4)
        z1, z2 = torch.randn(3, 5, generator=g), torch.randn(3, 5, generator=g)
        pred = nn.Linear(5, 5)
        with torch.no_grad():
            want = 0.5 * (float(negative_cosine(pred(z1), z2)) + float(negative_cosine(pred(z2), z1)))
            got = float(symmetric_simsiam_loss(z1, z2, pred))
        assert got == pytest.approx(want, rel=1e-6)


class TestGradients:
    def test_infonce_grad(self):
        g = torch.Generator().manual_seed(5)
        raw = [torch.randn(3, 4, generator=g, dtype=torch.float64) for _ in range(3)]
        negs = torch.randn(6, 4, generator=g, dtype=torch.float64)
        f = lambda: info_nce_loss(F.normalize(raw[0], dim=1), F.normalize(raw[1], dim=1),
                                  F.normalize(negs, dim=1), 0.2)
        for r in raw[:2]:
            r.requires_grad_(True)
        negs.requires_grad_(True)
        f().backward()
        ana = [raw[0].grad, raw[1].grad, negs.grad]
        num = central_differences(f, [raw[0], raw[1], negs])
        assert max_rel_error(ana, num) <= 1e-3

    def test_simsiam_grad(self):
        torch.manual_seed(6)
        pred = nn.Sequential(nn.Linear(4, 6), nn.Tanh(), nn.Linear(6, 4)).double()
        z1 = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        z2 = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        params = [z1, z2, *pred.parameters()]
        # stop-gradient: targets are constants frozen at the unperturbed inputs
        t1, t2 = z1.detach().clone(), z2.detach().clone()

        def f():
            return 0.5 * (-(F.normalize(pred(z1), dim=1) * F.normalize(t2, dim=1)).sum(1).mean()
                          - (F.normalize(pred(z2), dim=1) * F.normalize(t1, dim=1)).sum(1).mean())
        symmetric_simsiam_loss(z1, z2, pred).backward()
        ana = [p.grad.clone() for p in params]
        num = central_differences(f, params)
        assert max_rel_error(ana, num) <= 1e-3


class TestQueue:
    def test_fifo_and_wraparound(self):
        q = NegativeQueue(3, 2)
        e = torch.eye(2)
        vecs = [e[0], e[1], -e[0], -e[1]]
        q.enqueue(torch.stack(vecs[:2]))
        assert len(q) == 2 and torch.equal(q.entries(), torch.stack(vecs[:2]))
        q.enqueue(torch.stack(vecs[2:]))
        assert len(q) == 3 and torch.equal(q.entries(), torch.stack(vecs[1:]))

    def test_errors(self):
        with pytest.raises(ConfigError):
            NegativeQueue(2, 2).enqueue(torch.eye(2).repeat(2, 1))
        with pytest.raises(ContractViolation):
            NegativeQueue(4, 2).enqueue(torch.ones(1, 2))


class TestMomentum:
    def test_update_rule(self):
        a, b = nn.Linear(3, 2), nn.Linear(3, 2)
        before = [p.clone() for p in b.parameters()]
        momentum_update(MomentumPair(a, b, 0.9))
        for k0, k1, q in zip(before, b.parameters(), a.parameters()):
            torch.testing.assert_close(k1, 0.9 * k0 + 0.1 * q)

    def test_m_zero_copies(self):
        a, b = nn.Linear(3, 2), nn.Linear(3, 2)
        momentum_update(MomentumPair(a, b, 0.0))
        assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            MomentumPair(nn.Linear(3, 2), nn.Linear(2, 2))


class TestConfig:
    def test_defaults(self):
        moco = ContrastiveConfig("moco", 512)
        assert (moco.lr, moco.epochs, moco.batch_size, moco.temperature) == (0.03, 800, 32, 0.2)
        ss = ContrastiveConfig("simsiam", 256)
        assert (ss.lr, ss.epochs, ss.batch_size) == (0.05, 400, 128)
        assert moco.weight_decay == 1e-4 and moco.sgd_momentum == 0.9

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            canonical_method("byol")


@pytest.fixture(scope="module")
def pool():
    return make_toy_splits(seed=0, n_unlabeled=8, n_fewshot=1, n_test=1, size=32)["unlabeled"]


@pytest.mark.parametrize("method", ["moco", "simsiam"])
def test_pretrain_smoke_and_determinism(pool, method, tmp_path):
    cfg = ContrastiveConfig(method, 32, epochs=1, batch_size=4, architecture="resnet_tiny", queue_size=16,
                            embed_dim=8, proj_dim=16, pred_hidden=8)
    a, ha = pretrain(pool, cfg, seed=3, loss_log=tmp_path / "log.jsonl")
    b, hb = pretrain(pool, cfg, seed=3)
    assert len(ha) == 2 and all(np.isfinite(h["loss"]) for h in ha)
    assert [h["loss"] for h in ha] == [h["loss"] for h in hb]
    assert all(torch.equal(a.state[k], b.state[k]) for k in a.state)
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 2
    assert a.kind == "backbone"


def test_pretrain_max_steps(pool):
    cfg = ContrastiveConfig("moco", 32, epochs=5, batch_size=4, architecture="resnet_tiny", queue_size=16,
                            embed_dim=8)
    _, h = pretrain(pool, cfg, seed=0, max_steps=3)
    assert len(h) == 3
    assert h[0]["lr"] > h[-1]["lr"]
