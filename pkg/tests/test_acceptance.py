"""Acceptance criteria 1-7; each test prints one PASS/FAIL line.

The lines bypass output capture, so a plain ``pytest tests/test_acceptance.py``
shows them. Criterion 8 needs real CLIP weights and image data and is skipped.
"""

import time

import numpy as np
import pytest
import torch

from gapadapt.bank import create_bank, fuse, sample_fusion_weight
from gapadapt.bench import build_synthetic, run_benchmark
from gapadapt.core_math import check_mi_kl_bound, check_simplex
from gapadapt.engine import AdaptationConfig
from gapadapt.objectives import cac_loss, pc_loss, rc_loss_from_preds, stage1_loss
from gapadapt.uncertainty import CurriculumSchedule, detect_gap_region, threshold

from conftest import random_simplex, relative_error

def report(capsys, number, name, passed, detail):
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {name} ({detail})"
    with capsys.disabled():
        print("\n" + line)
    return passed


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    config = AdaptationConfig()
    t0 = time.time()
    setup = build_synthetic(seed=config.seed)
    rep = run_benchmark(tmp_path_factory.mktemp("bench"), config, setup, compare_metrics=False)
    rep["runtime"] = time.time() - t0
    return rep


class TestAcceptance:
    def test_1_mi_kl_bound(self, capsys):
        rng = np.random.default_rng(0)
        t0 = time.time()
        worst = -np.inf
        for trial in range(1000):
            c, b = int(rng.integers(2, 11)), int(rng.integers(1, 65))
            sharp = [0.05, 0.3, 1.0, 5.0][trial % 4]
            p, q = random_simplex(rng, b, c, sharp), random_simplex(rng, b, c, sharp)
            lhs, rhs, _ = check_mi_kl_bound(p, q)
            worst = max(worst, lhs - rhs)
        elapsed = time.time() - t0
        ok = worst <= 1e-9 and elapsed < 10
        assert report(capsys, 1, "-MI <= mean KL on 1000 batches", ok,
                      f"max(-MI - KL)={worst:.3e}, {elapsed:.2f}s")

    def test_2_gradient_oracles(self, capsys):
        rng = np.random.default_rng(1)
        t0 = time.time()
        errs = {"cac": [], "pc": [], "rc": [], "stage1": []}
        for _ in range(50):
            b, c = int(rng.integers(1, 9)), int(rng.integers(3, 7))
            n = int(rng.integers(1, c))
            top = torch.tensor(np.stack([rng.permutation(c)[:n] for _ in range(b)]))
            q = random_simplex(rng, b, c)
            rho = torch.tensor(rng.uniform(size=b))
            x = torch.tensor(rng.normal(scale=0.7, size=(b, c)))
            errs["cac"].append(relative_error(lambda z: cac_loss(z, top, iota=0.1), x))
            errs["pc"].append(relative_error(lambda z: pc_loss(z.softmax(1), q, 1.0), x))
            errs["rc"].append(relative_error(lambda z: rc_loss_from_preds(z.softmax(1), rho), x))
            errs["stage1"].append(relative_error(lambda z: stage1_loss(q, z.softmax(1)), x))
        elapsed = time.time() - t0
        worst = {k: max(v) for k, v in errs.items()}
        ok = all(w < 1e-4 for w in worst.values()) and elapsed < 60
        detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s"
        assert report(capsys, 2, "autograd vs central differences, 50 instances each", ok, detail)

    def test_3_curriculum(self, capsys):
        sched = CurriculumSchedule(0.01, 1.01)
        exact = all(threshold(k, sched) == 0.01 * 1.01**k for k in range(51))
        rng = np.random.default_rng(2)
        monotone = True
        for _ in range(10_000):
            u = torch.tensor(rng.normal(scale=0.5, size=int(rng.integers(1, 40))))
            ms = np.sort(np.concatenate([rng.normal(scale=0.5, size=6), u.numpy()[:3]]))
            sizes = [detect_gap_region(u, float(m)).numel() for m in ms]
            monotone &= all(a >= b for a, b in zip(sizes, sizes[1:]))
        ok = exact and monotone
        assert report(capsys, 3, "threshold bit-stable, gap size non-increasing in m", ok,
                      f"bit-stable={exact}, monotone={monotone}")

    def test_4_fusion_and_bank(self, capsys):
        rng = np.random.default_rng(3)
        n_triples, c = 100_000, 7
        p1 = random_simplex(rng, n_triples, c, 0.5)
        p2 = random_simplex(rng, n_triples, c, 0.5)
        tau = torch.tensor(sample_fusion_weight(10.0, rng, size=n_triples))
        fused_ok = True
        try:
            check_simplex(fuse(p1, p2, tau))
        except ValueError:
            fused_ok = False

        n = 30
        t0 = random_simplex(rng, n, 4).float().double()
        v0 = random_simplex(rng, n, 4).float().double()
        bank = create_bank(n, 4, t0, v0)
        oracle_t, oracle_v = [r.clone() for r in t0], [r.clone() for r in v0]
        for _ in range(500):
            if rng.random() < 0.8:
                idx = rng.integers(0, n, size=int(rng.integers(0, 8)))
                rows = random_simplex(rng, len(idx), 4).float().double()
                bank.update_target_rows(torch.tensor(idx, dtype=torch.long), rows)
                for i, r in zip(idx, rows):
                    oracle_t[i] = r.clone()
            else:
                rows = random_simplex(rng, n, 4).float().double()
                bank.refresh_vil_all(rows)
                oracle_v = [r.clone() for r in rows]
        bank_ok = torch.equal(bank.target_preds, torch.stack(oracle_t)) and torch.equal(
            bank.vil_preds, torch.stack(oracle_v)
        )
        ok = fused_ok and bank_ok
        assert report(capsys, 4, "fused labels on simplex, bank matches sequential oracle", ok,
                      f"1e5 triples={fused_ok}, interleaving={bank_ok}")

    def test_5_end_to_end(self, bench, capsys):
        gain = bench["improvement_points"]
        u1, uk = bench["mean_uncertainty_first"], bench["mean_uncertainty_last"]
        ok = gain >= 15.0 and uk < u1 and bench["runtime"] < 300
        detail = (f"baseline={bench['baseline_accuracy']:.4f} adapted={bench['final_accuracy']['full']:.4f} "
                  f"(+{gain:.1f} pts), U1={u1:.4f} UK={uk:.4f}, bench {bench['runtime']:.0f}s")
        assert report(capsys, 5, "synthetic adaptation gains >= 15 points and U drops", ok, detail)

    def test_6_ablation_no_pc(self, bench, capsys):
        fin = bench["final_accuracy"]
        ok = fin["no_pc"] < fin["full"]
        assert report(capsys, "6a", "removing pc degrades accuracy", ok,
                      f"full={fin['full']:.4f} no_pc={fin['no_pc']:.4f}")

    def test_6_ablation_no_cac(self, bench, capsys):
        fin = bench["final_accuracy"]
        ok = fin["no_cac"] < fin["full"]
        assert report(capsys, "6b", "removing cac (beta=0) degrades accuracy", ok,
                      f"full={fin['full']:.4f} no_cac={fin['no_cac']:.4f}")

    def test_7_mmd_direction(self, bench, capsys):
        m1, mk = bench["mmd_target_first"], bench["mmd_target_last"]
        ok = mk < 0.95 * m1
        assert report(capsys, 7, "MMD to oracle logits: last < 0.95 * first", ok,
                      f"first={m1:.5f} last={mk:.5f}")

    @pytest.mark.skip(reason="optional full-scale check: needs real CLIP weights and Office-Home images")
    def test_8_full_scale(self):
        pass
