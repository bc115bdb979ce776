"""Acceptance suite: one test per criterion, each records a pass/fail line.

The lines are printed in the terminal summary by ``conftest.py``.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from oetrade import autodiff as ad
from oetrade import cli, config, data, harness, losses, metrics, model, sampling
from oetrade.augment import TransformSpec, multi_batch_transform
from oetrade.losses import LossWeights
from oetrade.metrics import ScoreSet

from oracles import ce_oracle, kd_oracle, oe_oracle, supcon_oracle, unit_rows
from test_metrics import aupr_sweep, auroc_pairs, fpr95_sweep

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# 1 ---------------------------------------------------------------------------


def _fd_instances(rng):
    """Yield (name, loss_fn, params) for every loss on small random inputs."""
    b, k, n_out, d = int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 4)), 3
    z = ad.Tensor(rng.normal(size=(b, k)) * 2, requires_grad=True)
    zo = ad.Tensor(rng.normal(size=(n_out, k)) * 2, requires_grad=True)
    zt = rng.normal(size=(b, k)) * 2
    y = rng.integers(0, k, size=b)
    y[0] = y[1]  # at least one anchor has a positive
    e = ad.Tensor(rng.normal(size=(b, d)), requires_grad=True)
    eo = ad.Tensor(rng.normal(size=(n_out, d)), requires_grad=True)
    t = float(rng.uniform(1, 5))
    tau = float(rng.uniform(0.2, 1.0))

    def sc():
        return losses.oscl_loss(ad.l2_normalize(e), y, ad.l2_normalize(eo), tau=tau)

    w = LossWeights(reg=float(rng.uniform(0, 5)), kd=float(rng.uniform(0, 2)), sc=float(rng.uniform(0, 2)), t_kd=t, tau_sc=tau)

    def total():
        out, _ = losses.total_loss(
            losses.classification_loss(z, y), losses.oe_uniform_loss(zo), losses.kd_loss(z, zt, t), sc(), w
        )
        return out

    yield "cls", lambda: losses.classification_loss(z, y), [z]
    yield "oe", lambda: losses.oe_uniform_loss(zo), [zo]
    yield "kd", lambda: losses.kd_loss(z, zt, t), [z]
    yield "oscl", sc, [e, eo]
    yield "total", total, [z, zo, e, eo]


def test_criterion_1_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst: dict[str, float] = {}
    for _ in range(100):
        for name, fn, params in _fd_instances(rng):
            worst[name] = max(worst.get(name, 0.0), ad.finite_difference_check(fn, params))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-3 and elapsed < 30
    record(1, ok, f"max rel err {max(worst.values()):.2e} over 100 instances x {len(worst)} losses, {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------


def test_criterion_2_reductions():
    rng = np.random.default_rng(7)
    p = model.init(model.Dims(6, 8, 5, 4), (10,), seed=3)
    teacher = model.init(model.Dims(6, 8, 5, 4), (10,), seed=4)
    worst = 0.0
    for _ in range(20):
        x, xo = rng.normal(size=(12, 6)), rng.normal(size=(7, 6))
        y = rng.integers(0, 4, size=12)
        out, out_o = model.forward(p, x), model.forward(p, xo)
        t_logits = model.predict_logits(teacher, x)
        cls = losses.classification_loss(out.logits, y)
        reg = losses.oe_uniform_loss(out_o.logits)
        kd = losses.kd_loss(out.logits, t_logits, 4.0)
        sc = losses.oscl_loss(out.embedding, y, out_o.embedding, tau=0.1)
        ce_v, oe_v, kd_v = ce_oracle(out.logits.data, y), oe_oracle(out_o.logits.data), kd_oracle(out.logits.data, t_logits, 4.0)
        lam_reg, lam_kd = 5.0, 1.5
        cases = [
            (LossWeights(reg=lam_reg, kd=lam_kd, sc=0.0), ce_v + lam_reg * oe_v + lam_kd * kd_v),
            (LossWeights(reg=lam_reg, kd=0.0, sc=1.0), ce_v + lam_reg * oe_v + sc.item()),
            (LossWeights(reg=lam_reg, kd=0.0, sc=0.0), ce_v + lam_reg * oe_v),
        ]
        for w, expected in cases:
            total, _ = losses.total_loss(cls, reg, kd, sc, w)
            worst = max(worst, abs(total.item() - expected))
        # same logits for teacher and student at unit temperature give the teacher entropy
        z = rng.normal(size=(9, 5)) * 3
        prob = np.exp(z - z.max(1, keepdims=True))
        prob /= prob.sum(1, keepdims=True)
        entropy = -float(np.mean((prob * np.log(prob)).sum(1)))
        worst = max(worst, abs(losses.kd_loss(ad.Tensor(z), z, 1.0).item() - entropy))
    record(2, worst <= 1e-10, f"max abs deviation {worst:.1e}")


# 3 ---------------------------------------------------------------------------


def test_criterion_3_oscl():
    rng = np.random.default_rng(33)
    worst, increases, singleton_ok = 0.0, True, True
    for _ in range(50):
        b, d = int(rng.integers(2, 12)), int(rng.integers(2, 6))
        e = unit_rows(rng, b, d)
        y = rng.integers(0, 4, size=b)
        tau = float(rng.uniform(0.1, 1.0))
        base = losses.oscl_anchor_losses(ad.Tensor(e), y, None, tau).data
        ref = supcon_oracle(e, y, tau=tau)
        worst = max(worst, float(np.max(np.abs(base - ref))))
        worst = max(worst, abs(losses.oscl_loss(ad.Tensor(e), y, ad.Tensor(np.zeros((0, d))), tau).item() - ref.sum()))
        more = losses.oscl_anchor_losses(ad.Tensor(e), y, ad.Tensor(unit_rows(rng, int(rng.integers(1, 4)), d)), tau).data
        has_pos = np.array([np.sum(y == c) > 1 for c in y])
        increases &= bool(np.all(more[has_pos] > base[has_pos]))
        singleton_ok &= bool(np.all(base[~has_pos] == 0.0) and np.all(more[~has_pos] == 0.0))
    ok = worst <= 1e-12 and increases and singleton_ok
    record(3, ok, f"max |oscl - scl| {worst:.1e}; strict increase {increases}; singleton zero {singleton_ok}")


# 4 ---------------------------------------------------------------------------


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(44)
    worst = 0.0
    for i in range(200):
        n_id, n_ood = int(rng.integers(1, 101)), int(rng.integers(1, 101))
        if i % 2:
            levels = int(rng.integers(1, 6))
            id_s, ood_s = rng.integers(0, levels, n_id).astype(float), rng.integers(0, levels, n_ood).astype(float)
        else:
            id_s, ood_s = rng.normal(0.5, 1, n_id), rng.normal(0, 1, n_ood)
        ss = ScoreSet(id_s, ood_s)
        worst = max(
            worst,
            abs(metrics.auroc(ss) - auroc_pairs(id_s, ood_s)),
            abs(metrics.fpr_at_tpr(ss) - fpr95_sweep(list(id_s), list(ood_s))),
            abs(metrics.aupr(ss) - aupr_sweep(list(id_s), list(ood_s))),
        )
    record(4, worst <= 1e-12, f"max oracle gap {worst:.1e} on 200 sets (100 tie-heavy)")


# 5 ---------------------------------------------------------------------------


def test_criterion_5_selection():
    rng = np.random.default_rng(55)
    ok, checked = True, 0
    while checked < 300:
        size = int(rng.integers(1, 400))
        plan = sampling.SamplePlan(float(rng.choice(sampling.Q_GRID)), int(rng.choice(sampling.STEP_GRID)), int(rng.integers(1, 120)))
        if not plan.fits(size):
            continue
        h = np.round(rng.uniform(0.1, 1.0, size), 2)
        pool = sampling.ScoredPool(rng.normal(size=(size, 2)), h, np.argsort(h, kind="stable"))
        samples, idx = sampling.select(pool, plan)
        again = sampling.select(sampling.ScoredPool(pool.samples.copy(), h.copy(), np.argsort(h, kind="stable")), plan)
        hs = np.sort(h)
        lo, hi = plan.start(size), plan.start(size) + (plan.m - 1) * plan.step
        sel = h[idx]
        ok &= len(samples) == plan.m and len(set(idx.tolist())) == plan.m
        ok &= bool(np.all(np.diff(sel) >= 0) and sel.min() >= hs[lo] and sel.max() <= hs[hi])
        ok &= np.array_equal(again[0], samples) and np.array_equal(again[1], idx)
        checked += 1
    record(5, ok, f"{checked} random plans")


# 6 ---------------------------------------------------------------------------


def _means(rec, method):
    rows = [rec.reports[method][s].row() for s in sorted(rec.reports[method])]
    acc = np.array([r["acc"] for r in rows])
    auc = np.array([r["auroc"] for r in rows])
    return acc, auc


def _pooled(a, b):
    return float(np.sqrt((np.var(a, ddof=1) + np.var(b, ddof=1)) / 2))


def test_criterion_6_trends():
    lines, ok = [], True
    bal = config.balanced_task()
    start = time.perf_counter()
    rec = harness.run_experiment(bal, methods=["ce", "oe", "oe+all"])
    per_seed_bal = (time.perf_counter() - start) / len(bal.seeds)
    ok &= not rec.failed
    acc_ce, auc_ce = _means(rec, "ce")
    acc_oe, auc_oe = _means(rec, "oe")
    acc_all, auc_all = _means(rec, "oe+all")
    gap1, sd1 = auc_oe.mean() - auc_ce.mean(), _pooled(auc_oe, auc_ce)
    gap2, sd2 = auc_all.mean() - auc_oe.mean(), _pooled(auc_all, auc_oe)
    acc_gap = acc_all.mean() - acc_oe.mean()
    ok &= gap1 > sd1 and gap2 > sd2 and acc_gap >= -0.005
    lines.append(f"AUROC ce {auc_ce.mean():.4f} oe {auc_oe.mean():.4f} oe+all {auc_all.mean():.4f}")
    lines.append(f"gaps {gap1:.4f}>{sd1:.4f}, {gap2:.4f}>{sd2:.4f}; balanced ACC oe+all-oe {100 * acc_gap:+.2f}pp")

    lt = config.long_tailed_task()
    start = time.perf_counter()
    rec_lt = harness.run_experiment(lt, methods=["oe", "oe+all"])
    per_seed_lt = (time.perf_counter() - start) / len(lt.seeds)
    ok &= not rec_lt.failed
    lt_oe, _ = _means(rec_lt, "oe")
    lt_all, _ = _means(rec_lt, "oe+all")
    ok &= lt_all.mean() > lt_oe.mean()
    ok &= max(per_seed_bal, per_seed_lt) < 600
    lines.append(f"long-tailed ACC oe {lt_oe.mean():.4f} oe+all {lt_all.mean():.4f}")
    lines.append(f"sec/seed balanced {per_seed_bal:.0f} long-tailed {per_seed_lt:.0f}")
    record(6, ok, "; ".join(lines))


# 7 ---------------------------------------------------------------------------


def test_criterion_7_hardness_quantile():
    cfg = config.ExperimentConfig()
    task = harness.build_data(cfg)
    teacher = harness.pretrain(cfg, 1, task.id_train)
    scored = sampling.score_pool(teacher, task.pool.inputs)
    means = []
    for q in (0.1, 0.5, 0.9):
        _, idx = sampling.select(scored, sampling.SamplePlan(q, 1, 200))
        means.append(float(scored.hardness[idx].mean()))
    ok = means[0] < means[1] < means[2]
    record(7, ok, "mean hardness " + ", ".join(f"q={q}: {m:.4f}" for q, m in zip((0.1, 0.5, 0.9), means)))


# 8 ---------------------------------------------------------------------------


def test_criterion_8_unit_norm_and_transform():
    rng = np.random.default_rng(88)
    p = model.init(model.Dims(49, 32, 32, 10), (64,), seed=8)
    x = np.vstack([rng.normal(size=(500, 49)), rng.normal(size=(500, 49)) * 100])
    emb = model.forward(p, x).embedding.data
    dev = float(np.max(np.abs(np.linalg.norm(emb, axis=1) - 1)))
    rows_ok = True
    xb, yb = rng.normal(size=(13, 49)), rng.integers(0, 10, 13)
    for n in (1, 2, 4, 6, 8):
        out, ym, _ = multi_batch_transform(xb, yb, TransformSpec(n=n, seed=n))
        rows_ok &= out.shape == (n * 13, 49) and np.array_equal(ym, np.tile(yb, n))
    record(8, dev <= 1e-6 and rows_ok, f"max |norm-1| {dev:.1e} over 1000 inputs; n-batch rows/labels ok {rows_ok}")


# 9 ---------------------------------------------------------------------------


def test_criterion_9_persistence(tmp_path, monkeypatch):
    p = model.init(model.Dims(5, 7, 3, 4), (6,), seed=9)
    model.save(p, tmp_path / "ck.json")
    back = model.load(tmp_path / "ck.json")
    ck_ok = all(np.array_equal(a.data, b.data) for a, b in zip(p.parameters(), back.parameters()))
    ds = data.generate(data.DatasetSpec("id_train", n_max=20, seed=5))
    data.save_binary(ds, tmp_path / "d.oetd")
    data.save_csv(ds, tmp_path / "d.csv")
    ds_ok = data.load_binary(tmp_path / "d.oetd") == ds and data.load_csv(tmp_path / "d.csv") == ds

    small = replace(
        config.ExperimentConfig(name="persist", seeds=(1, 2), ladder=("ce", "oe+all")),
        optimizer=replace(config.OptimizerConfig(), epochs_pretrain=2, epochs_finetune=1),
    )
    config.dump(small, tmp_path / "cfg.yaml")
    csvs = []
    for i in range(2):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / f"out{i}"))
        assert cli.main(["run", str(tmp_path / "cfg.yaml"), "--seeds", "1..2"]) == 0
        csvs.append((tmp_path / f"out{i}" / "persist" / "aggregate.csv").read_bytes())
    run_ok = csvs[0] == csvs[1] and len(csvs[0]) > 0
    record(9, ck_ok and ds_ok and run_ok, f"checkpoint {ck_ok}; dataset {ds_ok}; rerun CSV identical {run_ok}")
